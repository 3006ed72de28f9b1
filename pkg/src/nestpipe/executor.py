"""Numeric interpretation of schedules on a tiny affine model.

The model is an encoder map, ``P*V`` LLM chunk maps and a linear head whose
per-microbatch loss is the mean of its outputs.  Every rank gets its own
buffer namespace; communication ops move values between namespaces, so a
schedule that consumes a value before it is delivered fails loudly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .comm import comm_role, ensure_comm, match_key
from .schedule import COMM_KINDS, FSDP_KINDS, K, Operator, Schedule


class BufferMissError(RuntimeError):
    """An op consumed a value that was never produced or delivered."""


class BufferLeakError(RuntimeError):
    """Values remain buffered after the last op."""


class ExecutionStall(RuntimeError):
    pass


@dataclass
class ToyModel:
    params: dict[str, np.ndarray]
    num_stages: int

    @classmethod
    def init(cls, seed: int, num_stages: int, d_in: int = 3, d: int = 4, scale: float = 0.5) -> "ToyModel":
        rng = np.random.default_rng(seed)
        params = {
            "enc.W": rng.normal(0, scale, (d, d_in)),
            "enc.b": rng.normal(0, scale, d),
            "gen.g": rng.normal(0, scale, d),
            "gen.c": np.array(rng.normal(0, scale)),
        }
        for s in range(num_stages):
            params[f"llm.{s}.W"] = rng.normal(0, scale, (d, d))
            params[f"llm.{s}.b"] = rng.normal(0, scale, d)
        return cls(params, num_stages)

    @classmethod
    def identity(cls, num_stages: int, d: int) -> "ToyModel":
        params = {"enc.W": np.eye(d), "enc.b": np.zeros(d), "gen.g": np.ones(d), "gen.c": np.array(0.0)}
        for s in range(num_stages):
            params[f"llm.{s}.W"] = np.eye(d)
            params[f"llm.{s}.b"] = np.zeros(d)
        return cls(params, num_stages)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # kernels: fixed summation order inside each one
    def enc_fwd(self, x):
        return x @ self.params["enc.W"].T + self.params["enc.b"]

    def enc_bwd(self, x, gy, grads):
        grads["enc.W"] += gy.T @ x
        grads["enc.b"] += gy.sum(axis=0)

    def chunk_fwd(self, s, h):
        return h @ self.params[f"llm.{s}.W"].T + self.params[f"llm.{s}.b"]

    def chunk_bwd(self, s, h_in, gy, grads):
        grads[f"llm.{s}.W"] += gy.T @ h_in
        grads[f"llm.{s}.b"] += gy.sum(axis=0)
        return gy @ self.params[f"llm.{s}.W"]

    def gen_fwd(self, h):
        # row-wise reduction so a row's value does not depend on how rows are sharded
        return (h * self.params["gen.g"]).sum(axis=1) + self.params["gen.c"]

    def gen_bwd(self, h, n_total, grads):
        gy = np.full(h.shape[0], 1.0 / n_total)
        grads["gen.g"] += h.T @ gy
        grads["gen.c"] += gy.sum()
        return np.outer(gy, self.params["gen.g"])


@dataclass
class Workload:
    model: ToyModel
    data: list[np.ndarray]


def make_workload(seed: int, num_stages: int, M: int, d_in: int = 3, d: int = 4, samples: int = 4) -> Workload:
    """Seeded model plus ``M`` microbatches of ``samples`` rows each."""
    model = ToyModel.init(seed, num_stages, d_in, d)
    rng = np.random.default_rng(seed + 1_000_003)
    return Workload(model, [rng.normal(size=(samples, d_in)) for _ in range(M)])


@dataclass
class ExecutionResult:
    grads: dict[str, np.ndarray]
    losses: np.ndarray
    peak_encoder_entries: list[int] = field(default_factory=list)


def sequential_reference(model: ToyModel, data: list[np.ndarray]) -> ExecutionResult:
    """Full forward then full backward per microbatch, accumulating in microbatch order."""
    grads = model.zeros_like()
    losses = []
    for x in data:
        emb = model.enc_fwd(x)
        hs = [emb]
        for s in range(model.num_stages):
            hs.append(model.chunk_fwd(s, hs[-1]))
        losses.append(model.gen_fwd(hs[-1]).mean())
        g = model.gen_bwd(hs[-1], x.shape[0], grads)
        for s in reversed(range(model.num_stages)):
            g = model.chunk_bwd(s, hs[s], g, grads)
        model.enc_bwd(x, g, grads)
    return ExecutionResult(grads, np.array(losses), [1 if data else 0])


def total_loss(model: ToyModel, data: list[np.ndarray]) -> float:
    total = 0.0
    for x in data:
        h = model.enc_fwd(x)
        for s in range(model.num_stages):
            h = model.chunk_fwd(s, h)
        total += model.gen_fwd(h).mean()
    return total


def finite_difference_grads(model: ToyModel, data: list[np.ndarray], step: float = 1e-6) -> dict[str, np.ndarray]:
    """Central differences of the summed microbatch losses."""
    out = {}
    for name, value in model.params.items():
        grad = np.zeros_like(value)
        flat, gflat = value.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = total_loss(model, data)
            flat[i] = keep - step
            down = total_loss(model, data)
            flat[i] = keep
            gflat[i] = (up - down) / (2 * step)
        out[name] = grad
    return out


@dataclass
class RuntimeBuffers:
    """One rank's state: stored activations, unit activations, inbox/outbox and gradients."""

    activations: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)  # (mb, chunk)
    encoder: dict[int, dict[int, np.ndarray]] = field(default_factory=dict)  # unit -> mb -> input
    generator: dict[int, dict[int, np.ndarray]] = field(default_factory=dict)
    values: dict[tuple, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    peak_encoder: int = 0

    def take(self, key: tuple, op: Operator) -> np.ndarray:
        try:
            return self.values.pop(key)
        except KeyError:
            raise BufferMissError(f"{op.label()} needs {key}, which is not in rank {op.rank}'s buffers") from None

    def leftovers(self) -> list:
        return [*self.activations, *(("enc", u) for u in self.encoder), *(("gen", g) for g in self.generator), *self.values]


def _shards(n: int, parts: int) -> list[np.ndarray]:
    return np.array_split(np.arange(n), parts)


class _Interpreter:
    def __init__(self, schedule: Schedule, model: ToyModel, data: list[np.ndarray]):
        if model.num_stages != schedule.num_stages:
            raise ValueError(f"model has {model.num_stages} stages, schedule has {schedule.num_stages}")
        if len(data) != schedule.M:
            raise ValueError(f"need {schedule.M} microbatches of data, got {len(data)}")
        self.s = schedule
        self.model = model
        self.data = data
        self.bufs = [RuntimeBuffers(grads=model.zeros_like()) for _ in range(schedule.P)]
        self.channels: dict[tuple, dict] = {}
        self.outputs = [np.full(x.shape[0], np.nan) for x in data]
        self.last = schedule.num_stages - 1
        self.gen_ranks = schedule.generator_ranks

    # -- compute --------------------------------------------------------
    def llm_fwd(self, op: Operator, buf: RuntimeBuffers) -> None:
        s, m, model = self.s.stage_of(op), op.microbatch, self.model
        if s == 0:
            h = model.enc_fwd(self.data[m]) if not self.s.has_encoder else buf.take(("emb", m), op)
        else:
            h = buf.take(("act", m, s), op)
        buf.activations[(m, op.chunk)] = h
        out = model.chunk_fwd(s, h)
        if s < self.last:
            self._deliver(op, ("act", m, s + 1), out, self.s.rank_of_stage(s + 1))
        elif self.s.has_generator:
            rows = _shards(out.shape[0], len(self.gen_ranks))
            for q, idx in zip(self.gen_ranks, rows):
                buf.values[("gen_in", m, q)] = out[idx]
        else:
            buf.values[("head", m)] = out
            self.outputs[m][:] = model.gen_fwd(out)

    def llm_bwd(self, op: Operator, buf: RuntimeBuffers) -> None:
        s, m, model = self.s.stage_of(op), op.microbatch, self.model
        if s == self.last:
            if self.s.has_generator:
                parts = [buf.take(("gen_grad", m, q), op) for q in self.gen_ranks]
                gy = np.concatenate(parts, axis=0)
            else:
                h = buf.take(("head", m), op)
                gy = model.gen_bwd(h, h.shape[0], buf.grads)
        else:
            gy = buf.take(("grad", m, s), op)
        try:
            h_in = buf.activations.pop((m, op.chunk))
        except KeyError:
            raise BufferMissError(f"{op.label()} has no stored activation") from None
        g = model.chunk_bwd(s, h_in, gy, buf.grads)
        if s > 0:
            self._deliver(op, ("grad", m, s - 1), g, self.s.rank_of_stage(s - 1))
        elif self.s.has_encoder:
            buf.values[("emb_grad", m)] = g
        else:
            model.enc_bwd(self.data[m], g, buf.grads)

    def _deliver(self, op: Operator, key: tuple, value: np.ndarray, dst: int) -> None:
        # same-rank hand-offs need no communication op
        buf = self.bufs[op.rank]
        if dst == op.rank:
            buf.values[key] = value
        else:
            buf.values[("out",) + key] = value

    def enc_fwd(self, op: Operator, buf: RuntimeBuffers) -> None:
        saved = buf.encoder.setdefault(op.unit, {})
        for m in self.s.enc_microbatches(op.unit, op.rank):
            saved[m] = self.data[m]
            buf.values[("emb", m)] = self.model.enc_fwd(self.data[m])
        buf.peak_encoder = max(buf.peak_encoder, len(buf.encoder))

    def enc_bwd(self, op: Operator, buf: RuntimeBuffers) -> None:
        try:
            saved = buf.encoder.pop(op.unit)
        except KeyError:
            raise BufferMissError(f"{op.label()} has no stored encoder activation") from None
        for m in self.s.enc_microbatches(op.unit, op.rank):
            self.model.enc_bwd(saved[m], buf.take(("emb_grad", m), op), buf.grads)

    def gen_fwd(self, op: Operator, buf: RuntimeBuffers) -> None:
        saved = buf.generator.setdefault(op.unit, {})
        slot = self.gen_ranks.index(op.rank)
        for m in self.s.gen_microbatches(op.unit):
            h = buf.take(("gen_in", m, op.rank), op)
            saved[m] = h
            idx = _shards(self.data[m].shape[0], len(self.gen_ranks))[slot]
            self.outputs[m][idx] = self.model.gen_fwd(h)

    def gen_bwd(self, op: Operator, buf: RuntimeBuffers) -> None:
        try:
            saved = buf.generator.pop(op.unit)
        except KeyError:
            raise BufferMissError(f"{op.label()} has no stored generator activation") from None
        for m in self.s.gen_microbatches(op.unit):
            g = self.model.gen_bwd(saved[m], self.data[m].shape[0], buf.grads)
            buf.values[("gen_grad", m, op.rank)] = g

    # -- communication ------------------------------------------------------
    def _piece_keys(self, op: Operator) -> list[tuple]:
        """Buffer keys a piece moves, as seen on the receiving rank."""
        s = self.s
        if op.kind in (K.Send, K.Recv):
            src = op.rank if op.kind is K.Send else op.peer
            stage = op.chunk * s.P + src
            m = op.microbatch
            return [("act", m, stage + 1)] if op.payload == "act" else [("grad", m, stage - 1)]
        if op.payload in ("emb", "emb_grad"):
            q = op.rank if op.rank != 0 else op.peer
            return [(op.payload, m) for m in s.enc_microbatches(op.unit, q)]
        q = op.rank if op.rank != s.P - 1 else op.peer
        return [(op.payload, m, q) for m in s.gen_microbatches(op.unit)]

    def comm(self, op: Operator, buf: RuntimeBuffers) -> bool:
        role = comm_role(op, self.s)
        if role in ("self", "local"):
            return True
        keys = self._piece_keys(op)
        if role == "send":
            p2p = op.kind is K.Send
            msg = {k: buf.take(("out",) + k if p2p else k, op) for k in keys}
            self.channels[match_key(op, self.s)] = msg
            return True
        msg = self.channels.pop(match_key(op, self.s), None)
        if msg is None:
            return False
        buf.values.update(msg)
        return True

    def step(self, op: Operator) -> bool:
        buf = self.bufs[op.rank]
        kind = op.kind
        if kind in COMM_KINDS:
            return self.comm(op, buf)
        if kind in FSDP_KINDS:
            return True
        handler = {
            K.LlmFwd: self.llm_fwd, K.LlmBwd: self.llm_bwd,
            K.EncFwd: self.enc_fwd, K.EncBwd: self.enc_bwd,
            K.GenFwd: self.gen_fwd, K.GenBwd: self.gen_bwd,
        }[kind]
        handler(op, buf)
        return True

    def run(self) -> ExecutionResult:
        per_rank = self.s.per_rank
        pos = [0] * self.s.P
        remaining = sum(len(ops) for ops in per_rank)
        while remaining:
            progressed = False
            for r, ops in enumerate(per_rank):
                while pos[r] < len(ops) and self.step(ops[pos[r]]):
                    pos[r] += 1
                    remaining -= 1
                    progressed = True
            if not progressed:
                front = [per_rank[r][pos[r]].label() for r in range(self.s.P) if pos[r] < len(per_rank[r])]
                raise ExecutionStall(f"execution blocked at {front}")
        leaks = {r: b.leftovers() for r, b in enumerate(self.bufs) if b.leftovers()}
        if leaks or self.channels:
            raise BufferLeakError(f"buffers not released: {leaks or list(self.channels)}")
        # finalize once: sum replicas in rank order
        grads = self.model.zeros_like()
        for b in self.bufs:
            for name in grads:
                grads[name] += b.grads[name]
        losses = np.array([y.mean() for y in self.outputs])
        return ExecutionResult(grads, losses, [b.peak_encoder for b in self.bufs])


def execute_numeric(schedule: Schedule, model: ToyModel, data: list[np.ndarray]) -> ExecutionResult:
    """Interpret ``schedule`` as an opcode stream and return accumulated gradients and losses.

    Communication ops are inserted first if the schedule has none.
    """
    return _Interpreter(ensure_comm(schedule), model, data).run()


def max_grad_diff(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> float:
    return max(float(np.max(np.abs(a[k] - b[k]))) for k in a)
