"""Discrete-event execution of a schedule under a cost model."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence, Union

import numpy as np

from .comm import PayloadSizes, comm_role, insert_comm_ops, match_key
from .extensions import FSDP_MODES, decorate_fsdp, fsdp_group, fsdp_key
from .schedule import COMM_KINDS, FSDP_KINDS, K, Operator, Schedule

Number = Union[int, float, Fraction]
LlmCost = Union[Number, Sequence[Number], Callable[[int, int], Number]]
ModuleCost = Union[Number, Sequence[Number], Callable[[int], Number], None]


class SimulationStall(RuntimeError):
    """No rank can make progress; ``front`` holds each blocked rank's next op."""

    def __init__(self, front: list[Operator]):
        self.front = front
        shown = ", ".join(op.label() for op in front)
        super().__init__(f"simulation stalled; blocked front: {shown}")


def _lookup(value, m: int, *extra):
    if callable(value):
        return value(m, *extra)
    if isinstance(value, (list, tuple, np.ndarray)):
        item = value[m]
        return item.item() if isinstance(item, np.generic) else item
    return value


def _twice(value):
    if value is None:
        return None
    if callable(value):
        return lambda *a: 2 * value(*a)
    if isinstance(value, (list, tuple, np.ndarray)):
        return [2 * _lookup(value, i) for i in range(len(value))]
    return 2 * value


@dataclass
class CostModel:
    """Durations in abstract cost units.

    LLM costs are per (microbatch, stage) op and may be a constant, a
    per-microbatch sequence or a callable ``f(microbatch, stage)``.  Encoder
    and generator costs are per microbatch (constant, sequence or
    ``f(microbatch)``); a unit op costs the sum over the microbatches it
    covers, split evenly across generator shards.  Unset backward costs are
    twice the forward cost.
    """

    t_llm_fwd: LlmCost = 1
    t_llm_bwd: LlmCost | None = None
    t_enc_fwd: ModuleCost = 0
    t_enc_bwd: ModuleCost = None
    t_gen_fwd: ModuleCost = 0
    t_gen_bwd: ModuleCost = None
    comm_latency: Number = 0
    bandwidth: Number | None = None
    sizes: PayloadSizes = field(default_factory=PayloadSizes)
    t_cp_convert: Number = 0
    fsdp_mode: str | None = None
    t_fsdp_gather: Number = 0
    t_fsdp_pull: Number | None = None

    def __post_init__(self) -> None:
        if self.t_llm_bwd is None:
            self.t_llm_bwd = _twice(self.t_llm_fwd)
        if self.t_enc_bwd is None:
            self.t_enc_bwd = _twice(self.t_enc_fwd)
        if self.t_gen_bwd is None:
            self.t_gen_bwd = _twice(self.t_gen_fwd)
        if self.t_fsdp_pull is None:
            self.t_fsdp_pull = self.t_fsdp_gather
        if self.fsdp_mode is not None and self.fsdp_mode not in FSDP_MODES:
            raise ValueError(f"fsdp_mode must be one of {FSDP_MODES} or None, got {self.fsdp_mode!r}")
        for name in ("comm_latency", "t_cp_convert", "t_fsdp_gather", "t_fsdp_pull"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")

    def transfer(self, nbytes) -> Number:
        if self.bandwidth is None or not nbytes:
            return self.comm_latency
        if isinstance(nbytes, float) or isinstance(self.bandwidth, float):
            return self.comm_latency + nbytes / self.bandwidth
        return self.comm_latency + Fraction(nbytes) / Fraction(self.bandwidth)

    def duration(self, op: Operator, schedule: Schedule) -> Number:
        kind = op.kind
        if kind is K.LlmFwd:
            d = _lookup(self.t_llm_fwd, op.microbatch, schedule.stage_of(op))
        elif kind is K.LlmBwd:
            d = _lookup(self.t_llm_bwd, op.microbatch, schedule.stage_of(op))
        elif kind in (K.EncFwd, K.EncBwd):
            table = self.t_enc_fwd if kind is K.EncFwd else self.t_enc_bwd
            d = sum(_lookup(table, m) for m in schedule.enc_microbatches(op.unit, op.rank))
        elif kind in (K.GenFwd, K.GenBwd):
            table = self.t_gen_fwd if kind is K.GenFwd else self.t_gen_bwd
            total = sum(_lookup(table, m) for m in schedule.gen_microbatches(op.unit))
            shards = len(schedule.generator_ranks)
            d = total / shards if isinstance(total, float) else Fraction(total) / shards
        elif kind is K.CpConvert:
            d = self.t_cp_convert
        elif kind is K.FsdpSync:
            d = self.t_fsdp_gather
        elif kind is K.FsdpPull:
            d = self.t_fsdp_pull
        else:
            d = self.transfer(op.nbytes)
        if d < 0:
            raise ValueError(f"negative duration for {op.label()}")
        return _tidy(d)


def _tidy(x):
    if isinstance(x, Fraction) and x.denominator == 1:
        return int(x)
    return x


def bimodal_durations(M: int, seed: int, low: Number = 1, high: Number = 3, p_high: float = 0.5) -> list[Number]:
    """Seeded per-microbatch costs taking ``low`` or ``high``."""
    rng = np.random.default_rng(seed)
    return [high if x else low for x in rng.random(M) < p_high]


def uniform_durations(M: int, seed: int, low: int = 1, high: int = 3) -> list[int]:
    """Seeded integer per-microbatch costs in ``[low, high]``."""
    rng = np.random.default_rng(seed)
    return [int(x) for x in rng.integers(low, high + 1, size=M)]


@dataclass(frozen=True)
class Interval:
    op: Operator
    start: Number
    end: Number


@dataclass
class Timeline:
    schedule: Schedule
    intervals: list[list[Interval]]
    iteration_time: Number
    memory_events: list[tuple] = field(default_factory=list)

    @property
    def P(self) -> int:
        return self.schedule.P

    def by_op(self) -> dict[int, Interval]:
        return {iv.op.id: iv for rank in self.intervals for iv in rank}

    def busy_time(self, rank: int) -> Number:
        return sum(iv.end - iv.start for iv in self.intervals[rank] if iv.op.is_compute)


def _resolve(schedule: Schedule, cost: CostModel) -> Schedule:
    has_fsdp = any(op.kind in FSDP_KINDS for op in schedule.ops())
    if cost.fsdp_mode and not has_fsdp and (schedule.has_encoder or schedule.has_generator):
        if schedule.has_comm:
            raise ValueError("apply FSDP decoration before inserting communication ops")
        schedule = decorate_fsdp(schedule, cost.fsdp_mode)
    if not schedule.has_comm:
        schedule = insert_comm_ops(schedule, cost.sizes)
    return schedule


def simulate(schedule: Schedule, cost: CostModel, rendezvous: bool = False, footprint=None) -> Timeline:
    """Run ``schedule`` rank by rank in program order and time every op.

    Each rank has a compute resource and a communication resource.  Compute
    ops run back to back on the compute resource.  Sending pieces occupy the
    communication resource; they do not block the rank unless
    ``rendezvous`` is set, in which case they wait for the matching receive
    to be posted and hold the rank until delivery.  Receiving pieces block
    until the payload arrives.  ``FsdpSync`` waits for its whole group.

    Communication ops are inserted first when the schedule has none, and
    FSDP ops are added when ``cost.fsdp_mode`` is set.  Passing an
    ``ActivationFootprint`` fills ``memory_events``.
    """
    schedule = _resolve(schedule, cost)
    P = schedule.P
    t: list[Number] = [0] * P
    comm_free: list[Number] = [0] * P
    pos = [0] * P
    arrival: dict[tuple, Number] = {}
    posted: dict[tuple, Number] = {}
    barrier_arrivals: dict[tuple, dict[int, Number]] = {}
    intervals: list[list[Interval]] = [[] for _ in range(P)]
    keys = {}
    for op in schedule.ops():
        if op.kind in COMM_KINDS and comm_role(op, schedule) in ("send", "recv"):
            keys[op.id] = match_key(op, schedule)

    def step(r: int) -> bool:
        op = schedule.per_rank[r][pos[r]]
        kind = op.kind
        if op.is_compute or kind is K.FsdpPull:
            start = t[r]
            end = start + cost.duration(op, schedule)
            t[r] = end
        elif kind is K.FsdpSync:
            key = fsdp_key(op)
            arrived = barrier_arrivals.setdefault(key, {})
            arrived.setdefault(r, t[r])
            group = fsdp_group(schedule, op)
            if len(arrived) < len(group):
                return False
            start = max(arrived.values())
            end = start + cost.duration(op, schedule)
            t[r] = end
        else:
            role = comm_role(op, schedule)
            if role == "self":
                start = end = t[r]
            elif role == "local":
                start = max(t[r], comm_free[r])
                end = start + cost.duration(op, schedule)
                comm_free[r] = end
            elif role == "send":
                key = keys[op.id]
                start = max(t[r], comm_free[r])
                if rendezvous:
                    if key not in posted:
                        return False
                    start = max(start, posted[key])
                end = start + cost.duration(op, schedule)
                comm_free[r] = end
                arrival[key] = end
                if rendezvous:
                    t[r] = end
            else:
                key = keys[op.id]
                posted.setdefault(key, t[r])
                if key not in arrival:
                    return False
                start = t[r]
                end = max(start, arrival[key])
                t[r] = end
        intervals[r].append(Interval(op, _tidy(start), _tidy(end)))
        pos[r] += 1
        return True

    remaining = sum(len(ops) for ops in schedule.per_rank)
    while remaining:
        progressed = False
        for r in range(P):
            while pos[r] < len(schedule.per_rank[r]) and step(r):
                remaining -= 1
                progressed = True
        if not progressed:
            front = [schedule.per_rank[r][pos[r]] for r in range(P) if pos[r] < len(schedule.per_rank[r])]
            raise SimulationStall(front)
    iteration = max((iv.end for rank in intervals for iv in rank), default=0)
    timeline = Timeline(schedule, intervals, _tidy(iteration))
    if footprint is not None:
        from .memory import memory_events

        timeline.memory_events = memory_events(timeline, footprint)
    return timeline


def bubble_rate(timeline: Timeline, rank: int, span: str = "makespan") -> Number:
    """Idle fraction of ``rank``'s compute resource.

    With ``span="makespan"`` the window is ``[0, iteration_time]``, which is
    the window the closed-form ``(P-1)/(M+P-1)`` refers to.  With
    ``span="rank"`` it runs from the rank's first compute start to its last
    compute end.
    """
    compute = [iv for iv in timeline.intervals[rank] if iv.op.is_compute]
    if not compute:
        raise ValueError(f"bubble rate is undefined for rank {rank}: it runs no compute ops")
    if span == "makespan":
        lo, hi = 0, timeline.iteration_time
    elif span == "rank":
        lo, hi = compute[0].start, max(iv.end for iv in compute)
    else:
        raise ValueError(f"unknown span {span!r}")
    width = hi - lo
    if width == 0:
        return 0
    busy = sum(iv.end - iv.start for iv in compute)
    rate = (width - busy) / width if isinstance(width, float) or isinstance(busy, float) else Fraction(width - busy, 1) / width
    return _tidy(rate)


def causality_violations(timeline: Timeline, sizes: PayloadSizes = PayloadSizes()) -> list[str]:
    """Cross-rank and cross-module data edges whose consumer starts before the producer ends."""
    from .comm import comm_edges

    compute = timeline.schedule.compute_only()
    # ids differ between the comm schedule and its compute-only copy, so map by position
    id_map = {}
    for full, bare in zip(timeline.schedule.per_rank, compute.per_rank):
        for a, b in zip([op for op in full if op.is_compute], bare):
            id_map[b.id] = a.id
    ivs = timeline.by_op()
    bad = []
    for e in comm_edges(compute, sizes):
        p, c = ivs[id_map[e.producer]], ivs[id_map[e.consumer]]
        if c.start < p.end:
            bad.append(f"{c.op.label()} starts at {c.start} before {p.op.label()} ends at {p.end}")
    return bad


# -- trace export -------------------------------------------------------------

def _num(x) -> Number:
    if isinstance(x, Fraction):
        return int(x) if x.denominator == 1 else float(x)
    return x


def trace_lines(timeline: Timeline) -> list[str]:
    """One ``rank op_id kind start end`` line per op, ordered by rank then start."""
    return [
        f"{iv.op.rank} {iv.op.id} {iv.op.kind.value} {_num(iv.start)} {_num(iv.end)}"
        for rank in timeline.intervals
        for iv in rank
    ]


def trace_records(timeline: Timeline) -> list[dict]:
    meta = {
        "type": "meta",
        "P": timeline.P,
        "strategy": timeline.schedule.strategy,
        "iteration_time": _num(timeline.iteration_time),
    }
    records = [meta]
    for rank in timeline.intervals:
        for iv in rank:
            op = iv.op
            records.append({
                "type": "op", "rank": op.rank, "op_id": op.id, "kind": op.kind.value,
                "start": _num(iv.start), "end": _num(iv.end),
                "microbatch": op.microbatch, "chunk": op.chunk, "unit": op.unit,
                "peer": op.peer, "payload": op.payload,
            })
    return records


def write_trace(timeline: Timeline, path) -> None:
    """Structured trace: one JSON object per line, a ``meta`` record first."""
    with open(path, "w") as fh:
        for rec in trace_records(timeline):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_text_trace(timeline: Timeline, path) -> None:
    with open(path, "w") as fh:
        for line in trace_lines(timeline):
            fh.write(line + "\n")
