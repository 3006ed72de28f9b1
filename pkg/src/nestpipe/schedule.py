"""Operator/schedule data model and the baseline LLM pipeline schedules."""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Sequence


class ScheduleError(ValueError):
    """A schedule cannot be built or parsed for the requested configuration."""


class RemainderError(ScheduleError):
    """Microbatch count is not a multiple of the required group size."""


class OperatorKind(str, enum.Enum):
    EncFwd = "EncFwd"
    EncBwd = "EncBwd"
    LlmFwd = "LlmFwd"
    LlmBwd = "LlmBwd"
    GenFwd = "GenFwd"
    GenBwd = "GenBwd"
    Send = "Send"
    Recv = "Recv"
    Gather = "Gather"
    Scatter = "Scatter"
    CpConvert = "CpConvert"
    FsdpSync = "FsdpSync"
    FsdpPull = "FsdpPull"

    @property
    def is_compute(self) -> bool:
        return self in COMPUTE_KINDS

    @property
    def is_llm(self) -> bool:
        return self in (OperatorKind.LlmFwd, OperatorKind.LlmBwd)

    @property
    def is_forward(self) -> bool:
        return self in (OperatorKind.EncFwd, OperatorKind.LlmFwd, OperatorKind.GenFwd)

    @property
    def module(self) -> str | None:
        return _MODULE.get(self)


K = OperatorKind
COMPUTE_KINDS = frozenset({K.EncFwd, K.EncBwd, K.LlmFwd, K.LlmBwd, K.GenFwd, K.GenBwd})
UNIT_KINDS = frozenset({K.EncFwd, K.EncBwd, K.GenFwd, K.GenBwd})
COMM_KINDS = frozenset({K.Send, K.Recv, K.Gather, K.Scatter, K.CpConvert})
FSDP_KINDS = frozenset({K.FsdpSync, K.FsdpPull})
_MODULE = {
    K.EncFwd: "encoder", K.EncBwd: "encoder",
    K.LlmFwd: "llm", K.LlmBwd: "llm",
    K.GenFwd: "generator", K.GenBwd: "generator",
}


@dataclass(frozen=True)
class Operator:
    """One schedulable action on one rank.

    ``chunk`` is only set for LLM compute ops and for the point-to-point
    transfers that serve them.  ``peer``, ``nbytes`` and ``payload`` are only
    set on communication and FSDP ops.
    """

    id: int
    kind: OperatorKind
    rank: int
    microbatch: int | None = None
    chunk: int | None = None
    unit: int | None = None
    peer: int | None = None
    nbytes: float | None = None
    payload: str | None = None

    @property
    def is_compute(self) -> bool:
        return self.kind in COMPUTE_KINDS

    def label(self) -> str:
        if self.kind.is_llm:
            return f"{self.kind.value}(mb={self.microbatch},c={self.chunk})@{self.rank}"
        if self.kind in UNIT_KINDS:
            return f"{self.kind.value}(u={self.unit})@{self.rank}"
        return (
            f"{self.kind.value}[{self.payload}](mb={self.microbatch},c={self.chunk},"
            f"u={self.unit},peer={self.peer})@{self.rank}"
        )


@dataclass(frozen=True)
class PipelineConfig:
    """Pipeline shape: ``P`` ranks, ``M`` microbatches, ``V`` virtual chunks per rank."""

    P: int
    M: int
    V: int = 1
    W: int = 3
    llm_cp: int = 1
    enc_cp: int = 1

    def __post_init__(self) -> None:
        for name in ("P", "M", "V", "W", "llm_cp", "enc_cp"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ScheduleError(f"{name} must be a positive integer, got {value!r}")
        if self.llm_cp < self.enc_cp or self.llm_cp % self.enc_cp:
            raise ScheduleError(
                f"llm_cp ({self.llm_cp}) must be a multiple of enc_cp ({self.enc_cp})"
            )

    @property
    def num_stages(self) -> int:
        return self.P * self.V


@dataclass
class Schedule:
    """Per-rank ordered operator lists for one training iteration.

    Besides the pipeline shape, a schedule records how encoder and generator
    work is laid out so that every consumer can recover which microbatches a
    unit operator covers:

    * encoder unit ``u`` holds microbatches ``[u*enc_unit_size, (u+1)*enc_unit_size)``;
      the j-th of them runs on ``encoder_ranks[j % len(encoder_ranks)]``.
    * generator unit ``g`` holds ``gen_unit_size`` consecutive microbatches; every
      generator rank processes an equal row shard of each of them.
    """

    config: PipelineConfig
    per_rank: list[list[Operator]]
    strategy: str | None = None
    has_encoder: bool = False
    has_generator: bool = False
    enc_unit_size: int = 1
    gen_unit_size: int = 1
    encoder_ranks: tuple[int, ...] = ()
    generator_ranks: tuple[int, ...] = ()
    _enc_cover: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def P(self) -> int:
        return self.config.P

    @property
    def M(self) -> int:
        return self.config.M

    @property
    def V(self) -> int:
        return self.config.V

    @property
    def num_stages(self) -> int:
        return self.config.num_stages

    # -- stage geometry -------------------------------------------------
    def stage_of(self, op: Operator) -> int:
        return op.chunk * self.P + op.rank

    def rank_of_stage(self, stage: int) -> int:
        return stage % self.P

    def chunk_of_stage(self, stage: int) -> int:
        return stage // self.P

    # -- module layout --------------------------------------------------
    @property
    def num_enc_units(self) -> int:
        return self.M // self.enc_unit_size if self.has_encoder else 0

    @property
    def num_gen_units(self) -> int:
        return self.M // self.gen_unit_size if self.has_generator else 0

    def enc_unit_of(self, microbatch: int) -> int:
        return microbatch // self.enc_unit_size

    def enc_microbatches(self, unit: int, rank: int) -> tuple[int, ...]:
        """Microbatches of encoder ``unit`` processed on ``rank``."""
        key = (unit, rank)
        if key not in self._enc_cover:
            n = len(self.encoder_ranks)
            if rank not in self.encoder_ranks:
                self._enc_cover[key] = ()
            else:
                slot = self.encoder_ranks.index(rank)
                base = unit * self.enc_unit_size
                self._enc_cover[key] = tuple(
                    base + j for j in range(self.enc_unit_size) if j % n == slot
                )
        return self._enc_cover[key]

    def encoder_rank_of(self, microbatch: int) -> int:
        j = microbatch % self.enc_unit_size
        return self.encoder_ranks[j % len(self.encoder_ranks)]

    def gen_unit_of(self, microbatch: int) -> int:
        return microbatch // self.gen_unit_size

    def gen_microbatches(self, unit: int) -> tuple[int, ...]:
        base = unit * self.gen_unit_size
        return tuple(range(base, base + self.gen_unit_size))

    def op_microbatches(self, op: Operator) -> tuple[int, ...]:
        if op.kind in (K.EncFwd, K.EncBwd):
            return self.enc_microbatches(op.unit, op.rank)
        if op.kind in (K.GenFwd, K.GenBwd):
            return self.gen_microbatches(op.unit)
        return () if op.microbatch is None else (op.microbatch,)

    # -- iteration helpers ----------------------------------------------
    def ops(self) -> Iterator[Operator]:
        for rank_ops in self.per_rank:
            yield from rank_ops

    def compute_only(self) -> "Schedule":
        return self.replace_ops([[op for op in ops if op.is_compute] for ops in self.per_rank])

    def llm_only(self) -> "Schedule":
        return self.replace_ops([[op for op in ops if op.kind.is_llm] for ops in self.per_rank])

    @property
    def has_comm(self) -> bool:
        return any(op.kind in COMM_KINDS for op in self.ops())

    def replace_ops(self, per_rank: Sequence[Sequence[Operator]], **changes) -> "Schedule":
        """Copy of this schedule with new operator lists (ids reassigned)."""
        new = dataclasses.replace(self, per_rank=[list(ops) for ops in per_rank], **changes)
        return new.renumbered()

    def renumbered(self) -> "Schedule":
        """Assign ids in (rank, position) order."""
        next_id = 0
        per_rank = []
        for ops in self.per_rank:
            row = []
            for op in ops:
                row.append(op if op.id == next_id else dataclasses.replace(op, id=next_id))
                next_id += 1
            per_rank.append(row)
        self.per_rank = per_rank
        return self

    def count(self, kind: OperatorKind, rank: int | None = None) -> int:
        ops = self.ops() if rank is None else iter(self.per_rank[rank])
        return sum(1 for op in ops if op.kind is kind)


def _op(kind: OperatorKind, rank: int, **kw) -> Operator:
    return Operator(id=-1, kind=kind, rank=rank, **kw)


def llm_op(kind: OperatorKind, rank: int, microbatch: int, chunk: int) -> Operator:
    return _op(kind, rank, microbatch=microbatch, chunk=chunk)


def generate_1f1b(config: PipelineConfig) -> Schedule:
    """Non-interleaved 1F1B: warmup forwards, steady one-forward-one-backward, drain."""
    if config.V != 1:
        raise ScheduleError(f"1F1B requires V == 1, got V={config.V}")
    P, M = config.P, config.M
    per_rank = []
    for r in range(P):
        warmup = min(P - r - 1, M)
        ops = [llm_op(K.LlmFwd, r, m, 0) for m in range(warmup)]
        for i in range(M - warmup):
            ops.append(llm_op(K.LlmFwd, r, warmup + i, 0))
            ops.append(llm_op(K.LlmBwd, r, i, 0))
        ops.extend(llm_op(K.LlmBwd, r, m, 0) for m in range(M - warmup, M))
        per_rank.append(ops)
    return Schedule(config, per_rank, strategy="1f1b").renumbered()


def interleaved_warmup(P: int, V: int, M: int, rank: int) -> int:
    return min((P - rank - 1) * 2 + (V - 1) * P, M * V)


def _interleaved_index(k: int, P: int, V: int, forward: bool) -> tuple[int, int]:
    group = (k // P) % V
    chunk = group if forward else V - 1 - group
    microbatch = (k // (P * V)) * P + k % P
    return microbatch, chunk


def generate_interleaved_1f1b(config: PipelineConfig) -> Schedule:
    """Megatron-style interleaved 1F1B over ``V`` virtual chunks per rank.

    Forwards sweep P microbatches through chunk 0, then chunk 1, ...; backwards
    sweep the chunks in reverse.  Rank ``r`` runs ``(P - r - 1) * 2 + (V - 1) * P``
    warmup forwards before entering the steady phase.
    """
    P, M, V = config.P, config.M, config.V
    if V < 2:
        raise ScheduleError(f"interleaved 1F1B requires V >= 2, got V={V}")
    if M % P:
        raise RemainderError(
            f"interleaved 1F1B requires M divisible by P: M={M}, P={P}, remainder {M % P}"
        )
    total = M * V
    per_rank = []
    for r in range(P):
        warmup = interleaved_warmup(P, V, M, r)
        ops = []

        def fwd(k: int) -> None:
            m, c = _interleaved_index(k, P, V, True)
            ops.append(llm_op(K.LlmFwd, r, m, c))

        def bwd(k: int) -> None:
            m, c = _interleaved_index(k, P, V, False)
            ops.append(llm_op(K.LlmBwd, r, m, c))

        for k in range(warmup):
            fwd(k)
        for i in range(total - warmup):
            fwd(warmup + i)
            bwd(i)
        for k in range(total - warmup, total):
            bwd(k)
        per_rank.append(ops)
    return Schedule(config, per_rank, strategy="interleaved_1f1b").renumbered()


def generate_llm_schedule(config: PipelineConfig) -> Schedule:
    """1F1B when ``V == 1``, interleaved 1F1B otherwise."""
    if config.V == 1:
        return generate_1f1b(config)
    return generate_interleaved_1f1b(config)


# -- serialization ---------------------------------------------------------

_HEADER = "# nestpipe schedule v1"
_ABSENT = "-"


def _fmt(value) -> str:
    if value is None:
        return _ABSENT
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def _ranks(values: Iterable[int]) -> str:
    values = list(values)
    return ",".join(map(str, values)) if values else _ABSENT


def dumps(schedule: Schedule) -> str:
    """Serialize to the line-oriented text format.

    Compute lines carry six tab-separated fields
    ``rank index kind microbatch chunk unit``; communication and FSDP lines
    append ``peer bytes payload``.
    """
    c = schedule.config
    meta = (
        f"# P={c.P} M={c.M} V={c.V} W={c.W} llm_cp={c.llm_cp} enc_cp={c.enc_cp}"
        f" strategy={schedule.strategy or _ABSENT}"
        f" encoder={int(schedule.has_encoder)} generator={int(schedule.has_generator)}"
        f" enc_unit_size={schedule.enc_unit_size} gen_unit_size={schedule.gen_unit_size}"
        f" encoder_ranks={_ranks(schedule.encoder_ranks)}"
        f" generator_ranks={_ranks(schedule.generator_ranks)}"
    )
    lines = [_HEADER, meta]
    for rank, ops in enumerate(schedule.per_rank):
        for index, op in enumerate(ops):
            fields = [str(rank), str(index), op.kind.value, _fmt(op.microbatch),
                      _fmt(op.chunk), _fmt(op.unit)]
            if not op.is_compute:
                fields += [_fmt(op.peer), _fmt(op.nbytes), _fmt(op.payload)]
            lines.append("\t".join(fields))
    return "\n".join(lines) + "\n"


def _parse_int(text: str, lineno: int) -> int | None:
    if text == _ABSENT:
        return None
    try:
        return int(text)
    except ValueError:
        raise ScheduleError(f"line {lineno}: expected integer or '-', got {text!r}") from None


def _parse_number(text: str, lineno: int):
    if text == _ABSENT:
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return Fraction(text) if "/" in text else float(text)
    except ValueError:
        raise ScheduleError(f"line {lineno}: bad byte count {text!r}") from None


def loads(text: str) -> Schedule:
    lines = text.splitlines()
    if not lines or lines[0].strip() != _HEADER:
        raise ScheduleError("line 1: missing schedule header")
    if len(lines) < 2 or not lines[1].startswith("# "):
        raise ScheduleError("line 2: missing metadata line")
    meta = {}
    for item in lines[1][2:].split():
        key, _, value = item.partition("=")
        meta[key] = value
    try:
        config = PipelineConfig(
            P=int(meta["P"]), M=int(meta["M"]), V=int(meta["V"]), W=int(meta["W"]),
            llm_cp=int(meta["llm_cp"]), enc_cp=int(meta["enc_cp"]),
        )

        def ranks(value: str) -> tuple[int, ...]:
            return () if value == _ABSENT else tuple(int(v) for v in value.split(","))

        schedule_meta = dict(
            strategy=None if meta["strategy"] == _ABSENT else meta["strategy"],
            has_encoder=meta["encoder"] == "1",
            has_generator=meta["generator"] == "1",
            enc_unit_size=int(meta["enc_unit_size"]),
            gen_unit_size=int(meta["gen_unit_size"]),
            encoder_ranks=ranks(meta["encoder_ranks"]),
            generator_ranks=ranks(meta["generator_ranks"]),
        )
    except (KeyError, ValueError) as exc:
        raise ScheduleError(f"line 2: bad metadata ({exc})") from None

    per_rank: list[list[Operator]] = [[] for _ in range(config.P)]
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) not in (6, 9):
            raise ScheduleError(f"line {lineno}: expected 6 or 9 fields, got {len(fields)}")
        rank = _parse_int(fields[0], lineno)
        index = _parse_int(fields[1], lineno)
        if rank is None or not 0 <= rank < config.P:
            raise ScheduleError(f"line {lineno}: rank out of range")
        if index != len(per_rank[rank]):
            raise ScheduleError(f"line {lineno}: index {index} out of order on rank {rank}")
        try:
            kind = OperatorKind(fields[2])
        except ValueError:
            raise ScheduleError(f"line {lineno}: unknown operator kind {fields[2]!r}") from None
        extra = {}
        if len(fields) == 9:
            extra = dict(
                peer=_parse_int(fields[6], lineno),
                nbytes=_parse_number(fields[7], lineno),
                payload=None if fields[8] == _ABSENT else fields[8],
            )
        per_rank[rank].append(Operator(
            id=-1, kind=kind, rank=rank,
            microbatch=_parse_int(fields[3], lineno),
            chunk=_parse_int(fields[4], lineno),
            unit=_parse_int(fields[5], lineno),
            **extra,
        ))
    return Schedule(config, per_rank, **schedule_meta).renumbered()
