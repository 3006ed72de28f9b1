"""Nesting encoder/generator units into an LLM pipeline schedule, plus the two baselines.

All three strategies keep the LLM operator order of the base schedule.  They
differ only in where encoder and generator work is placed:

* ``bigmac``: ``W`` encoder forward units warm up, then each encoder backward
  runs as soon as the entry stage has produced that unit's input gradients
  and is immediately followed by the next encoder forward.
* ``compute_efficient``: every encoder forward runs before the LLM and every
  encoder backward after it.
* ``memory_efficient``: encoder and generator are fused into the first and
  last pipeline stages, one microbatch at a time.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

from .dependencies import producer_keys, verify_dependencies
from .extensions import cp_unit_size
from .schedule import (
    K,
    Operator,
    PipelineConfig,
    RemainderError,
    Schedule,
    ScheduleError,
    generate_llm_schedule,
)


class InsufficientWarmupError(ScheduleError):
    """An encoder unit would be consumed before its forward is scheduled."""


class Strategy(str, enum.Enum):
    BigMac = "bigmac"
    ComputeEfficient = "compute_efficient"
    MemoryEfficient = "memory_efficient"

    @classmethod
    def parse(cls, name: "str | Strategy") -> "Strategy":
        try:
            return cls(name)
        except ValueError:
            names = ", ".join(s.value for s in cls)
            raise ScheduleError(f"unknown strategy {name!r}; expected one of: {names}") from None


@dataclass(frozen=True)
class Unit:
    id: int
    microbatches: tuple[int, ...]

    @property
    def unit_size(self) -> int:
        return len(self.microbatches)


@dataclass(frozen=True)
class ModulePlacement:
    """Data-parallel layout of encoder and generator; ``None`` means one replica per rank."""

    encoder_dp: int | None = None
    generator_dp: int | None = None
    has_generator: bool = False

    def resolve(self, P: int) -> "ModulePlacement":
        placement = dataclasses.replace(
            self,
            encoder_dp=P if self.encoder_dp is None else self.encoder_dp,
            generator_dp=P if self.generator_dp is None else self.generator_dp,
        )
        for name in ("encoder_dp", "generator_dp"):
            dp = getattr(placement, name)
            if not 1 <= dp <= P:
                raise ScheduleError(f"{name} must be in [1, P={P}], got {dp}")
        return placement


def partition_microbatches(M: int, unit_size: int) -> list[Unit]:
    """Split ``range(M)`` into contiguous units of ``unit_size`` microbatches."""
    if unit_size < 1:
        raise ScheduleError(f"unit_size must be positive, got {unit_size}")
    if M % unit_size:
        raise RemainderError(
            f"M={M} is not divisible by unit size {unit_size} (remainder {M % unit_size})"
        )
    return [Unit(u, tuple(range(u * unit_size, (u + 1) * unit_size))) for u in range(M // unit_size)]


# -- columns ----------------------------------------------------------------

Column = tuple  # one tuple of ops per rank (empty or a single op)


def _as_llm(schedule: Schedule) -> Schedule:
    llm = schedule.llm_only()
    return dataclasses.replace(llm, has_encoder=False, has_generator=False, per_rank=llm.per_rank)


def unit_slots(llm_schedule: Schedule) -> list[list[int]]:
    """Start slot of every LLM op when each op takes one slot and runs as early as possible."""
    from .dependencies import op_key

    sched = _as_llm(llm_schedule)
    P = sched.P
    finish: dict = {}
    slots: list[list[int]] = [[] for _ in range(P)]
    free = [0] * P
    pos = [0] * P
    remaining = sum(len(ops) for ops in sched.per_rank)
    while remaining:
        progressed = False
        for r in range(P):
            ops = sched.per_rank[r]
            while pos[r] < len(ops):
                op = ops[pos[r]]
                deps = producer_keys(op, sched)
                if any(k not in finish for k in deps):
                    break
                start = max([free[r]] + [finish[k] for k in deps])
                finish[op_key(op, sched)] = start + 1
                free[r] = start + 1
                slots[r].append(start)
                pos[r] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            stuck = [sched.per_rank[r][pos[r]].label() for r in range(P) if pos[r] < len(sched.per_rank[r])]
            raise ScheduleError(f"LLM schedule is not dependency-feasible; blocked at {stuck}")
    return slots


def columns(llm_schedule: Schedule) -> list[Column]:
    """Aligned columns of the LLM schedule: column k holds each rank's op in time slot k.

    Slots come from unit-cost as-soon-as-possible execution, so every rank
    sees the same number of columns and a rank that idles in slot k has an
    empty entry there.  Concatenating a rank's entries gives back its order.
    """
    sched = _as_llm(llm_schedule)
    slots = unit_slots(sched)
    count = max((s[-1] + 1 for s in slots if s), default=0)
    grid: list[list[tuple]] = [[() for _ in range(sched.P)] for _ in range(count)]
    for r, rank_slots in enumerate(slots):
        for op, slot in zip(sched.per_rank[r], rank_slots):
            if grid[slot][r]:
                raise ScheduleError(f"two ops of rank {r} share slot {slot}")
            grid[slot][r] = (op,)
    result = [tuple(col) for col in grid]
    if any(len(col) != sched.P for col in result):
        raise ScheduleError("ranks have mismatched column counts")
    return result


# -- readiness predicates ---------------------------------------------------

@dataclass
class BuilderState:
    """Which last-stage forwards and entry-stage backwards the builder has emitted."""

    outputs_done: set[int] = field(default_factory=set)
    grads_done: set[int] = field(default_factory=set)

    def observe(self, op: Operator, schedule: Schedule) -> None:
        if op.kind is K.LlmFwd and schedule.stage_of(op) == schedule.num_stages - 1:
            self.outputs_done.add(op.microbatch)
        elif op.kind is K.LlmBwd and schedule.stage_of(op) == 0:
            self.grads_done.add(op.microbatch)


def _completes(op: Operator, unit: Unit, done: set[int] | None) -> bool:
    if op.microbatch not in unit.microbatches:
        return False
    if done is None:
        return op.microbatch == max(unit.microbatches)
    return all(m in done or m == op.microbatch for m in unit.microbatches)


def llm_output_ready(op: Operator, unit: Unit, state: BuilderState | None, schedule: Schedule) -> bool:
    """``op`` is the last-stage forward that makes all of ``unit``'s LLM outputs available."""
    if op.kind is not K.LlmFwd or schedule.stage_of(op) != schedule.num_stages - 1:
        return False
    return _completes(op, unit, None if state is None else state.outputs_done)


def encoder_grad_ready(op: Operator, unit: Unit, state: BuilderState | None, schedule: Schedule) -> bool:
    """``op`` is the entry-stage backward that completes ``unit``'s input gradients."""
    if op.kind is not K.LlmBwd or schedule.stage_of(op) != 0:
        return False
    return _completes(op, unit, None if state is None else state.grads_done)


# -- nesting plan -------------------------------------------------------------

@dataclass(frozen=True)
class Action:
    """A nested module step emitted on every participating rank."""

    kind: str  # "enc_fwd" | "enc_bwd" | "gen"
    unit: int


@dataclass
class NestingPlan:
    warmup: list[Action]
    after: list[list[Action]]
    tail: list[Action] = field(default_factory=list)

    def column_of(self, action: Action) -> int | None:
        """Column after which ``action`` is emitted: -1 for warmup, ``None`` for the tail."""
        if action in self.warmup:
            return -1
        for k, actions in enumerate(self.after):
            if action in actions:
                return k
        return None


def _layout(
    config: PipelineConfig,
    placement: ModulePlacement,
    strategy: str,
    unit_size: int,
    gen_unit_size: int,
) -> Schedule:
    if unit_size % placement.encoder_dp:
        raise ScheduleError(
            f"encoder_dp={placement.encoder_dp} must divide the unit size {unit_size}"
        )
    if placement.has_generator and config.M % gen_unit_size:
        raise RemainderError(f"M={config.M} is not divisible by generator unit size {gen_unit_size}")
    return Schedule(
        config,
        [[] for _ in range(config.P)],
        strategy=strategy,
        has_encoder=True,
        has_generator=placement.has_generator,
        enc_unit_size=unit_size,
        gen_unit_size=gen_unit_size,
        encoder_ranks=tuple(range(placement.encoder_dp)),
        generator_ranks=tuple(range(placement.generator_dp)) if placement.has_generator else (),
    )


def _expand(action: Action, rank: int, layout: Schedule) -> list[Operator]:
    if action.kind == "gen":
        if rank not in layout.generator_ranks:
            return []
        m = layout.gen_microbatches(action.unit)[0]
        return [
            Operator(-1, K.GenFwd, rank, microbatch=m, unit=action.unit),
            Operator(-1, K.GenBwd, rank, microbatch=m, unit=action.unit),
        ]
    mbs = layout.enc_microbatches(action.unit, rank)
    if not mbs:
        return []
    kind = K.EncFwd if action.kind == "enc_fwd" else K.EncBwd
    return [Operator(-1, kind, rank, microbatch=mbs[0], unit=action.unit)]


def assemble(llm_schedule: Schedule, cols: list[Column], plan: NestingPlan, layout: Schedule) -> Schedule:
    """Interleave the plan's nested actions with the LLM columns on every rank."""
    per_rank = []
    for r in range(layout.P):
        row: list[Operator] = []
        for action in plan.warmup:
            row.extend(_expand(action, r, layout))
        for k, col in enumerate(cols):
            row.extend(col[r])
            for action in plan.after[k]:
                row.extend(_expand(action, r, layout))
        for action in plan.tail:
            row.extend(_expand(action, r, layout))
        per_rank.append(row)
    return layout.replace_ops(per_rank)


def _plan(
    cols: list[Column],
    layout: Schedule,
    units: list[Unit],
    warmup_units: int,
    nest_encoder_backward: bool,
) -> NestingPlan:
    gen_units = [Unit(g, layout.gen_microbatches(g)) for g in range(layout.num_gen_units)]
    warmup = [Action("enc_fwd", u.id) for u in units[:warmup_units]]
    next_unit = len(warmup)
    state = BuilderState()
    after: list[list[Action]] = []
    for col in cols:
        gens: list[Action] = []
        encs: list[Action] = []
        for rank_ops in col:
            for op in rank_ops:
                if layout.has_generator and op.kind is K.LlmFwd:
                    g = gen_units[layout.gen_unit_of(op.microbatch)]
                    if llm_output_ready(op, g, state, layout):
                        gens.append(Action("gen", g.id))
                if nest_encoder_backward and op.kind is K.LlmBwd:
                    u = units[layout.enc_unit_of(op.microbatch)]
                    if encoder_grad_ready(op, u, state, layout):
                        encs.append(Action("enc_bwd", u.id))
                        if next_unit < len(units):
                            encs.append(Action("enc_fwd", next_unit))
                            next_unit += 1
                state.observe(op, layout)
        after.append(gens + encs)
    tail = [] if nest_encoder_backward else [Action("enc_bwd", u.id) for u in units]
    return NestingPlan(warmup, after, tail)


def _first_entry_forward_columns(cols: list[Column], layout: Schedule) -> dict[int, int]:
    first: dict[int, int] = {}
    for k, col in enumerate(cols):
        for op in col[0]:
            if op.kind is K.LlmFwd and layout.stage_of(op) == 0:
                first.setdefault(layout.enc_unit_of(op.microbatch), k)
    return first


def _check_lookahead(plan: NestingPlan, cols: list[Column], layout: Schedule, W: int) -> None:
    needed = _first_entry_forward_columns(cols, layout)
    for u, col_f in sorted(needed.items()):
        emitted = plan.column_of(Action("enc_fwd", u))
        if emitted is None or emitted >= col_f:
            raise InsufficientWarmupError(
                f"encoder unit {u} is consumed at column {col_f} before its forward is "
                f"scheduled (W={W} is below the schedule's lookahead)"
            )


def _finish(schedule: Schedule) -> Schedule:
    violations = verify_dependencies(schedule)
    if violations:
        shown = "; ".join(str(v) for v in violations[:3])
        raise ScheduleError(f"{len(violations)} dependency violation(s): {shown}")
    return schedule


def _check_llm(llm_schedule: Schedule, M: int, P: int) -> None:
    if llm_schedule.M != M or llm_schedule.P != P:
        raise ScheduleError(
            f"LLM schedule has P={llm_schedule.P}, M={llm_schedule.M}; expected P={P}, M={M}"
        )


def plan_bigmac(
    llm_schedule: Schedule,
    W: int,
    placement: ModulePlacement,
    unit_size: int | None = None,
    gen_unit_size: int = 1,
) -> tuple[NestingPlan, list[Column], Schedule]:
    """Nesting plan, LLM columns and empty layout for a BigMac schedule."""
    config = llm_schedule.config
    if W < 1:
        raise ScheduleError(f"W must be >= 1, got {W}")
    placement = placement.resolve(config.P)
    if unit_size is None:
        unit_size = cp_unit_size(config.P, config.llm_cp, config.enc_cp)
    units = partition_microbatches(config.M, unit_size)
    layout = _layout(config, placement, "bigmac", unit_size, gen_unit_size)
    cols = columns(llm_schedule)
    plan = _plan(cols, layout, units, min(W, len(units)), nest_encoder_backward=True)
    _check_lookahead(plan, cols, layout, W)
    return plan, cols, layout


def build_schedule(
    llm_schedule: Schedule,
    M: int,
    P: int,
    W: int,
    placement: ModulePlacement,
    unit_size: int | None = None,
    gen_unit_size: int = 1,
) -> Schedule:
    """BigMac schedule: nest encoder/generator units into ``llm_schedule`` without reordering it.

    ``unit_size`` defaults to ``P * llm_cp / enc_cp`` from the schedule's
    config.  Generator work is nested per ``gen_unit_size`` microbatches
    (one by default), each split across the generator ranks.

    Raises :class:`InsufficientWarmupError` if ``W`` encoder units of
    lookahead cannot keep the LLM entry stage fed.
    """
    _check_llm(llm_schedule, M, P)
    plan, cols, layout = plan_bigmac(llm_schedule, W, placement, unit_size, gen_unit_size)
    return _finish(assemble(llm_schedule, cols, plan, layout))


def build_bigmac(config: PipelineConfig, placement: ModulePlacement = ModulePlacement()) -> Schedule:
    llm = generate_llm_schedule(config)
    return build_schedule(llm, config.M, config.P, config.W, placement)


def build_compute_efficient(
    config: PipelineConfig,
    placement: ModulePlacement = ModulePlacement(),
    llm_schedule: Schedule | None = None,
) -> Schedule:
    """All encoder forwards first, the LLM pipeline, then all encoder backwards."""
    llm = llm_schedule or generate_llm_schedule(config)
    _check_llm(llm, config.M, config.P)
    placement = placement.resolve(config.P)
    unit_size = cp_unit_size(config.P, config.llm_cp, config.enc_cp)
    units = partition_microbatches(config.M, unit_size)
    layout = _layout(config, placement, "compute_efficient", unit_size, 1)
    cols = columns(llm)
    plan = _plan(cols, layout, units, len(units), nest_encoder_backward=False)
    return _finish(assemble(llm, cols, plan, layout))


def build_memory_efficient(
    config: PipelineConfig,
    placement: ModulePlacement = ModulePlacement(),
    llm_schedule: Schedule | None = None,
) -> Schedule:
    """Encoder fused before the entry stage and generator after the last stage, per microbatch.

    The encoder runs on rank 0 and the generator on rank ``P - 1``; data
    parallel degrees in ``placement`` are ignored because the modules are
    pipeline stages here.
    """
    llm = llm_schedule or generate_llm_schedule(config)
    _check_llm(llm, config.M, config.P)
    P = config.P
    layout = Schedule(
        config,
        [[] for _ in range(P)],
        strategy="memory_efficient",
        has_encoder=True,
        has_generator=placement.has_generator,
        enc_unit_size=1,
        gen_unit_size=1,
        encoder_ranks=(0,),
        generator_ranks=(P - 1,) if placement.has_generator else (),
    )
    last = config.num_stages - 1
    per_rank = []
    for r, ops in enumerate(llm.per_rank):
        row = []
        for op in ops:
            stage = layout.stage_of(op)
            m = op.microbatch
            if op.kind is K.LlmFwd and stage == 0:
                row.append(Operator(-1, K.EncFwd, r, microbatch=m, unit=m))
            row.append(op)
            if op.kind is K.LlmFwd and stage == last and placement.has_generator:
                row.append(Operator(-1, K.GenFwd, r, microbatch=m, unit=m))
                row.append(Operator(-1, K.GenBwd, r, microbatch=m, unit=m))
            if op.kind is K.LlmBwd and stage == 0:
                row.append(Operator(-1, K.EncBwd, r, microbatch=m, unit=m))
        per_rank.append(row)
    return _finish(layout.replace_ops(per_rank))


def build_strategy(
    strategy: "Strategy | str",
    config: PipelineConfig,
    placement: ModulePlacement = ModulePlacement(),
) -> Schedule:
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.BigMac:
        return build_bigmac(config, placement)
    if strategy is Strategy.ComputeEfficient:
        return build_compute_efficient(config, placement)
    return build_memory_efficient(config, placement)


# -- structural checks ------------------------------------------------------

@dataclass(frozen=True)
class UnitOrder:
    unit: int
    ok: bool
    detail: str = ""


def unit_order_points(schedule: Schedule, unit_size: int | None = None) -> tuple[dict[int, int], dict[int, int]]:
    """Positions on the entry rank of F_i (first consuming forward) and G_i (gradient-complete backward)."""
    unit_size = unit_size or (schedule.enc_unit_size if schedule.has_encoder else schedule.P)
    first_fwd: dict[int, int] = {}
    grad_done: dict[int, int] = {}
    seen: dict[int, int] = {}
    for pos, op in enumerate(schedule.per_rank[0]):
        if not op.kind.is_llm or schedule.stage_of(op) != 0:
            continue
        u = op.microbatch // unit_size
        if op.kind is K.LlmFwd:
            first_fwd.setdefault(u, pos)
        else:
            seen[u] = seen.get(u, 0) + 1
            if seen[u] == unit_size:
                grad_done[u] = pos
    return first_fwd, grad_done


def verify_order_property(schedule: Schedule, unit_size: int | None = None) -> list[UnitOrder]:
    """Check ``F_i, F_{i+1}, F_{i+2} < G_i < F_{i+3}`` for every unit with ``i + 3`` in range."""
    F, G = unit_order_points(schedule, unit_size)
    results = []
    for i in sorted(F):
        if i + 3 not in F:
            continue
        if i not in G:
            results.append(UnitOrder(i, False, f"unit {i} never completes its input gradients"))
            continue
        late = [j for j in (i, i + 1, i + 2) if F[j] > G[i]]
        if late:
            results.append(UnitOrder(i, False, f"F_{late[0]} follows G_{i}"))
        elif not G[i] < F[i + 3]:
            results.append(UnitOrder(i, False, f"G_{i} follows F_{i + 3}"))
        else:
            results.append(UnitOrder(i, True))
    return results


def first_order_violation(schedule: Schedule, unit_size: int | None = None) -> UnitOrder | None:
    return next((r for r in verify_order_property(schedule, unit_size) if not r.ok), None)


def module_window(schedule: Schedule, rank: int, module: str) -> int:
    """Largest number of units of ``module`` with a forward but no backward yet, over prefixes."""
    fwd, bwd = (K.EncFwd, K.EncBwd) if module == "encoder" else (K.GenFwd, K.GenBwd)
    live = peak = 0
    for op in schedule.per_rank[rank]:
        if op.kind is fwd:
            live += 1
            peak = max(peak, live)
        elif op.kind is bwd:
            live -= 1
    return peak


def llm_order_preserved(schedule: Schedule, llm_schedule: Schedule) -> bool:
    def key(op: Operator) -> tuple:
        return (op.kind, op.microbatch, op.chunk)

    return all(
        [key(op) for op in ops if op.kind.is_llm] == [key(op) for op in base]
        for ops, base in zip(schedule.per_rank, llm_schedule.per_rank)
    )
