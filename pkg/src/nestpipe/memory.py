"""Activation memory accounting over a simulated timeline and analytic peaks."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

from .dependencies import op_key
from .nesting import ModulePlacement, Strategy
from .extensions import cp_unit_size
from .schedule import K, PipelineConfig, generate_llm_schedule, interleaved_warmup

MODULES = ("encoder", "llm", "generator")


class MemoryIntegrityError(RuntimeError):
    pass


@dataclass(frozen=True)
class ActivationFootprint:
    """``A_m`` per encoder/generator microbatch, ``A_l`` per whole LLM microbatch."""

    A_m: float = 1
    A_l: float = 1

    def __post_init__(self) -> None:
        if self.A_m <= 0 or self.A_l <= 0:
            raise ValueError("activation footprints must be positive")


def _scaled(value, num, den=1):
    if isinstance(value, float):
        return value * num / den
    r = Fraction(value) * num / den
    return int(r) if r.denominator == 1 else r


def _alloc_size(op, schedule, fp: ActivationFootprint):
    if op.kind in (K.EncFwd, K.EncBwd):
        return "encoder", _scaled(fp.A_m, len(schedule.enc_microbatches(op.unit, op.rank)))
    if op.kind in (K.GenFwd, K.GenBwd):
        return "generator", _scaled(fp.A_m, len(schedule.gen_microbatches(op.unit)), len(schedule.generator_ranks))
    return "llm", _scaled(fp.A_l, 1, schedule.num_stages)


def memory_events(timeline, footprint: ActivationFootprint) -> list[tuple]:
    """``(time, rank, module, delta_bytes)`` sorted by time.

    At equal times releases come before allocations, except that a
    zero-lifetime activation is allocated before it is released.
    """
    schedule = timeline.schedule
    live: dict = {}
    events = []
    for rank in timeline.intervals:
        for iv in rank:
            op = iv.op
            if not op.is_compute:
                continue
            module, size = _alloc_size(op, schedule, footprint)
            key = op_key(op, schedule)[1:]  # drop the kind: fwd and bwd share it
            if op.kind.is_forward:
                if (module, key) in live:
                    raise MemoryIntegrityError(f"{op.label()} allocates an activation that is already live")
                live[(module, key)] = (size, iv.end)
                events.append((iv.end, 1, op.rank, module, size, op.id))
            else:
                if (module, key) not in live:
                    raise MemoryIntegrityError(f"{op.label()} releases an activation that was never allocated")
                size, born = live.pop((module, key))
                # a release never precedes its own allocation, even at equal times
                events.append((iv.end, 2 if born == iv.end else 0, op.rank, module, -size, op.id))
    if live:
        (module, key), _ = next(iter(live.items()))
        raise MemoryIntegrityError(f"{module} activation {key} is never released")
    events.sort(key=lambda e: (e[0], e[1], e[2], e[5]))
    return [(time, rank, module, delta) for time, _, rank, module, delta, _ in events]


@dataclass
class MemoryProfile:
    """Per-rank step functions of live activation bytes, split by module."""

    P: int
    steps: list[list[tuple]]  # per rank: (time, {module: bytes}) after each event
    peak_bytes: list
    peak_by_module: list[dict]
    peak_units: dict[str, int]
    final_bytes: list = field(default_factory=list)

    @property
    def global_peak(self):
        return max(self.peak_bytes, default=0)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["time", "rank", "module", "bytes"])
        for r, steps in enumerate(self.steps):
            for time, by_module in steps:
                for module in MODULES:
                    writer.writerow([_fmt(time), r, module, _fmt(by_module[module])])
        return out.getvalue()


def _fmt(x) -> str:
    if isinstance(x, Fraction):
        return str(int(x)) if x.denominator == 1 else repr(float(x))
    return repr(x) if isinstance(x, float) else str(x)


def profile_memory(timeline, footprint: ActivationFootprint) -> MemoryProfile:
    """Replay allocations (forward end) and releases (backward end) per rank."""
    P = timeline.P
    events = memory_events(timeline, footprint)
    current = [{m: 0 for m in MODULES} for _ in range(P)]
    units = [{m: 0 for m in MODULES} for _ in range(P)]
    steps: list[list[tuple]] = [[] for _ in range(P)]
    peak = [0] * P
    peak_mod = [{m: 0 for m in MODULES} for _ in range(P)]
    peak_units = {"encoder": 0, "generator": 0}
    for time, rank, module, delta in events:
        current[rank][module] += delta
        units[rank][module] += 1 if delta > 0 else -1
        if current[rank][module] < 0:
            raise MemoryIntegrityError(f"negative {module} bytes on rank {rank} at time {time}")
        total = sum(current[rank].values())
        peak[rank] = max(peak[rank], total)
        peak_mod[rank][module] = max(peak_mod[rank][module], current[rank][module])
        if module in peak_units:
            peak_units[module] = max(peak_units[module], units[rank][module])
        if steps[rank] and steps[rank][-1][0] == time:
            steps[rank][-1] = (time, dict(current[rank]))
        else:
            steps[rank].append((time, dict(current[rank])))
    final = [sum(c.values()) for c in current]
    if any(final):
        raise MemoryIntegrityError(f"live bytes remain at the end: {final}")
    return MemoryProfile(P, steps, peak, peak_mod, peak_units, final)


# -- analytic peaks ---------------------------------------------------------

def llm_inflight(config: PipelineConfig, rank: int) -> int:
    """Peak number of forward chunks awaiting their backward on ``rank``."""
    if config.V == 1:
        return min(config.P - rank, config.M)
    return min(interleaved_warmup(config.P, config.V, config.M, rank) + 1, config.M * config.V)


def _entry_chunk_window(config: PipelineConfig) -> int:
    """Peak count of entry-stage forwards awaiting their backward on rank 0."""
    if config.V == 1:
        return min(config.P, config.M)
    live = peak = 0
    for op in generate_llm_schedule(config).per_rank[0]:
        if op.chunk != 0:
            continue
        live += 1 if op.kind is K.LlmFwd else -1
        peak = max(peak, live)
    return peak


def closed_form_terms(
    strategy: "Strategy | str",
    config: PipelineConfig,
    footprint: ActivationFootprint,
    placement: ModulePlacement = ModulePlacement(),
) -> list[dict]:
    """Analytic peak bytes per rank and module for one strategy."""
    strategy = Strategy.parse(strategy)
    P, M, V = config.P, config.M, config.V
    A_m, A_l = footprint.A_m, footprint.A_l
    terms = []
    if strategy is Strategy.MemoryEfficient:
        for r in range(P):
            enc = _scaled(A_m, _entry_chunk_window(config)) if r == 0 else 0
            gen = A_m if (placement.has_generator and r == P - 1) else 0
            terms.append({"encoder": enc, "llm": _scaled(A_l, llm_inflight(config, r), P * V), "generator": gen})
        return terms
    placement = placement.resolve(P)
    unit_size = cp_unit_size(P, config.llm_cp, config.enc_cp)
    units = M // unit_size
    per_rank_mbs = unit_size // placement.encoder_dp
    live_units = units if strategy is Strategy.ComputeEfficient else min(config.W, units)
    for r in range(P):
        enc = _scaled(A_m, live_units * per_rank_mbs) if r < placement.encoder_dp else 0
        gen = _scaled(A_m, 1, placement.generator_dp) if (placement.has_generator and r < placement.generator_dp) else 0
        terms.append({"encoder": enc, "llm": _scaled(A_l, llm_inflight(config, r), P * V), "generator": gen})
    return terms


def closed_form_peak(
    strategy: "Strategy | str",
    config: PipelineConfig,
    footprint: ActivationFootprint,
    placement: ModulePlacement = ModulePlacement(),
) -> list:
    """Analytic peak activation bytes per rank.

    Compute-efficient keeps every encoder unit: ``(M/P)*A_m + A_l`` on the
    entry rank.  Memory-efficient keeps at most ``P`` encoder microbatches on
    the entry rank and ``(P-1)/P * A_l`` on the second rank (``V == 1``).
    BigMac keeps ``W`` encoder units plus the LLM's steady-state share.
    """
    return [sum(t.values()) for t in closed_form_terms(strategy, config, footprint, placement)]
