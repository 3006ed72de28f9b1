"""Context-parallel unit sizing and FSDP schedule decoration."""
from __future__ import annotations

from dataclasses import dataclass

from .schedule import K, Operator, Schedule, ScheduleError

FSDP_MODES = ("collective", "one_sided")


def cp_unit_size(P: int, llm_cp: int = 1, enc_cp: int = 1) -> int:
    """Encoder scheduling unit enlarged for mismatched CP degrees: ``P * llm_cp / enc_cp``."""
    if min(P, llm_cp, enc_cp) < 1:
        raise ScheduleError("P, llm_cp and enc_cp must be positive")
    if (P * llm_cp) % enc_cp:
        raise ScheduleError(
            f"unit size P*llm_cp/enc_cp = {P}*{llm_cp}/{enc_cp} is not an integer"
        )
    return P * llm_cp // enc_cp


@dataclass(frozen=True)
class CpPlan:
    P: int
    llm_cp: int = 1
    enc_cp: int = 1

    @property
    def unit_size(self) -> int:
        return cp_unit_size(self.P, self.llm_cp, self.enc_cp)

    @property
    def needs_conversion(self) -> bool:
        return self.llm_cp != self.enc_cp


def fsdp_key(op: Operator) -> tuple:
    """Barrier identity of an FSDP op: all ranks sharing it form one group."""
    return (op.payload, op.unit)


def decorate_fsdp(schedule: Schedule, mode: str) -> Schedule:
    """Prefix every encoder/generator unit op with a parameter fetch.

    ``collective`` inserts an ``FsdpSync`` that every rank of the module's
    group must reach before any of them proceeds; ``one_sided`` inserts a
    local ``FsdpPull``.  The payload names the module and phase, e.g.
    ``enc_fwd``.
    """
    if mode not in FSDP_MODES:
        raise ScheduleError(f"unknown FSDP mode {mode!r}; expected one of {FSDP_MODES}")
    kind = K.FsdpSync if mode == "collective" else K.FsdpPull
    tags = {K.EncFwd: "enc_fwd", K.EncBwd: "enc_bwd", K.GenFwd: "gen_fwd", K.GenBwd: "gen_bwd"}
    per_rank = []
    for ops in schedule.per_rank:
        row = []
        for op in ops:
            tag = tags.get(op.kind)
            if tag is not None:
                row.append(Operator(
                    id=-1, kind=kind, rank=op.rank, microbatch=op.microbatch,
                    unit=op.unit, payload=tag,
                ))
            row.append(op)
        per_rank.append(row)
    return schedule.replace_ops(per_rank)


def strip_fsdp(schedule: Schedule) -> Schedule:
    return schedule.replace_ops(
        [[op for op in ops if op.kind not in (K.FsdpSync, K.FsdpPull)] for ops in schedule.per_rank]
    )


def fsdp_group(schedule: Schedule, op: Operator) -> tuple[int, ...]:
    """Ranks that take part in the collective for ``op``."""
    if op.payload.startswith("enc"):
        return tuple(r for r in schedule.encoder_ranks if schedule.enc_microbatches(op.unit, r))
    return schedule.generator_ranks
