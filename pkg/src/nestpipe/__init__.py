"""Nesting encoder and generator work into LLM pipeline-parallel schedules."""
from .comm import DeadlockResult, PayloadSizes, deadlock_check, insert_comm_ops
from .dependencies import check_completeness, verify_dependencies
from .executor import ToyModel, execute_numeric, make_workload, sequential_reference
from .extensions import CpPlan, cp_unit_size, decorate_fsdp
from .memory import ActivationFootprint, closed_form_peak, profile_memory
from .nesting import (
    InsufficientWarmupError,
    ModulePlacement,
    Strategy,
    build_compute_efficient,
    build_memory_efficient,
    build_schedule,
    build_strategy,
    columns,
    verify_order_property,
)
from .report import compare_strategies
from .schedule import (
    Operator,
    OperatorKind,
    PipelineConfig,
    RemainderError,
    Schedule,
    ScheduleError,
    dumps,
    generate_1f1b,
    generate_interleaved_1f1b,
    generate_llm_schedule,
    loads,
)
from .simulator import CostModel, SimulationStall, Timeline, bubble_rate, simulate

__all__ = [name for name in dir() if not name.startswith("_")]
