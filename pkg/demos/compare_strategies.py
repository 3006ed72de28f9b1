"""Simulate the three nesting strategies on a skewed encoder workload and print a table."""
from nestpipe import ModulePlacement, PipelineConfig, compare_strategies
from nestpipe.simulator import CostModel, bimodal_durations

config = PipelineConfig(P=4, M=32, V=1, W=3)
cost = CostModel(
    t_llm_fwd=1,
    t_enc_fwd=bimodal_durations(config.M, seed=0, low=1, high=3),
    comm_latency=0,
)
placement = ModulePlacement(has_generator=True)

report = compare_strategies(config, cost, placement)
print(report.to_text())
