"""Peak encoder activation memory as the microbatch count grows."""
from nestpipe import ActivationFootprint, PipelineConfig, build_strategy, closed_form_peak, profile_memory, simulate
from nestpipe.simulator import CostModel

footprint = ActivationFootprint(A_m=1, A_l=1)
cost = CostModel(t_llm_fwd=1, t_enc_fwd=1)

print(f"{'M':>4} {'strategy':<18} {'simulated':>10} {'closed form':>12}")
for M in (16, 32, 64):
    config = PipelineConfig(P=4, M=M, W=3)
    for name in ("bigmac", "compute_efficient", "memory_efficient"):
        timeline = simulate(build_strategy(name, config), cost)
        simulated = max(profile_memory(timeline, footprint).peak_bytes)
        analytic = max(closed_form_peak(name, config, footprint))
        print(f"{M:>4} {name:<18} {float(simulated):>10.3f} {float(analytic):>12.3f}")
