"""Run every strategy on the numeric toy model and compare gradients with sequential training."""
import numpy as np

from nestpipe import PipelineConfig, build_strategy, execute_numeric, make_workload, sequential_reference
from nestpipe.executor import max_grad_diff

config = PipelineConfig(P=2, V=2, M=8, W=3)
wl = make_workload(seed=7, num_stages=config.P * config.V, M=config.M)
ref = sequential_reference(wl.model, wl.data)

for name in ("bigmac", "compute_efficient", "memory_efficient"):
    result = execute_numeric(build_strategy(name, config), wl.model, wl.data)
    same = np.array_equal(result.losses, ref.losses)
    print(f"{name:<18} max |grad diff| {max_grad_diff(result.grads, ref.grads):.2e}  losses identical: {same}")
