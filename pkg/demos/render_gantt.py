"""Write a BigMac trace and draw it as an SVG Gantt chart."""
import sys
from pathlib import Path

from nestpipe import PipelineConfig, build_strategy, simulate
from nestpipe.render import render_file
from nestpipe.simulator import CostModel, write_trace

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out")
out.mkdir(parents=True, exist_ok=True)

timeline = simulate(build_strategy("bigmac", PipelineConfig(P=4, M=16, W=3)), CostModel(t_llm_fwd=1, t_enc_fwd=1))
write_trace(timeline, out / "bigmac.trace.jsonl")
render_file(out / "bigmac.trace.jsonl", out / "bigmac.svg")
print(f"iteration time {timeline.iteration_time}, chart at {out / 'bigmac.svg'}")
