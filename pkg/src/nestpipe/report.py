"""Side-by-side runs of the three nesting strategies."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .memory import ActivationFootprint, closed_form_peak, profile_memory
from .nesting import ModulePlacement, Strategy, build_strategy
from .schedule import PipelineConfig
from .simulator import CostModel, Timeline, bubble_rate, simulate


@dataclass
class StrategyRun:
    strategy: Strategy
    timeline: Timeline
    iteration_time: float
    bubble_rates: list
    peak_bytes: list
    closed_form: list
    peak_units: dict


@dataclass
class Comparison:
    runs: list[StrategyRun]
    speedups: dict[str, float] = field(default_factory=dict)

    def run(self, strategy: "Strategy | str") -> StrategyRun:
        strategy = Strategy.parse(strategy)
        return next(r for r in self.runs if r.strategy is strategy)

    def rows(self) -> list[dict]:
        rows = []
        for r in self.runs:
            rows.append({
                "strategy": r.strategy.value,
                "iteration_time": float(r.iteration_time),
                "mean_bubble_rate": float(sum(r.bubble_rates) / len(r.bubble_rates)),
                "peak_memory": float(max(r.peak_bytes)),
                "closed_form_peak": float(max(r.closed_form)),
                "peak_encoder_units": r.peak_units.get("encoder", 0),
                "peak_generator_units": r.peak_units.get("generator", 0),
            })
        return rows

    def to_csv(self) -> str:
        out = io.StringIO()
        rows = self.rows()
        writer = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return out.getvalue()

    def to_text(self) -> str:
        lines = [f"{'strategy':<18} {'time':>10} {'bubble':>8} {'peak mem':>10} {'analytic':>10} {'enc units':>9} {'gen units':>9}"]
        for row in self.rows():
            lines.append(
                f"{row['strategy']:<18} {row['iteration_time']:>10.3f} {row['mean_bubble_rate']:>8.4f} "
                f"{row['peak_memory']:>10.3f} {row['closed_form_peak']:>10.3f} "
                f"{row['peak_encoder_units']:>9} {row['peak_generator_units']:>9}"
            )
        for name, ratio in self.speedups.items():
            lines.append(f"bigmac speedup over {name}: {ratio:.4f}x")
        return "\n".join(lines)


def run_strategy(
    strategy: "Strategy | str",
    config: PipelineConfig,
    cost: CostModel,
    placement: ModulePlacement = ModulePlacement(),
    footprint: ActivationFootprint = ActivationFootprint(),
    rendezvous: bool = False,
) -> StrategyRun:
    strategy = Strategy.parse(strategy)
    timeline = simulate(build_strategy(strategy, config, placement), cost, rendezvous=rendezvous)
    profile = profile_memory(timeline, footprint)
    bubbles = [bubble_rate(timeline, r) for r in range(config.P) if timeline.intervals[r]]
    return StrategyRun(
        strategy, timeline, timeline.iteration_time, bubbles, profile.peak_bytes,
        closed_form_peak(strategy, config, footprint, placement), profile.peak_units,
    )


def compare_strategies(
    config: PipelineConfig,
    cost: CostModel,
    placement: ModulePlacement = ModulePlacement(),
    footprint: ActivationFootprint = ActivationFootprint(),
    strategies=tuple(Strategy),
    rendezvous: bool = False,
) -> Comparison:
    """Simulate each strategy on identical inputs; speedups are other time / BigMac time."""
    runs = [run_strategy(s, config, cost, placement, footprint, rendezvous) for s in strategies]
    comparison = Comparison(runs)
    names = {r.strategy for r in runs}
    if Strategy.BigMac in names:
        base = comparison.run(Strategy.BigMac).iteration_time
        for r in runs:
            if r.strategy is not Strategy.BigMac and base:
                comparison.speedups[r.strategy.value] = float(r.iteration_time / base)
    return comparison
