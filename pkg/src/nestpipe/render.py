"""Static SVG Gantt charts from structured trace files."""
from __future__ import annotations

import json
from dataclasses import dataclass
from xml.sax.saxutils import escape

LANE_HEIGHT = 28
LANE_GAP = 6
LEFT = 64
TOP = 24
MAX_WIDTH = 1600

_FILL = {
    "EncFwd": "#8fbc8f", "EncBwd": "#2e8b57",
    "LlmFwd": "#87aade", "LlmBwd": "#2f5fa7",
    "GenFwd": "#e8b86d", "GenBwd": "#b8741a",
}
_COMM_FILL = "#999999"


class TraceParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


@dataclass(frozen=True)
class TraceEvent:
    rank: int
    op_id: int
    kind: str
    start: float
    end: float
    microbatch: int | None = None
    chunk: int | None = None
    unit: int | None = None


@dataclass
class Trace:
    P: int
    events: list[TraceEvent]
    iteration_time: float = 0
    strategy: str | None = None


_REQUIRED = ("rank", "op_id", "kind", "start", "end")


def parse_trace(text: str) -> Trace:
    """Parse the JSON-lines trace written by the simulator."""
    P = None
    meta: dict = {}
    events = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(lineno, f"invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise TraceParseError(lineno, "expected a JSON object")
        kind = rec.get("type", "op")
        if kind == "meta":
            meta = rec
            P = rec.get("P")
            if not isinstance(P, int) or P < 0:
                raise TraceParseError(lineno, "meta record needs a non-negative integer P")
            continue
        if kind != "op":
            raise TraceParseError(lineno, f"unknown record type {kind!r}")
        missing = [k for k in _REQUIRED if k not in rec]
        if missing:
            raise TraceParseError(lineno, f"missing field(s) {', '.join(missing)}")
        try:
            event = TraceEvent(
                int(rec["rank"]), int(rec["op_id"]), str(rec["kind"]),
                float(rec["start"]), float(rec["end"]),
                rec.get("microbatch"), rec.get("chunk"), rec.get("unit"),
            )
        except (TypeError, ValueError) as exc:
            raise TraceParseError(lineno, f"bad field value ({exc})") from None
        if event.end < event.start or event.rank < 0:
            raise TraceParseError(lineno, "op ends before it starts or has a negative rank")
        events.append(event)
    if P is None:
        P = max((e.rank + 1 for e in events), default=0)
    elif any(e.rank >= P for e in events):
        raise TraceParseError(0, f"an op references a rank outside 0..{P - 1}")
    end = max((e.end for e in events), default=0)
    return Trace(P, events, meta.get("iteration_time", end), meta.get("strategy"))


def _label(e: TraceEvent) -> str:
    if e.kind.startswith("Llm"):
        return f"{e.microbatch}" if not e.chunk else f"{e.microbatch}.{e.chunk}"
    if e.kind[:3] in ("Enc", "Gen"):
        return f"u{e.unit}"
    return ""


def render_svg(trace: Trace) -> str:
    """One lane per rank; compute ops are ``rect.block`` classed by kind and module."""
    span = max(trace.iteration_time or 0, max((e.end for e in trace.events), default=0))
    scale = 20.0 if span == 0 else min(20.0, (MAX_WIDTH - LEFT - 16) / span)
    width = LEFT + span * scale + 16
    height = TOP + trace.P * (LANE_HEIGHT + LANE_GAP) + 8
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.2f}" height="{height:.2f}" '
        f'viewBox="0 0 {width:.2f} {height:.2f}" font-family="monospace" font-size="10">',
        "<style>",
        ".lane{fill:#f4f4f4}.comm{fill:%s;opacity:.6}.label{fill:#fff;text-anchor:middle}" % _COMM_FILL,
    ]
    out.extend(f".{kind}{{fill:{fill}}}" for kind, fill in _FILL.items())
    out.append("</style>")
    title = escape(trace.strategy or "trace")
    out.append(f'<text x="{LEFT}" y="14">{title}  iteration={trace.iteration_time}</text>')
    for r in range(trace.P):
        y = TOP + r * (LANE_HEIGHT + LANE_GAP)
        out.append(f'<g class="lane-group" data-rank="{r}">')
        out.append(f'<rect class="lane" x="{LEFT}" y="{y}" width="{span * scale:.2f}" height="{LANE_HEIGHT}"/>')
        out.append(f'<text x="4" y="{y + LANE_HEIGHT / 2 + 3:.1f}">rank {r}</text>')
        for e in sorted((e for e in trace.events if e.rank == r), key=lambda e: (e.start, e.op_id)):
            x = LEFT + e.start * scale
            w = (e.end - e.start) * scale
            if e.kind in _FILL:
                module = {"Enc": "encoder", "Llm": "llm", "Gen": "generator"}[e.kind[:3]]
                attrs = f'data-op="{e.op_id}"'
                if e.unit is not None:
                    attrs += f' data-unit="{e.unit}"'
                if e.microbatch is not None:
                    attrs += f' data-mb="{e.microbatch}"'
                out.append(
                    f'<rect class="block {module} {e.kind}" x="{x:.2f}" y="{y}" '
                    f'width="{w:.2f}" height="{LANE_HEIGHT}" {attrs}/>'
                )
                text = _label(e)
                if text and w >= 10:
                    out.append(f'<text class="label" x="{x + w / 2:.2f}" y="{y + LANE_HEIGHT / 2 + 3:.1f}">{text}</text>')
            elif w > 0:
                out.append(
                    f'<rect class="comm {e.kind}" x="{x:.2f}" y="{y + LANE_HEIGHT - 4}" '
                    f'width="{w:.2f}" height="4" data-op="{e.op_id}"/>'
                )
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_file(trace_path, svg_path) -> Trace:
    with open(trace_path) as fh:
        trace = parse_trace(fh.read())
    with open(svg_path, "w") as fh:
        fh.write(render_svg(trace))
    return trace
