import pytest

from nestpipe.schedule import K

SHORT = {
    K.LlmFwd: "F", K.LlmBwd: "B",
    K.EncFwd: "Ef", K.EncBwd: "Eb",
    K.GenFwd: "Gf", K.GenBwd: "Gb",
}


def short(ops):
    """Compact labels: ``F3`` for LlmFwd mb 3, ``Ef0`` for EncFwd unit 0."""
    out = []
    for op in ops:
        tag = SHORT.get(op.kind, op.kind.value)
        out.append(f"{tag}{op.microbatch if op.kind.is_llm else op.unit}")
    return out


@pytest.fixture
def short_ops():
    return short


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.LINES, key=lambda s: int(s.split()[1].rstrip("."))):
        terminalreporter.write_line(line)
