import numpy as np
import pytest

from snstitch import anchors as nn
from snstitch.linalg import make_rng

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_specs():
    """Depth 2/4, width 8/16 pair: cheap enough for elementwise finite differences."""
    small = nn.AnchorSpec(depth=2, width=8, heads=2, patch_dim=5, num_classes=3, seq_len=4)
    large = nn.AnchorSpec(depth=4, width=16, heads=4, patch_dim=5, num_classes=3, seq_len=4)
    return small, large


@pytest.fixture
def tiny_models(tiny_specs):
    small_spec, large_spec = tiny_specs
    small = nn.init_anchor(small_spec, make_rng(1))
    large = nn.init_anchor(large_spec, make_rng(2))
    # push parameters away from the symmetric init so gradients are non-trivial
    rng = make_rng(3)
    for model in (small, large):
        for p in model.params.values():
            p += rng.normal(0.0, 0.2, size=p.shape)
    return small, large


@pytest.fixture
def tiny_batch(tiny_specs):
    spec = tiny_specs[0]
    rng = make_rng(4)
    x = rng.normal(size=(3, spec.seq_len, spec.patch_dim))
    y = np.array([0, 2, 1])
    return x, y
