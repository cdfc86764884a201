import csv
import io
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st_h

from snstitch import anchors as nn
from snstitch import budget
from snstitch import stitching as st
from snstitch.dataio import SynthTaskSpec, make_synthetic
from snstitch.evalbench import (
    CSV_COLUMNS, SweepRow, curve_csv, emit_curve, histogram_svg, pareto_front, scatter_svg, sweep,
)
from snstitch.linalg import make_rng


def _rows(points):
    return [SweepRow(i, "FS", float(f), 0, float(a)) for i, (f, a) in enumerate(points)]


def _dominated_oracle(rows):
    keep = []
    for r in rows:
        dominated = any(
            o.flops <= r.flops and o.accuracy >= r.accuracy
            and (o.flops < r.flops or o.accuracy > r.accuracy)
            for o in rows)
        keep.append(not dominated)
    return keep


def test_pareto_simple_cases():
    assert pareto_front(_rows([(1, 0.5), (2, 0.7), (3, 0.6)])) == [True, True, False]
    assert pareto_front(_rows([(1, 0.5), (1, 0.7)])) == [False, True]
    assert pareto_front(_rows([(1, 0.5), (1, 0.5)])) == [True, True]
    assert pareto_front(_rows([(1, 0.9), (2, 0.9)])) == [True, False]
    with pytest.raises(ValueError):
        pareto_front([])


@settings(max_examples=200, deadline=None)
@given(st_h.lists(st_h.tuples(st_h.integers(0, 6), st_h.integers(0, 6)), min_size=1, max_size=25))
def test_pareto_matches_quadratic_oracle(points):
    rows = _rows(points)
    mask = pareto_front(rows)
    assert mask == _dominated_oracle(rows)
    front = sorted((r.flops, r.accuracy) for r, k in zip(rows, mask) if k)
    assert all(a[1] <= b[1] for a, b in zip(front, front[1:]))


@pytest.fixture(scope="module")
def swept():
    small = nn.AnchorSpec(depth=2, width=8, heads=2, patch_dim=5, num_classes=3, seq_len=4)
    large = nn.AnchorSpec(depth=4, width=16, heads=4, patch_dim=5, num_classes=3, seq_len=4)
    ms, ml = nn.init_anchor(small, make_rng(1)), nn.init_anchor(large, make_rng(2))
    _, val = make_synthetic(SynthTaskSpec(num_classes=3, samples_per_class=20, seq_len=4,
                                          patch_dim=5), make_rng(0))
    space = st.enumerate_space(small, large)
    st.init_layers(space, ms, ml, val.x[:20], rank=2, rng=make_rng(3))
    cost = budget.CostModel(small, large)
    return space, ms, ml, val, cost


def test_sweep_rows_and_purity(swept):
    space, ms, ml, val, cost = swept
    before = {k: v.copy() for k, v in list(ms.named_parameters()) + list(space.layer_tensors().items())}
    res = sweep(space, ms, ml, val, cost)
    after = dict(list(ms.named_parameters()) + list(space.layer_tensors().items()))
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert len(res.rows) == len(space)
    assert [r.flops for r in res.rows] == sorted(r.flops for r in res.rows)
    assert res.pareto_mask == _dominated_oracle(res.rows)


def test_sweep_threads_match_serial(swept):
    space, ms, ml, val, cost = swept
    a = sweep(space, ms, ml, val, cost, workers=1)
    b = sweep(space, ms, ml, val, cost, workers=3, batch_size=7)
    assert curve_csv(a) == curve_csv(b)


def test_csv_shape_and_byte_determinism(swept, tmp_path):
    space, ms, ml, val, cost = swept
    res = sweep(space, ms, ml, val, cost)
    text = curve_csv(res)
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == len(space) + 1
    csv_a, svg_a = emit_curve(res, tmp_path / "a")
    csv_b, _ = emit_curve(sweep(space, ms, ml, val, cost), tmp_path / "b")
    assert open(csv_a, "rb").read() == open(csv_b, "rb").read()
    root = ET.parse(svg_a).getroot()
    assert root.get("width") == "960" and root.get("height") == "540"
    assert "GFLOPs" in open(svg_a).read()


def test_scatter_and_histogram_are_valid_svg(swept):
    space, ms, ml, val, cost = swept
    ET.fromstring(scatter_svg(sweep(space, ms, ml, val, cost)))
    dist = budget.build_distribution(space, cost, budget.auto_step(space, cost))
    text = histogram_svg(dist)
    ET.fromstring(text)
    assert "probability" in text


def test_emit_curve_bad_directory(swept, tmp_path):
    space, ms, ml, val, cost = swept
    with pytest.raises(OSError):
        emit_curve(sweep(space, ms, ml, val, cost), tmp_path / "missing" / "x")
