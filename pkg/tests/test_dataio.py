import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snstitch.dataio import (
    IDX_IMAGES_MAGIC, Dataset, SynthTaskSpec, load_idx, make_synthetic, parse_idx, patchify,
    save_idx, unpatchify, write_idx,
)
from snstitch.errors import FormatError
from snstitch.linalg import make_rng


def test_zero_noise_tokens_equal_prototypes():
    spec = SynthTaskSpec(num_classes=4, samples_per_class=5, noise_std=0.0, seq_len=3, patch_dim=6)
    train, val = make_synthetic(spec, make_rng(0))
    for ds in (train, val):
        for x, y in zip(ds.x, ds.y):
            assert np.all(x == x[0])
    means = {c: train.x[train.y == c][0, 0] for c in range(4)}
    for a in range(4):
        for b in range(a + 1, 4):
            assert np.linalg.norm(means[a] - means[b]) == pytest.approx(spec.margin)


def test_synthetic_is_deterministic_and_balanced():
    spec = SynthTaskSpec()
    a, av = make_synthetic(spec, make_rng(3))
    b, bv = make_synthetic(spec, make_rng(3))
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(av.y, bv.y)
    assert len(a) + len(av) == spec.num_classes * spec.samples_per_class
    assert len(av) == 240
    assert a.x.shape[1:] == (spec.seq_len, spec.patch_dim)


def test_linear_probe_separates_margin_three_task():
    train, val = make_synthetic(SynthTaskSpec(), make_rng(1))
    feats = lambda d: np.c_[d.x.mean(axis=1), np.ones(len(d))]  # noqa: E731
    W, *_ = np.linalg.lstsq(feats(train), np.eye(train.num_classes)[train.y], rcond=None)
    acc = np.mean(np.argmax(feats(val) @ W, axis=1) == val.y)
    assert acc >= 0.99


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthTaskSpec(num_classes=20, patch_dim=16)
    with pytest.raises(ValueError):
        SynthTaskSpec(margin=0)
    with pytest.raises(ValueError):
        SynthTaskSpec(val_fraction=1.0)


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 1)), np.array([0, 3]), 3)


def _write_pair(tmp_path, n=5, h=28, w=28, seed=0):
    rng = make_rng(seed)
    images = rng.integers(0, 256, size=(n, h, w), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lbl.idx"
    write_idx(ip, images)
    write_idx(lp, labels)
    return ip, lp, images, labels


def test_idx_canonical_shape(tmp_path):
    ip, lp, images, labels = _write_pair(tmp_path)
    assert ip.stat().st_size == 16 + 5 * 28 * 28
    ds = load_idx(ip, lp, patch=4, num_classes=10)
    assert ds.x.shape == (5, 49, 16)
    assert ds.x.min() >= 0.0 and ds.x.max() <= 1.0
    np.testing.assert_array_equal(ds.y, labels)
    np.testing.assert_array_equal(ds.x[:, 0, :4] * 255, images[:, 0, :4])


def test_idx_wrong_magic(tmp_path):
    ip, lp, *_ = _write_pair(tmp_path)
    with pytest.raises(FormatError, match="offset 0"):
        load_idx(lp, ip)


def test_idx_empty_and_truncated(tmp_path):
    empty = tmp_path / "empty"
    empty.write_bytes(b"")
    with pytest.raises(FormatError):
        load_idx(empty, empty)
    ip, lp, *_ = _write_pair(tmp_path)
    raw = ip.read_bytes()
    for cut in (3, 10, len(raw) - 1):
        with pytest.raises(FormatError):
            parse_idx(raw[:cut], IDX_IMAGES_MAGIC)
    with pytest.raises(FormatError):
        parse_idx(raw + b"\x00", IDX_IMAGES_MAGIC)


def test_idx_label_count_mismatch(tmp_path):
    ip, _, _, _ = _write_pair(tmp_path)
    lp = tmp_path / "short.idx"
    write_idx(lp, np.zeros(4, dtype=np.uint8))
    with pytest.raises(FormatError):
        load_idx(ip, lp)


def test_idx_gzip_transparent(tmp_path):
    ip, lp, *_ = _write_pair(tmp_path)
    gi, gl = tmp_path / "img.gz", tmp_path / "lbl.gz"
    gi.write_bytes(gzip.compress(ip.read_bytes()))
    gl.write_bytes(gzip.compress(lp.read_bytes()))
    a, b = load_idx(ip, lp), load_idx(gi, gl)
    np.testing.assert_array_equal(a.x, b.x)
    bad = tmp_path / "bad.gz"
    bad.write_bytes(gzip.compress(ip.read_bytes())[:-6])
    with pytest.raises(FormatError):
        load_idx(bad, gl)


def test_idx_save_load_round_trip(tmp_path):
    ip, lp, *_ = _write_pair(tmp_path, n=3, h=8, w=12)
    ds = load_idx(ip, lp, patch=4, num_classes=10)
    save_idx(ds, tmp_path / "i2", tmp_path / "l2", 8, 12, patch=4)
    assert (tmp_path / "i2").read_bytes() == ip.read_bytes()
    assert (tmp_path / "l2").read_bytes() == lp.read_bytes()


@settings(max_examples=30, deadline=None)
@given(patch=st.sampled_from([1, 2, 4]), gh=st.integers(1, 4), gw=st.integers(1, 4))
def test_unpatchify_inverts_patchify(patch, gh, gw):
    h, w = gh * patch, gw * patch
    images = make_rng(gh * 7 + gw).normal(size=(2, h, w))
    tokens = patchify(images, patch)
    assert tokens.shape == (2, gh * gw, patch * patch)
    np.testing.assert_array_equal(unpatchify(tokens, h, w, patch), images)


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 5, 4)), 4)
