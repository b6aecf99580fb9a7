import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from igmseg import affinity
from igmseg.affinity import (DEFAULT_NEIGHBORHOOD, AffinityField, SweepConfig, edge_slices,
                             patch_affinities, patch_origins, read_field, sweep, write_field)
from igmseg.grid import Offset
from igmseg.splitter import SegmentNode, SegmentTree, SplitConfig

from helpers import two_instances

CHEAP = SplitConfig(iterations=4, d0=3, max_depth=2)


def tree_from_labels(labels, bounds=(0, 0)):
    root = SegmentNode(np.ones(labels.shape, dtype=bool))
    root.children = tuple(SegmentNode(labels == v) for v in np.unique(labels))
    if len(root.children) == 1:
        root.children = ()
    return SegmentTree((bounds[0], bounds[1]) + labels.shape, root)


def brute_affinities(labels, offsets):
    h, w = labels.shape
    aff = np.zeros((len(offsets), h, w), dtype=np.uint8)
    valid = np.zeros(aff.shape, dtype=bool)
    for k, (dy, dx) in enumerate(offsets):
        for y in range(h):
            for x in range(w):
                if 0 <= y + dy < h and 0 <= x + dx < w:
                    valid[k, y, x] = True
                    aff[k, y, x] = labels[y, x] == labels[y + dy, x + dx]
    return aff, valid


def test_neighbourhood_has_twelve_offsets():
    nbhd = DEFAULT_NEIGHBORHOOD
    assert len(nbhd.offsets) == 12
    assert nbhd.n_attractive == 2
    assert nbhd.max_extent == 27


def test_single_leaf_all_ones():
    aff, valid = patch_affinities(tree_from_labels(np.zeros((30, 30), dtype=int)))
    assert valid.any()
    assert np.all(aff[valid] == 1)
    assert np.all(aff[~valid] == 0)


def test_vertical_two_leaf_split():
    labels = np.zeros((30, 30), dtype=int)
    labels[:, 15:] = 1
    aff, valid = patch_affinities(tree_from_labels(labels))
    # offset (0,-1): pixel x pairs with x-1; crossing at x == 15
    k = DEFAULT_NEIGHBORHOOD.offsets.index(Offset(0, -1))
    assert np.all(aff[k][:, 15] == 0)
    assert np.all(aff[k][:, 1:15] == 1) and np.all(aff[k][:, 16:] == 1)
    k = DEFAULT_NEIGHBORHOOD.offsets.index(Offset(-1, 0))
    assert np.all(aff[k][valid[k]] == 1)


def test_three_leaf_matches_direct_recomputation():
    labels = np.zeros((32, 32), dtype=int)
    labels[:, 12:] = 1
    labels[20:, 12:] = 2
    aff, valid = patch_affinities(tree_from_labels(labels))
    ref_aff, ref_valid = brute_affinities(labels, DEFAULT_NEIGHBORHOOD.offsets)
    np.testing.assert_array_equal(valid, ref_valid)
    np.testing.assert_array_equal(aff, ref_aff)


@given(dy=st.integers(-30, 30), dx=st.integers(-30, 30), h=st.integers(1, 40), w=st.integers(1, 40))
def test_edge_slices_pair_pixels_at_offset(dy, dx, h, w):
    idx = np.arange(h * w).reshape(h, w)
    src, dst = edge_slices((dy, dx), (h, w))
    a, b = idx[src], idx[dst]
    assert a.shape == b.shape
    if a.size:
        np.testing.assert_array_equal(b // w - a // w, dy)
        np.testing.assert_array_equal(b % w - a % w, dx)
    assert a.size == max(h - abs(dy), 0) * max(w - abs(dx), 0)


def test_patch_origins_clamp_last_patch():
    assert patch_origins(96, 48, 24) == [0, 24, 48]
    assert patch_origins(100, 48, 24) == [0, 24, 48, 52]
    with pytest.raises(ValueError):
        patch_origins(40, 48, 24)


def test_patch_size_must_exceed_offsets():
    with pytest.raises(ValueError, match="offset exceeds patch"):
        SweepConfig(patch_size=27, stride=10)
    SweepConfig(patch_size=28, stride=14)
    with pytest.raises(ValueError):
        SweepConfig(patch_size=48, stride=49)


@pytest.fixture(scope="module")
def small_sample():
    s = two_instances(3, size=56, radius=(8, 11))
    assert s is not None
    return s


def test_non_overlapping_sweep_counts_one(small_sample):
    fld = sweep(small_sample.image, small_sample.oracle,
                SweepConfig(patch_size=28, stride=28, split=CHEAP))
    defined = fld.counts > 0
    assert fld.counts.max() == 1
    assert set(np.unique(fld.weights[defined]).tolist()) <= {0.0, 1.0}
    assert np.all(np.isnan(fld.weights[~defined]))


def test_disagreeing_patches_average_to_half(monkeypatch):
    def fake_split(model, image, cfg, bounds=(0, 0, None, None)):
        labels = np.zeros(image.shape, dtype=int)
        if bounds[1] == 24:
            labels[:, 12:] = 1
        return tree_from_labels(labels, bounds[:2])

    monkeypatch.setattr(affinity, "hierarchical_split", fake_split)
    image = np.zeros((48, 72))
    fld = sweep(image, _NullModel(), SweepConfig(patch_size=48, stride=24))
    k = DEFAULT_NEIGHBORHOOD.offsets.index(Offset(0, -1))
    assert fld.counts[k][10, 36] == 2
    assert fld.weights[k][10, 36] == 0.5
    assert fld.weights[k][10, 30] == 1.0


class _NullModel:
    def crop(self, y0, x0, height, width):
        return self


def test_weight_times_count_is_integer(small_sample):
    fld = sweep(small_sample.image, small_sample.oracle, SweepConfig(patch_size=28, stride=7, split=CHEAP))
    defined = fld.counts > 0
    num = fld.weights[defined] * fld.counts[defined]
    np.testing.assert_allclose(num, np.round(num), atol=1e-9)
    assert np.all((fld.weights[defined] >= 0) & (fld.weights[defined] <= 1))


def test_removing_a_patch_is_local(small_sample):
    cfg = SweepConfig(patch_size=28, stride=14, split=CHEAP)
    full = sweep(small_sample.image, small_sample.oracle, cfg)
    y0, x0 = 14, 28
    part = sweep(small_sample.image, small_sample.oracle, cfg, skip=[(y0, x0)])
    inside = np.zeros(full.counts.shape, dtype=bool)
    for k, off in enumerate(full.offsets):
        win = np.zeros(full.shape, dtype=bool)
        win[y0:y0 + 28, x0:x0 + 28] = True
        src, dst = edge_slices(off, full.shape)
        inside[k][src] = win[src] & win[dst]
    np.testing.assert_array_equal(full.counts[~inside], part.counts[~inside])
    np.testing.assert_array_equal(full.weights[~inside], part.weights[~inside])
    assert np.all(part.counts[inside] == full.counts[inside] - 1)


def test_sweep_deterministic_across_workers(small_sample):
    cfg = SweepConfig(patch_size=28, stride=14, split=CHEAP, seed=5)
    a = sweep(small_sample.image, small_sample.oracle, cfg)
    b = sweep(small_sample.image, small_sample.oracle, cfg, workers=2)
    np.testing.assert_array_equal(a.counts, b.counts)
    assert a.weights.tobytes() == b.weights.tobytes()


def test_iaf1_layout_and_round_trip(tmp_path, rng):
    offsets = DEFAULT_NEIGHBORHOOD.offsets
    counts = rng.integers(0, 4, size=(12, 5, 7))
    positive = np.minimum(rng.integers(0, 4, size=counts.shape), counts)
    fld = AffinityField.from_sums(offsets, positive, counts)
    path = tmp_path / "f.iaf"
    write_field(path, fld)
    data = path.read_bytes()
    assert data[:4] == b"IAF1"
    assert struct.unpack_from("<III", data, 4) == (5, 7, 12)
    assert struct.unpack_from("<ii", data, 16) == (-1, 0)
    assert len(data) == 16 + 12 * 8 + 12 * 35 * 8
    back = read_field(path)
    assert back.offsets == fld.offsets
    np.testing.assert_array_equal(back.counts, fld.counts)
    np.testing.assert_array_equal(back.weights, fld.weights.astype(np.float32).astype(np.float64))
    write_field(tmp_path / "g.iaf", back)
    assert (tmp_path / "g.iaf").read_bytes() == data


def test_read_field_rejects_bad_files(tmp_path):
    (tmp_path / "a").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError, match="not an IAF1"):
        read_field(tmp_path / "a")
    (tmp_path / "b").write_bytes(b"IAF1" + struct.pack("<III", 2, 2, 1) + struct.pack("<ii", 0, 1))
    with pytest.raises(ValueError, match="expected"):
        read_field(tmp_path / "b")


def _instance_edge_means(sample, fld):
    within, across = [], []
    for k in range(DEFAULT_NEIGHBORHOOD.n_attractive):
        src, dst = edge_slices(fld.offsets[k], fld.shape)
        a, b = sample.labels[src], sample.labels[dst]
        w = fld.weights[k][src]
        within.append(w[(a == b) & (a > 0)])
        across.append(w[(a != b) & (a > 0) & (b > 0)])
    return np.concatenate(within).mean(), np.concatenate(across).mean()


@pytest.fixture(scope="module")
def two_instance_affinities():
    stats, seed = [], 0
    while len(stats) < 10:
        seed += 1
        s = two_instances(seed, size=72)
        if s is None:
            continue
        fld = sweep(s.image, s.oracle, SweepConfig(seed=seed))
        stats.append(_instance_edge_means(s, fld))
    return np.array(stats)


def test_two_instances_within_affinity_high(two_instance_affinities):
    assert two_instance_affinities[:, 0].mean() >= 0.8


@pytest.mark.xfail(strict=True, reason="generator contacts are 3-6 edge point contacts; "
                   "measured cross-boundary mean is about 0.42 (see decisions ledger)")
def test_two_instances_across_affinity_low(two_instance_affinities):
    assert two_instance_affinities[:, 1].mean() <= 0.2
