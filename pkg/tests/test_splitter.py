import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from igmseg.model import LocalStatsModel, OracleBlobModel, fit_local_stats
from igmseg.splitter import (SplitConfig, band_radius, evolve_mask, hierarchical_split,
                             initial_split, smooth_errors)
from igmseg.synth import GenConfig, _segment_law, generate


def sample_from_labels(labels, seed, cfg=GenConfig()):
    """Image drawn from the generator's segment laws for a given label map."""
    rng = np.random.default_rng(seed)
    laws = {0: _segment_law(cfg, rng, cfg.background_mean, cfg.background_variance)}
    for u in np.unique(labels[labels > 0]):
        laws[int(u)] = _segment_law(cfg, rng, cfg.base_mean, cfg.base_variance)
    image = np.zeros(labels.shape)
    rows, cols = np.indices(labels.shape)
    for u, law in laws.items():
        sel = labels == u
        if sel.any():
            w = rng.normal(law.prior_mean, np.sqrt(law.prior_variance))
            image[sel] = law.features(rows[sel], cols[sel]) @ w
    image += rng.normal(0, np.sqrt(cfg.noise_variance), size=image.shape)
    laws = {u: law for u, law in laws.items() if (labels == u).any()}
    return image, OracleBlobModel(labels, laws, cfg.noise_variance)


def boundary(mask):
    inner = mask & ~ndimage.binary_erosion(mask, border_value=1)
    outer = ~mask & ~ndimage.binary_erosion(~mask, border_value=1)
    return inner | outer


def test_schedule():
    cfg = SplitConfig(iterations=20, d0=8)
    ds = [band_radius(t, cfg) for t in range(20)]
    assert ds[:10] == [8, 1] * 5
    assert all(d == 1 for d in ds[1::2])
    assert ds[10] == 8 and ds[18] == pytest.approx(1 + 7 / 9)
    even = ds[10::2]
    assert all(a > b for a, b in zip(even, even[1:]))
    assert band_radius(19, cfg) == 1
    fixed = SplitConfig(d0=3, schedule=False)
    assert {band_radius(t, fixed) for t in range(20)} == {3.0}


def test_config_validation():
    with pytest.raises(ValueError):
        SplitConfig(iterations=0)
    with pytest.raises(ValueError):
        SplitConfig(d0=0.5)
    assert SplitConfig().smoothing_sigmas == (0.1, 1.0, 5.0, 10.0)


def test_initial_split_examples():
    left = initial_split((4, 4), orientation="vertical")
    assert left[:, :2].all() and not left[:, 2:].any()
    top = initial_split((5, 4), orientation="horizontal")
    assert top[:3].all() and not top[3:].any()
    assert np.array_equal(initial_split((9, 7), seed=5), initial_split((9, 7), seed=5))
    with pytest.raises(ValueError):
        initial_split((1, 5))


@given(st.integers(2, 30), st.integers(2, 30), st.integers(0, 1000))
def test_initial_split_halves(h, w, seed):
    m = initial_split((h, w), seed=seed)
    vertical = m[:, 0].all() and not m[:, -1].any()
    horizontal = m[0].all() and not m[-1].any()
    assert vertical or horizontal
    axis_len = w if vertical else h
    assert 0 <= 2 * m.sum() // (h if vertical else w) - axis_len <= 1


def test_initial_split_region():
    region = np.zeros((10, 10), bool)
    region[2:5, 3:9] = True
    m = initial_split((10, 10), orientation="vertical", region=region)
    assert not (m & ~region).any()
    assert m.sum() == 9 and (region & ~m).sum() == 9
    single_col = np.zeros((10, 10), bool)
    single_col[:, 4] = True
    m = initial_split((10, 10), orientation="vertical", region=single_col)
    assert m.sum() == 5  # falls back to the horizontal cut
    dot = np.zeros((10, 10), bool)
    dot[3, 3] = True
    assert initial_split((10, 10), region=dot) is None


def test_normalised_smoothing_preserves_constants(rng):
    support = rng.uniform(size=(20, 20)) < 0.3
    errors = np.where(support, 2.5, 0.0)
    out = smooth_errors(errors, (0.1, 1.0, 5.0, 10.0), support)
    assert np.allclose(out[support], 2.5 * 5, rtol=1e-12)
    plain = smooth_errors(errors, (1.0,))
    assert np.allclose(plain, errors + ndimage.gaussian_filter(errors, 1.0, mode="constant",
                                                               truncate=4.0))


def test_constant_image_trace_zero():
    image = np.full((16, 16), 0.5)
    with pytest.warns(RuntimeWarning):
        model = fit_local_stats([image], (1.0,))
    mask0 = initial_split(image.shape, orientation="vertical")
    _, trace = evolve_mask(model, image, mask0, SplitConfig(iterations=8, d0=3))
    assert max(abs(v) for v in trace) <= 1e-10


def test_evolve_rejects_trivial_initial_mask():
    model = LocalStatsModel(1.0)
    with pytest.raises(ValueError):
        evolve_mask(model, np.zeros((4, 4)), np.ones((4, 4), bool), SplitConfig())


def test_recovers_horizontal_instance_boundary():
    hits = total = 0
    h, w = 32, 48
    rows, cols = np.indices((h, w))
    for seed in range(20):
        rng = np.random.default_rng(seed)
        shift = rng.uniform(-8, 8)
        phase = rng.uniform(0, 2 * np.pi)
        labels = np.where(cols < w / 2 + shift + 3 * np.sin(rows / 5 + phase), 1, 2)
        image, oracle = sample_from_labels(labels, seed)
        mask0 = initial_split((h, w), orientation="vertical")
        mask, _ = evolve_mask(oracle, image, mask0, SplitConfig())
        truth = boundary(labels == 1)
        found = ndimage.binary_dilation(boundary(mask), np.ones((3, 3), bool))
        hits += (truth & found).sum()
        total += truth.sum()
    assert hits / total >= 0.9


@pytest.mark.parametrize("monotone", [True])
@given(seed=st.integers(0, 10 ** 6), d=st.sampled_from([1.0, 2.0, 3.0]))
@settings(max_examples=25)
def test_monotone_option_descends(monotone, seed, d):
    s = generate(GenConfig(height=24, width=24, radius=(5, 8), seed=seed))
    cfg = SplitConfig(iterations=8, d0=d, smoothing_sigmas=(), schedule=False, monotone=monotone)
    _, trace = evolve_mask(s.oracle, s.image, initial_split((24, 24), seed=seed), cfg)
    assert all(b <= a for a, b in zip(trace, trace[1:]))


@given(st.integers(0, 10 ** 6))
@settings(max_examples=20)
def test_complement_invariance(seed):
    rng = np.random.default_rng(seed)
    image = rng.uniform(size=(16, 16))
    model = LocalStatsModel(1.0, 0.5, 0.08, 5e-3)
    mask0 = initial_split((16, 16), seed=seed)
    cfg = SplitConfig(iterations=6, d0=3)
    a, ta = evolve_mask(model, image, mask0, cfg)
    b, tb = evolve_mask(model, image, ~mask0, cfg)
    assert np.array_equal(a, ~b)
    assert ta == tb


def leaf_partition_ok(tree):
    leaves = [leaf.mask for leaf in tree.leaves()]
    cover = np.sum(leaves, axis=0)
    return np.all(cover == 1)


def test_single_segment_patch_is_one_leaf():
    ones = 0
    labels = np.ones((32, 32), dtype=int)
    for seed in range(20):
        image, oracle = sample_from_labels(labels, seed)
        tree = hierarchical_split(oracle, image, SplitConfig(seed=seed))
        assert leaf_partition_ok(tree)
        ones += len(tree.leaves()) == 1
    assert ones >= 16


def test_three_instances_get_distinct_leaves():
    good = tried = 0
    seed = 0
    while tried < 20:
        s = generate(GenConfig(height=48, width=48, instances=(3, 3), radius=(8, 11),
                               touching_probability=1.0, seed=seed))
        seed += 1
        if s.placed != 3:
            continue
        tried += 1
        tree = hierarchical_split(s.oracle, s.image, SplitConfig(seed=seed))
        assert leaf_partition_ok(tree)
        leaf_of = tree.leaf_labels()
        owners = []
        for u in (1, 2, 3):
            ids, counts = np.unique(leaf_of[s.labels == u], return_counts=True)
            k = np.argmax(counts)
            owners.append(ids[k] if 2 * counts[k] > counts.sum() else -u)
        good += len(tree.leaves()) >= 3 and len(set(owners)) == 3 and min(owners) > 0
    assert good >= 16


def test_max_depth_zero_single_leaf():
    s = generate(GenConfig(height=32, width=32, seed=1))
    tree = hierarchical_split(s.oracle, s.image, SplitConfig(max_depth=0))
    assert len(tree.leaves()) == 1 and tree.depth() == 0


def test_hierarchy_deterministic():
    s = generate(GenConfig(height=32, width=32, seed=2))
    cfg = SplitConfig(seed=9)
    a = hierarchical_split(s.oracle, s.image, cfg).leaf_labels()
    b = hierarchical_split(s.oracle, s.image, cfg).leaf_labels()
    assert np.array_equal(a, b)
