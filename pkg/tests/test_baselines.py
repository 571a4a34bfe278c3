import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lunet.baselines.classical import (
    FIXED,
    ClusterConfig,
    ThresholdConfig,
    disk,
    fcm_1d,
    fcm_memberships,
    fuzzy_cmeans_segment,
    kmeans_1d,
    kmeans_segment,
    otsu_from_histogram,
    threshold_segment,
)
from lunet.baselines.linknet import LinkNetConfig, LinkNetLite, build_linknet_lite
from lunet.errors import InvalidConfig, ShapeMismatch, StaleCache
from lunet.nn.gradcheck import check_network
from lunet.volume_io import SliceImage

from tests.oracles import fcm_loop, otsu_exhaustive

NO_MORPH = dict(median_kernel=1, morph_open_radius=0, morph_close_radius=0)


def img(a):
    return SliceImage(np.asarray(a, dtype=np.float32))


# ---------------------------------------------------------------- thresholding

def test_otsu_separates_zeros_from_ones():
    res = threshold_segment(img([[0, 0, 0, 1, 1]]), ThresholdConfig(**NO_MORPH))
    np.testing.assert_array_equal(res.mask.pixels, [[0, 0, 0, 1, 1]])
    # the oracle agrees on the level itself
    hist = np.zeros(256, np.int64)
    hist[0], hist[255] = 3, 2
    assert otsu_from_histogram(hist)[0] == otsu_exhaustive(hist)[0] == 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=256, max_size=256))
def test_otsu_matches_exhaustive(counts):
    hist = np.array(counts)
    t, score = otsu_from_histogram(hist)
    t_ref, score_ref = otsu_exhaustive(hist)
    assert t == t_ref
    assert score == max(score_ref, 0.0)


def test_otsu_ties_go_low():
    hist = np.zeros(256, np.int64)
    hist[10] = hist[20] = 5
    # every t in 10..19 gives the same split; the lowest wins
    assert otsu_from_histogram(hist)[0] == 10


def test_fixed_level_identity_on_binary():
    a = (np.random.default_rng(0).random((12, 12)) > 0.5).astype(np.float32)
    res = threshold_segment(img(a), ThresholdConfig(mode=FIXED, level=0.5, **NO_MORPH))
    np.testing.assert_array_equal(res.mask.pixels, a)


def test_constant_image_flags_and_returns_background():
    res = threshold_segment(img(np.full((8, 8), 0.4)))
    assert res.degenerate
    assert not res.mask.pixels.any()


def test_morphology_removes_speck_and_fills_hole():
    a = np.zeros((20, 20), np.float32)
    a[4:14, 4:14] = 1.0
    a[8, 8] = 0.0  # pinhole
    a[17, 17] = 1.0  # isolated speck
    res = threshold_segment(img(a), ThresholdConfig(mode=FIXED, level=0.5, median_kernel=1))
    expected = np.zeros_like(a)
    expected[4:14, 4:14] = 1.0
    # opening with the radius-1 disk rounds off the four corners
    expected[[4, 4, 13, 13], [4, 13, 4, 13]] = 0.0
    np.testing.assert_array_equal(res.mask.pixels, expected)


def test_disk_shape():
    np.testing.assert_array_equal(disk(1), [[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    assert disk(2).sum() == 13


def test_threshold_config_rejects_even_kernel():
    with pytest.raises(ValueError):
        threshold_segment(img(np.zeros((4, 4))), ThresholdConfig(median_kernel=2))


# ---------------------------------------------------------------- clustering

def test_kmeans_hand_example():
    centers, labels, history, _ = kmeans_1d([0.0, 0.1, 0.9, 1.0], ClusterConfig(k=2))
    np.testing.assert_allclose(np.sort(centers), [0.05, 0.95], atol=1e-12)
    res = kmeans_segment(img([[0.0, 0.1, 0.9, 1.0]]))
    np.testing.assert_array_equal(res.mask.pixels, [[0, 0, 1, 1]])


def test_kmeans_recovers_binary_mask():
    a = (np.random.default_rng(3).random((16, 16)) > 0.7).astype(np.float32)
    np.testing.assert_array_equal(kmeans_segment(img(a)).mask.pixels, a)
    np.testing.assert_array_equal(fuzzy_cmeans_segment(img(a)).mask.pixels, a)


def test_degenerate_clusters_merge():
    centers, labels, _, _ = kmeans_1d(np.full(10, 0.3), ClusterConfig(k=3))
    assert centers.size == 1 and not labels.any()
    res = kmeans_segment(img(np.full((4, 4), 0.3)))
    assert res.degenerate and not res.mask.pixels.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_cluster_objectives_non_increasing(seed, k):
    x = np.random.default_rng(seed).random(300)
    for fn in (kmeans_1d, fcm_1d):
        cfg = ClusterConfig(k=k, seed=seed)
        _, _, history, iters = fn(x, cfg)
        assert iters <= cfg.max_iters
        assert all(b <= a + 1e-12 * max(1.0, a) for a, b in zip(history, history[1:]))


def test_fcm_equidistant_half_half():
    u = fcm_memberships([0.5], [0.0, 1.0], 2.0)
    np.testing.assert_array_equal(u, [[0.5, 0.5]])


def test_fcm_coincident_pixel_full_membership():
    u = fcm_memberships([0.2, 0.7], [0.2, 0.9], 2.0)
    np.testing.assert_array_equal(u[0], [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.1, 4.0))
def test_fcm_memberships_sum_to_one(seed, m):
    rng = np.random.default_rng(seed)
    u = fcm_memberships(rng.random(50), rng.random(3), m)
    np.testing.assert_allclose(u.sum(axis=1), 1.0, atol=1e-9)


def test_fcm_matches_loop_oracle_and_kmeans_partition():
    x = [0.0, 0.1, 0.9, 1.0]
    centers, u, _, _ = fcm_1d(x, ClusterConfig(k=2, tol=1e-14, max_iters=500))
    ref_centers, ref_labels = fcm_loop(x, [0.0, 1.0])
    np.testing.assert_allclose(np.sort(centers), np.sort(ref_centers), atol=1e-9)
    order = np.argsort(centers)
    labels = np.argsort(order)[np.argmax(u, axis=1)]
    np.testing.assert_array_equal(labels, ref_labels)
    assert list(ref_labels) == [0, 0, 1, 1]
    np.testing.assert_array_equal(fuzzy_cmeans_segment(img([x])).mask.pixels, [[0, 0, 1, 1]])


def test_cluster_config_guards():
    with pytest.raises(ValueError):
        ClusterConfig(k=1).validate()
    with pytest.raises(ValueError):
        ClusterConfig(m=1.0).validate()


def test_classical_deterministic_and_binary():
    rng = np.random.default_rng(7)
    a = rng.random((16, 16)).astype(np.float32)
    for fn in (threshold_segment, kmeans_segment, fuzzy_cmeans_segment):
        m1, m2 = fn(img(a)).mask.pixels, fn(img(a)).mask.pixels
        np.testing.assert_array_equal(m1, m2)
        assert m1.shape == a.shape and set(np.unique(m1)) <= {0.0, 1.0}


# ---------------------------------------------------------------- LinkNet-lite

def test_linknet_output_shape():
    m = build_linknet_lite(LinkNetConfig(base_filters=4, input_hw=(32, 32)))
    out = m.forward(np.random.default_rng(0).random((2, 1, 32, 32)))
    assert out.shape == (2, 1, 32, 32)
    assert np.all((out > 0) & (out < 1))


def test_linknet_rejects_bad_input():
    with pytest.raises(InvalidConfig):
        LinkNetConfig(input_hw=(40, 40)).validate()
    m = LinkNetLite(LinkNetConfig(base_filters=2, input_hw=(16, 16)))
    with pytest.raises(ShapeMismatch):
        m.forward(np.zeros((1, 1, 24, 24)))
    with pytest.raises(StaleCache):
        m.backward(np.zeros((1, 1, 16, 16)))


def test_linknet_has_projection_only_where_channels_change():
    m = LinkNetLite(LinkNetConfig(base_filters=2, depth=2, input_hw=(8, 8)))
    names = [n for n, _ in m.named_parameters()]
    assert any(n.startswith("enc0.proj") for n in names)
    assert any(n.startswith("enc1.proj") for n in names)


@pytest.mark.parametrize("seed", range(20))
def test_linknet_tiny_gradcheck(seed):
    m = LinkNetLite(LinkNetConfig(base_filters=2, depth=2, input_hw=(8, 8)), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    assert check_network(m, rng.standard_normal((2, 1, 8, 8)), rng) <= 1e-5
