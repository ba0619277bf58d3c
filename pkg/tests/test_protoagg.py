import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskseg import cwmim, protoagg
from maskseg import tensorkit as tk
from maskseg.protoagg import FeatureStream, PrototypeMemory, RegionSets


def test_region_sets_degenerate():
    maps = cwmim.build_class_maps(np.random.default_rng(0).integers(0, 3, size=(8, 8)), 2, 2, 3)
    r = protoagg.compute_region_sets(maps, np.ones((8, 8), bool))
    assert not any(r.masked_set(c).any() for c in range(3))
    r = protoagg.compute_region_sets(maps, np.zeros((8, 8), bool))
    assert not any(r.visible_set(c).any() for c in range(3))


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_region_sets_partition(seed):
    rng = np.random.default_rng(seed)
    maps = cwmim.build_class_maps(rng.integers(0, 3, size=(2, 12, 12)), 3, 3, 3)
    ignore = rng.random((2, 12, 12)) < 0.2
    r = protoagg.compute_region_sets(maps, rng.random((2, 12, 12)) < 0.5, ignore_map=ignore)
    for c in range(3):
        assert not (r.visible_set(c) & r.masked_set(c)).any()
        assert r.visible_set(c).sum() + r.masked_set(c).sum() == ((maps.labels == c) & r.available).sum()


def test_prototype_examples():
    fea = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    both = np.ones((1, 2), bool)
    np.testing.assert_allclose(protoagg.compute_prototype(fea, np.array([[1.0, 3.0]]), both), [0.25, 0.75])
    np.testing.assert_allclose(protoagg.compute_prototype(fea, np.array([[2.0, 2.0]]), both), [0.5, 0.5])
    one = np.array([[False, True]])
    np.testing.assert_array_equal(protoagg.compute_prototype(fea, np.array([[1.0, 5.0]]), one), [0.0, 1.0])
    assert protoagg.compute_prototype(fea, np.ones((1, 2)), np.zeros((1, 2), bool)) is None


def test_ema_one_step_and_degenerate():
    m = PrototypeMemory(2, 2, 0.99, dtype=np.float64)
    protoagg.ema_update(m, 0, np.array([1.0, 0.0]))
    np.testing.assert_allclose(m.vectors[0], [0.01, 0.0], rtol=1e-15)
    assert m.initialized[0] and not m.initialized[1]
    m0 = PrototypeMemory(2, 2, 0.0, dtype=np.float64)
    protoagg.ema_update(m0, 1, np.array([0.3, -2.0]))
    np.testing.assert_array_equal(m0.vectors[1], [0.3, -2.0])


def test_ema_closed_form_ten_updates():
    v = np.array([0.7, -1.3, 2.2])
    m = PrototypeMemory(1, 3, 0.99, dtype=np.float64)
    for _ in range(10):
        protoagg.ema_update(m, 0, v)
    assert np.abs(m.vectors[0] - (1 - 0.99 ** 10) * v).max() < 1e-12


@given(st.integers(0, 10_000), st.floats(0.0, 0.999), st.integers(1, 30))
@settings(max_examples=50, deadline=None)
def test_ema_trajectory_closed_form(seed, alpha, steps):
    rng = np.random.default_rng(seed)
    v0 = rng.normal(size=3)
    vs = rng.normal(size=(steps, 3))
    m = PrototypeMemory(1, 3, alpha, dtype=np.float64, vectors=v0[None].copy())
    for v in vs:
        protoagg.ema_update(m, 0, v)
    t = steps
    expected = alpha ** t * v0 + (1 - alpha) * sum(alpha ** (t - k) * vs[k - 1] for k in range(1, t + 1))
    assert np.abs(m.vectors[0] - expected).max() < 1e-12


def test_ema_rejects_non_finite():
    with pytest.raises(ValueError):
        protoagg.ema_update(PrototypeMemory(1, 2), 0, np.array([np.nan, 0.0]))


def test_cos_loss_values():
    v = np.array([1.0, 0.0])
    assert float(protoagg.cos_loss(tk.Tensor(np.array([[2.0, 0.0]])), v).data[0]) == pytest.approx(0.0, abs=1e-15)
    assert float(protoagg.cos_loss(tk.Tensor(np.array([[0.0, 3.0]])), v).data[0]) == pytest.approx(0.1, rel=1e-15)
    assert float(protoagg.cos_loss(tk.Tensor(np.array([[-1.0, 0.0]])), v).data[0]) == pytest.approx(0.2, rel=1e-15)


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
@settings(max_examples=50, deadline=None)
def test_cos_loss_scale_invariant_and_bounded(seed, lam):
    rng = np.random.default_rng(seed)
    z, v = rng.normal(size=(4, 5)), rng.normal(size=5)
    a = protoagg.cos_loss(tk.Tensor(z), v).data
    b = protoagg.cos_loss(tk.Tensor(lam * z), v).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
    assert (a >= -1e-15).all() and (a <= 0.2 + 1e-15).all()


def _two_position_case(conf):
    # cosines chosen so per-position losses are 0.1 (orthogonal) and 0.2 (antiparallel)
    fea = tk.Tensor(np.array([[[0.0, 1.0], [-1.0, 0.0]]]))
    return protoagg.aggregation_loss(fea, np.array([conf]), np.array([1.0, 0.0]), np.ones((1, 2), bool), 10.0)


def test_aggregation_weighted_means():
    assert float(_two_position_case([1.0, 1.0]).data) == pytest.approx(0.15, rel=1e-14)
    assert float(_two_position_case([3.0, 1.0]).data) == pytest.approx(0.125, rel=1e-14)
    fea = tk.Tensor(np.array([[[2.0, 0.0], [5.0, 0.0]]]))
    assert float(protoagg.aggregation_loss(fea, np.ones((1, 2)), np.array([1.0, 0.0]),
                                           np.ones((1, 2), bool)).data) == pytest.approx(0.0, abs=1e-15)


def _stream(fea, labels, visible, conf=None, avail=None):
    avail = np.ones(labels.shape, bool) if avail is None else avail
    conf = np.ones(labels.shape) if conf is None else conf
    return FeatureStream(tk.Tensor(fea, requires_grad=True), RegionSets(labels, visible, avail, 2), conf)


def test_feature_loss_no_masked_positions():
    fea = np.random.default_rng(1).normal(size=(1, 2, 2, 3))
    s = _stream(fea, np.zeros((1, 2, 2), int), np.ones((1, 2, 2), bool))
    mem = PrototypeMemory(2, 3, dtype=np.float64, vectors=np.ones((2, 3)), initialized=np.ones(2, bool))
    assert float(protoagg.mim_feature_loss([s], mem, 0.05).data) == 0.0


def test_feature_loss_one_active_class():
    fea = np.array([[[[0.0, 1.0], [-1.0, 0.0]]]])  # 1 x 1 x 2 x 2
    labels = np.array([[[1, 1]]])
    s = _stream(fea, labels, np.zeros((1, 1, 2), bool), conf=np.array([[[3.0, 1.0]]]))
    mem = PrototypeMemory(2, 2, dtype=np.float64, vectors=np.array([[0.0, 1.0], [1.0, 0.0]]),
                          initialized=np.ones(2, bool))
    loss = protoagg.mim_feature_loss([s], mem, 0.05, 10.0)
    assert float(loss.data) == pytest.approx(0.05 * 0.125, rel=1e-13)
    # without confidence weighting the mean is plain
    loss = protoagg.mim_feature_loss([s], mem, 0.05, 10.0, use_conf=False)
    assert float(loss.data) == pytest.approx(0.05 * 0.15, rel=1e-13)


def test_feature_loss_class_average_over_streams():
    # class 0 loss 0.2 in stream A, class 1 loss 0.1 in stream B -> mean over classes 0.15
    a = _stream(np.array([[[[-1.0, 0.0]]]]), np.array([[[0]]]), np.zeros((1, 1, 1), bool))
    b = _stream(np.array([[[[0.0, 1.0]]]]), np.array([[[1]]]), np.zeros((1, 1, 1), bool))
    mem = PrototypeMemory(2, 2, dtype=np.float64, vectors=np.array([[1.0, 0.0], [1.0, 0.0]]),
                          initialized=np.ones(2, bool))
    assert float(protoagg.mim_feature_loss([a, b], mem, 1.0, 10.0).data) == pytest.approx(0.15, rel=1e-13)
    # an uninitialized prototype drops its class from both the sum and the count
    mem.initialized[1] = False
    assert float(protoagg.mim_feature_loss([a, b], mem, 1.0, 10.0).data) == pytest.approx(0.2, rel=1e-13)


def test_memory_update_uses_visible_labeled_features_only():
    rng = np.random.default_rng(2)
    fea = rng.normal(size=(1, 2, 2, 3))
    labels = np.array([[[0, 0], [1, 1]]])
    visible = np.array([[[True, False], [False, False]]])
    regions = RegionSets(labels, visible, np.ones((1, 2, 2), bool), 2)
    mem = PrototypeMemory(2, 3, 0.0, dtype=np.float64)
    updated = protoagg.update_memory(mem, fea, np.ones((1, 2, 2)), regions)
    assert updated == [0]
    np.testing.assert_array_equal(mem.vectors[0], fea[0, 0, 0])
    assert not mem.initialized[1]


def test_no_gradient_through_memory():
    rng = np.random.default_rng(3)
    s = _stream(rng.normal(size=(1, 2, 2, 3)), np.array([[[0, 1], [1, 0]]]), np.array([[[True, True], [False, False]]]))
    mem = PrototypeMemory(2, 3, 0.5, dtype=np.float64)
    protoagg.update_memory(mem, s.fea.data, s.conf, s.regions)
    loss = protoagg.mim_feature_loss([s], mem, 0.05)
    tk.backward(loss)
    g = s.fea.grad
    # the gradient equals that of the loss with the prototypes taken as constants
    frozen = mem.copy()
    s2 = _stream(s.fea.data.copy(), s.regions.labels, s.regions.visible)
    tk.backward(protoagg.mim_feature_loss([s2], frozen, 0.05))
    np.testing.assert_array_equal(g, s2.fea.grad)
    assert not g[s.regions.visible].any()  # visible positions are not aggregated
