import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskseg import cwmim, nets
from maskseg import tensorkit as tk


def params(head_kernel=3, c=3, seed=0):
    cfg = nets.NetConfig(num_classes=c, enc_channels=(4, 6), dec_channels=6, trunk_dim=5, head_kernel=head_kernel)
    return nets.init_params(cfg, seed, dtype=np.float64)


def dilate(mask):
    """One-pixel 8-neighbour dilation of a bool map (..., H, W)."""
    out = mask.copy()
    h, w = mask.shape[-2:]
    pad = np.zeros(mask.shape[:-2] + (h + 2, w + 2), bool)
    pad[..., 1:-1, 1:-1] = mask
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out |= pad[..., 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    return out


def test_single_class_maps():
    m = cwmim.build_class_maps(np.full((8, 8), 2), 2, 2, 3)
    assert m.plane(2).all() and not m.plane(0).any() and not m.plane(1).any()


def test_same_size_maps_are_label_planes():
    y = np.array([[0, 0], [1, 1]])
    m = cwmim.build_class_maps(y, 2, 2, 2)
    np.testing.assert_array_equal(m.plane(0)[..., 0], y == 0)
    np.testing.assert_array_equal(m.plane(1)[..., 0], y == 1)


def test_class_maps_validate_range():
    with pytest.raises(ValueError):
        cwmim.build_class_maps(np.full((4, 4), 3), 1, 1, 3)


def test_grouping_example():
    a, b, c, d = 1.5, -2.0, 3.0, 0.25
    fea = tk.Tensor(np.array([[[a], [b]], [[c], [d]]]))
    maps = cwmim.build_class_maps(np.array([[0, 0], [1, 1]]), 2, 2, 2)
    f0, f1 = cwmim.group_features(fea, maps)
    np.testing.assert_array_equal(f0.data[..., 0], [[a, b], [0, 0]])
    np.testing.assert_array_equal(f1.data[..., 0], [[0, 0], [c, d]])


def partition_holds(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 6))
    n, h, w, dd = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
    fea = tk.Tensor(rng.normal(size=(n, h, w, dd)))
    y = rng.integers(0, c, size=(n, 4 * h, 4 * w))
    maps = cwmim.build_class_maps(y, h, w, c)
    groups = cwmim.group_features(fea, maps)
    total = groups[0].data.copy()
    for g in groups[1:]:
        total = total + g.data
    supports = [np.any(g.data != 0, axis=-1) for g in groups]
    planes = [maps.plane(k)[..., 0] for k in range(c)]
    exact = np.array_equal(total, fea.data)
    disjoint = all(not (planes[i] & planes[j]).any() for i in range(c) for j in range(i + 1, c))
    covering = np.array_equal(np.sum(planes, axis=0), np.ones_like(planes[0], dtype=int))
    inside = all(not supports[k][~planes[k]].any() for k in range(c))
    return exact and disjoint and covering and inside


def test_partition_100_draws():
    assert all(partition_holds(s) for s in range(100))


def test_reconstruct_zero_and_single_class():
    p = params()
    zeros = [tk.Tensor(np.zeros((2, 2, 5))) for _ in range(3)]
    assert not cwmim.reconstruct(p, zeros).data.any()
    fk = tk.Tensor(np.random.default_rng(1).normal(size=(2, 2, 5)))
    only = [zeros[0], fk, zeros[2]]
    np.testing.assert_array_equal(cwmim.reconstruct(p, only).data, nets.head_apply(p, 1, fk).data)


def _routing_grad(p, fea_np, y, k, restrict_output):
    maps = cwmim.build_class_maps(y, fea_np.shape[-3], fea_np.shape[-2], p.config.num_classes)
    groups = cwmim.group_features(tk.Tensor(fea_np), maps)
    fk = tk.Tensor(groups[k].data, requires_grad=True)  # grouped input as its own leaf
    rk = nets.head_apply(p, k, fk, upsample=False)
    w = np.random.default_rng(9).normal(size=rk.shape)
    if restrict_output:
        w = w * maps.plane(k)
    tk.backward(tk.sum(tk.mul_const(rk, w)))
    # gradient with respect to fea through the grouping
    fea2 = tk.Tensor(fea_np, requires_grad=True)
    rk2 = nets.head_apply(p, k, cwmim.group_features(fea2, maps)[k], upsample=False)
    tk.backward(tk.sum(tk.mul_const(rk2, w)))
    return fea2.grad, fk.grad, maps.plane(k)[..., 0]


@pytest.mark.parametrize("seed", range(5))
def test_gradient_routing_1x1(seed):
    rng = np.random.default_rng(seed)
    p = params(head_kernel=1, seed=seed)
    y = rng.integers(0, 3, size=(2, 24, 24))
    g_fea, _, support = _routing_grad(p, rng.normal(size=(2, 6, 6, 5)), y, 1, False)
    assert not g_fea[~support].any()
    # penalizing only class-1 outputs, a 1x1 head never looks sideways
    _, g_fk, support = _routing_grad(p, rng.normal(size=(2, 6, 6, 5)), y, 1, True)
    assert not g_fk[~support].any()


@pytest.mark.parametrize("seed", range(5))
def test_gradient_routing_3x3_dilation(seed):
    rng = np.random.default_rng(seed)
    p = params(head_kernel=3, seed=seed)
    g_fea, g_fk, support = _routing_grad(p, rng.normal(size=(2, 6, 6, 5)), rng.integers(0, 3, size=(2, 24, 24)), 2, True)
    assert not g_fea[~support].any()
    assert not g_fk[~dilate(support)].any()
    assert g_fk[dilate(support) & ~support].any() or not (dilate(support) & ~support).any()


def test_other_heads_do_not_affect_gradient_inside_support():
    rng = np.random.default_rng(3)
    y = np.zeros((1, 32, 32), int)
    y[:, :16, 16:] = 1
    y[:, 16:, :16] = 2
    y[:, 12:20, 12:20] = rng.integers(0, 3, size=(8, 8))  # ragged boundary in the middle
    fea_np = rng.normal(size=(1, 8, 8, 5))
    x = rng.random((1, 32, 32, 3))
    maps = cwmim.build_class_maps(y, 8, 8, 3)

    def grad(p):
        fea = tk.Tensor(fea_np, requires_grad=True)
        tk.backward(tk.mse(cwmim.reconstruct(p, cwmim.group_features(fea, maps), (32, 32)), x))
        return fea.grad

    for kernel in (1, 3):
        p = params(head_kernel=kernel)
        full = grad(p)
        for c in range(3):
            q = params(head_kernel=kernel)
            for other in range(3):
                if other != c:
                    q[f"head.{other}.w"].data[:] = 0.0
            support = maps.plane(c)[..., 0]
            if kernel == 1:
                np.testing.assert_array_equal(grad(q)[support], full[support])
            else:
                # with 3x3 heads the residuals a position feeds into see other heads up to
                # two pixels away, so only the 2-pixel interior is insulated
                core = support & ~dilate(dilate(~support))
                assert core.any()
                np.testing.assert_array_equal(grad(q)[core], full[core])


def test_fp_target_degenerate_and_detached():
    p = params()
    xw = np.random.default_rng(4).random((2, 8, 8, 3))
    yw = np.random.default_rng(5).integers(0, 3, size=(2, 8, 8))
    keep = np.ones((2, 6), bool)
    xfp = cwmim.build_fp_target(p, xw, keep, 0.0, yw)
    assert not xfp.requires_grad
    enc, _ = nets.encode(p, xw)
    fea = nets.pixel_trunk(p, enc)
    plain = cwmim.reconstruct(p, cwmim.group_features(fea, cwmim.build_class_maps(yw, 2, 2, 3)), (8, 8))
    np.testing.assert_array_equal(xfp.data, plain.data)
    keep2 = np.random.default_rng(6).random((2, 6)) >= 0.5
    np.testing.assert_array_equal(cwmim.build_fp_target(p, xw, keep2, 0.5, yw).data,
                                  cwmim.build_fp_target(p, xw, keep2, 0.5, yw).data)


def test_pixel_loss_arithmetic():
    x = np.random.default_rng(7).random((1, 4, 4, 3))
    r = tk.Tensor(x)
    assert cwmim.mim_pixel_loss(r, x, r, x, r, x, 1 / 3).data == 0.0
    r1 = tk.Tensor(x + 1.0)
    assert float(cwmim.mim_pixel_loss(r1, x, r1, x, r1, x, 1 / 3).data) == pytest.approx(1.0, rel=1e-14)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_pixel_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    rs = [tk.Tensor(rng.normal(size=(1, 4, 4, 3))) for _ in range(3)]
    xs = [rng.random((1, 4, 4, 3)) for _ in range(3)]
    assert float(cwmim.mim_pixel_loss(rs[0], xs[0], rs[1], xs[1], rs[2], xs[2], 1 / 3).data) >= 0.0
