"""Finite-difference gradient oracle suite, grouped by module.

Every case builds double-precision inputs from a fixed seed, so the reported
errors are reproducible. Detached quantities (pseudo-labels, reconstruction
targets, prototype memory) are fixed at the base point before probing.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import cwmim, nets, phase1, protoagg, semmim
from . import tensorkit as tk
from .tensorkit.gradcheck import finite_diff_check

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class OracleResult:
    module: str
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _p(rng, *shape, scale=1.0):
    return tk.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _probe(f, inputs, max_coords=None, seed=0):
    return finite_diff_check(f, inputs, h=STEP, max_coords=max_coords, rng=np.random.default_rng(seed))


def _w(rng, shape):
    return rng.normal(size=shape)


# --------------------------------------------------------------------------
# tensorkit ops

def _op_cases() -> Dict[str, Callable[[], float]]:
    def case(build):
        def run():
            rng = np.random.default_rng(1)
            f, inputs = build(rng)
            return _probe(f, inputs)
        return run

    def unary(fn, shape=(2, 3, 4, 3)):
        def build(rng):
            a = _p(rng, *shape)
            w = _w(rng, fn(a).shape)
            return (lambda: tk.sum(tk.mul_const(fn(a), w))), [a]
        return build

    def binary(fn, shape=(2, 3, 4, 3)):
        def build(rng):
            a, b = _p(rng, *shape), _p(rng, *shape)
            w = _w(rng, shape)
            return (lambda: tk.sum(tk.mul_const(fn(a, b), w))), [a, b]
        return build

    def conv(k, stride, pad, bias):
        def build(rng):
            x = _p(rng, 2, 7, 6, 3)
            kern = _p(rng, k, k, 3, 4, scale=0.5)
            b = _p(rng, 4) if bias else None
            out = tk.conv2d(x, kern, stride=stride, pad=pad, bias=b)
            w = _w(rng, out.shape)
            inputs = [x, kern] + ([b] if bias else [])
            return (lambda: tk.sum(tk.mul_const(tk.conv2d(x, kern, stride=stride, pad=pad, bias=b), w))), inputs
        return build

    def resize(h, w):
        return unary(lambda a: tk.nearest_resize(a, h, w), shape=(2, 4, 6, 2))

    def dropout(rng):
        a = _p(rng, 2, 3, 3, 5)
        keep = rng.random((2, 5)) >= 0.5
        w = _w(rng, a.shape)
        return (lambda: tk.sum(tk.mul_const(tk.channel_dropout(a, 0.5, keep=keep)[0], w))), [a]

    def ce(from_logits, normalize):
        def build(rng):
            z = _p(rng, 2, 4, 4, 4)
            y = rng.integers(0, 4, size=(2, 4, 4))
            y[0, 0, :2] = tk.IGNORE_INDEX
            if from_logits:
                return (lambda: tk.cross_entropy(z, y, from_logits=True, normalize=normalize)), [z]
            return (lambda: tk.cross_entropy(tk.softmax_channels(z), y, normalize=normalize)), [z]
        return build

    def mse(rng):
        r = _p(rng, 2, 4, 4, 3)
        x = rng.random((2, 4, 4, 3))
        return (lambda: tk.mse(r, x)), [r]

    def cosine(rng):
        z = _p(rng, 2, 3, 3, 5)
        v = rng.normal(size=(2, 3, 3, 5))
        w = _w(rng, (2, 3, 3))
        return (lambda: tk.sum(tk.mul_const(tk.cosine_similarity(z, v), w))), [z]

    def take(rng):
        a = _p(rng, 4, 3, 3, 2)
        w1, w2 = _w(rng, (2, 3, 3, 2)), _w(rng, (3, 3, 3, 2))
        idx = np.array([0, 2, 2])
        return (lambda: tk.add(tk.sum(tk.mul_const(a[1:3], w1)),
                               tk.sum(tk.mul_const(tk.take(a, idx), w2)))), [a]

    def concat(rng):
        a, b = _p(rng, 2, 3, 3, 2), _p(rng, 1, 3, 3, 2)
        w = _w(rng, (3, 3, 3, 2))
        return (lambda: tk.sum(tk.mul_const(tk.concat([a, b]), w))), [a, b]

    return {
        "add": case(binary(tk.add)),
        "sub": case(binary(tk.sub)),
        "mul": case(binary(tk.mul)),
        "neg": case(unary(tk.neg)),
        "scalar_mul": case(unary(lambda a: tk.scalar_mul(a, -1.7))),
        "scalar_div": case(unary(lambda a: tk.scalar_div(a, 3.25))),
        "mul_const": case(unary(lambda a: tk.mul_const(a, np.linspace(-1, 1, 3)))),
        "relu": case(unary(tk.relu)),
        "sum_axis": case(unary(lambda a: tk.sum(a, axis=(1, 2)))),
        "mean": case(unary(lambda a: tk.mean(a, axis=-1))),
        "reshape": case(unary(lambda a: tk.reshape(a, (6, 12)))),
        "take": case(take),
        "concat": case(concat),
        "conv3x3_s1_bias": case(conv(3, 1, 1, True)),
        "conv3x3_s2": case(conv(3, 2, 1, False)),
        "conv1x1_bias": case(conv(1, 1, 0, True)),
        "conv5x5_s1": case(conv(5, 1, 2, False)),
        "nearest_up": case(resize(8, 12)),
        "nearest_down": case(resize(2, 3)),
        "nearest_uneven": case(resize(7, 5)),
        "channel_dropout": case(dropout),
        "softmax": case(unary(tk.softmax_channels)),
        "log_softmax": case(unary(tk.log_softmax_channels)),
        "cross_entropy_probs": case(ce(False, "valid")),
        "cross_entropy_logits": case(ce(True, "valid")),
        "cross_entropy_all": case(ce(True, "all")),
        "mse": case(mse),
        "cosine": case(cosine),
    }


# --------------------------------------------------------------------------
# model-level cases

def _tiny_params(seed=0, num_classes=4):
    cfg = nets.NetConfig(num_classes=num_classes, enc_channels=(4, 6), dec_channels=6, trunk_dim=5)
    return nets.init_params(cfg, seed, dtype=np.float64)


def _param_inputs(params, group=None):
    names = params.names() if group is None else params.group(group)
    ts = [params[n] for n in names]
    for t in ts:
        t.requires_grad = True
    return ts


def _nets_case():
    rng = np.random.default_rng(2)
    params = _tiny_params()
    x = rng.random((2, 8, 8, 3))
    y = rng.integers(0, 4, size=(2, 8, 8))
    keep = rng.random((2, 6)) >= 0.5
    f = lambda: tk.cross_entropy(nets.forward(params, x, dropout_p=0.5, keep=keep).logits, y, from_logits=True)
    return _probe(f, _param_inputs(params, "main"))


def _cwmim_case():
    rng = np.random.default_rng(3)
    params = _tiny_params()
    fea = _p(rng, 2, 2, 2, 5)
    y = rng.integers(0, 4, size=(2, 8, 8))
    x = rng.random((2, 8, 8, 3))
    maps = cwmim.build_class_maps(y, 2, 2, 4)
    f = lambda: tk.mse(cwmim.reconstruct(params, cwmim.group_features(fea, maps), (8, 8)), x)
    heads = [n for n in params.names() if n.startswith("head.")]
    for n in heads:
        params[n].requires_grad = True
    return _probe(f, [fea] + [params[n] for n in heads])


def _cwmim_full_case():
    rng = np.random.default_rng(4)
    params = _tiny_params()
    xs = [rng.random((2, 8, 8, 3)) for _ in range(3)]
    ys = [rng.integers(0, 4, size=(2, 8, 8)) for _ in range(3)]
    x_fp = rng.random((2, 8, 8, 3))

    def f():
        rs = []
        for x, y in zip(xs, ys):
            fea = nets.pixel_trunk(params, nets.encode(params, x)[0])
            rs.append(cwmim.reconstruct(params, cwmim.group_features(fea, cwmim.build_class_maps(y, 2, 2, 4)), (8, 8)))
        return cwmim.mim_pixel_loss(rs[0], xs[0], rs[1], xs[1], rs[2], x_fp, 1.0 / 3.0)
    return _probe(f, _param_inputs(params), max_coords=12)


def _protoagg_case():
    rng = np.random.default_rng(5)
    c, d = 4, 5
    feas = [_p(rng, 2, 3, 3, d) for _ in range(3)]
    streams = []
    for fea in feas:
        labels = rng.integers(0, c, size=(2, 3, 3))
        vis = rng.random((2, 3, 3)) < 0.5
        avail = rng.random((2, 3, 3)) < 0.9
        regions = protoagg.RegionSets(labels, vis, avail, c)
        streams.append(protoagg.FeatureStream(fea, regions, rng.random((2, 3, 3))))
    memory = protoagg.PrototypeMemory(c, d, dtype=np.float64)
    protoagg.update_memory(memory, feas[0].data, streams[0].conf, streams[0].regions)
    memory.vectors[:] = rng.normal(size=(c, d))
    memory.initialized[:] = True
    f = lambda: protoagg.mim_feature_loss(streams, memory, 0.05, 10.0)
    return _probe(f, feas)


def _semmim_case():
    rng = np.random.default_rng(6)
    zs = [_p(rng, 2, 4, 4, 4) for _ in range(3)]
    tg = [phase1.make_pseudo_label(tk.softmax_channels(tk.Tensor(rng.normal(size=(2, 4, 4, 4)))), 0.0)
          for _ in range(3)]
    qs = [tk.softmax_channels(tk.Tensor(rng.normal(size=(2, 4, 4, 4)))).data for _ in range(3)]
    f_ce = lambda: semmim.semantic_mim_loss(zs, tg, 0.1 / 3, from_logits=True)
    f_mse = lambda: semmim.semantic_mim_mse([tk.softmax_channels(z) for z in zs], qs, 0.1 / 3)
    return max(_probe(f_ce, zs), _probe(f_mse, zs))


def _phase1_case():
    rng = np.random.default_rng(7)
    zs, zf = _p(rng, 2, 4, 4, 4), _p(rng, 2, 4, 4, 4)
    probs = tk.softmax_channels(tk.Tensor(rng.normal(scale=3.0, size=(2, 4, 4, 4))))
    pl = phase1.make_pseudo_label(probs, 0.6)
    return _probe(lambda: phase1.unlabeled_loss(zs, zf, pl, 0.5, from_logits=True), [zs, zf])


def composite_case(max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Full normalized objective on a 4-image 8x8x3 batch (2 labeled + 2 unlabeled), C=4."""
    from .config import TrainConfig
    from .trainer import make_step_inputs, objective, prepare_targets, BatchSampler
    from .data import split, synth_corpus

    cfg = TrainConfig().override({
        "data.height": 8, "data.width": 8, "data.num_classes": 4, "batch_size": 2,
        "model.enc1": 4, "model.enc2": 6, "model.dec_channels": 6, "model.trunk_dim": 5,
        "mask.patch_size": 2, "weights.psi": 0.3, "augment.crop_pad": 1,
        "seeds.model": seed, "seeds.mask": seed,
    })
    corpus = synth_corpus(8, 8, 8, 4, seed)
    # the synthetic 8x8 crops are mostly background; rewrite labels so every class appears
    rng = np.random.default_rng(seed)
    samples = {s.id: (s.image.astype(np.float64), rng.integers(0, 4, size=(8, 8)).astype(np.uint8))
               for s in corpus.samples}
    sampler = BatchSampler(split(corpus.ids, 4, seed), 2, seed)
    inp = make_step_inputs(cfg, samples, sampler, 0)
    params = nets.init_params(cfg.net_config(), seed, dtype=np.float64)
    # masked pixels are exactly zero, so with zero biases the first layer sits on the
    # relu kink there; random biases give a generic (differentiable) base point
    for n in params.names():
        if n.endswith(".b"):
            params[n].data = rng.normal(0.0, 0.1, size=params[n].shape)
    tg = prepare_targets(params, cfg, inp)
    memory = protoagg.PrototypeMemory(4, 5, dtype=np.float64)
    objective(params, memory, cfg, inp, tg, update_memory=True)  # fix memory at the base point
    f = lambda: objective(params, memory, cfg, inp, tg, update_memory=False)[0]
    _, comps = objective(params, memory, cfg, inp, tg, update_memory=False)
    for name in semmim.COMPONENTS:
        if name not in comps:
            raise AssertionError(f"composite oracle lost component {name}")
    return _probe(f, _param_inputs(params), max_coords=max_coords, seed=seed)


def suite() -> Dict[str, Dict[str, Callable[[], float]]]:
    return {
        "tensorkit": _op_cases(),
        "nets": {"encode_decode_ce": _nets_case},
        "phase1": {"unlabeled_loss": _phase1_case},
        "cwmim": {"grouped_reconstruction": _cwmim_case, "pixel_loss_three_streams": _cwmim_full_case},
        "protoagg": {"feature_loss": _protoagg_case},
        "semmim": {"semantic_losses": _semmim_case},
        "trainer": {"composite_objective": composite_case},
    }


def run_suite(modules: Optional[List[str]] = None) -> List[OracleResult]:
    table = suite()
    if modules:
        unknown = sorted(set(modules) - set(table))
        if unknown:
            raise KeyError(f"unknown oracle module(s) {unknown}; choose from {sorted(table)}")
    out = []
    for mod, cases in table.items():
        if modules and mod not in modules:
            continue
        for name, fn in cases.items():
            t0 = time.perf_counter()
            err = fn()
            out.append(OracleResult(mod, name, float(err), time.perf_counter() - t0))
    return out
