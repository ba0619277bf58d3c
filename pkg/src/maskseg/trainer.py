"""Two-phase training loop, optimizer, evaluation and checkpoints."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import cwmim, nets, phase1, protoagg, semmim
from . import tensorkit as tk
from .config import TrainConfig
from .data import BatchSampler, Corpus, SplitManifest, load_corpus, read_split, split, synth_corpus
from .masking import MaskSpec, apply_mask, sample_masks, strong_perturb, weak_perturb
from .protoagg import FeatureStream, PrototypeMemory
from .semmim import LossReport
from .tensorkit import IGNORE_INDEX

log = logging.getLogger(__name__)

CKPT_FORMAT = "maskseg-ckpt-1"
METRIC_COLUMNS = ["iter", "lr_main", "lr_pid", "L_s", "L_u", "L_mimpi", "L_mimfea", "L_mimse", "total"]

# rng purposes within one iteration
_AUG1, _AUG2, _MASKS, _DROPOUT = 0, 1, 2, 3


def poly_lr(base: float, it: int, total: int, power: float) -> float:
    if not 0 <= it <= total:
        raise ValueError(f"iteration {it} outside [0, {total}]")
    if total == 0:
        return base
    return base * (1.0 - it / total) ** power


# --------------------------------------------------------------------------
# state and optimizer

@dataclass
class TrainState:
    params: nets.SegNetParams
    memory: PrototypeMemory
    momenta: Dict[str, np.ndarray]
    iteration: int = 0


def init_state(cfg: TrainConfig, dtype=np.float32) -> TrainState:
    params = nets.init_params(cfg.net_config(), cfg.seeds.model, dtype=dtype)
    memory = PrototypeMemory(cfg.data.num_classes, cfg.model.trunk_dim, cfg.proto.alpha, dtype=dtype)
    momenta = {n: np.zeros_like(params[n].data) for n in params.names()}
    return TrainState(params, memory, momenta, 0)


def sgd_step(params: nets.SegNetParams, momenta: Dict[str, np.ndarray], lrs: Dict[str, float],
             momentum: float, weight_decay: float):
    """Momentum SGD: ``v <- mu*v + (g + wd*w)``, ``w <- w - lr*v``; decay on conv weights only.

    ``lrs`` maps group name ("main", "pid") to its learning rate.
    """
    for group, lr in lrs.items():
        for name in params.group(group):
            t = params[name]
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            dt = t.data.dtype.type
            if weight_decay and name.endswith(".w"):
                g = g + dt(weight_decay) * t.data
            v = momenta[name]
            v *= dt(momentum)
            v += g.astype(t.data.dtype, copy=False)
            t.data -= dt(lr) * v
            t.grad = None


def clip_gradients(params: nets.SegNetParams, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    grads = [params[n].grad for n in params.names() if params[n].grad is not None]
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= g.dtype.type(scale)
    return norm


# --------------------------------------------------------------------------
# per-iteration inputs

@dataclass
class StreamBatch:
    x_l: np.ndarray
    y_l: np.ndarray
    x_w: np.ndarray
    pad_w: np.ndarray
    x_s: np.ndarray
    keep: np.ndarray  # channel dropout realization for the feature-perturbed stream


@dataclass
class StepInputs:
    phase1: StreamBatch
    phase2: StreamBatch
    m_l: np.ndarray
    m_s: np.ndarray
    m_w: np.ndarray


def _rng(cfg: TrainConfig, it: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seeds.mask, it, purpose])


def make_stream_batch(cfg: TrainConfig, samples: Dict[str, Tuple[np.ndarray, np.ndarray]],
                      lab_ids: List[str], unl_ids: List[str], rng: np.random.Generator,
                      keep_rng: np.random.Generator) -> StreamBatch:
    xl, yl, xw, pw, xs = [], [], [], [], []
    for sid in lab_ids:
        img, lab = samples[sid]
        x, y, _, _ = weak_perturb(img, lab, rng, cfg.augment)
        xl.append(x)
        yl.append(y)
    for sid in unl_ids:
        img, _ = samples[sid]
        x, _, pad, _ = weak_perturb(img, None, rng, cfg.augment)
        xw.append(x)
        pw.append(pad)
        xs.append(strong_perturb(x, rng, cfg.augment))
    p = cfg.feature_dropout
    keep = keep_rng.random((len(unl_ids), cfg.model.enc2)) >= p if p > 0 else \
        np.ones((len(unl_ids), cfg.model.enc2), dtype=bool)
    return StreamBatch(np.stack(xl), np.stack(yl).astype(np.int64), np.stack(xw), np.stack(pw),
                       np.stack(xs), keep)


def make_step_inputs(cfg: TrainConfig, samples, sampler: BatchSampler, it: int) -> StepInputs:
    b1 = sampler.batch(it, phase=0)
    keep_rng = _rng(cfg, it, _DROPOUT)
    s1 = make_stream_batch(cfg, samples, b1.labeled, b1.unlabeled, _rng(cfg, it, _AUG1), keep_rng)
    if cfg.toggles.shared_batch:
        s2 = s1
    else:
        b2 = sampler.batch(it, phase=1)
        s2 = make_stream_batch(cfg, samples, b2.labeled, b2.unlabeled, _rng(cfg, it, _AUG2), keep_rng)
    n, h, w = s2.x_l.shape[:3]
    spec = MaskSpec(cfg.mask.patch_size, cfg.mask.ratio)
    mrng = _rng(cfg, it, _MASKS)
    return StepInputs(s1, s2, sample_masks(n, h, w, spec, mrng), sample_masks(n, h, w, spec, mrng),
                      sample_masks(n, h, w, spec, mrng))


# --------------------------------------------------------------------------
# objective

@dataclass
class Targets:
    """Detached quantities: pseudo-labels, confidences and the fp reconstruction target."""

    pl_w1: Optional[phase1.PseudoLabel] = None
    pl_l: Optional[phase1.PseudoLabel] = None
    pl_s: Optional[phase1.PseudoLabel] = None
    pl_w: Optional[phase1.PseudoLabel] = None
    pl_fp: Optional[phase1.PseudoLabel] = None
    probs: Dict[str, np.ndarray] = field(default_factory=dict)
    x_fp: Optional[np.ndarray] = None


def prepare_targets(params: nets.SegNetParams, cfg: TrainConfig, inp: StepInputs) -> Targets:
    t = Targets()
    tog = cfg.toggles
    p = cfg.feature_dropout
    with tk.no_grad():
        if tog.use_unlabeled:
            fw = nets.forward(params, inp.phase1.x_w)
            t.pl_w1 = phase1.make_pseudo_label(fw.probs, cfg.weights.psi, exclude=inp.phase1.pad_w)
        if not cfg.phase2_enabled:
            return t
        s = inp.phase2
        b = len(s.x_l)
        f_ls = nets.forward(params, np.concatenate([s.x_l, s.x_s, s.x_w]))
        probs = f_ls.probs.data
        t.probs["l"], t.probs["s"], t.probs["w"] = probs[:b], probs[b:2 * b], probs[2 * b:]
        enc_fp, _ = nets.encode(params, s.x_w, dropout_p=p, keep=s.keep)
        t.probs["fp"] = tk.softmax_channels(nets.semantic_decode(params, enc_fp)).data
        t.pl_l = phase1.make_pseudo_label(t.probs["l"], 0.0)
        t.pl_s = phase1.make_pseudo_label(t.probs["s"], 0.0)
        t.pl_w = phase1.make_pseudo_label(t.probs["w"], 0.0)
        t.pl_fp = phase1.make_pseudo_label(t.probs["fp"], 0.0)
        if tog.use_mimpi and tog.detach_fp:
            t.x_fp = _reconstruct(params, cfg, nets.pixel_trunk(params, enc_fp), t.pl_w.label,
                                  s.x_w.shape[1:3]).data
            if tog.clamp_fp:
                # an unbounded self-made target can run away with the prediction chasing it
                t.x_fp = np.clip(t.x_fp, 0.0, 1.0)
    return t


def _reconstruct(params, cfg: TrainConfig, fea: tk.Tensor, labels: np.ndarray, out_hw) -> tk.Tensor:
    if cfg.toggles.classwise:
        maps = cwmim.build_class_maps(labels, fea.shape[-3], fea.shape[-2], cfg.data.num_classes)
        return cwmim.reconstruct(params, cwmim.group_features(fea, maps), out_hw)
    return cwmim.reconstruct_plain(params, fea, out_hw)


def _small(a: np.ndarray, h: int, w: int) -> np.ndarray:
    return tk.resize_nearest_array(a, h, w, axes=(-2, -1))


def objective(params: nets.SegNetParams, memory: PrototypeMemory, cfg: TrainConfig,
              inp: StepInputs, tg: Targets, update_memory: bool = True):
    """Differentiable total loss. Returns ``(total, components)``.

    When ``update_memory`` is set the prototype memory is refreshed from the
    masked labeled stream before the feature loss reads it.
    """
    tog = cfg.toggles
    lw = cfg.weights
    p = cfg.feature_dropout
    comps: Dict[str, tk.Tensor] = {}

    # Phase I
    s1 = inp.phase1
    b = len(s1.x_l)
    if tog.use_unlabeled:
        logits = nets.forward(params, np.concatenate([s1.x_l, s1.x_s])).logits
        comps["L_s"] = phase1.supervised_loss(logits[:b], s1.y_l, from_logits=True)
        logits_fp = nets.forward(params, s1.x_w, dropout_p=p, keep=s1.keep).logits
        comps["L_u"] = phase1.unlabeled_loss(logits[b:], logits_fp, tg.pl_w1, lw.lambda_u,
                                             from_logits=True, normalize=tog.gate_norm)
    else:
        logits = nets.forward(params, s1.x_l).logits
        comps["L_s"] = phase1.supervised_loss(logits, s1.y_l, from_logits=True)

    if not cfg.phase2_enabled:
        return semmim.total_loss(comps, cfg.active_weights()), comps

    # Phase II: three masked streams (labeled, strong, weak + feature perturbation)
    s2 = inp.phase2
    b = len(s2.x_l)
    hw = s2.x_l.shape[1:3]
    x_lm = apply_mask(s2.x_l, inp.m_l)
    x_sm = apply_mask(s2.x_s, inp.m_s)
    x_wm = apply_mask(s2.x_w, inp.m_w)
    enc_ls, _ = nets.encode(params, np.concatenate([x_lm, x_sm]))
    enc_fp, _ = nets.encode(params, x_wm, dropout_p=p, keep=s2.keep)

    need_trunk = tog.use_mimpi or tog.use_mimfea
    if need_trunk:
        fea = tk.concat([nets.pixel_trunk(params, enc_ls), nets.pixel_trunk(params, enc_fp)])
        hs, ws = fea.shape[1:3]
        group_labels = np.concatenate([tg.pl_l.label, tg.pl_w.label, tg.pl_w.label])

    if tog.use_mimpi:
        r = _reconstruct(params, cfg, fea, group_labels, hw)
        if tog.detach_fp:
            x_fp = tg.x_fp
        else:
            enc_w, _ = nets.encode(params, s2.x_w, dropout_p=p, keep=s2.keep)
            x_fp = _reconstruct(params, cfg, nets.pixel_trunk(params, enc_w), tg.pl_w.label, hw)
        comps["L_mimpi"] = cwmim.mim_pixel_loss(r[:b], s2.x_l, r[b:2 * b], s2.x_s, r[2 * b:], x_fp,
                                                lw.lambda_mp)

    if tog.use_mimfea:
        pc = cfg.proto
        labels_small = _small(group_labels, hs, ws)
        vis = _small(np.concatenate([inp.m_l, inp.m_s, inp.m_w]), hs, ws)
        unavailable = np.concatenate([s2.y_l == IGNORE_INDEX, s2.pad_w, s2.pad_w])
        avail = ~_small(unavailable, hs, ws)
        conf_full = np.concatenate([tg.pl_l.confidence, tg.pl_s.confidence, tg.pl_fp.confidence])
        conf = _small(conf_full, hs, ws) if pc.use_conf else np.ones((3 * b, hs, ws))
        streams = []
        for k in range(3):
            sl = slice(k * b, (k + 1) * b)
            regions = protoagg.RegionSets(labels_small[sl], vis[sl], avail[sl], cfg.data.num_classes)
            streams.append(FeatureStream(fea[sl], regions, conf[sl]))
        if pc.use_dic:
            if update_memory:
                protoagg.update_memory(memory, fea.data[:b], streams[0].conf, streams[0].regions)
            mem = memory
        else:
            mem = protoagg.batch_memory(memory, fea.data[:b], streams[0].conf, streams[0].regions)
        comps["L_mimfea"] = protoagg.mim_feature_loss(streams, mem, lw.lambda_mf, pc.tau, use_conf=pc.use_conf)

    if tog.use_mimse:
        logits_ls = nets.semantic_decode(params, enc_ls)
        logits_fpm = nets.semantic_decode(params, enc_fp)
        if tog.sem_loss == "mse":
            probs_ls = tk.softmax_channels(logits_ls)
            probs_fpm = tk.softmax_channels(logits_fpm)
            comps["L_mimse"] = semmim.semantic_mim_mse(
                [probs_ls[:b], probs_ls[b:], probs_fpm],
                [tg.probs["l"], tg.probs["s"], tg.probs["fp"]], lw.lambda_ms)
        elif tog.sem_loss == "ce":
            comps["L_mimse"] = semmim.semantic_mim_loss(
                [logits_ls[:b], logits_ls[b:], logits_fpm], [tg.pl_l, tg.pl_s, tg.pl_fp], lw.lambda_ms,
                from_logits=True, gated=tog.sem_gated, threshold=lw.psi)
        else:
            raise ValueError(f"unknown semantic loss {tog.sem_loss!r}")

    return semmim.total_loss(comps, cfg.active_weights()), comps


def train_step(state: TrainState, cfg: TrainConfig, inp: StepInputs) -> Tuple[LossReport, Dict[str, float]]:
    """One iteration: targets, objective, single backward, one SGD step."""
    it = state.iteration
    tg = prepare_targets(state.params, cfg, inp)
    total, comps = objective(state.params, state.memory, cfg, inp, tg, update_memory=True)
    report = LossReport(**{k: float(v.data) + 0.0 for k, v in comps.items()}, total=float(total.data) + 0.0)
    if not np.isfinite(report.total):
        raise FloatingPointError(f"non-finite loss at iteration {it}: {report.as_dict()}")
    for name in state.params.names():
        state.params[name].grad = None
    tk.backward(total)
    oc = cfg.optim
    if oc.grad_clip > 0:
        clip_gradients(state.params, oc.grad_clip)
    lrs = {"main": poly_lr(oc.lr, it, max(cfg.iterations, it), oc.poly_power), "pid": oc.lr_pid}
    sgd_step(state.params, state.momenta, lrs, oc.momentum, oc.weight_decay)
    state.iteration += 1
    return report, lrs


# --------------------------------------------------------------------------
# evaluation

@dataclass
class EvalResult:
    miou: float
    iou: np.ndarray
    confusion: np.ndarray


def confusion_matrix(pred: np.ndarray, label: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions; ignore-marked pixels skipped."""
    valid = label != IGNORE_INDEX
    idx = num_classes * label[valid].astype(np.int64) + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> Tuple[np.ndarray, float]:
    """Per-class IoU (NaN where the class is absent from labels and predictions) and mIoU."""
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)
    present = ~np.isnan(iou)
    return iou, float(iou[present].mean()) if present.any() else float("nan")


def evaluate(params: nets.SegNetParams, corpus: Corpus, batch: int = 16) -> EvalResult:
    c = corpus.num_classes
    cm = np.zeros((c, c), dtype=np.int64)
    dtype = next(iter(params.tensors.values())).data.dtype
    with tk.no_grad():
        for i in range(0, len(corpus), batch):
            chunk = corpus.samples[i:i + batch]
            x = np.stack([s.image for s in chunk]).astype(dtype)
            logits = nets.forward(params, x).logits.data
            cm += confusion_matrix(logits.argmax(axis=-1), np.stack([s.label for s in chunk]), c)
    iou, miou = iou_from_confusion(cm)
    return EvalResult(miou, iou, cm)


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(state: TrainState, cfg: TrainConfig, path: str):
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float32 blobs)."""
    entries, chunks, offset = [], [], 0
    arrays = [(f"param/{n}", state.params[n].data) for n in state.params.names()]
    arrays += [(f"momentum/{n}", state.momenta[n]) for n in state.params.names()]
    arrays += [("memory/vectors", state.memory.vectors),
               ("memory/initialized", state.memory.initialized.astype(np.float32))]
    for name, arr in arrays:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                        "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    manifest = {"format": CKPT_FORMAT, "iteration": state.iteration, "config": cfg.to_flat(),
                "config_hash": cfg.hash(), "alpha": state.memory.alpha, "tensors": entries}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path + ".bin", "wb") as fh:
        fh.write(b"".join(chunks))
    with open(path + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


class CheckpointError(ValueError):
    pass


def _ckpt_base(path: str) -> str:
    for ext in (".json", ".bin"):
        if path.endswith(ext):
            return path[:-len(ext)]
    return path


def read_checkpoint(path: str):
    base = _ckpt_base(path)
    try:
        with open(base + ".json") as fh:
            manifest = json.load(fh)
        with open(base + ".bin", "rb") as fh:
            blob = fh.read()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint file missing: {exc.filename}") from None
    except ValueError as exc:
        raise CheckpointError(f"{base}.json: malformed manifest ({exc})") from None
    if manifest.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{base}.json: unknown format {manifest.get('format')!r}")
    arrays, bad = {}, []
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["nbytes"] != 4 * n or e["offset"] + e["nbytes"] > len(blob):
            bad.append(e["name"])
            continue
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]) \
            .reshape(e["shape"]).astype(np.float32)
    expected = sum(e["nbytes"] for e in manifest["tensors"])
    if bad or expected != len(blob):
        raise CheckpointError(f"{base}.bin holds {len(blob)} bytes, manifest expects {expected}; "
                              f"offending tensors: {', '.join(bad) if bad else '(trailing data)'}")
    return manifest, arrays


def load_checkpoint(path: str, cfg: Optional[TrainConfig] = None) -> Tuple[TrainState, TrainConfig]:
    manifest, arrays = read_checkpoint(path)
    saved_cfg = TrainConfig().override(manifest["config"])
    if cfg is None:
        cfg = saved_cfg
    elif cfg.hash() != manifest["config_hash"]:
        warnings.warn(f"config hash {cfg.hash()} differs from checkpoint's {manifest['config_hash']}")
    state = init_state(cfg)
    missing = [n for n in state.params.names() if f"param/{n}" not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {', '.join(missing)}")
    for n in state.params.names():
        a = arrays[f"param/{n}"]
        if a.shape != state.params[n].shape:
            raise CheckpointError(f"tensor param/{n} has shape {a.shape}, model expects {state.params[n].shape}")
        state.params[n].data = a.copy()
        state.momenta[n] = arrays[f"momentum/{n}"].copy()
    state.memory.vectors = arrays["memory/vectors"].copy()
    state.memory.initialized = arrays["memory/initialized"] > 0.5
    state.iteration = int(manifest["iteration"])
    return state, cfg


# --------------------------------------------------------------------------
# data resolution and the training driver

def resolve_data(cfg: TrainConfig) -> Tuple[Corpus, SplitManifest, Optional[Corpus]]:
    d = cfg.data
    if d.source == "synth":
        n = d.n_labeled + d.n_unlabeled
        train = synth_corpus(n, d.height, d.width, d.num_classes, d.synth_seed)
        ev = synth_corpus(d.n_eval, d.height, d.width, d.num_classes, d.synth_seed, id_offset=n) \
            if d.n_eval > 0 else None
        return train, split(train.ids, d.n_labeled, d.split_seed), ev
    if d.source == "dir":
        train = load_corpus(d.corpus)
        if train.num_classes != d.num_classes:
            raise ValueError(f"corpus has {train.num_classes} classes, config says {d.num_classes}")
        try:
            manifest = read_split(d.corpus)
        except FileNotFoundError:
            manifest = split(train.ids, d.n_labeled, d.split_seed)
        ev = load_corpus(d.eval_corpus) if d.eval_corpus else None
        return train, manifest, ev
    raise ValueError(f"unknown data source {d.source!r}")


def _fmt(x: float) -> str:
    return repr(float(x))


class MetricsWriter:
    def __init__(self, path: str, cfg: TrainConfig, append: bool = False):
        self.path = path
        if not append:
            with open(path, "w", newline="\n") as fh:
                fh.write(f"# config {cfg.to_json()}\n")
                fh.write(",".join(METRIC_COLUMNS) + "\n")

    def step(self, it: int, lrs: Dict[str, float], rep: LossReport):
        vals = [rep.L_s, rep.L_u, rep.L_mimpi, rep.L_mimfea, rep.L_mimse, rep.total]
        self._write(",".join([str(it), _fmt(lrs["main"]), _fmt(lrs["pid"])] + [_fmt(v) for v in vals]))

    def eval(self, it: int, res: EvalResult):
        self._write(",".join(["eval", str(it), _fmt(res.miou)] + [_fmt(v) for v in res.iou]))

    def _write(self, line: str):
        with open(self.path, "a", newline="\n") as fh:
            fh.write(line + "\n")


class Trainer:
    """Owns data, state and sampling for one run; every iteration is a pure function of its index."""

    def __init__(self, cfg: TrainConfig, data=None, state: Optional[TrainState] = None):
        self.cfg = cfg
        self.train_corpus, self.split, self.eval_corpus = data if data is not None else resolve_data(cfg)
        self.samples = {s.id: (s.image, s.label) for s in self.train_corpus.samples}
        self.sampler = BatchSampler(self.split, cfg.batch_size, cfg.seeds.data)
        self.state = state if state is not None else init_state(cfg)
        self.reports: List[LossReport] = []

    def inputs(self, it: int) -> StepInputs:
        return make_step_inputs(self.cfg, self.samples, self.sampler, it)

    def step(self) -> Tuple[LossReport, Dict[str, float]]:
        rep, lrs = train_step(self.state, self.cfg, self.inputs(self.state.iteration))
        self.reports.append(rep)
        return rep, lrs

    def evaluate(self) -> Optional[EvalResult]:
        return evaluate(self.state.params, self.eval_corpus) if self.eval_corpus is not None else None

    def run(self, out_dir: Optional[str] = None, until: Optional[int] = None, append: bool = False,
            final_eval: bool = True) -> Optional[EvalResult]:
        cfg = self.cfg
        until = cfg.iterations if until is None else until
        writer = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            writer = MetricsWriter(os.path.join(out_dir, "metrics.csv"), cfg, append=append)
        res = None
        while self.state.iteration < until:
            it = self.state.iteration
            rep, lrs = self.step()
            if writer:
                writer.step(it, lrs, rep)
            done = self.state.iteration
            if cfg.eval_interval and done % cfg.eval_interval == 0 and done < cfg.iterations:
                res = self.evaluate()
                if writer and res is not None:
                    writer.eval(done, res)
            if out_dir and cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0:
                save_checkpoint(self.state, cfg, os.path.join(out_dir, f"ckpt_{done:06d}"))
            if it % 100 == 0:
                log.info("iter %d total %.4f %s", it, rep.total, rep.as_dict())
        if final_eval and self.state.iteration == cfg.iterations and cfg.iterations > 0:
            res = self.evaluate()
            if writer and res is not None:
                writer.eval(self.state.iteration, res)
        if out_dir:
            save_checkpoint(self.state, cfg, os.path.join(out_dir, "ckpt_final"))
        return res


def train(cfg: TrainConfig, out_dir: Optional[str] = None, data=None) -> Tuple[Trainer, Optional[EvalResult]]:
    trainer = Trainer(cfg, data=data)
    return trainer, trainer.run(out_dir)


# --------------------------------------------------------------------------
# ablation sweeps

_OFF = {"toggles.use_mimpi": False, "toggles.use_mimfea": False, "toggles.use_mimse": False}

BUILTIN_GRIDS: Dict[str, List[Tuple[str, Dict]]] = {
    # component rows: baseline, +pi, +pi+fea, +se, +pi+se, all
    "components": [
        ("baseline", dict(_OFF)),
        ("mimpi", {**_OFF, "toggles.use_mimpi": True}),
        ("mimpi+mimfea", {**_OFF, "toggles.use_mimpi": True, "toggles.use_mimfea": True}),
        ("mimse", {**_OFF, "toggles.use_mimse": True}),
        ("mimpi+mimse", {**_OFF, "toggles.use_mimpi": True, "toggles.use_mimse": True}),
        ("full", {}),
    ],
    "ratio_patch": [(f"ratio{r}_patch{p}", {"mask.ratio": r, "mask.patch_size": p})
                    for r in (0.3, 0.4, 0.5) for p in (4, 6, 8)],
    "semloss": [
        ("baseline", dict(_OFF)),
        ("mse", {**_OFF, "toggles.use_mimse": True, "toggles.sem_loss": "mse"}),
        ("ce", {**_OFF, "toggles.use_mimse": True, "toggles.sem_loss": "ce"}),
    ],
    "proto": [
        ("no_dic_no_conf", {"proto.use_dic": False, "proto.use_conf": False}),
        ("no_dic", {"proto.use_dic": False}),
        ("no_conf", {"proto.use_conf": False}),
        ("dic_conf", {}),
    ],
    "mim": [
        ("no_mim", dict(_OFF)),
        ("basic_mim", {**_OFF, "toggles.use_mimpi": True, "toggles.classwise": False}),
        ("classwise_mim", {**_OFF, "toggles.use_mimpi": True}),
    ],
    # supervised-only vs Phase I vs everything, three seeds each
    "directional": [
        (f"{name}_seed{s}", {**over, "seeds.model": s, "seeds.data": s, "seeds.mask": s})
        for s in (0, 1, 2)
        for name, over in (("sup", {**_OFF, "toggles.use_unlabeled": False}), ("phase1", dict(_OFF)), ("full", {}))
    ],
}


def expand_grid(grid) -> Tuple[Dict, List[Tuple[str, Dict]]]:
    """Normalize a grid spec into ``(base_overrides, [(cell_name, overrides), ...])``.

    Accepted forms: a built-in grid name; a dict with optional ``base``
    overrides plus ``builtin`` (name), ``cells`` (list of ``{"name", "set"}``)
    or ``axes`` (dotted key -> list of values, expanded as a Cartesian product).
    """
    if isinstance(grid, str):
        grid = {"builtin": grid}
    if not isinstance(grid, dict):
        raise ValueError("grid must be a built-in name or a JSON object")
    base = dict(grid.get("base", {}))
    cells: List[Tuple[str, Dict]] = []
    if "builtin" in grid:
        if grid["builtin"] not in BUILTIN_GRIDS:
            raise ValueError(f"unknown built-in grid {grid['builtin']!r}; choose from {sorted(BUILTIN_GRIDS)}")
        cells += [(n, dict(s)) for n, s in BUILTIN_GRIDS[grid["builtin"]]]
    for i, c in enumerate(grid.get("cells", [])):
        cells.append((str(c.get("name", f"cell{i}")), dict(c.get("set", {}))))
    axes = grid.get("axes")
    if axes:
        keys = list(axes)
        for combo in itertools.product(*(axes[k] for k in keys)):
            s = dict(zip(keys, combo))
            cells.append(("_".join(f"{k.split('.')[-1]}={v}" for k, v in s.items()), s))
    if not cells:
        raise ValueError("grid defines no cells")
    names = [n for n, _ in cells]
    if len(set(names)) != len(names):
        raise ValueError("grid cell names must be unique")
    return base, cells


def _run_cell(args):
    name, cfg_flat, out_dir = args
    try:
        cfg = TrainConfig().override(cfg_flat)
        _, res = train(cfg, out_dir=out_dir)
        return name, "ok", res.miou if res else float("nan"), list(res.iou) if res else []
    except Exception as exc:  # recorded per cell, the sweep carries on
        return name, f"error: {type(exc).__name__}: {exc}".replace("\n", " "), float("nan"), []


def run_ablation(base: TrainConfig, grid, out_dir: str, workers: int = 1) -> str:
    """Train and evaluate every cell under shared seeds; returns the results CSV path.

    Each cell writes into ``out_dir/<cell>/``; results go to ``out_dir/results.csv``.
    """
    base_over, cells = expand_grid(grid)
    base = base.override(base_over)
    os.makedirs(out_dir, exist_ok=True)
    jobs = []
    for name, over in cells:
        try:
            flat = base.override(over).to_flat()
        except (KeyError, ValueError) as exc:
            flat = {"__invalid__": str(exc)}
        jobs.append((name, flat, os.path.join(out_dir, name)))
    if workers > 1:
        import multiprocessing as mp
        with mp.get_context("spawn").Pool(workers) as pool:
            results = pool.map(_run_cell, jobs)
    else:
        results = [_run_cell(j) for j in jobs]
    c = base.data.num_classes
    path = os.path.join(out_dir, "results.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "overrides", "status", "miou"] + [f"iou_{k}" for k in range(c)])
        for (name, over), (_, status, miou, iou) in zip(cells, results):
            iou = (iou + [float("nan")] * c)[:c]
            w.writerow([name, json.dumps(over, sort_keys=True), status, _fmt(miou)] + [_fmt(v) for v in iou])
    return path
