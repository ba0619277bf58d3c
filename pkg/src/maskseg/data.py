"""Synthetic segmentation corpora, on-disk format, splits and batch sampling.

Corpus layout::

    manifest.json   {"ids": [...], "H": .., "W": .., "C": ..}
    img/<id>.ppm    binary P6, maxval 255
    lab/<id>.pgm    binary P5, maxval 255, 255 = ignore
    split.json      {"seed": .., "labeled": [...], "unlabeled": [...]}
"""
from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import netpbm
from .netpbm import NetpbmError
from .tensorkit import IGNORE_INDEX


class CorpusError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    label: np.ndarray  # H x W uint8, IGNORE_INDEX = ignore
    id: str


@dataclass
class Corpus:
    samples: List[Sample]
    height: int
    width: int
    num_classes: int

    def __len__(self):
        return len(self.samples)

    def by_id(self) -> Dict[str, Sample]:
        return {s.id: s for s in self.samples}

    @property
    def ids(self) -> List[str]:
        return [s.id for s in self.samples]


# --------------------------------------------------------------------------
# synthetic generation

@dataclass(frozen=True)
class SynthStyle:
    """Appearance knobs of the generator (all intensities in [0, 1] units)."""

    shapes_min: int = 2
    shapes_max: int = 4
    radius_min: float = 6.0
    radius_max: float = 14.0
    class_color_jitter: float = 0.12
    background_jitter: float = 0.25
    texture_amplitude: float = 0.10
    pixel_noise: float = 0.05


def class_palette(num_classes: int) -> np.ndarray:
    """Characteristic mean colour of each foreground class (row 0 unused)."""
    pal = np.zeros((num_classes, 3))
    for c in range(1, num_classes):
        hue = (c - 1) / max(num_classes - 1, 1)
        ang = 2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3]))
        pal[c] = 0.5 + 0.3 * np.cos(ang)
    return pal


def _texture(rng, h, w, amp, cell=8):
    gh, gw = -(-h // cell) + 1, -(-w // cell) + 1
    coarse = rng.normal(0.0, amp, size=(gh, gw, 3))
    ys = np.linspace(0, gh - 1.001, h)
    xs = np.linspace(0, gw - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _shape_mask(rng, h, w, style: SynthStyle):
    yy, xx = np.mgrid[0:h, 0:w]
    r = rng.uniform(style.radius_min, style.radius_max)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    kind = rng.integers(3)
    if kind == 0:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 1:
        ry, rx = r * rng.uniform(0.6, 1.0), r * rng.uniform(0.6, 1.0)
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    ang = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    vy, vx = cy + r * np.sin(ang), cx + r * np.cos(ang)
    crosses = [(vx[(i + 1) % 3] - vx[i]) * (yy - vy[i]) - (vy[(i + 1) % 3] - vy[i]) * (xx - vx[i])
               for i in range(3)]
    return np.all([c >= 0 for c in crosses], axis=0) | np.all([c <= 0 for c in crosses], axis=0)


def boundary_map(label: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour of a different class."""
    diff = np.zeros(label.shape, dtype=bool)
    diff[1:] |= label[1:] != label[:-1]
    diff[:-1] |= label[:-1] != label[1:]
    diff[:, 1:] |= label[:, 1:] != label[:, :-1]
    diff[:, :-1] |= label[:, :-1] != label[:, 1:]
    return diff & (label > 0)


def synth_sample(rng: np.random.Generator, h: int, w: int, num_classes: int,
                 style: SynthStyle = SynthStyle()):
    """One quantized image (uint8) and its label map with ignore boundaries."""
    pal = class_palette(num_classes)
    bg = 0.5 + rng.uniform(-style.background_jitter, style.background_jitter, size=3)
    img = bg + _texture(rng, h, w, style.texture_amplitude)
    label = np.zeros((h, w), dtype=np.uint8)
    for _ in range(rng.integers(style.shapes_min, style.shapes_max + 1)):
        c = int(rng.integers(1, num_classes))
        m = _shape_mask(rng, h, w, style)
        colour = pal[c] + rng.normal(0.0, style.class_color_jitter, size=3)
        img[m] = colour + _texture(rng, h, w, style.texture_amplitude)[m]
        label[m] = c
    img = img + rng.normal(0.0, style.pixel_noise, size=img.shape)
    label[boundary_map(label)] = IGNORE_INDEX
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8), label


def synth_corpus(n: int, h: int, w: int, num_classes: int, seed: int,
                 style: SynthStyle = SynthStyle(), id_offset: int = 0) -> Corpus:
    if num_classes < 2:
        raise ValueError("need at least two classes (0 is background)")
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, id_offset + i])
        img, lab = synth_sample(rng, h, w, num_classes, style)
        samples.append(Sample(img.astype(np.float32) / np.float32(255.0), lab, f"{id_offset + i:05d}"))
    return Corpus(samples, h, w, num_classes)


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("ascii")


def write_corpus(corpus: Corpus, out_dir: str, overwrite: bool = False):
    if os.path.exists(out_dir) and os.listdir(out_dir):
        if not overwrite:
            raise CorpusError(f"output directory {out_dir} exists and is not empty (use overwrite)")
        shutil.rmtree(out_dir)
    os.makedirs(os.path.join(out_dir, "img"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "lab"), exist_ok=True)
    for s in corpus.samples:
        netpbm.write(os.path.join(out_dir, "img", f"{s.id}.ppm"),
                     np.round(s.image * 255).astype(np.uint8))
        netpbm.write(os.path.join(out_dir, "lab", f"{s.id}.pgm"), s.label.astype(np.uint8))
    manifest = {"ids": corpus.ids, "H": corpus.height, "W": corpus.width, "C": corpus.num_classes}
    with open(os.path.join(out_dir, "manifest.json"), "wb") as fh:
        fh.write(_dump_json(manifest))


def synth_generate(n: int, h: int, w: int, num_classes: int, seed: int, out_dir: str,
                   overwrite: bool = False, style: SynthStyle = SynthStyle()) -> Corpus:
    corpus = synth_corpus(n, h, w, num_classes, seed, style)
    write_corpus(corpus, out_dir, overwrite)
    return corpus


def load_corpus(corpus_dir: str) -> Corpus:
    """Read a corpus directory; raises CorpusError / NetpbmError with file and byte context."""
    mpath = os.path.join(corpus_dir, "manifest.json")
    try:
        with open(mpath, "rb") as fh:
            manifest = json.loads(fh.read().decode("ascii"))
        ids, h, w, c = manifest["ids"], int(manifest["H"]), int(manifest["W"]), int(manifest["C"])
    except FileNotFoundError:
        raise CorpusError(f"{mpath}: manifest not found") from None
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CorpusError(f"{mpath}: malformed manifest ({exc})") from None
    samples = []
    for sid in ids:
        ipath = os.path.join(corpus_dir, "img", f"{sid}.ppm")
        lpath = os.path.join(corpus_dir, "lab", f"{sid}.pgm")
        for p in (ipath, lpath):
            if not os.path.exists(p):
                raise CorpusError(f"{p}: file listed in manifest is missing")
        img = netpbm.read(ipath, expect="P6")
        lab = netpbm.read(lpath, expect="P5")
        if img.shape[:2] != (h, w) or lab.shape != (h, w):
            raise CorpusError(f"{sid}: size {img.shape[1]}x{img.shape[0]} / {lab.shape[1]}x{lab.shape[0]} "
                              f"differs from manifest {w}x{h}")
        bad = (lab >= c) & (lab != IGNORE_INDEX)
        if bad.any():
            flat = int(np.flatnonzero(bad)[0])
            header = len(netpbm.encode(lab)) - lab.size
            raise CorpusError(f"{lpath}: label value {int(lab.flat[flat])} outside [0, {c}) "
                              f"at byte {header + flat}")
        samples.append(Sample(img.astype(np.float32) / np.float32(255.0), lab.copy(), sid))
    return Corpus(samples, h, w, c)


# --------------------------------------------------------------------------
# splits and batches

@dataclass
class SplitManifest:
    labeled: List[str]
    unlabeled: List[str]
    seed: int

    def to_json(self) -> bytes:
        return _dump_json({"seed": self.seed, "labeled": self.labeled, "unlabeled": self.unlabeled})

    @classmethod
    def from_json(cls, buf: bytes) -> "SplitManifest":
        d = json.loads(buf)
        return cls(list(d["labeled"]), list(d["unlabeled"]), int(d["seed"]))


def split(ids: Sequence[str], n_labeled: int, seed: int) -> SplitManifest:
    ids = list(ids)
    if not 0 <= n_labeled <= len(ids):
        raise ValueError(f"n_labeled={n_labeled} outside [0, {len(ids)}]")
    perm = np.random.default_rng([seed, 0x5917]).permutation(len(ids))
    chosen = set(perm[:n_labeled].tolist())
    return SplitManifest([ids[i] for i in range(len(ids)) if i in chosen],
                         [ids[i] for i in range(len(ids)) if i not in chosen], seed)


def write_split(manifest: SplitManifest, corpus_dir: str):
    with open(os.path.join(corpus_dir, "split.json"), "wb") as fh:
        fh.write(manifest.to_json())


def read_split(corpus_dir: str) -> SplitManifest:
    with open(os.path.join(corpus_dir, "split.json"), "rb") as fh:
        return SplitManifest.from_json(fh.read())


@dataclass
class Batch:
    labeled: List[str]
    unlabeled: List[str]

    def __post_init__(self):
        if len(self.labeled) != len(self.unlabeled):
            raise ValueError("labeled and unlabeled halves must be equal")


class _EpochStream:
    """Infinite concatenation of seeded per-epoch permutations of a pool."""

    def __init__(self, pool: Sequence[str], seed: int, key: int):
        if not pool:
            raise ValueError("cannot sample from an empty pool")
        self.pool = list(pool)
        self.seed, self.key = seed, key
        self._perms: Dict[int, np.ndarray] = {}

    def item(self, k: int) -> str:
        n = len(self.pool)
        epoch, pos = divmod(k, n)
        perm = self._perms.get(epoch)
        if perm is None:
            perm = np.random.default_rng([self.seed, self.key, epoch]).permutation(n)
            self._perms = {epoch: perm}
        return self.pool[perm[pos]]

    def take(self, start: int, count: int) -> List[str]:
        return [self.item(k) for k in range(start, start + count)]


class BatchSampler:
    """Equal labeled/unlabeled batches as a pure function of (seed, iteration, phase).

    The unlabeled pool is visited once per epoch; the labeled pool is cycled
    (reshuffled each pass) when it is smaller.
    """

    def __init__(self, manifest: SplitManifest, batch_size: int, seed: int):
        self.batch_size = batch_size
        self.seed = seed
        self._lab = [_EpochStream(manifest.labeled, seed, 2 * p) for p in range(2)]
        self._unl = [_EpochStream(manifest.unlabeled, seed, 2 * p + 1) for p in range(2)]
        self._cursor = 0

    def batch(self, iteration: int, phase: int = 0) -> Batch:
        b = self.batch_size
        return Batch(self._lab[phase].take(iteration * b, b), self._unl[phase].take(iteration * b, b))

    def next_batch(self) -> Batch:
        out = self.batch(self._cursor)
        self._cursor += 1
        return out


def next_batch(manifest: SplitManifest, batch_size: int, epoch_rng_seed: int, iteration: int) -> Batch:
    return BatchSampler(manifest, batch_size, epoch_rng_seed).batch(iteration)
