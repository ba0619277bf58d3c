"""Command-line entry point: ``maskseg <command> [flags]``.

Every command prints its resolved configuration as one JSON line before doing
any work, and exits nonzero with a one-line reason on failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from . import __version__


def _parse_sets(items: Optional[List[str]]) -> Dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def _hw(text: str):
    parts = text.lower().split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) <= 0:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}")
    return tuple(vals)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


def _train_config(args):
    from .config import TrainConfig, load_config
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    # dedicated flags win over --set
    over: Dict = _parse_sets(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        over.update({"seeds.model": args.seed, "seeds.data": args.seed, "seeds.mask": args.seed})
    if getattr(args, "iterations", None) is not None:
        over["iterations"] = args.iterations
    return cfg.override(over)


# --------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    from .data import synth_generate
    h, w = args.hw
    _emit({"command": "synth", "n": args.n, "height": h, "width": w, "classes": args.classes,
           "seed": args.seed, "out": args.out})
    if args.classes < 2:
        raise ValueError("need at least 2 classes (class 0 is background)")
    synth_generate(args.n, h, w, args.classes, args.seed, args.out, overwrite=args.overwrite)
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def cmd_split(args) -> int:
    from .data import load_corpus, split, write_split
    _emit({"command": "split", "corpus": args.corpus, "n_labeled": args.n_labeled, "seed": args.seed})
    corpus = load_corpus(args.corpus)
    manifest = split(corpus.ids, args.n_labeled, args.seed)
    write_split(manifest, args.corpus)
    print(f"labeled {len(manifest.labeled)}, unlabeled {len(manifest.unlabeled)}")
    return 0


def cmd_train(args) -> int:
    from .trainer import Trainer, load_checkpoint
    cfg = _train_config(args)
    print(cfg.to_json(), flush=True)
    state = None
    if args.resume:
        state, _ = load_checkpoint(args.resume, cfg)
    trainer = Trainer(cfg, state=state)
    res = trainer.run(args.out, append=args.resume is not None)
    if res is not None:
        print(f"final miou {res.miou!r}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_corpus
    from .trainer import evaluate, load_checkpoint, resolve_data
    state, cfg = load_checkpoint(args.ckpt)
    _emit({"command": "eval", "ckpt": args.ckpt, "corpus": args.corpus, "config": cfg.to_flat()})
    if args.corpus:
        corpus = load_corpus(args.corpus)
    else:
        corpus = resolve_data(cfg)[2]
        if corpus is None:
            raise ValueError("no --corpus given and the checkpoint's config has no eval data")
    if corpus.num_classes != cfg.data.num_classes:
        raise ValueError(f"corpus has {corpus.num_classes} classes, model has {cfg.data.num_classes}")
    res = evaluate(state.params, corpus)
    print(f"miou {res.miou!r}")
    for c, v in enumerate(res.iou):
        print(f"iou_{c} {float(v)!r}")
    return 0


def cmd_gradcheck(args) -> int:
    from .oracles import TOLERANCE, run_suite
    _emit({"command": "gradcheck", "modules": args.module or "all", "tolerance": TOLERANCE})
    results = run_suite(args.module)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.module}.{r.name} max_rel_err={r.error:.3e} ({r.seconds:.2f}s)")
    worst = max(results, key=lambda r: r.error)
    print(f"worst {worst.module}.{worst.name} {worst.error:.3e}")
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"error: {len(failed)} gradient check(s) above {TOLERANCE}", file=sys.stderr)
        return 1
    return 0


def cmd_maskstats(args) -> int:
    from .masking import MaskSpec, sample_mask
    h, w = args.hw
    _emit({"command": "maskstats", "ratio": args.ratio, "patch": args.patch, "trials": args.trials,
           "height": h, "width": w, "seed": args.seed})
    spec = MaskSpec(args.patch, args.ratio)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    out = open(os.path.join(args.out, "maskstats.csv"), "w", newline="") if args.out else sys.stdout
    try:
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(["seed", "cells", "masked_cells", "fraction"])
        fracs = []
        for t in range(args.trials):
            s = args.seed + t
            m = sample_mask(h, w, spec, np.random.default_rng(s))
            cells = m.grid[0] * m.grid[1]
            fracs.append(m.masked_cells / cells)
            wr.writerow([s, cells, m.masked_cells, repr(fracs[-1])])
    finally:
        if out is not sys.stdout:
            out.close()
    print(f"mean fraction {float(np.mean(fracs))!r}", file=sys.stderr)
    return 0


def cmd_ablate(args) -> int:
    from .trainer import BUILTIN_GRIDS, run_ablation
    cfg = _train_config(args)
    if args.grid in BUILTIN_GRIDS:
        grid = args.grid
    else:
        with open(args.grid) as fh:
            grid = json.load(fh)
    print(cfg.to_json(), flush=True)
    path = run_ablation(cfg, grid, args.out, workers=args.workers)
    with open(path) as fh:
        sys.stdout.write(fh.read())
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maskseg", description="Semi-supervised segmentation with class-wise masked modeling.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--hw", type=_hw, default=(64, 64), help="N or HxW (default 64)")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="write a labeled/unlabeled split into a corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--n-labeled", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_split)

    def train_flags(s):
        s.add_argument("--config", help="JSON file of flat dotted keys")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        s.add_argument("--seed", type=int, help="sets the model, data and mask seeds")
        s.add_argument("--iterations", type=int)
        s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train and write metrics.csv plus checkpoints under --out")
    train_flags(s)
    s.add_argument("--resume", help="checkpoint base path to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", help="corpus directory (default: the checkpoint config's eval data)")
    s.add_argument("--seed", type=int, default=0, help="unused by evaluation; accepted for uniformity")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="run the finite-difference oracle suite")
    s.add_argument("--module", action="append", help="restrict to a module (repeatable)")
    s.add_argument("--seed", type=int, default=0, help="the suite uses fixed seeds; accepted for uniformity")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("maskstats", help="sample masks and emit a CSV of masked-cell counts")
    s.add_argument("--ratio", type=float, default=0.4)
    s.add_argument("--patch", type=int, default=6)
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--hw", type=_hw, default=(36, 36))
    s.add_argument("--seed", type=int, default=0, help="first trial's seed; trial t uses seed+t")
    s.add_argument("--out", help="directory for maskstats.csv (default: stdout)")
    s.set_defaults(func=cmd_maskstats)

    s = sub.add_parser("ablate", help="run an ablation grid")
    train_flags(s)
    s.add_argument("--grid", required=True, help="grid JSON file or a built-in name")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        reason = str(msg).splitlines()[0] if str(msg) else type(exc).__name__
        print(f"error: {reason}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
