import csv
import json
import os

import numpy as np
import pytest

from maskseg import nets, trainer
from maskseg import tensorkit as tk
from maskseg.config import TrainConfig
from maskseg.trainer import (CheckpointError, Trainer, confusion_matrix, evaluate, expand_grid,
                             iou_from_confusion, load_checkpoint, poly_lr, read_checkpoint,
                             run_ablation, save_checkpoint, sgd_step)

from conftest import tiny_config

PHASE1_ONLY = {"toggles.use_mimpi": False, "toggles.use_mimfea": False, "toggles.use_mimse": False}


def test_poly_lr_examples():
    assert poly_lr(0.01, 0, 100, 0.9) == 0.01
    assert poly_lr(0.01, 50, 100, 0.9) == pytest.approx(0.01 * 0.5 ** 0.9, rel=1e-15)
    assert poly_lr(0.01, 100, 100, 0.9) == 0.0
    assert poly_lr(0.3, 0, 0, 0.9) == 0.3
    with pytest.raises(ValueError):
        poly_lr(0.01, 101, 100, 0.9)


def test_sgd_hand_trace():
    p = nets.init_params(nets.NetConfig(num_classes=2, enc_channels=(2, 2), dec_channels=2, trunk_dim=4), 0,
                         dtype=np.float64)
    mom = {n: np.zeros_like(p[n].data) for n in p.names()}
    w0 = p["enc.0.w"].data.copy()
    b0 = p["enc.0.b"].data.copy()
    for n in p.names():
        p[n].grad = np.ones_like(p[n].data)
    sgd_step(p, mom, {"main": 0.1, "pid": 0.0}, 0.9, 0.01)
    # v1 = g + wd*w ; w1 = w0 - lr*v1 ; biases skip decay
    v1 = 1.0 + 0.01 * w0
    np.testing.assert_allclose(p["enc.0.w"].data, w0 - 0.1 * v1, rtol=0, atol=1e-15)
    np.testing.assert_allclose(p["enc.0.b"].data, b0 - 0.1, rtol=0, atol=1e-15)
    w1 = p["enc.0.w"].data.copy()
    p["enc.0.w"].grad = np.ones_like(w1)
    sgd_step(p, mom, {"main": 0.1}, 0.9, 0.01)
    v2 = 0.9 * v1 + 1.0 + 0.01 * w1
    np.testing.assert_allclose(p["enc.0.w"].data, w1 - 0.1 * v2, rtol=0, atol=1e-15)
    assert p["enc.0.w"].grad is None


def test_confusion_and_iou_examples():
    pred = np.array([0, 0, 1, 1, 1, 0])
    lab = np.array([0, 0, 0, 1, 1, 1])
    cm = confusion_matrix(pred, lab, 2)
    np.testing.assert_array_equal(cm, [[2, 1], [1, 2]])
    iou, miou = iou_from_confusion(cm)
    np.testing.assert_allclose(iou, [0.5, 0.5])
    assert miou == 0.5
    # ignored pixels are skipped; a class absent from both sides leaves the mean
    cm = confusion_matrix(np.array([0, 1, 2]), np.array([0, 1, 255]), 3)
    iou, miou = iou_from_confusion(cm)
    assert np.isnan(iou[2]) and miou == 1.0


def test_evaluate_perfect_prediction_gives_one():
    cfg = tiny_config()
    tr = Trainer(cfg)
    res = tr.evaluate()
    assert res.confusion.sum() == sum((s.label != 255).sum() for s in tr.eval_corpus.samples)
    assert 0.0 <= res.miou <= 1.0


def _grads(cfg, it=0):
    tr = Trainer(cfg)
    tr.state.params = tr.state.params.astype(np.float64)
    inp = tr.inputs(it)
    tg = trainer.prepare_targets(tr.state.params, cfg, inp)
    total, comps = trainer.objective(tr.state.params, tr.state.memory.copy(), cfg, inp, tg)
    tk.backward(total)
    return tr.state.params, total, comps


def test_pixel_decoder_untouched_in_phase_one():
    params, _, comps = _grads(tiny_config(**PHASE1_ONLY))
    assert set(comps) == {"L_s", "L_u"}
    for n in params.group("pid"):
        assert params[n].grad is None or not params[n].grad.any(), n


def test_all_components_present_and_pid_trained():
    params, total, comps = _grads(tiny_config())
    assert set(comps) == {"L_s", "L_u", "L_mimpi", "L_mimfea", "L_mimse"}
    assert np.isfinite(float(total.data))
    assert any(params[n].grad is not None and params[n].grad.any() for n in params.group("pid"))


def test_semantic_targets_ignore_masks():
    # masked inputs never reach the targets: they come from the unmasked forward
    cfg = tiny_config()
    tr = Trainer(cfg)
    inp = tr.inputs(0)
    a = trainer.prepare_targets(tr.state.params, cfg, inp)
    inp.m_l[:] = False
    inp.m_s[:] = False
    b = trainer.prepare_targets(tr.state.params, cfg, inp)
    for k in ("l", "s", "w", "fp"):
        np.testing.assert_array_equal(a.probs[k], b.probs[k])


def test_fp_target_clipped_to_image_range():
    targets = {}
    for clamp in (False, True):
        cfg = tiny_config(**{"toggles.clamp_fp": clamp})
        tr = Trainer(cfg)
        for n in tr.state.params.group("pid"):
            tr.state.params[n].data *= 20  # push the raw reconstruction well outside [0, 1]
        targets[clamp] = trainer.prepare_targets(tr.state.params, cfg, tr.inputs(0)).x_fp
    raw = targets[False]
    assert raw.min() < 0 or raw.max() > 1
    np.testing.assert_array_equal(targets[True], np.clip(raw, 0.0, 1.0))


def test_zero_weights_reduce_to_phase_one_direction():
    # with every masked-modeling weight at 0 the loss is Phase I up to the normalizer
    zero = tiny_config(**{"weights.lambda_mp": 0.0, "weights.lambda_mf": 0.0, "weights.lambda_ms": 0.0})
    _, t_zero, _ = _grads(zero)
    _, t_one, _ = _grads(tiny_config(**PHASE1_ONLY))
    assert float(t_zero.data) == pytest.approx(float(t_one.data), rel=1e-12)


def test_lr_groups_in_metrics(tmp_path):
    cfg = tiny_config(iterations=5)
    Trainer(cfg).run(str(tmp_path))
    rows = [r for r in csv.reader(open(tmp_path / "metrics.csv")) if r and not r[0].startswith("#")]
    assert rows[0] == trainer.METRIC_COLUMNS
    steps = [r for r in rows[1:] if r[0] != "eval"]
    assert [int(r[0]) for r in steps] == list(range(5))
    main = [float(r[1]) for r in steps]
    assert main == [poly_lr(cfg.optim.lr, i, 5, cfg.optim.poly_power) for i in range(5)]
    assert {float(r[2]) for r in steps} == {cfg.optim.lr_pid}
    evals = [r for r in rows if r[0] == "eval"]
    assert len(evals) == 1 and evals[0][1] == "5" and len(evals[0]) == 3 + 3


def test_metrics_start_with_config_json(tmp_path):
    cfg = tiny_config(iterations=1)
    Trainer(cfg).run(str(tmp_path))
    first = open(tmp_path / "metrics.csv").readline()
    assert first.startswith("# config ")
    assert TrainConfig().override(json.loads(first[len("# config "):])) == cfg


def test_determinism_byte_identical(tmp_path):
    cfg = tiny_config(eval_interval=2)
    Trainer(cfg).run(str(tmp_path / "a"))
    Trainer(cfg).run(str(tmp_path / "b"))
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "ckpt_final.bin").read_bytes() == (tmp_path / "b" / "ckpt_final.bin").read_bytes()


def test_resume_bit_identical(tmp_path):
    cfg = tiny_config(iterations=6, checkpoint_interval=3)
    Trainer(cfg).run(str(tmp_path / "full"))
    state, cfg2 = load_checkpoint(str(tmp_path / "full" / "ckpt_000003"))
    assert state.iteration == 3 and cfg2 == cfg
    # continue a truncated copy of the metrics file, as `train --resume` does
    lines = (tmp_path / "full" / "metrics.csv").read_text().splitlines(keepends=True)
    os.makedirs(tmp_path / "resumed")
    (tmp_path / "resumed" / "metrics.csv").write_text("".join(lines[:2 + 3]))
    Trainer(cfg, state=state).run(str(tmp_path / "resumed"), append=True)
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "resumed" / "metrics.csv").read_bytes()
    assert (tmp_path / "full" / "ckpt_final.bin").read_bytes() == \
        (tmp_path / "resumed" / "ckpt_final.bin").read_bytes()


def test_checkpoint_round_trip_and_corruption(tmp_path):
    cfg = tiny_config()
    tr = Trainer(cfg)
    tr.step()
    path = str(tmp_path / "ck")
    save_checkpoint(tr.state, cfg, path)
    state, _ = load_checkpoint(path + ".json")
    for n in tr.state.params.names():
        np.testing.assert_array_equal(state.params[n].data, tr.state.params[n].data)
        np.testing.assert_array_equal(state.momenta[n], tr.state.momenta[n])
    np.testing.assert_array_equal(state.memory.vectors, tr.state.memory.vectors)
    blob = (tmp_path / "ck.bin").read_bytes()
    (tmp_path / "ck.bin").write_bytes(blob[:-10])
    with pytest.raises(CheckpointError, match="memory/initialized"):
        read_checkpoint(path)
    (tmp_path / "ck.bin").write_bytes(blob + b"\0\0\0\0")
    with pytest.raises(CheckpointError, match="trailing data"):
        read_checkpoint(path)
    os.remove(tmp_path / "ck.bin")
    with pytest.raises(CheckpointError, match="missing"):
        read_checkpoint(path)


def test_checkpoint_hash_mismatch_warns(tmp_path):
    cfg = tiny_config()
    tr = Trainer(cfg)
    save_checkpoint(tr.state, cfg, str(tmp_path / "ck"))
    with pytest.warns(UserWarning, match="config hash"):
        load_checkpoint(str(tmp_path / "ck"), cfg.override({"weights.lambda_u": 0.25}))


def test_non_finite_loss_raises():
    cfg = tiny_config(**PHASE1_ONLY)
    tr = Trainer(cfg)
    tr.state.params["sed.out.b"].data[:] = np.nan
    with pytest.raises(FloatingPointError, match="iteration 0"):
        tr.step()


def test_expand_grid_forms():
    assert [len(expand_grid(g)[1]) for g in ("components", "ratio_patch", "semloss")] == [6, 9, 3]
    base, cells = expand_grid({"base": {"iterations": 2}, "axes": {"mask.ratio": [0.2, 0.4], "mask.patch_size": [2, 4]}})
    assert base == {"iterations": 2} and len(cells) == 4
    with pytest.raises(ValueError):
        expand_grid("nope")
    with pytest.raises(ValueError):
        expand_grid({"cells": [{"name": "a"}, {"name": "a"}]})


def _read_results(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_ablation_components_grid(tmp_path):
    base = tiny_config(iterations=2)
    path = run_ablation(base, "components", str(tmp_path / "a"))
    rows = _read_results(path)
    assert [r["cell"] for r in rows] == [n for n, _ in trainer.BUILTIN_GRIDS["components"]]
    assert all(r["status"] == "ok" for r in rows)
    assert set(rows[0]) == {"cell", "overrides", "status", "miou", "iou_0", "iou_1", "iou_2"}
    # the Phase-I cell matches a standalone run of the same config bit for bit
    Trainer(base.override(PHASE1_ONLY)).run(str(tmp_path / "solo"))
    assert (tmp_path / "solo" / "ckpt_final.bin").read_bytes() == \
        (tmp_path / "a" / "baseline" / "ckpt_final.bin").read_bytes()
    assert (tmp_path / "solo" / "metrics.csv").read_bytes() == \
        (tmp_path / "a" / "baseline" / "metrics.csv").read_bytes()


def test_ablation_records_bad_cells(tmp_path):
    grid = {"cells": [{"name": "good", "set": {}}, {"name": "bad", "set": {"no.such": 1}}]}
    rows = _read_results(run_ablation(tiny_config(iterations=1), grid, str(tmp_path)))
    assert rows[0]["status"] == "ok" and rows[1]["status"].startswith("error")
