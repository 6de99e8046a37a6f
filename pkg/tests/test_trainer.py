import json
import math

import numpy as np
import pytest

from mdmoe.checkpoint import CheckpointError, load_checkpoint
from mdmoe.config import from_dict
from mdmoe.data import PackedStream, SftRecord
from mdmoe.trainer import TrainingError, Trainer, evaluate_bound, heldout_sequences, model_from_checkpoint, route_stats

TEXT = ["the quick brown fox jumps over the lazy dog " * 4, "pack my box with five dozen liquor jugs " * 4]


def _raw(**stage):
    base = {"name": "a", "token_budget": 4 * 4 * 16, "L_ctx": 16, "batch_size": 4, "init": "scratch"}
    return {
        "seed": 1,
        "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "n_experts": 4, "n_active": 2, "d_expert": 8,
                  "max_context": 32},
        "data": {"corpora": {"web": "unused.txt"}},
        "stages": {"1": {**base, **stage}},
    }


def _trainer(raw, out=None, **kw):
    kw.setdefault("corpora", {"web": PackedStream(TEXT)})
    return Trainer(from_dict(raw), out, **kw)


def uniform(K):
    return lambda ids: np.full(ids.shape + (K,), 1.0 / K)


def test_evaluate_bound_uniform_and_stderr():
    seqs = np.random.default_rng(0).integers(0, 3, size=(50, 8))
    est = evaluate_bound(uniform(4), seqs, 40, mask_id=3, seed=0)
    assert abs(est.mean - math.log(4)) < 3 * est.stderr + 1e-9
    a = evaluate_bound(uniform(4), seqs, 20, mask_id=3, seed=1)
    b = evaluate_bound(uniform(4), seqs, 80, mask_id=3, seed=2)
    assert b.stderr / a.stderr == pytest.approx(0.5, rel=0.2)
    with pytest.raises(ValueError):
        evaluate_bound(uniform(4), seqs, 0, mask_id=3)
    with pytest.raises(ValueError):
        evaluate_bound(uniform(4), np.zeros((0, 8), int), 1, mask_id=3)


def test_heldout_sequences():
    seqs = heldout_sequences(TEXT, 16, max_seqs=3)
    assert seqs.shape == (3, 16)
    with pytest.raises(ValueError):
        heldout_sequences(["ab"], 16)


def test_zero_budget_returns_init_unchanged(tmp_path):
    tr = _trainer(_raw(token_budget=0), tmp_path)
    init = {k: v.data.copy() for k, v in tr.model.params.items()}
    ck = tr.run_stages()
    tr.close()
    assert ck.step == 0 and tr.trace == []
    for k in init:
        np.testing.assert_array_equal(ck.params[k], init[k])
    assert (tmp_path / "final.ckpt").exists()


def test_short_run_logs_and_checkpoints(tmp_path):
    tr = _trainer(_raw(checkpoint_interval=2), tmp_path)
    ck = tr.run_stages()
    tr.close()
    assert ck.step == 4 and ck.tokens_seen == 4 * 4 * 16
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert len(lines) == 4
    for key in ("task_loss", "lb_loss", "z_loss", "lr", "grad_norm", "max_f", "expert_f"):
        assert key in lines[0]
    assert all(len(r["expert_f"][0]) == 4 and sum(r["expert_f"][0]) == pytest.approx(2) for r in lines)
    assert load_checkpoint(tmp_path / "latest.ckpt").step == 4
    assert load_checkpoint(tmp_path / "stage_a.ckpt").stage == "a"
    m = model_from_checkpoint(ck)
    assert m.predict(np.arange(10)).shape == (10, 260)
    stats = route_stats(m, heldout_sequences(TEXT, 16))
    assert len(stats) == 1 and sum(stats[0]["f"]) == pytest.approx(2)


def test_non_finite_loss_aborts():
    tr = _trainer(_raw())
    tr._begin_stage(tr.run.stages[0], None)
    tr.model.params["lm_head"].data[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        tr.train_stage(tr.run.stages[0])


def test_incompatible_checkpoint_rejected(tmp_path):
    tr = _trainer(_raw(token_budget=0), tmp_path)
    ck = tr.run_stages()
    raw = _raw(token_budget=0)
    raw["model"]["d_model"] = 32
    other = _trainer(raw)
    with pytest.raises(CheckpointError):
        other._load_params(ck)


def test_sft_stage_updates_and_reports_drops():
    raw = _raw(kind="sft", token_budget=200, L_ctx=24, init="scratch")
    recs = [SftRecord([("hi", "there")]), SftRecord([("q", "a" * 40)]), SftRecord([("x", "yz"), ("a", "b")])]
    tr = _trainer(raw, sft_records=recs)
    before = tr.model.params["lm_head"].data.copy()
    tr.run_stages()
    assert tr.trace and all("dropped" in r for r in tr.trace)
    assert sum(r["dropped"] for r in tr.trace) > 0
    assert not np.array_equal(before, tr.model.params["lm_head"].data)
    only_long = _trainer(raw, sft_records=[SftRecord([("q", "a" * 40)])])
    with pytest.raises(TrainingError):
        only_long.run_stages()


def test_best_init_uses_lowest_eval():
    raw = _raw(select_best=True, eval_interval=1)
    raw["stages"]["2"] = {"name": "b", "token_budget": 0, "init": "best"}
    held = heldout_sequences(TEXT, 16, 2)
    tr = _trainer(raw, heldout=held)
    tr.run_stages()
    evals = [r["eval_bound"] for r in tr.trace if "eval_bound" in r]
    assert len(evals) == 4 and tr.best["a"] == min(evals)
    best = tr._best_params["a"]
    for k, v in tr.model.params.items():
        np.testing.assert_array_equal(v.data, best[k])
    raw["stages"]["1"]["select_best"] = False
    with pytest.raises(TrainingError, match="best"):
        _trainer(raw, heldout=held).run_stages()
