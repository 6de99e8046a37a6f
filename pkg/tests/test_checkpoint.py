import struct

import numpy as np
import pytest

from mdmoe.checkpoint import MAGIC, VERSION, Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from mdmoe.model import MaskPredictor, ModelConfig


def _ckpt():
    cfg = ModelConfig(n_layers=1, d_model=16, n_heads=2, n_experts=4, n_active=2, d_expert=8, max_context=16)
    m = MaskPredictor(cfg, seed=0)
    params = {k: p.data for k, p in m.params.items()}
    return Checkpoint(
        cfg, params, stage="s1", tokens_seen=100, step=3, stage_step=2, stage_tokens=64, optim_step=3,
        optim_m={k: np.ones_like(v) for k, v in params.items()},
        optim_v={k: np.full_like(v, 2.0) for k, v in params.items()},
        rng_state={"state": 12345}, data_state={"prose": {"cursor": 7}}, extra={"best": 1.5},
    )


def test_round_trip(tmp_path):
    ck = _ckpt()
    path = save_checkpoint(tmp_path / "a.ckpt", ck)
    back = load_checkpoint(path)
    assert back.model_config == ck.model_config
    assert set(back.params) == set(ck.params)
    for k in ck.params:
        assert np.array_equal(back.params[k], ck.params[k]) and back.params[k].dtype == ck.params[k].dtype
        assert np.array_equal(back.optim_v[k], ck.optim_v[k])
    assert (back.stage, back.tokens_seen, back.step, back.stage_step, back.stage_tokens) == ("s1", 100, 3, 2, 64)
    assert back.rng_state == {"state": 12345} and back.data_state == ck.data_state and back.extra == {"best": 1.5}
    assert back.version == VERSION
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_newer_version_rejected(tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", _ckpt())
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", VERSION + 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="newer"):
        load_checkpoint(path)


def test_bad_magic_truncation_and_digest(tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", _ckpt())
    raw = path.read_bytes()
    (tmp_path / "b.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "b.ckpt")
    (tmp_path / "c.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "c.ckpt")
    bad = bytearray(raw)
    bad[12:28] = b"0" * 16
    (tmp_path / "d.ckpt").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(tmp_path / "d.ckpt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")
    assert raw.startswith(MAGIC)
