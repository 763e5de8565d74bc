import os

import numpy as np
import pytest
import torch

from Constants.variables import METRICS_FILE
from cch.checkpoint import (Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint,
                            restore, save_checkpoint, snapshot)
from cch.trainer import build_models, load_assets, train
from utils.errors import CheckpointError
from utils.logs.metrics import read_metrics


def _example():
    return Checkpoint(step=3,
                      params={"generator.w": np.arange(6, dtype=np.float64).reshape(2, 3),
                              "discriminator.b": np.array([0.5, -1.5])},
                      optimizer={"g/w/step": np.array(3.0, dtype=np.float32)},
                      config={"train": {"seed": 1}},
                      rng_state={"state": {"state": 2**100, "inc": 7}},
                      meta={"note": "x"})


# ---------------- Container ---------------- #


def test_encoding_is_stable():
    payload = encode_checkpoint(_example())
    back = decode_checkpoint(payload)
    assert encode_checkpoint(back) == payload
    assert back.step == 3
    assert back.rng_state["state"]["state"] == 2**100
    assert np.array_equal(back.params["generator.w"], _example().params["generator.w"])
    assert back.optimizer["g/w/step"].dtype == np.float32


@pytest.mark.parametrize("damage", ["truncate", "magic", "flip"])
def test_damaged_files_are_rejected(damage):
    payload = bytearray(encode_checkpoint(_example()))
    if damage == "truncate":
        payload = payload[:len(payload) // 2]
    elif damage == "magic":
        payload[:8] = b"NOTACKPT"
    else:
        payload[40] ^= 0xFF
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(payload))


def test_tiny_payload_is_rejected():
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"CCH")


def test_save_and_load(tmp_path):
    path = tmp_path / "nested" / "latest.ckpt"
    save_checkpoint(_example(), str(path))
    assert load_checkpoint(str(path)).meta == {"note": "x"}
    assert not (tmp_path / "nested" / "latest.ckpt.tmp").exists()
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "absent.ckpt"))


class _Scalar(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.log_alpha = torch.nn.Parameter(torch.tensor(0.3, dtype=torch.float64))
        self.w = torch.nn.Parameter(torch.ones(2, dtype=torch.float64))

    def forward(self):
        return (self.log_alpha.exp() * self.w).sum()


def test_scalar_parameters_and_their_moments_survive_a_round_trip():
    model, other = _Scalar(), _Scalar()
    opt = torch.optim.Adam(model.parameters(), lr=0.1)
    model().backward()
    opt.step()
    ckpt = decode_checkpoint(encode_checkpoint(snapshot(1, model, other, opt_g=opt)))
    assert ckpt.params["generator.log_alpha"].shape == ()
    assert ckpt.optimizer["g/log_alpha/exp_avg"].shape == ()

    fresh, fresh_d = _Scalar(), _Scalar()
    fresh_opt = torch.optim.Adam(fresh.parameters(), lr=0.1)
    restore(ckpt, fresh, fresh_d, opt_g=fresh_opt)
    assert fresh.log_alpha.shape == torch.Size([])
    for net, optimizer in ((model, opt), (fresh, fresh_opt)):
        optimizer.zero_grad()
        net().backward()
        optimizer.step()
    assert torch.equal(fresh.log_alpha, model.log_alpha)
    assert torch.equal(fresh.w, model.w)


def test_restore_rejects_a_different_model(tiny_config):
    rig, vocab = load_assets(tiny_config)
    generator, discriminator = build_models(tiny_config, rig, vocab)
    ckpt = snapshot(0, generator, discriminator)
    bigger = tiny_config.with_overrides({"model.hidden_units": 24})
    other, _ = build_models(bigger, rig, vocab)
    with pytest.raises(CheckpointError):
        restore(ckpt, other)


# ---------------- Training state ---------------- #


def test_zero_steps_saves_the_initialization(make_config, toy_records):
    config = make_config("zero", steps=0)
    ckpt = train(config, records=toy_records)
    assert ckpt.step == 0
    rig, vocab = load_assets(config)
    fresh = snapshot(0, *build_models(config, rig, vocab))
    assert set(ckpt.params) == set(fresh.params)
    assert all(np.array_equal(ckpt.params[k], fresh.params[k]) for k in fresh.params)


def test_resume_reproduces_an_uninterrupted_run(make_config, toy_records):
    straight = train(make_config("straight", steps=2), records=toy_records)

    first = make_config("split", steps=1)
    train(first, records=toy_records)
    resumed = train(first.with_overrides({"train.steps": 2}), records=toy_records, resume=True)

    assert resumed.step == straight.step == 2
    for key, value in straight.params.items():
        assert np.array_equal(resumed.params[key], value), key
    assert set(resumed.optimizer) == set(straight.optimizer)
    assert resumed.rng_state == straight.rng_state

    rows_a = read_metrics(os.path.join(make_config("straight").paths.out_dir, METRICS_FILE))
    rows_b = read_metrics(os.path.join(first.paths.out_dir, METRICS_FILE))
    assert rows_a == rows_b
    assert [r["step"] for r in rows_a] == [1, 2]
