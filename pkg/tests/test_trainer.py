import math
import os
import warnings

import numpy as np
import pytest
import torch

from Constants.variables import METRICS_FILE
from cch.checkpoint import restore
from cch.config import RunConfig
from cch.dataset import FashionGrammar, generate_dataset, make_record
from cch.discriminator import fashion_map
from cch.renderer import ImageBuffer
from cch.trainer import (build_models, format_psnr, generator_objective, load_assets,
                         probe_controllability, psnr, render_record, sample_batch, train)
from utils.errors import InvalidInputError, TrainingDivergedError
from utils.logs.metrics import read_metrics

# ---------------- PSNR ---------------- #


def test_psnr_anchors():
    a = torch.zeros(4, 4, 3, dtype=torch.float64)
    assert psnr(a, a) == math.inf
    assert format_psnr(psnr(a, a)) == "inf"
    assert psnr(a, torch.ones(4, 4, 3, dtype=torch.float64)) == 0.0
    assert psnr(ImageBuffer(a), ImageBuffer(torch.full((4, 4, 3), 0.1, dtype=torch.float64))) \
        == pytest.approx(20.0)
    assert format_psnr(20.0) == "20.0000"


def test_psnr_needs_matching_shapes():
    with pytest.raises(InvalidInputError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 2, 3)))


# ---------------- Loop ---------------- #


def test_runs_are_bit_reproducible(make_config, toy_records):
    first = make_config("one", steps=2)
    second = make_config("two", steps=2)
    a = train(first, records=toy_records)
    b = train(second, records=toy_records)
    rows_a = read_metrics(os.path.join(first.paths.out_dir, METRICS_FILE))
    rows_b = read_metrics(os.path.join(second.paths.out_dir, METRICS_FILE))
    assert rows_a == rows_b
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert os.path.exists(first.paths.checkpoint_path())


def test_training_changes_the_generator(make_config, toy_records):
    config = make_config("moves", steps=1)
    trained = train(config, records=toy_records)
    rig, vocab = load_assets(config)
    generator, _ = build_models(config, rig, vocab)
    fresh = {f"generator.{k}": v.numpy() for k, v in generator.state_dict().items()}
    assert any(not np.array_equal(trained.params[k], v) for k, v in fresh.items())


def test_loss_bookkeeping_does_not_warn(make_config, toy_records):
    with warnings.catch_warnings():
        warnings.filterwarnings("error", message=".*requires_grad.*")
        train(make_config("quiet", steps=1), records=toy_records)


def test_non_finite_losses_stop_training(make_config, toy_records, monkeypatch):
    monkeypatch.setattr("cch.trainer.loss_g",
                        lambda fake, critic: (fake * math.nan).mean())
    with pytest.raises(TrainingDivergedError) as err:
        train(make_config("nan", steps=2), records=toy_records)
    assert err.value.step == 1
    assert math.isnan(err.value.losses["loss_g"])


def test_dataset_resolution_must_match(make_config, toy_records):
    with pytest.raises(InvalidInputError):
        train(make_config("size", height=32), records=toy_records)


def test_generator_objective_descends_without_reconstruction(make_config, toy_records):
    config = make_config("descent", steps=0)
    assert config.train.recon_weight == 0.0
    generator, discriminator = build_models(config, *load_assets(config))
    camera = config.camera.build(config.train.height, config.train.width)

    def objective():
        batch = sample_batch(config, generator, camera, toy_records, np.random.default_rng(3))
        return generator_objective(config, generator, discriminator, batch,
                                   np.random.default_rng(4)).total

    before = objective()
    params = list(generator.parameters())
    grads = torch.autograd.grad(before, params, allow_unused=True)
    pairs = [(p, g) for p, g in zip(params, grads) if g is not None]
    norm = torch.sqrt(sum(g.pow(2).sum() for _, g in pairs))
    assert float(norm) > 0.0
    with torch.no_grad():
        for p, g in pairs:
            p -= 1e-4 * g / norm
    assert float(objective()) < float(before)


def test_attention_separates_the_garment_regions(make_config, toy_records):
    config = make_config("attention", steps=2)
    ckpt = train(config, records=toy_records)
    rig, vocab = load_assets(config)
    generator, discriminator = build_models(config, rig, vocab)
    restore(ckpt, generator, discriminator)

    seg = torch.zeros(16, 16, dtype=torch.long)
    seg[:8] = rig.names.index("chest") + 1
    seg[8:] = rig.names.index("pelvis") + 1
    with torch.no_grad():
        fm = fashion_map(seg, discriminator.encode("denim upper floral lower"), discriminator)
    top, bottom = fm.attention[0, 0], fm.attention[-1, -1]
    assert float((top - bottom).abs().max()) > 1e-6


# ---------------- Evaluation ---------------- #


def test_probe_reports_every_probe(tiny_config):
    rig, vocab = load_assets(tiny_config)
    generator, _ = build_models(tiny_config, rig, vocab)
    camera = tiny_config.camera.build(32, 16)
    records = [make_record(s, FashionGrammar(), rig, camera) for s in (1, 2)]
    report = probe_controllability(generator, records, camera, probes=3, seed=4)
    assert report.probes == 3
    assert 0 <= report.moved <= 3
    assert len(report.distances) == 3
    with pytest.raises(InvalidInputError):
        probe_controllability(generator, [], camera)


def test_render_record_matches_the_record_size(tiny_config, toy_records):
    rig, vocab = load_assets(tiny_config)
    generator, _ = build_models(tiny_config, rig, vocab)
    result = render_record(generator, toy_records[0], tiny_config.camera.build(16, 8))
    assert result.image.rgb.shape == (16, 8, 3)


# ---------------- Acceptance runs ---------------- #


@pytest.mark.slow
def test_single_record_overfit_with_the_reconstruction_term(make_config, rig):
    # recon_weight adds a supervised MSE term on top of the adversarial objective
    config = make_config("overfit", steps=5000, height=64, width=32, patch=32, batch_size=1,
                         recon_weight=10.0, checkpoint_every=1000, log_every=250)
    config.model = RunConfig().model
    camera = config.camera.build(64, 32)
    record = make_record(21, FashionGrammar(), rig, camera)
    ckpt = train(config, records=[record])
    generator, discriminator = build_models(config, *load_assets(config))
    restore(ckpt, generator, discriminator)
    rendered = render_record(generator, record, camera, threads=4)
    assert psnr(rendered.image, record.image) >= 20.0


@pytest.mark.slow
def test_color_swap_moves_the_upper_garment(make_config, rig):
    config = make_config("probe", steps=3000, height=64, width=32, patch=32, batch_size=4,
                         checkpoint_every=500, log_every=100)
    config.model = RunConfig().model
    camera = config.camera.build(64, 32)
    records = generate_dataset(200, FashionGrammar(), np.random.default_rng(1234), rig=rig,
                               camera=camera)
    ckpt = train(config, records=records)
    generator, discriminator = build_models(config, *load_assets(config))
    restore(ckpt, generator, discriminator)
    report = probe_controllability(generator, records, camera, probes=50, threads=4)
    assert report.fraction >= 0.9
