# cch/trainer.py
"""
Adversarial training loop, evaluation and the controllability probe.

Exports:
- build_models(config, rig, vocab) -> (CCHGenerator, DiscriminatorNet)
- sample_batch / generator_objective: one rendered batch and the G loss on it
- train(config, *, records=None, resume=False) -> Checkpoint
- psnr(a, b) -> float (math.inf for identical images)
- render_record(generator, record, camera, seed) -> RenderResult
- probe_controllability(generator, records, camera, ...) -> ProbeReport

One step, with all randomness drawn from a single PCG64 generator:
    pick B records, crop a patch per record, render the fake patch (tape on)
    D: loss_d(real, fake.detach()) -> Adam
    G: loss_g + 1.5·loss_off + 0.5·loss_eik (+ recon_weight·MSE) -> Adam
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from Constants.palette import PALETTE
from Constants.variables import METRICS_FILE, PSNR_INFINITY
from cch.body_model import BodyRig, load_rig
from cch.checkpoint import Checkpoint, load_checkpoint, restore, save_checkpoint, snapshot
from cch.config import RunConfig
from cch.dataset import ToyRecord, load_dataset, upper_region
from cch.diff_engine import DTYPE, as_tensor, backward
from cch.discriminator import (DiscriminatorNet, fashion_maps, loss_d, loss_eik, loss_g, loss_off,
                               total_generator_loss)
from cch.fashion_text import FashionText, Vocabulary
from cch.ray_geometry import Camera, generate_rays
from cch.renderer import (CCHGenerator, ImageBuffer, RenderOutput, RenderResult, render_batch,
                          render_image)
from pretty_logs import pretty_log, set_log_file
from utils.errors import InvalidInputError, NumericError, TrainingDivergedError
from utils.logs.metrics import MetricsLog

# ---------------- Models ---------------- #


def build_models(config: RunConfig, rig: BodyRig,
                 vocab: Vocabulary) -> Tuple[CCHGenerator, DiscriminatorNet]:
    """Fresh generator and discriminator; initialization is fixed by train.seed."""
    m = config.model
    torch.manual_seed(config.train.seed)
    generator = CCHGenerator(rig, vocab,
                             samples=m.samples,
                             mixture_m=m.mixture_m,
                             mixture_n=m.mixture_n,
                             neighbors=m.neighbors,
                             embed_dim=m.embed_dim,
                             max_tokens=m.max_tokens,
                             feature_dim=m.feature_dim,
                             hidden_layers=m.hidden_layers,
                             hidden_units=m.hidden_units,
                             omega0=m.omega0,
                             alpha_init=m.alpha_init,
                             background=m.background)
    discriminator = DiscriminatorNet(vocab, embed_dim=m.embed_dim, widths=m.disc_widths,
                                     seg_dim=m.seg_dim, max_tokens=m.max_tokens)
    return generator, discriminator


def load_assets(config: RunConfig) -> Tuple[BodyRig, Vocabulary]:
    return load_rig(config.paths.rig), Vocabulary.from_file(config.paths.vocab)


def make_optimizers(config: RunConfig, generator: CCHGenerator,
                    discriminator: DiscriminatorNet):
    betas = tuple(config.train.betas)
    opt_g = torch.optim.Adam(generator.parameters(), lr=config.train.lr_g, betas=betas)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.train.lr_d, betas=betas)
    return opt_g, opt_d


# ---------------- Metrics ---------------- #


def _pixels(image: Union[ImageBuffer, torch.Tensor, np.ndarray]) -> torch.Tensor:
    if isinstance(image, ImageBuffer):
        return image.rgb.detach()
    return as_tensor(image).detach()


def psnr(a: Union[ImageBuffer, torch.Tensor, np.ndarray],
         b: Union[ImageBuffer, torch.Tensor, np.ndarray]) -> float:
    """10·log10(1/MSE) for unit-range images; math.inf when they are identical."""
    x, y = _pixels(a), _pixels(b)
    if x.shape != y.shape:
        raise InvalidInputError(f"cannot compare images of shapes {tuple(x.shape)} and "
                                f"{tuple(y.shape)}")
    mse = float(((x - y)**2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def format_psnr(value: float) -> str:
    return PSNR_INFINITY if math.isinf(value) else f"{value:.4f}"


# ---------------- Steps ---------------- #


@dataclass
class Batch:
    real: torch.Tensor  # (B,3,P,P)
    segs: List[torch.Tensor]  # (P,P) each
    texts: List[str]
    fake: torch.Tensor  # (B,3,P,P), generator graph attached
    outputs: List[RenderOutput]
    words: List[FashionText]


def _crop(config: RunConfig, rng: np.random.Generator) -> Tuple[int, int, int, int]:
    h, w, p = config.train.height, config.train.width, config.train.patch
    if p <= 0 or (p >= h and p >= w):
        return 0, 0, h, w
    ph, pw = min(p, h), min(p, w)
    top = int(rng.integers(0, h - ph + 1))
    left = int(rng.integers(0, w - pw + 1))
    return top, left, ph, pw


def sample_batch(config: RunConfig, generator: CCHGenerator, camera: Camera,
                  records: Sequence[ToyRecord], rng: np.random.Generator) -> Batch:
    picks = rng.integers(0, len(records), size=config.train.batch_size)
    ray_seed = int(rng.integers(0, 2**62))
    reals, fakes, segs, texts, outputs, words = [], [], [], [], [], []
    for i in picks.tolist():
        record = records[i]
        top, left, ph, pw = _crop(config, rng)
        rows = torch.arange(top, top + ph)
        cols = torch.arange(left, left + pw)
        pixels = (rows[:, None] * camera.width + cols[None, :]).reshape(-1)
        rays = generate_rays(camera, pixels)
        text = generator.encode(record.description)
        posed = generator.pose(record.shape, record.pose)
        out = render_batch(generator, rays, posed, text, ray_seed, width=camera.width,
                           collect=True)
        fakes.append(out.rgb.reshape(ph, pw, 3).permute(2, 0, 1))
        reals.append(torch.from_numpy(
            np.ascontiguousarray(record.image[top:top + ph, left:left + pw])).permute(2, 0, 1))
        segs.append(torch.from_numpy(
            np.ascontiguousarray(record.segmentation[top:top + ph, left:left + pw])))
        texts.append(record.description)
        outputs.append(out)
        words.append(text)
    return Batch(real=torch.stack(reals).to(DTYPE), segs=segs, texts=texts,
                 fake=torch.stack(fakes), outputs=outputs, words=words)


def eikonal_loss(generator: CCHGenerator, batch: Batch, limit: int,
                 rng: np.random.Generator) -> torch.Tensor:
    """Eikonal term on at most `limit` of this batch's render-time sample points."""
    entries = [(b, xhat, dirs, words) for out, words in zip(batch.outputs, batch.words)
               for b, xhat, dirs in out.eikonal_points]
    counts = np.array([e[1].shape[0] for e in entries], dtype=np.int64)
    total = int(counts.sum())
    if total == 0 or limit <= 0:
        return torch.zeros((), dtype=DTYPE)
    chosen = np.sort(rng.choice(total, size=min(limit, total), replace=False))
    offsets = np.concatenate([[0], np.cumsum(counts)])
    loss = torch.zeros((), dtype=DTYPE)
    for (b, xhat, dirs, words), lo, hi in zip(entries, offsets[:-1], offsets[1:]):
        local = chosen[(chosen >= lo) & (chosen < hi)] - lo
        if local.size == 0:
            continue
        idx = torch.from_numpy(local)
        field_ = generator.fields[b]
        d = dirs[idx]
        term = loss_eik(xhat[idx], lambda x: field_.delta(x, d, words))
        loss = loss + term * (local.size / chosen.size)
    return loss


@dataclass
class GeneratorObjective:
    total: torch.Tensor
    adversarial: torch.Tensor
    offset: torch.Tensor
    eikonal: torch.Tensor


def generator_objective(config: RunConfig, generator: CCHGenerator,
                        discriminator: DiscriminatorNet, batch: Batch,
                        rng: np.random.Generator) -> GeneratorObjective:
    """total_generator_loss on a rendered batch, plus the reconstruction term when enabled."""
    with torch.no_grad():
        q = fashion_maps(batch.segs, batch.texts, discriminator)
    adv = loss_g(batch.fake, discriminator.critic(q))
    deltas = [d for out in batch.outputs for d in out.delta_d]
    off = loss_off(deltas) if deltas else torch.zeros((), dtype=DTYPE)
    eik = eikonal_loss(generator, batch, config.train.eikonal_points, rng)
    total = total_generator_loss(adv, off, eik)
    if config.train.recon_weight:
        total = total + config.train.recon_weight * ((batch.fake - batch.real)**2).mean()
    return GeneratorObjective(total=total, adversarial=adv, offset=off, eikonal=eik)


def _finite_or_raise(step: int, losses: Dict[str, float]) -> None:
    if not all(math.isfinite(v) for v in losses.values()):
        raise TrainingDivergedError(step, losses)


def train_step(step: int, config: RunConfig, generator: CCHGenerator,
               discriminator: DiscriminatorNet, opt_g, opt_d, camera: Camera,
               records: Sequence[ToyRecord], rng: np.random.Generator) -> Dict[str, float]:
    losses: Dict[str, float] = {}
    try:
        batch = sample_batch(config, generator, camera, records, rng)

        # ----- discriminator -----
        q = fashion_maps(batch.segs, batch.texts, discriminator)
        d_loss = loss_d(batch.real, batch.fake, discriminator.critic(q),
                        config.model.r1_weight, config.model.r1_mode)
        losses.update(loss_d=d_loss.total.item(), r1=d_loss.r1.item())
        opt_d.zero_grad(set_to_none=True)
        backward(d_loss.total)
        opt_d.step()

        # ----- generator -----
        g = generator_objective(config, generator, discriminator, batch, rng)
        g_total = g.total
        losses.update(loss_g=g.adversarial.item(), loss_off=g.offset.item(),
                      loss_eik=g.eikonal.item())
        _finite_or_raise(step, {**losses, "total_g": g_total.item()})
        opt_g.zero_grad(set_to_none=True)
        backward(g_total)
        opt_g.step()
    except TrainingDivergedError:
        raise
    except NumericError as e:
        losses.setdefault("loss_d", math.nan)
        raise TrainingDivergedError(step, losses) from e
    return losses


# ---------------- Loop ---------------- #


def train(config: RunConfig, *, records: Optional[Sequence[ToyRecord]] = None,
          resume: bool = False) -> Checkpoint:
    out_dir = config.paths.out_dir
    os.makedirs(out_dir, exist_ok=True)
    set_log_file(os.path.join(out_dir, "train.log"))
    rig, vocab = load_assets(config)
    if records is None:
        records = load_dataset(config.paths.dataset)
    if not records:
        raise InvalidInputError("training needs at least one dataset record")
    camera = config.camera.build(config.train.height, config.train.width)
    if records[0].image.shape[:2] != (camera.height, camera.width):
        raise InvalidInputError(
            f"dataset images are {records[0].image.shape[:2]}, training renders "
            f"{(camera.height, camera.width)}; regenerate the dataset at the train resolution")

    generator, discriminator = build_models(config, rig, vocab)
    opt_g, opt_d = make_optimizers(config, generator, discriminator)
    rng = np.random.Generator(np.random.PCG64(config.train.seed))
    ckpt_path = config.paths.checkpoint_path()
    start = 0
    if resume and os.path.exists(ckpt_path):
        ckpt = load_checkpoint(ckpt_path)
        restore(ckpt, generator, discriminator, opt_g=opt_g, opt_d=opt_d, rng=rng)
        start = ckpt.step
        if ckpt.config.get("model") != config.to_dict()["model"]:
            pretty_log("warn", "resuming with a model config that differs from the checkpoint")
        pretty_log("train", f"resumed from {ckpt_path} at step {start}")
    metrics = MetricsLog(os.path.join(out_dir, METRICS_FILE), resume_step=start if resume else None)

    def checkpoint(step: int) -> Checkpoint:
        ckpt = snapshot(step, generator, discriminator, opt_g=opt_g, opt_d=opt_d,
                        config=config.to_dict(), rng=rng, r1_mode=config.model.r1_mode,
                        meta={"records": len(records), "betas": list(config.train.betas),
                              "lr_g": config.train.lr_g, "lr_d": config.train.lr_d})
        save_checkpoint(ckpt, ckpt_path)
        return ckpt

    latest = None
    pretty_log("train", f"{config.train.steps - start} step(s) on {len(records)} record(s), "
               f"batch {config.train.batch_size}, {camera.width}×{camera.height}")
    for step in range(start + 1, config.train.steps + 1):
        losses = train_step(step, config, generator, discriminator, opt_g, opt_d, camera,
                            records, rng)
        metrics.append(step, losses)
        latest = None
        if step % config.train.log_every == 0:
            pretty_log("train", " ".join(f"{k}={v:.5f}" for k, v in sorted(losses.items())),
                       label=f"step {step}")
        if step % config.train.checkpoint_every == 0:
            latest = checkpoint(step)
    if latest is None:
        latest = checkpoint(max(start, config.train.steps))
    pretty_log("ready", f"training finished at step {latest.step}")
    return latest


# ---------------- Evaluation ---------------- #


def render_record(generator: CCHGenerator, record: ToyRecord, camera: Camera, seed: int = 0,
                  *, description: Optional[str] = None, threads: int = 1) -> RenderResult:
    return render_image(generator, record.shape, record.pose, description or record.description,
                        camera, seed, threads=threads)


@dataclass
class ProbeReport:
    probes: int = 0
    moved: int = 0
    distances: List[Tuple[float, float]] = field(default_factory=list)  # (before, after)

    @property
    def fraction(self) -> float:
        return self.moved / self.probes if self.probes else 0.0


def probe_controllability(generator: CCHGenerator, records: Sequence[ToyRecord], camera: Camera,
                          *, probes: int = 50, seed: int = 0, threads: int = 1) -> ProbeReport:
    """
    Swap only the upper-garment color token and check whether the mean rendered
    color of the torso region moves toward the new palette entry.
    """
    if not records:
        raise InvalidInputError("the probe needs at least one record")
    rng = np.random.default_rng(seed)
    report = ProbeReport()
    colors = list(PALETTE)
    for i in range(probes):
        record = records[i % len(records)]
        outfit = record.outfit
        if outfit is None:
            raise InvalidInputError(f"record {i} has no parsed outfit")
        target = colors[int(rng.integers(len(colors)))]
        while target == outfit.upper.color:
            target = colors[int(rng.integers(len(colors)))]
        mask = upper_region(generator.rig, torch.from_numpy(record.segmentation))
        if not bool(mask.any()):
            continue
        swapped = outfit.with_color("upper", target).describe()
        before = render_record(generator, record, camera, seed, threads=threads).image.rgb
        after = render_record(generator, record, camera, seed, description=swapped,
                              threads=threads).image.rgb
        goal = as_tensor(PALETTE[target])
        d_before = float((before[mask].mean(dim=0) - goal).norm())
        d_after = float((after[mask].mean(dim=0) - goal).norm())
        report.probes += 1
        report.moved += int(d_after < d_before)
        report.distances.append((d_before, d_after))
    pretty_log("metric", f"controllability: {report.moved}/{report.probes} probes moved toward "
               "the target color")
    return report
