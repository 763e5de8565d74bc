# cch/checks.py
"""
Finite-difference checks of the two trainable paths on a freshly built model.

generator path:      box normalize -> attention -> SIREN -> density -> quadrature
discriminator path:  fashion map -> conv stacks -> loss_d with the R1 penalty
"""

from __future__ import annotations

from typing import Dict

import numpy as np
import torch

from Constants.variables import Disc
from cch.body_model import BodyRig
from cch.diff_engine import GradcheckReport, gradcheck
from cch.discriminator import DiscriminatorNet, fashion_map, loss_d
from cch.fashion_text import Vocabulary
from cch.part_nets import normalize_to_box, part_forward
from cch.renderer import CCHGenerator, integrate_ray

DESCRIPTION = "long-sleeve denim pure color red upper long cotton floral blue lower"


def generator_path_check(generator: CCHGenerator, *, part: int = 2, samples: int = 16,
                         probes: int = 50, h: float = 1e-5, tol: float = 1e-4,
                         seed: int = 0) -> GradcheckReport:
    """Scalar = Σ rgb of one synthetic ray marched through one part's box."""
    rng = np.random.default_rng(seed)
    field = generator.fields[part]
    lo, hi = field.box_min, field.box_max
    start = lo + (hi - lo) * torch.from_numpy(rng.uniform(0.2, 0.8, size=3))
    end = lo + (hi - lo) * torch.from_numpy(rng.uniform(0.2, 0.8, size=3))
    t = torch.sort(torch.from_numpy(rng.uniform(0.0, 1.0, size=samples)))[0]
    x = start + t[:, None] * (end - start)
    direction = (end - start) / (end - start).norm()
    d_view = direction.expand(samples, 3)
    xhat = normalize_to_box(x, lo, hi)
    length = float((end - start).norm())

    def fn() -> torch.Tensor:
        words = generator.encode(DESCRIPTION)
        sample = part_forward(xhat, d_view, words, field, generator.density)
        out = integrate_ray(t * length, sample.sigma, sample.color, generator.background,
                            length / samples)
        return out.rgb.sum() + out.opacity

    blocks: Dict[str, torch.Tensor] = {
        "text.table": generator.text.table.weight,
        "density.log_alpha": generator.density.log_alpha,
    }
    blocks.update({f"fields.{part}.{name}": p for name, p in field.named_parameters()})
    return gradcheck(fn, blocks, probes=probes, h=h, tol=tol, seed=seed)


def discriminator_path_check(net: DiscriminatorNet, rig: BodyRig, *, size: int = 16,
                             probes: int = 50, h: float = 1e-5, tol: float = 1e-4,
                             seed: int = 0, r1_weight: float = Disc.R1_WEIGHT,
                             mode: str = Disc.R1_MODE) -> GradcheckReport:
    """Scalar = loss_d on random real/fake images with R1 enabled."""
    rng = np.random.default_rng(seed)
    real = torch.from_numpy(rng.uniform(0.0, 1.0, size=(1, 3, size, size)))
    fake = torch.from_numpy(rng.uniform(0.0, 1.0, size=(1, 3, size, size)))
    seg = torch.from_numpy(rng.integers(0, rig.num_parts + 1, size=(size, size)))

    def fn() -> torch.Tensor:
        q = fashion_map(seg, net.encode(DESCRIPTION), net).q[None]
        return loss_d(real, fake, net.critic(q), r1_weight, mode).total

    return gradcheck(fn, dict(net.named_parameters()), probes=probes, h=h, tol=tol, seed=seed)


def build_check_models(rig: BodyRig, vocab: Vocabulary, seed: int = 0):
    torch.manual_seed(seed)
    return CCHGenerator(rig, vocab), DiscriminatorNet(vocab)

