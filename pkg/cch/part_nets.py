# cch/part_nets.py
"""
Per-part SIREN fields, SDF -> density conversion and the multi-part mixture.

Each body part b owns a PartField F^b evaluated in its box-normalized frame:
    f   = Linear(x̂, d_view)
    ctx = cross_attention(f, words, W^b)
    (c_raw, Δd) = SIREN([f, ctx])
    c = sigmoid(c_raw);  d = capsule_sdf(x) + Δd;  σ = α⁻¹ sigmoid(-d/α)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from Constants.variables import Fields, Text
from cch.body_model import BodyRig
from cch.diff_engine import DTYPE, require_finite
from cch.fashion_text import FashionText, cross_attention
from cch.ray_geometry import capsule_sdf
from utils.errors import InvalidInputError

# ---------------- Box normalization ---------------- #


def normalize_to_box(x: Tensor, box_min: Tensor, box_max: Tensor) -> Tensor:
    """x̂ = (2x - (o_max + o_min)) / (o_max - o_min); center -> 0, faces -> ±1."""
    return (2.0 * x - (box_max + box_min)) / (box_max - box_min)


def denormalize_from_box(xhat: Tensor, box_min: Tensor, box_max: Tensor) -> Tensor:
    return 0.5 * (xhat * (box_max - box_min) + (box_max + box_min))


# ---------------- SIREN ---------------- #


class SirenLayer(nn.Module):

    def __init__(self, in_features: int, out_features: int, omega0: float = Fields.OMEGA0,
                 is_first: bool = False):
        super().__init__()
        self.omega0 = omega0
        self.linear = nn.Linear(in_features, out_features, dtype=DTYPE)
        with torch.no_grad():
            if is_first:
                bound = 1.0 / in_features
            else:
                bound = math.sqrt(6.0 / in_features) / omega0
            self.linear.weight.uniform_(-bound, bound)

    def forward(self, x: Tensor) -> Tensor:
        return torch.sin(self.omega0 * self.linear(x))


class SirenMLP(nn.Module):
    """Sine-activated trunk with a color head (3) and a zero-initialized Δd head (1)."""

    def __init__(self, in_features: int, hidden_layers: int = Fields.HIDDEN_LAYERS,
                 hidden_units: int = Fields.HIDDEN_UNITS, omega0: float = Fields.OMEGA0):
        super().__init__()
        layers = [SirenLayer(in_features, hidden_units, omega0, is_first=True)]
        for _ in range(hidden_layers - 1):
            layers.append(SirenLayer(hidden_units, hidden_units, omega0))
        self.trunk = nn.Sequential(*layers)
        self.color_head = nn.Linear(hidden_units, 3, dtype=DTYPE)
        self.delta_head = nn.Linear(hidden_units, 1, dtype=DTYPE)
        nn.init.zeros_(self.delta_head.weight)
        nn.init.zeros_(self.delta_head.bias)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        hidden = self.trunk(x)
        return self.color_head(hidden), self.delta_head(hidden)[..., 0]


# ---------------- Density ---------------- #


class DensityParams(nn.Module):
    """α > 0 stored as exp(log α)."""

    def __init__(self, alpha_init: float = Fields.ALPHA_INIT):
        super().__init__()
        if not alpha_init > 0:
            raise InvalidInputError(f"alpha must be positive, got {alpha_init}")
        self.log_alpha = nn.Parameter(torch.tensor(math.log(alpha_init), dtype=DTYPE))

    @property
    def alpha(self) -> Tensor:
        return torch.exp(self.log_alpha)

    def forward(self, sdf: Tensor) -> Tensor:
        return sdf_to_density(sdf, self.alpha)


def sdf_to_density(sdf: Tensor, alpha: Tensor) -> Tensor:
    return torch.sigmoid(-sdf / alpha) / alpha


# ---------------- Part fields ---------------- #


@dataclass(frozen=True, eq=False)
class RadianceSample:
    color: Tensor  # (...,3) in [0,1]
    sigma: Tensor  # (...,) >= 0
    delta_d: Tensor  # (...,) meters
    sdf: Tensor  # (...,) meters, base + Δd


class PartField(nn.Module):
    """F^b for one body part, with its canonical box and capsule primitive."""

    def __init__(self, rig: BodyRig, part: int, embed_dim: int = Text.EMBED_DIM,
                 feature_dim: int = Fields.FEATURE_DIM,
                 hidden_layers: int = Fields.HIDDEN_LAYERS,
                 hidden_units: int = Fields.HIDDEN_UNITS, omega0: float = Fields.OMEGA0):
        super().__init__()
        self.part = part
        self.register_buffer("box_min", rig.box_min[part].clone())
        self.register_buffer("box_max", rig.box_max[part].clone())
        self.register_buffer("capsule_a", rig.capsule_a[part].clone())
        self.register_buffer("capsule_b", rig.capsule_b[part].clone())
        self.register_buffer("capsule_radius", rig.capsule_radius[part].clone())
        self.feature = nn.Linear(6, feature_dim, dtype=DTYPE)
        self.attention = nn.Parameter(
            torch.randn(feature_dim, embed_dim, dtype=DTYPE) / math.sqrt(feature_dim * embed_dim))
        self.net = SirenMLP(feature_dim + embed_dim, hidden_layers, hidden_units, omega0)

    def base_sdf(self, xhat: Tensor) -> Tensor:
        x = denormalize_from_box(xhat, self.box_min, self.box_max)
        return capsule_sdf(x, self.capsule_a, self.capsule_b, self.capsule_radius)

    def features(self, xhat: Tensor, d_view: Tensor) -> Tensor:
        return self.feature(torch.cat([xhat, d_view], dim=-1))

    def raw(self, xhat: Tensor, d_view: Tensor, words: FashionText) -> Tuple[Tensor, Tensor]:
        f = self.features(xhat, d_view)
        ctx = cross_attention(f, words, self.attention)
        return self.net(torch.cat([f, ctx], dim=-1))

    def delta(self, xhat: Tensor, d_view: Tensor, words: FashionText) -> Tensor:
        return self.raw(xhat, d_view, words)[1]


def part_forward(xhat: Tensor, d_view: Tensor, words: FashionText, field: PartField,
                 density: DensityParams, *, check: bool = True) -> RadianceSample:
    c_raw, delta_d = field.raw(xhat, d_view, words)
    sdf = field.base_sdf(xhat) + delta_d
    sigma = density(sdf)
    color = torch.sigmoid(c_raw)
    if check:
        for name, value in (("color", color), ("sigma", sigma), ("delta sdf", delta_d)):
            require_finite(value, f"part field {name}", part=field.part)
    return RadianceSample(color=color, sigma=sigma, delta_d=delta_d, sdf=sdf)


# ---------------- Mixture ---------------- #


def _check_exponent(n: int) -> None:
    if int(n) != n or n % 2 != 0 or n <= 0:
        raise InvalidInputError(f"mixture exponent n must be a positive even integer, got {n}")


def mixture_weights(xhat: Tensor, inside: Tensor, m: float = Fields.MIXTURE_M,
                    n: int = Fields.MIXTURE_N) -> Tensor:
    """
    Normalized u_b = exp(-m Σ x̂^n) over candidate boxes.

    xhat: (P,B,3); inside: (P,B) bool. Rows with no candidate are all zero.
    If every candidate underflows, the one with the smallest Σ x̂^n takes weight 1.
    """
    _check_exponent(n)
    masked = torch.where(inside[..., None], xhat, torch.zeros_like(xhat))
    power = (masked**int(n)).sum(dim=-1)
    u = torch.where(inside, torch.exp(-m * power), torch.zeros_like(power))
    total = u.sum(dim=-1, keepdim=True)
    underflow = total <= 0
    far = torch.where(inside, power, torch.full_like(power, math.inf))
    nearest = F.one_hot(far.argmin(dim=-1), num_classes=xhat.shape[-2]).to(xhat.dtype)
    nearest = nearest * inside
    safe_total = torch.where(underflow, torch.ones_like(total), total)
    return torch.where(underflow, nearest, u / safe_total)


def blend(weights: Tensor, color: Tensor, sigma: Tensor) -> Tuple[Tensor, Tensor]:
    """Σ_b w_b {c_b, σ_b} for weights (P,B), color (P,B,3), sigma (P,B)."""
    return (weights[..., None] * color).sum(dim=-2), (weights * sigma).sum(dim=-1)


def mixture(candidates: Sequence[Tuple[Tensor, RadianceSample]], m: float = Fields.MIXTURE_M,
            n: int = Fields.MIXTURE_N) -> RadianceSample:
    """Blend per-part samples of the boxes containing a point (one row per point)."""
    if not candidates:
        raise InvalidInputError("mixture needs at least one candidate box")
    xhat = torch.stack([c[0] for c in candidates], dim=-2)
    inside = torch.ones(xhat.shape[:-1], dtype=torch.bool)
    w = mixture_weights(xhat, inside, m, n)
    samples: List[RadianceSample] = [c[1] for c in candidates]
    color, sigma = blend(w, torch.stack([s.color for s in samples], dim=-2),
                         torch.stack([s.sigma for s in samples], dim=-1))
    delta_d = (w * torch.stack([s.delta_d for s in samples], dim=-1)).sum(dim=-1)
    sdf = (w * torch.stack([s.sdf for s in samples], dim=-1)).sum(dim=-1)
    return RadianceSample(color=color, sigma=sigma, delta_d=delta_d, sdf=sdf)
