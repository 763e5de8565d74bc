# cch/discriminator.py
"""
Semantic discriminator and every training loss.

    e   = Conv(onehot(S))                           segmentation features
    Q   = Σ_l softmax_l(e W w_lᵀ) w_l               fashion map
    D   = BC([Conv(R), Q])                          conditional logit
    L_D = softplus(-D(V)) + softplus(D(R)) + λ‖∇_V D(V)‖²
    L_G = softplus(-D(R)) + 1.5·mean(Δd²) + 0.5·mean(‖∇Δd‖²)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from Constants.variables import Disc, LossWeights, Text
from cch.diff_engine import DTYPE, as_tensor, input_gradient, require_finite
from cch.fashion_text import FashionText, Vocabulary, attention_weights, encode
from utils.errors import InvalidInputError, NumericError

Critic = Callable[[Tensor], Tensor]
R1_MODES = ("autograd", "finite_difference")

# ---------------- Types ---------------- #


@dataclass(frozen=True, eq=False)
class SegmentationMap:
    labels: Tensor  # (H,W) long, 0 = background, b+1 = part b

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise InvalidInputError(f"segmentation must be H×W, got {tuple(self.labels.shape)}")
        if self.labels.numel() and (int(self.labels.min()) < 0
                                    or int(self.labels.max()) >= Disc.NUM_LABELS):
            raise InvalidInputError(f"segmentation labels must lie in 0..{Disc.NUM_LABELS - 1}")

    @property
    def shape(self):
        return tuple(self.labels.shape)

    def one_hot(self) -> Tensor:
        """(17,H,W) float64."""
        return F.one_hot(self.labels.long(), Disc.NUM_LABELS).permute(2, 0, 1).to(DTYPE)


@dataclass(frozen=True, eq=False)
class FashionMap:
    q: Tensor  # (d_w,H',W')
    attention: Tensor  # (H',W',L), rows sum to 1


def image_batch(images: Union[Tensor, Sequence[Tensor]]) -> Tensor:
    """(H,W,3) or a list of them -> (B,3,H,W); (B,3,H,W) passes through."""
    if isinstance(images, Tensor):
        if images.ndim == 4:
            return images
        if images.ndim == 3 and images.shape[-1] == 3:
            return images.permute(2, 0, 1)[None]
        raise InvalidInputError(f"cannot batch an image of shape {tuple(images.shape)}")
    return torch.cat([image_batch(i) for i in images])


# ---------------- Network ---------------- #


def _conv(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1, dtype=DTYPE)


class DiscriminatorNet(nn.Module):
    """Seg encoder (2 convs), attention W, image stack of 4 convs with Q joined after the second."""

    def __init__(self, vocab: Vocabulary, *, embed_dim: int = Text.EMBED_DIM,
                 widths: Sequence[int] = Disc.WIDTHS, seg_dim: int = Disc.SEG_DIM,
                 slope: float = Disc.LEAKY_SLOPE, max_tokens: int = Text.MAX_TOKENS):
        super().__init__()
        if len(widths) != 4:
            raise InvalidInputError(f"discriminator needs 4 conv widths, got {list(widths)}")
        self.vocab = vocab
        self.max_tokens = max_tokens
        self.slope = slope
        self.words = nn.Embedding(len(vocab), embed_dim, padding_idx=vocab.pad_id, dtype=DTYPE)
        with torch.no_grad():
            self.words.weight.normal_(0.0, 0.3)
            self.words.weight[vocab.pad_id].zero_()
        self.seg_convs = nn.ModuleList([_conv(Disc.NUM_LABELS, widths[0]),
                                        _conv(widths[0], seg_dim)])
        self.attention = nn.Parameter(
            torch.randn(seg_dim, embed_dim, dtype=DTYPE) / math.sqrt(seg_dim * embed_dim))
        self.image_convs = nn.ModuleList([
            _conv(3, widths[0]),
            _conv(widths[0], widths[1]),
            _conv(widths[1] + embed_dim, widths[2]),
            _conv(widths[2], widths[3]),
        ])
        self.logit = nn.Linear(widths[3], 1, dtype=DTYPE)

    @property
    def embed_dim(self) -> int:
        return self.words.embedding_dim

    def encode(self, description: str) -> FashionText:
        return encode(description, self.vocab, self.words, self.max_tokens)

    def seg_features(self, one_hot: Tensor) -> Tensor:
        e = one_hot
        for conv in self.seg_convs:
            e = F.leaky_relu(conv(e), self.slope)
        return e

    def forward(self, images: Tensor, q: Tensor) -> Tensor:
        """images (B,3,H,W), q (B,d_w,H',W') -> logits (B,)."""
        h = images
        for i, conv in enumerate(self.image_convs):
            if i == 2:
                if h.shape[-2:] != q.shape[-2:] or h.shape[0] != q.shape[0]:
                    raise InvalidInputError(
                        f"fashion map {tuple(q.shape)} does not match image features "
                        f"{tuple(h.shape)}")
                h = torch.cat([h, q], dim=1)
            h = F.leaky_relu(conv(h), self.slope)
        return self.logit(h.mean(dim=(2, 3)))[:, 0]

    def critic(self, q: Tensor) -> Critic:
        return lambda images: self(images, q)


# ---------------- Fashion map / classification ---------------- #


def fashion_map(seg: Union[SegmentationMap, Tensor], words: FashionText,
                net: DiscriminatorNet) -> FashionMap:
    if not isinstance(seg, SegmentationMap):
        seg = SegmentationMap(seg)
    if words.embeddings.shape[-1] != net.embed_dim:
        raise InvalidInputError(
            f"word width {words.embeddings.shape[-1]} does not match discriminator {net.embed_dim}")
    e = net.seg_features(seg.one_hot()[None])[0].permute(1, 2, 0)  # (H',W',seg_dim)
    p = attention_weights(e, words, net.attention)
    q = p @ words.embeddings
    return FashionMap(q=q.permute(2, 0, 1), attention=p)


def fashion_maps(segs: Sequence[Union[SegmentationMap, Tensor]], texts: Sequence[str],
                 net: DiscriminatorNet) -> Tensor:
    """Stacked Q (B,d_w,H',W') for a batch of (segmentation, description) pairs."""
    return torch.stack([fashion_map(s, net.encode(t), net).q for s, t in zip(segs, texts)])


def discriminate(image: Union[Tensor, Sequence[Tensor]], q: Union[FashionMap, Tensor],
                 net: DiscriminatorNet) -> Tensor:
    q = q.q if isinstance(q, FashionMap) else q
    q = q[None] if q.ndim == 3 else q
    logits = net(image_batch(image), q)
    require_finite(logits.detach(), "discriminator logit")
    return logits


# ---------------- Losses ---------------- #


@dataclass
class DiscriminatorLoss:
    total: Tensor
    adversarial: Tensor
    r1: Tensor


def loss_d(real: Tensor, fake: Tensor, critic: Critic, r1_weight: float = Disc.R1_WEIGHT,
           mode: str = Disc.R1_MODE) -> DiscriminatorLoss:
    """Non-saturating D loss with an R1 penalty taken at the real pixels only."""
    if mode not in R1_MODES:
        raise InvalidInputError(f"unknown R1 mode {mode!r}; expected one of {R1_MODES}")
    real = real.detach().requires_grad_(True)
    d_real = critic(real)
    d_fake = critic(fake.detach())
    adversarial = F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
    if r1_weight == 0 or not d_real.requires_grad:
        penalty = torch.zeros((), dtype=DTYPE)
    elif mode == "autograd":
        grad = input_gradient(d_real, real)
        penalty = grad.pow(2).reshape(grad.shape[0], -1).sum(dim=1).mean()
    else:
        penalty = _r1_finite_difference(real.detach(), critic)
    r1 = r1_weight * penalty
    total = adversarial + r1
    if not bool(torch.isfinite(total.detach())):
        raise NumericError(f"discriminator loss is non-finite (adv={float(adversarial)}, "
                           f"r1={float(r1)})")
    return DiscriminatorLoss(total=total, adversarial=adversarial, r1=r1)


def _fd_grid(size: int, count: int) -> List[int]:
    return sorted({int(round(v)) for v in np.linspace(0, size - 1, min(count, size))})


def _r1_finite_difference(real: Tensor, critic: Critic, grid: int = Disc.R1_FD_GRID,
                          h: float = Disc.R1_FD_STEP) -> Tensor:
    """
    Central differences of D over a grid×grid pixel subsample, scaled up to the
    full image. The critic calls stay on the tape, so the estimate trains D.
    """
    b, c, height, width = real.shape
    rows, cols = _fd_grid(height, grid), _fd_grid(width, grid)
    total = torch.zeros(b, dtype=DTYPE)
    for i in rows:
        for j in cols:
            for ch in range(c):
                bump = torch.zeros_like(real)
                bump[:, ch, i, j] = h
                g = (critic(real + bump) - critic(real - bump)) / (2.0 * h)
                total = total + g * g
    return (total * (height * width) / (len(rows) * len(cols))).mean()


def loss_g(fake: Tensor, critic: Critic) -> Tensor:
    return F.softplus(-critic(fake)).mean()


def loss_off(delta_ds: Union[Tensor, Sequence[Tensor]]) -> Tensor:
    if not isinstance(delta_ds, Tensor):
        delta_ds = [d.reshape(-1) for d in delta_ds]
        if not delta_ds:
            raise InvalidInputError("offset loss needs at least one Δd value")
        delta_ds = torch.cat(delta_ds)
    delta_ds = as_tensor(delta_ds).reshape(-1)
    if delta_ds.numel() == 0:
        raise InvalidInputError("offset loss needs at least one Δd value")
    return (delta_ds * delta_ds).mean()


def loss_eik(points: Tensor, delta_fn: Callable[[Tensor], Tensor]) -> Tensor:
    """mean ‖∇_x̂ Δd‖² at points (P,3); the gradient stays on the tape."""
    if points.shape[0] == 0:
        return torch.zeros((), dtype=DTYPE)
    x = points.detach().clone().requires_grad_(True)
    delta = delta_fn(x)
    if not delta.requires_grad:
        return torch.zeros((), dtype=DTYPE)
    grad = input_gradient(delta, x)
    return (grad * grad).sum(dim=-1).mean()


def total_generator_loss(adv, off, eik):
    return adv + LossWeights.OFFSET * off + LossWeights.EIKONAL * eik
