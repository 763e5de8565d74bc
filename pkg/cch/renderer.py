# cch/renderer.py
"""
Volume rendering along rays and full-image assembly, R = G(β, θ | 𝒯).

Quadrature: δ_i = t_{i+1} - t_i (last δ = (t_f - t_n)/N), a_i = 1 - exp(-σ_i δ_i),
T_i = Π_{j<i}(1 - a_j), C = Σ T_i a_i c_i + T_{N+1}·background.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor, nn

from Constants.variables import Fields, Rays as RayDefaults, Rig, Text
from cch.body_model import (BodyRig, JointTransforms, OrientedBoxes, blend_shape_offsets,
                            inverse_lbs_transforms, joint_transforms, posed_vertices,
                            transform_bboxes)
from cch.diff_engine import DTYPE, as_tensor
from cch.fashion_text import FashionText, TextEncoder, Vocabulary
from cch.part_nets import (DensityParams, PartField, blend, mixture_weights, normalize_to_box,
                           part_forward)
from cch.ray_geometry import (Camera, Rays, generate_rays, intersect_boxes, merge_intervals,
                              stratified_batch)
from pretty_logs import pretty_log
from utils.errors import InvalidInputError, NumericError

# ---------------- Images ---------------- #


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    rgb: Tensor  # (H,W,3) in [0,1], row-major

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise InvalidInputError(f"image must be H×W×3, got {tuple(self.rgb.shape)}")

    @property
    def height(self) -> int:
        return int(self.rgb.shape[0])

    @property
    def width(self) -> int:
        return int(self.rgb.shape[1])

    def numpy(self) -> np.ndarray:
        return self.rgb.detach().cpu().numpy()


# ---------------- Quadrature ---------------- #


@dataclass(frozen=True, eq=False)
class RayIntegral:
    rgb: Tensor  # (...,3)
    opacity: Tensor  # (...,)
    weights: Tensor  # (...,N), T_i a_i
    depth: Tensor  # (...,), expected t over the opaque part


def integrate_ray(t: Tensor, sigma: Tensor, color: Tensor,
                  background: Union[Tensor, Sequence[float]],
                  delta_cap: Union[Tensor, float]) -> RayIntegral:
    """Exponential-opacity quadrature for samples t (...,N), sigma (...,N), color (...,N,3)."""
    if t.shape[-1] < 1:
        raise InvalidInputError("a ray needs at least one sample")
    if t.shape[-1] > 1 and bool(torch.any(t[..., 1:] <= t[..., :-1])):
        raise InvalidInputError("ray samples must be strictly increasing")
    cap = as_tensor(delta_cap)
    cap = cap[..., None] if cap.ndim else cap.expand(t.shape[:-1])[..., None]
    delta = torch.cat([t[..., 1:] - t[..., :-1], cap], dim=-1)
    optical = sigma * delta
    alpha = -torch.expm1(-optical)
    # exclusive prefix sum of optical depth
    before = torch.cumsum(optical, dim=-1) - optical
    trans = torch.exp(-before)
    weights = trans * alpha
    t_end = torch.exp(-optical.sum(dim=-1))
    bg = as_tensor(background)
    rgb = (weights[..., None] * color).sum(dim=-2) + t_end[..., None] * bg
    opacity = weights.sum(dim=-1)
    depth = (weights * t).sum(dim=-1) / opacity.clamp_min(1e-12)
    return RayIntegral(rgb=rgb, opacity=opacity, weights=weights, depth=depth)


# ---------------- Generator ---------------- #


@dataclass(frozen=True, eq=False)
class PosedBody:
    transforms: JointTransforms
    offsets: Tensor
    boxes: OrientedBoxes
    vertices: Tensor  # observed mesh


@dataclass
class RenderOutput:
    rgb: Tensor  # (R,3)
    opacity: Tensor  # (R,)
    depth: Tensor  # (R,)
    part_label: Tensor  # (R,) long, 0 = background, b+1 = part b
    delta_d: List[Tensor] = field(default_factory=list)  # per-part Δd of every evaluation
    eikonal_points: List[Tuple[int, Tensor, Tensor]] = field(default_factory=list)


class CCHGenerator(nn.Module):
    """All generator parameters: word table, 16 part fields and the density scale."""

    def __init__(self,
                 rig: BodyRig,
                 vocab: Vocabulary,
                 *,
                 samples: int = RayDefaults.SAMPLES,
                 mixture_m: float = Fields.MIXTURE_M,
                 mixture_n: int = Fields.MIXTURE_N,
                 neighbors: int = Rig.NEIGHBORS,
                 embed_dim: int = Text.EMBED_DIM,
                 max_tokens: int = Text.MAX_TOKENS,
                 feature_dim: int = Fields.FEATURE_DIM,
                 hidden_layers: int = Fields.HIDDEN_LAYERS,
                 hidden_units: int = Fields.HIDDEN_UNITS,
                 omega0: float = Fields.OMEGA0,
                 alpha_init: float = Fields.ALPHA_INIT,
                 background: Sequence[float] = Fields.BACKGROUND):
        super().__init__()
        if samples < 1:
            raise InvalidInputError(f"samples per ray must be >= 1, got {samples}")
        if mixture_n % 2 != 0:
            raise InvalidInputError(f"mixture exponent n must be even, got {mixture_n}")
        self.rig = rig
        self.samples = int(samples)
        self.mixture_m = float(mixture_m)
        self.mixture_n = int(mixture_n)
        self.neighbors = int(neighbors)
        self.register_buffer("background", as_tensor(background).clone())
        self.text = TextEncoder(vocab, embed_dim, max_tokens)
        self.fields = nn.ModuleList([
            PartField(rig, b, embed_dim, feature_dim, hidden_layers, hidden_units, omega0)
            for b in range(rig.num_parts)
        ])
        self.density = DensityParams(alpha_init)

    def encode(self, text: Union[str, FashionText]) -> FashionText:
        return text if isinstance(text, FashionText) else self.text.encode(text)

    def pose(self, beta: Union[Tensor, Sequence], theta: Union[Tensor, Sequence]) -> PosedBody:
        transforms = joint_transforms(self.rig, theta)
        offsets = blend_shape_offsets(self.rig, beta, theta)
        return PosedBody(transforms=transforms,
                         offsets=offsets,
                         boxes=transform_bboxes(self.rig, transforms),
                         vertices=posed_vertices(self.rig, offsets, transforms))

    def render_rays(self, rays: Rays, posed: PosedBody, words: FashionText, seed: int, *,
                    width: int = 0, collect: bool = False) -> RenderOutput:
        count = len(rays)
        rig = self.rig
        bg = self.background.expand(count, 3)
        t_near, t_far, hit = intersect_boxes(rays, posed.boxes)
        near, far, any_hit = merge_intervals(t_near, t_far, hit)
        hit_idx = any_hit.nonzero().reshape(-1)
        out = RenderOutput(rgb=bg.clone(),
                           opacity=torch.zeros(count, dtype=DTYPE),
                           depth=torch.zeros(count, dtype=DTYPE),
                           part_label=torch.zeros(count, dtype=torch.long))
        if hit_idx.numel() == 0:
            return out

        sub = rays.subset(hit_idx)
        n = self.samples
        t = stratified_batch(near[hit_idx], far[hit_idx], n, seed, sub.pixels)
        pts = (sub.origins[:, None, :] + t[..., None] * sub.directions[:, None, :]).reshape(-1, 3)
        dirs = sub.directions[:, None, :].expand(-1, n, 3).reshape(-1, 3)

        to_canonical = inverse_lbs_transforms(pts, rig, posed.transforms, posed.offsets,
                                              self.neighbors, observed=posed.vertices)
        rot = to_canonical[:, :3, :3]
        x = torch.einsum("pij,pj->pi", rot, pts) + to_canonical[:, :3, 3]
        d_can = torch.einsum("pij,pj->pi", rot, dirs)
        d_can = d_can / d_can.norm(dim=-1, keepdim=True)

        xhat = normalize_to_box(x[:, None, :], rig.box_min, rig.box_max)  # (P,K,3)
        inside = (xhat.abs() <= 1.0).all(dim=-1)
        colors = torch.zeros(xhat.shape, dtype=DTYPE)
        sigmas = torch.zeros(inside.shape, dtype=DTYPE)
        for b, part in enumerate(self.fields):
            idx = inside[:, b].nonzero().reshape(-1)
            if idx.numel() == 0:
                continue
            sample = part_forward(xhat[idx, b], d_can[idx], words, part, self.density,
                                  check=False)
            self._check_part(sample, b, idx, n, sub.pixels, width)
            col = torch.full_like(idx, b)
            colors = colors.index_put((idx, col), sample.color)
            sigmas = sigmas.index_put((idx, col), sample.sigma)
            if collect:
                out.delta_d.append(sample.delta_d)
                out.eikonal_points.append((b, xhat[idx, b].detach(), d_can[idx].detach()))

        w = mixture_weights(xhat, inside, self.mixture_m, self.mixture_n)
        color, sigma = blend(w, colors, sigmas)
        color = color.reshape(-1, n, 3)
        sigma = sigma.reshape(-1, n)
        integral = integrate_ray(t, sigma, color, self.background,
                                 (far[hit_idx] - near[hit_idx]) / n)

        # dominant part: accumulated mixture weight along the ray
        share = (integral.weights.reshape(-1, 1) * w).reshape(-1, n, w.shape[-1]).sum(dim=1)
        label = torch.where(integral.opacity > 0.5, share.argmax(dim=-1) + 1,
                            torch.zeros_like(hit_idx))

        out.rgb = out.rgb.index_put((hit_idx,), integral.rgb)
        out.opacity = out.opacity.index_put((hit_idx,), integral.opacity)
        out.depth = out.depth.index_put((hit_idx,), integral.depth)
        out.part_label = out.part_label.index_put((hit_idx,), label.detach())
        return out

    @staticmethod
    def _check_part(sample, part: int, idx: Tensor, n: int, pixels: Tensor, width: int) -> None:
        bad = ~(torch.isfinite(sample.color).all(dim=-1) & torch.isfinite(sample.sigma)
                & torch.isfinite(sample.delta_d))
        if not bool(bad.any()):
            return
        ray = int(idx[bad.nonzero()[0, 0]]) // n
        pixel = int(pixels[ray])
        where = (pixel // width, pixel % width) if width else (0, pixel)
        raise NumericError("part field produced a non-finite sample", part=part, pixel=where)


def render_batch(generator: CCHGenerator, rays: Rays, posed: PosedBody, words: FashionText,
                 seed: int, *, width: int = 0, chunk: int = RayDefaults.CHUNK,
                 collect: bool = False) -> RenderOutput:
    """Sequential chunks with the tape on; outputs concatenated in ray order."""
    parts = [generator.render_rays(rays.subset(torch.arange(s, min(s + chunk, len(rays)))),
                                   posed, words, seed, width=width, collect=collect)
             for s in range(0, len(rays), chunk)]
    return RenderOutput(rgb=torch.cat([p.rgb for p in parts]),
                        opacity=torch.cat([p.opacity for p in parts]),
                        depth=torch.cat([p.depth for p in parts]),
                        part_label=torch.cat([p.part_label for p in parts]),
                        delta_d=[d for p in parts for d in p.delta_d],
                        eikonal_points=[e for p in parts for e in p.eikonal_points])


# ---------------- Full images ---------------- #


@dataclass
class RenderResult:
    image: ImageBuffer
    opacity: Tensor  # (H,W)
    depth: Tensor  # (H,W)
    part_label: Tensor  # (H,W) long
    seconds: float = 0.0


def render_image(generator: CCHGenerator,
                 beta: Union[Tensor, Sequence],
                 theta: Union[Tensor, Sequence],
                 text: Union[str, FashionText],
                 camera: Camera,
                 seed: int,
                 *,
                 threads: int = 1,
                 chunk: int = RayDefaults.CHUNK) -> RenderResult:
    """
    One forward pass per pixel, no parameter updates.

    Rays are split into fixed-size chunks independent of `threads`, and each
    pixel draws from its own RNG stream, so the image is bitwise identical for
    any worker count.
    """
    started = time.perf_counter()
    with torch.no_grad():
        words = generator.encode(text)
        posed = generator.pose(beta, theta)
    rays = generate_rays(camera)
    starts = list(range(0, len(rays), chunk))

    def work(start: int) -> RenderOutput:
        with torch.no_grad():
            part = rays.subset(torch.arange(start, min(start + chunk, len(rays))))
            return generator.render_rays(part, posed, words, seed, width=camera.width)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(work, starts))
    else:
        outputs = [work(s) for s in starts]

    h, w = camera.height, camera.width
    rgb = torch.cat([o.rgb for o in outputs]).reshape(h, w, 3).clamp(0.0, 1.0)
    result = RenderResult(
        image=ImageBuffer(rgb),
        opacity=torch.cat([o.opacity for o in outputs]).reshape(h, w),
        depth=torch.cat([o.depth for o in outputs]).reshape(h, w),
        part_label=torch.cat([o.part_label for o in outputs]).reshape(h, w),
        seconds=time.perf_counter() - started,
    )
    pretty_log("render", f"{w}×{h} frame in {result.seconds:.2f}s on {threads} thread(s)")
    return result
