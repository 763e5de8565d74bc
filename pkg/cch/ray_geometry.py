# cch/ray_geometry.py
"""
Pinhole cameras, ray generation, ray–box and ray–capsule intersection, and
stratified sampling along rays.

Random numbers come from numpy's PCG64 (a 64-bit permuted congruential
generator). Every ray owns a stream seeded with SeedSequence([seed, pixel_index]),
so samples do not depend on how pixels are scheduled across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from cch.body_model import OrientedBoxes
from cch.diff_engine import DTYPE, as_tensor
from utils.errors import InvalidInputError, InvalidIntervalError

# ---------------- Camera ---------------- #


@dataclass(frozen=True, eq=False)
class Camera:
    position: Tensor  # (3,)
    rotation: Tensor  # (3,3) columns: right, up, forward
    focal: float  # pixels
    height: int
    width: int

    def __post_init__(self):
        if not self.focal > 0:
            raise InvalidInputError(f"focal length must be > 0, got {self.focal}")
        if self.height < 1 or self.width < 1:
            raise InvalidInputError("image dimensions must be positive")
        gram = self.rotation.T @ self.rotation
        if not torch.allclose(gram, torch.eye(3, dtype=DTYPE), atol=1e-9):
            raise InvalidInputError("camera orientation must be orthonormal")

    @classmethod
    def look_at(cls, position: Sequence[float], target: Sequence[float], up: Sequence[float],
                focal: float, height: int, width: int) -> "Camera":
        pos = as_tensor(position)
        forward = as_tensor(target) - pos
        if float(forward.norm()) == 0.0:
            raise InvalidInputError("camera position and look-at target coincide")
        forward = forward / forward.norm()
        right = torch.linalg.cross(forward, as_tensor(up))
        if float(right.norm()) < 1e-12:
            raise InvalidInputError("camera up vector is parallel to the viewing direction")
        right = right / right.norm()
        true_up = torch.linalg.cross(right, forward)
        return cls(position=pos,
                   rotation=torch.stack([right, true_up, forward], dim=1),
                   focal=float(focal),
                   height=int(height),
                   width=int(width))

    @property
    def forward(self) -> Tensor:
        return self.rotation[:, 2]

    def resized(self, height: int, width: int) -> "Camera":
        """Same field of view at another resolution (focal scales with height)."""
        return replace(self, focal=self.focal * height / self.height, height=height, width=width)

    def orbit(self, angle: float, pivot: Sequence[float]) -> "Camera":
        """Rotate the camera about the vertical (+y) axis through `pivot`."""
        c, s = math.cos(angle), math.sin(angle)
        rot = as_tensor([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        pivot = as_tensor(pivot)
        return replace(self, position=rot @ (self.position - pivot) + pivot,
                       rotation=rot @ self.rotation)


@dataclass(frozen=True, eq=False)
class Rays:
    origins: Tensor  # (R,3)
    directions: Tensor  # (R,3), unit
    pixels: Tensor  # (R,) long, row-major pixel index

    def __len__(self) -> int:
        return int(self.origins.shape[0])

    def subset(self, index: Tensor) -> "Rays":
        return Rays(self.origins[index], self.directions[index], self.pixels[index])


def generate_rays(camera: Camera, pixels: Optional[Tensor] = None) -> Rays:
    """One unit ray per pixel (pixel-center convention), row-major order."""
    h, w = camera.height, camera.width
    if pixels is None:
        pixels = torch.arange(h * w, dtype=torch.long)
    rows = torch.div(pixels, w, rounding_mode="floor").to(DTYPE)
    cols = (pixels % w).to(DTYPE)
    u = (cols + 0.5 - w / 2.0) / camera.focal
    v = (rows + 0.5 - h / 2.0) / camera.focal
    local = torch.stack([u, -v, torch.ones_like(u)], dim=-1)
    dirs = local @ camera.rotation.T
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    return Rays(origins=camera.position.expand(len(pixels), 3).clone(),
                directions=dirs,
                pixels=pixels)


# ---------------- Ray–box ---------------- #


def slab_intervals(origins: Tensor, directions: Tensor, lo: Tensor,
                   hi: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Slab test in box-local frames.

    origins, directions: (..., 3) already expressed in each box frame.
    Returns (t_near, t_far, hit) with t_near clamped to 0 for origins inside.
    """
    parallel = directions.abs() < 1e-15
    safe_dir = torch.where(parallel, torch.ones_like(directions), directions)
    t0 = (lo - origins) / safe_dir
    t1 = (hi - origins) / safe_dir
    inside_slab = (origins >= lo) & (origins <= hi)
    t_lo = torch.where(parallel, torch.full_like(t0, -math.inf), torch.minimum(t0, t1))
    t_hi = torch.where(parallel, torch.full_like(t0, math.inf), torch.maximum(t0, t1))
    t_near = t_lo.amax(dim=-1).clamp_min(0.0)
    t_far = t_hi.amin(dim=-1)
    hit = (t_far > t_near) & ~(parallel & ~inside_slab).any(dim=-1)
    return t_near, t_far, hit


def ray_box_intersect(origin: Sequence[float], direction: Sequence[float], boxes: OrientedBoxes,
                      index: int = 0) -> Optional[Tuple[float, float]]:
    """Entry/exit distances of one ray against box `index`, or None on a miss."""
    o = as_tensor(origin)
    d = as_tensor(direction)
    o_local = boxes.to_local(o)[index]
    d_local = boxes.directions_to_local(d)[index]
    t_near, t_far, hit = slab_intervals(o_local, d_local, boxes.box_min[index],
                                        boxes.box_max[index])
    if not bool(hit):
        return None
    return float(t_near), float(t_far)


def intersect_boxes(rays: Rays, boxes: OrientedBoxes) -> Tuple[Tensor, Tensor, Tensor]:
    """Per ray and box: (t_near, t_far, hit), each (R, B)."""
    o_local = boxes.to_local(rays.origins)
    d_local = boxes.directions_to_local(rays.directions)
    return slab_intervals(o_local, d_local, boxes.box_min, boxes.box_max)


def merge_intervals(t_near: Tensor, t_far: Tensor, hit: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """Union policy: min entry and max exit over every box the ray hits."""
    any_hit = hit.any(dim=-1)
    near = torch.where(hit, t_near, torch.full_like(t_near, math.inf)).amin(dim=-1)
    far = torch.where(hit, t_far, torch.full_like(t_far, -math.inf)).amax(dim=-1)
    near = torch.where(any_hit, near, torch.zeros_like(near))
    far = torch.where(any_hit, far, torch.zeros_like(far))
    return near, far, any_hit


# ---------------- Ray–capsule ---------------- #


def ray_capsule_intersect(origins: Tensor, directions: Tensor, a: Tensor, b: Tensor,
                          radius: Tensor) -> Tensor:
    """
    Nearest positive hit distance of rays (R,3) with capsules (C, a/b/radius).
    Returns (R, C) with +inf where a ray misses.
    """
    ro = origins[:, None, :]
    rd = directions[:, None, :]
    ba = (b - a)[None]
    oa = ro - a[None]
    r = radius[None]
    baba = (ba * ba).sum(-1)
    bard = (ba * rd).sum(-1)
    baoa = (ba * oa).sum(-1)
    rdoa = (rd * oa).sum(-1)
    oaoa = (oa * oa).sum(-1)
    qa = baba - bard * bard
    qb = baba * rdoa - baoa * bard
    qc = baba * oaoa - baoa * baoa - r * r * baba
    disc = qb * qb - qa * qc
    inf = torch.full_like(disc, math.inf)

    safe_qa = torch.where(qa.abs() < 1e-15, torch.ones_like(qa), qa)
    t_body = (-qb - torch.sqrt(disc.clamp_min(0.0))) / safe_qa
    y = baoa + t_body * bard
    body_ok = (disc >= 0) & (qa.abs() >= 1e-15) & (y > 0) & (y < baba) & (t_body > 0)
    result = torch.where(body_ok, t_body, inf)

    # caps: spheres at both ends
    for center in (a, b):
        oc = ro - center[None]
        sb = (rd * oc).sum(-1)
        sc = (oc * oc).sum(-1) - r * r
        h = sb * sb - sc
        t_cap = -sb - torch.sqrt(h.clamp_min(0.0))
        cap_ok = (h >= 0) & (t_cap > 0)
        result = torch.minimum(result, torch.where(cap_ok, t_cap, inf))
    return result


def capsule_sdf(points: Tensor, a: Tensor, b: Tensor, radius: Tensor) -> Tensor:
    """Signed distance of points (...,3) to a single capsule."""
    pa = points - a
    ba = b - a
    h = ((pa * ba).sum(-1) / (ba * ba).sum(-1)).clamp(0.0, 1.0)
    return (pa - h[..., None] * ba).norm(dim=-1) - radius


# ---------------- Stratified sampling ---------------- #


def ray_generator(seed: int, pixel_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed),
                                                                        int(pixel_index)])))


def stratified_samples(t_near: float, t_far: float, count: int,
                       rng: np.random.Generator) -> Tensor:
    """t_i ~ U[t_n + (i-1)(t_f-t_n)/N, t_n + i(t_f-t_n)/N), i = 1..N."""
    if count < 1:
        raise InvalidInputError(f"sample count must be >= 1, got {count}")
    if not t_near < t_far:
        raise InvalidIntervalError(f"empty sampling interval [{t_near}, {t_far}]")
    u = torch.from_numpy(rng.random(count))
    width = (t_far - t_near) / count
    return t_near + (torch.arange(count, dtype=DTYPE) + u) * width


def stratified_batch(t_near: Tensor, t_far: Tensor, count: int, seed: int,
                     pixels: Tensor) -> Tensor:
    """Stratified samples (R, N) for many rays, one PCG64 stream per pixel."""
    if count < 1:
        raise InvalidInputError(f"sample count must be >= 1, got {count}")
    if bool(torch.any(t_near >= t_far)):
        raise InvalidIntervalError("empty sampling interval in batch")
    u = np.stack([ray_generator(seed, int(p)).random(count) for p in pixels.tolist()]) \
        if len(pixels) else np.zeros((0, count))
    u = torch.from_numpy(u)
    width = ((t_far - t_near) / count)[:, None]
    return t_near[:, None] + (torch.arange(count, dtype=DTYPE)[None] + u) * width
