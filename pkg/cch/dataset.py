# cch/dataset.py
"""
Procedural 2D fashion dataset: an attribute grammar, a capsule rasterizer and
garment painting with exact part segmentation.

Every record is rebuilt bit-for-bit from its own seed (make_record), so the
archive only exists to avoid re-rasterizing.

Archive (.npz) fields:
    version       int64 scalar
    images        float64 (N,H,W,3)
    segmentation  int64 (N,H,W)        0 = background, b+1 = part b
    poses         float64 (N,K,3)
    shapes        float64 (N,S)
    seeds         int64 (N,)
    descriptions  <U str (N,)
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from Constants.palette import FLORAL_ACCENT, GRAPHIC_ACCENT, HAIR, PALETTE, SHOES, SKIN
from Constants.variables import Dataset as DatasetDefaults
from cch.body_model import BodyRig, JointTransforms, joint_transforms
from cch.diff_engine import as_tensor
from cch.ray_geometry import Camera, generate_rays, ray_capsule_intersect
from pretty_logs import pretty_log
from utils.errors import InvalidInputError
from utils.images import write_image
from utils.persistence import atomic_write_bytes

DATASET_FORMAT_VERSION = 1

# ---------------- Grammar ---------------- #

UPPER_SHAPES = ("sleeveless", "short-sleeve", "long-sleeve")
LOWER_SHAPES = ("short", "three-point", "long")
FABRICS = ("denim", "cotton", "furry")
PATTERNS = ("pure color", "floral", "graphic")
COLORS = tuple(PALETTE)

# fraction of the limb capsule (from its proximal end) covered by the garment
SLEEVE_COVERAGE = {
    "sleeveless": {"upper_arm": 0.0, "forearm": 0.0},
    "short-sleeve": {"upper_arm": 0.5, "forearm": 0.0},
    "long-sleeve": {"upper_arm": 1.0, "forearm": 1.0},
}
LEG_COVERAGE = {
    "short": {"thigh": 0.5, "shin": 0.0},
    "three-point": {"thigh": 1.0, "shin": 0.5},
    "long": {"thigh": 1.0, "shin": 1.0},
}
UPPER_BODY = ("spine", "chest")
LOWER_BODY = ("pelvis",)


@dataclass(frozen=True)
class FashionGrammar:
    upper_shapes: Tuple[str, ...] = UPPER_SHAPES
    lower_shapes: Tuple[str, ...] = LOWER_SHAPES
    fabrics: Tuple[str, ...] = FABRICS
    patterns: Tuple[str, ...] = PATTERNS
    colors: Tuple[str, ...] = COLORS

    def __post_init__(self):
        known = {"upper_shapes": UPPER_SHAPES, "lower_shapes": LOWER_SHAPES,
                 "fabrics": FABRICS, "patterns": PATTERNS, "colors": COLORS}
        for axis, allowed in known.items():
            values = getattr(self, axis)
            if not values:
                raise InvalidInputError(f"grammar axis {axis} is empty")
            unknown = [v for v in values if v not in allowed]
            if unknown:
                raise InvalidInputError(f"grammar axis {axis} has unknown values {unknown}")

    @classmethod
    def from_mapping(cls, restrictions: Optional[Mapping[str, Sequence[str]]]) -> "FashionGrammar":
        """Restrict some axes, e.g. {"colors": ["red"]}; other axes stay complete."""
        if not restrictions:
            return cls()
        fields_ = {f for f in cls.__dataclass_fields__}
        unknown = set(restrictions) - fields_
        if unknown:
            raise InvalidInputError(f"unknown grammar axes {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in restrictions.items()})


@dataclass(frozen=True)
class Garment:
    shape: str
    fabric: str
    pattern: str
    color: str

    def words(self) -> str:
        return f"{self.shape} {self.fabric} {self.pattern} {self.color}"


@dataclass(frozen=True)
class Outfit:
    upper: Garment
    lower: Garment

    def describe(self) -> str:
        return f"{self.upper.words()} upper {self.lower.words()} lower"

    @classmethod
    def parse(cls, description: str) -> "Outfit":
        tokens = description.lower().split()
        try:
            cut = tokens.index("upper")
            upper, lower = tokens[:cut], tokens[cut + 1:]
            if lower[-1] != "lower":
                raise ValueError
            return cls(_parse_garment(upper), _parse_garment(lower[:-1]))
        except (ValueError, IndexError):
            raise InvalidInputError(f"not a grammar description: {description!r}") from None

    def with_color(self, region: str, color: str) -> "Outfit":
        if region == "upper":
            return replace(self, upper=replace(self.upper, color=color))
        return replace(self, lower=replace(self.lower, color=color))


def _parse_garment(tokens: List[str]) -> Garment:
    if len(tokens) < 4:
        raise ValueError
    return Garment(shape=tokens[0], fabric=tokens[1], pattern=" ".join(tokens[2:-1]),
                   color=tokens[-1])


def sample_outfit(rng: np.random.Generator, grammar: FashionGrammar) -> Outfit:
    def pick(values):
        return values[int(rng.integers(len(values)))]

    upper = Garment(pick(grammar.upper_shapes), pick(grammar.fabrics), pick(grammar.patterns),
                    pick(grammar.colors))
    lower = Garment(pick(grammar.lower_shapes), pick(grammar.fabrics), pick(grammar.patterns),
                    pick(grammar.colors))
    return Outfit(upper, lower)


def sample_pose(rng: np.random.Generator, rig: BodyRig,
                pose_std: float = DatasetDefaults.POSE_STD,
                root_yaw: float = DatasetDefaults.ROOT_YAW) -> np.ndarray:
    """Pose prior: Gaussian joint rotations, root turned about +y only."""
    theta = rng.normal(0.0, pose_std, size=(rig.num_parts, 3))
    theta[0] = (0.0, rng.uniform(-root_yaw, root_yaw) if root_yaw > 0 else 0.0, 0.0)
    return theta


# ---------------- Rasterizer ---------------- #


@dataclass(frozen=True, eq=False)
class CapsuleRaster:
    labels: torch.Tensor  # (H,W) long, 0 = background
    points: torch.Tensor  # (H,W,3) canonical hit point (zeros on background)
    axial: torch.Tensor  # (H,W) position along the hit capsule in [0,1]


def posed_capsules(rig: BodyRig,
                   transforms: JointTransforms) -> Tuple[torch.Tensor, torch.Tensor]:
    rot, trans = transforms.rotations, transforms.translations
    a = torch.einsum("kij,kj->ki", rot, rig.capsule_a) + trans
    b = torch.einsum("kij,kj->ki", rot, rig.capsule_b) + trans
    return a, b


def rasterize_capsules(rig: BodyRig, theta, camera: Camera) -> CapsuleRaster:
    """Exact first-hit rasterization of the posed capsule union."""
    transforms = joint_transforms(rig, theta)
    a, b = posed_capsules(rig, transforms)
    rays = generate_rays(camera)
    hits = ray_capsule_intersect(rays.origins, rays.directions, a, b, rig.capsule_radius)
    t, part = hits.min(dim=-1)
    hit = torch.isfinite(t)
    t_safe = torch.where(hit, t, torch.zeros_like(t))
    p = rays.origins + t_safe[:, None] * rays.directions

    rot = transforms.rotations[part]
    canonical = torch.einsum("rji,rj->ri", rot, p - transforms.translations[part])
    axis = rig.capsule_b[part] - rig.capsule_a[part]
    axial = (((canonical - rig.capsule_a[part]) * axis).sum(-1) / (axis * axis).sum(-1))
    axial = axial.clamp(0.0, 1.0)

    zeros = torch.zeros_like(t)
    h, w = camera.height, camera.width
    return CapsuleRaster(
        labels=torch.where(hit, part + 1, torch.zeros_like(part)).reshape(h, w),
        points=torch.where(hit[:, None], canonical, torch.zeros_like(canonical)).reshape(h, w, 3),
        axial=torch.where(hit, axial, zeros).reshape(h, w),
    )


def capsule_silhouette(rig: BodyRig, theta, camera: Camera) -> torch.Tensor:
    return rasterize_capsules(rig, theta, camera).labels > 0


# ---------------- Painting ---------------- #


def _role(name: str) -> str:
    for side in ("left_", "right_"):
        if name.startswith(side):
            return name[len(side):]
    return name


def garment_masks(rig: BodyRig, raster: CapsuleRaster,
                  outfit: Outfit) -> Tuple[torch.Tensor, torch.Tensor]:
    """Boolean (H,W) masks of upper and lower garment pixels."""
    upper = torch.zeros_like(raster.labels, dtype=torch.bool)
    lower = torch.zeros_like(upper)
    sleeves = SLEEVE_COVERAGE[outfit.upper.shape]
    legs = LEG_COVERAGE[outfit.lower.shape]
    for b, name in enumerate(rig.names):
        on_part = raster.labels == b + 1
        role = _role(name)
        if role in UPPER_BODY:
            upper |= on_part
        elif role in LOWER_BODY:
            lower |= on_part
        elif role in sleeves:
            upper |= on_part & (raster.axial <= sleeves[role])
        elif role in legs:
            lower |= on_part & (raster.axial <= legs[role])
    return upper, lower


def _garment_colors(garment: Garment, points: torch.Tensor,
                    rng: np.random.Generator) -> torch.Tensor:
    base = as_tensor(PALETTE[garment.color]).expand(points.shape[0], 3)
    x, y = points[:, 0], points[:, 1]
    if garment.pattern == "floral":
        fx = torch.remainder(x / 0.05, 1.0) - 0.5
        fy = torch.remainder(y / 0.05, 1.0) - 0.5
        dot = (fx * fx + fy * fy) < 0.09
        base = torch.where(dot[:, None], as_tensor(FLORAL_ACCENT), base)
    elif garment.pattern == "graphic":
        stripe = torch.remainder(torch.floor(y / 0.04), 2.0) == 1.0
        base = torch.where(stripe[:, None], 0.5 * (base + as_tensor(GRAPHIC_ACCENT)), base)
    if garment.fabric == "denim":
        hatch = torch.remainder(torch.floor((x + y) / 0.015), 2.0) == 1.0
        base = torch.where(hatch[:, None], 0.85 * base, base)
    elif garment.fabric == "furry":
        base = base * torch.from_numpy(rng.uniform(0.9, 1.05, size=(points.shape[0], 1)))
    return base.clamp(0.0, 1.0)


def paint(rig: BodyRig, raster: CapsuleRaster, outfit: Outfit, rng: np.random.Generator,
          background: Sequence[float] = (1.0, 1.0, 1.0)) -> torch.Tensor:
    """Flat-colored (H,W,3) image; no shading."""
    h, w = raster.labels.shape
    image = as_tensor(background).expand(h, w, 3).clone()
    body = raster.labels > 0
    image[body] = as_tensor(SKIN)
    for b, name in enumerate(rig.names):
        role = _role(name)
        if role == "foot":
            image[raster.labels == b + 1] = as_tensor(SHOES)
        elif role == "head":
            crown = (raster.labels == b + 1) & (raster.axial >= 0.85)
            image[crown] = as_tensor(HAIR)
    upper, lower = garment_masks(rig, raster, outfit)
    for mask, garment in ((upper, outfit.upper), (lower, outfit.lower)):
        if bool(mask.any()):
            image[mask] = _garment_colors(garment, raster.points[mask], rng)
    return image


# ---------------- Records ---------------- #


@dataclass(frozen=True, eq=False)
class ToyRecord:
    image: np.ndarray  # (H,W,3) float64 in [0,1]
    description: str
    segmentation: np.ndarray  # (H,W) int64
    pose: np.ndarray  # (K,3)
    shape: np.ndarray  # (S,)
    seed: int
    outfit: Optional[Outfit] = field(default=None)

    def __post_init__(self):
        if self.image.shape[:2] != self.segmentation.shape:
            raise InvalidInputError("segmentation is not aligned with the image")


def make_record(seed: int, grammar: FashionGrammar, rig: BodyRig, camera: Camera, *,
                pose_std: float = DatasetDefaults.POSE_STD,
                root_yaw: float = DatasetDefaults.ROOT_YAW,
                shape_std: float = DatasetDefaults.SHAPE_STD) -> ToyRecord:
    if shape_std != 0:
        # the capsule rasterizer draws the template body, blend shapes are not applied
        raise InvalidInputError(f"shape_std must be 0 for capsule-rendered records, got {shape_std}")
    rng = np.random.default_rng(seed)
    outfit = sample_outfit(rng, grammar)
    theta = sample_pose(rng, rig, pose_std, root_yaw)
    beta = np.zeros(rig.shape_dim)
    with torch.no_grad():
        raster = rasterize_capsules(rig, theta, camera)
        image = paint(rig, raster, outfit, rng)
    return ToyRecord(image=image.numpy(),
                     description=outfit.describe(),
                     segmentation=raster.labels.numpy().astype(np.int64),
                     pose=theta,
                     shape=beta,
                     seed=int(seed),
                     outfit=outfit)


def generate_dataset(count: int, grammar: FashionGrammar, rng: np.random.Generator, *,
                     rig: BodyRig, camera: Camera,
                     pose_std: float = DatasetDefaults.POSE_STD,
                     root_yaw: float = DatasetDefaults.ROOT_YAW,
                     shape_std: float = DatasetDefaults.SHAPE_STD) -> List[ToyRecord]:
    if count < 0:
        raise InvalidInputError(f"record count must be >= 0, got {count}")
    seeds = rng.integers(0, 2**63 - 1, size=count, dtype=np.int64)
    records = [make_record(int(s), grammar, rig, camera, pose_std=pose_std, root_yaw=root_yaw,
                           shape_std=shape_std) for s in seeds]
    pretty_log("data", f"generated {count} records at {camera.width}×{camera.height}")
    return records


# ---------------- Archive ---------------- #


def save_dataset(records: Sequence[ToyRecord], path: str, *, previews: int = 0) -> None:
    if not records:
        raise InvalidInputError("refusing to write an empty dataset")
    buf = io.BytesIO()
    np.savez(buf,
             version=np.int64(DATASET_FORMAT_VERSION),
             images=np.stack([r.image for r in records]),
             segmentation=np.stack([r.segmentation for r in records]),
             poses=np.stack([r.pose for r in records]),
             shapes=np.stack([r.shape for r in records]),
             seeds=np.array([r.seed for r in records], dtype=np.int64),
             descriptions=np.array([r.description for r in records]))
    atomic_write_bytes(path, buf.getvalue())
    if previews:
        folder = os.path.join(os.path.dirname(os.path.abspath(path)), "previews")
        for i, record in enumerate(records[:previews]):
            write_image(os.path.join(folder, f"record_{i:04d}.ppm"), record.image)
    pretty_log("data", f"saved {len(records)} records to {path}")


def load_dataset(path: str) -> List[ToyRecord]:
    if not os.path.exists(path):
        raise InvalidInputError(f"dataset archive not found: {path} (run dataset-gen first)")
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"])
        if version != DATASET_FORMAT_VERSION:
            raise InvalidInputError(f"dataset version {version} is not supported")
        arrays: Dict[str, np.ndarray] = {k: data[k] for k in data.files}
    return [ToyRecord(image=arrays["images"][i],
                      description=str(arrays["descriptions"][i]),
                      segmentation=arrays["segmentation"][i],
                      pose=arrays["poses"][i],
                      shape=arrays["shapes"][i],
                      seed=int(arrays["seeds"][i]),
                      outfit=Outfit.parse(str(arrays["descriptions"][i])))
            for i in range(arrays["images"].shape[0])]


def upper_region(rig: BodyRig, segmentation: torch.Tensor) -> torch.Tensor:
    """Pixels of the torso parts, always covered by the upper garment."""
    ids = [b + 1 for b, name in enumerate(rig.names) if _role(name) in UPPER_BODY]
    return torch.isin(segmentation, torch.tensor(ids, dtype=segmentation.dtype))
