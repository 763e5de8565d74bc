# cch/body_model.py
"""
Parametric articulated body: skeleton, capsule template mesh, blend shapes,
forward / inverse linear blend skinning and per-part bounding boxes.

Exports:
- BodyRig, JointTransforms, OrientedBoxes
- build_rig(description) / load_rig_description(path) -> BodyRig
- save_rig(rig, path) / load_rig(path)
- rodrigues(rotvec) -> rotation matrices
- joint_transforms(rig, theta) -> JointTransforms
- lbs_forward(x, weights, transforms) -> observed points
- blend_shape_offsets(rig, beta, theta) -> per-vertex offsets
- posed_vertices(rig, offsets, transforms) -> observed mesh
- transform_bboxes(rig, transforms) -> OrientedBoxes
- inverse_lbs(p, rig, transforms, offsets, neighbors) -> canonical points

Rig archive (.npz, written by save_rig, all arrays little-endian):
    version        int64 scalar      RIG_FORMAT_VERSION
    names          <U str (K,)       part / joint names
    parents        int64 (K,)        parent index, -1 for the root, parents[k] < k
    joints         float64 (K,3)     rest joint positions
    box_min/max    float64 (K,3)     canonical part boxes
    capsule_a/b    float64 (K,3)     capsule segment end points
    capsule_radius float64 (K,)
    vertices       float64 (V,3)     template mesh
    weights        float64 (V,K)     blend weights, rows sum to 1
    vertex_part    int64 (V,)        owning part of each vertex
    shape_basis    float64 (S,V,3)   B^S basis offsets
    pose_basis     float64 (9(K-1),V,3)  B^P basis, linear in (R_k - I) for k >= 1
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor

from Constants.variables import Rig
from cch.diff_engine import DTYPE, as_tensor, require_finite
from utils.errors import InvalidInputError
from utils.persistence import load_json

RIG_FORMAT_VERSION = 1

# ---------------- Types ---------------- #


@dataclass(frozen=True, eq=False)
class BodyRig:
    names: Tuple[str, ...]
    parents: Tuple[int, ...]
    joints: Tensor
    box_min: Tensor
    box_max: Tensor
    capsule_a: Tensor
    capsule_b: Tensor
    capsule_radius: Tensor
    vertices: Tensor
    weights: Tensor
    vertex_part: Tensor
    shape_basis: Tensor
    pose_basis: Tensor

    def __post_init__(self):
        k = len(self.parents)
        if len(self.names) != k or self.joints.shape != (k, 3):
            raise InvalidInputError("rig joint arrays disagree on the joint count")
        roots = [i for i, p in enumerate(self.parents) if p == -1]
        if roots != [0]:
            raise InvalidInputError(f"rig must have exactly one root at index 0, got {roots}")
        for i, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < i:
                raise InvalidInputError(f"parent of joint {i} is {p}; parents must precede children")
        if not bool(torch.all(self.box_min < self.box_max)):
            raise InvalidInputError("box_min must be < box_max componentwise")
        if bool(torch.any(self.weights < 0)):
            raise InvalidInputError("blend weights must be non-negative")
        sums = self.weights.sum(dim=1)
        if bool(torch.any((sums - 1.0).abs() > 1e-9)):
            raise InvalidInputError("blend weights must sum to 1 per vertex")
        v = self.vertices[:, None, :]
        inside = ((v >= self.box_min) & (v <= self.box_max)).all(dim=-1).any(dim=-1)
        if not bool(inside.all()):
            raise InvalidInputError("every template vertex must lie inside a canonical box")
        if self.pose_basis.shape[0] != 9 * (k - 1):
            raise InvalidInputError("pose basis must have 9*(K-1) entries")

    @property
    def num_parts(self) -> int:
        return len(self.parents)

    @property
    def num_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def shape_dim(self) -> int:
        return int(self.shape_basis.shape[0])

    def arrays(self) -> Dict[str, Tensor]:
        return {
            "joints": self.joints,
            "box_min": self.box_min,
            "box_max": self.box_max,
            "capsule_a": self.capsule_a,
            "capsule_b": self.capsule_b,
            "capsule_radius": self.capsule_radius,
            "vertices": self.vertices,
            "weights": self.weights,
            "vertex_part": self.vertex_part,
            "shape_basis": self.shape_basis,
            "pose_basis": self.pose_basis,
        }

    def equals(self, other: "BodyRig") -> bool:
        if self.names != other.names or self.parents != other.parents:
            return False
        mine, theirs = self.arrays(), other.arrays()
        return all(torch.equal(mine[k], theirs[k]) for k in mine)


@dataclass(frozen=True, eq=False)
class JointTransforms:
    matrices: Tensor  # (K,4,4), relative to the rest pose
    posed_joints: Tensor  # (K,3)
    local_rotations: Tensor  # (K,3,3)

    @property
    def rotations(self) -> Tensor:
        return self.matrices[:, :3, :3]

    @property
    def translations(self) -> Tensor:
        return self.matrices[:, :3, 3]


@dataclass(frozen=True, eq=False)
class OrientedBoxes:
    """Canonical boxes carried into observation space by one rigid transform each."""
    rotation: Tensor  # (B,3,3)
    translation: Tensor  # (B,3)
    box_min: Tensor  # (B,3), box-local == canonical coordinates
    box_max: Tensor

    def __len__(self) -> int:
        return int(self.rotation.shape[0])

    def to_local(self, points: Tensor) -> Tensor:
        """(..., 3) observed points -> (..., B, 3) box-local coordinates."""
        rel = points[..., None, :] - self.translation
        return torch.einsum("bji,...bj->...bi", self.rotation, rel)

    def directions_to_local(self, dirs: Tensor) -> Tensor:
        return torch.einsum("bji,...j->...bi", self.rotation, dirs)

    def corners(self) -> Tensor:
        lo, hi = self.box_min, self.box_max
        picks = torch.tensor(
            [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=torch.bool)
        local = torch.where(picks[None], hi[:, None, :], lo[:, None, :])  # (B,8,3)
        return torch.einsum("bij,bcj->bci", self.rotation, local) + self.translation[:, None, :]

    def volumes(self) -> Tensor:
        return torch.prod(self.box_max - self.box_min, dim=-1)


# ---------------- Rig construction ---------------- #


def _frame(axis: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2


def _capsule_mesh(a: np.ndarray, b: np.ndarray, radius: float, rings: int,
                  segments: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vertices, outward normals and axial parameter t in [0,1] of a capsule surface."""
    axis = b - a
    length = float(np.linalg.norm(axis))
    axis = axis / length
    e1, e2 = _frame(axis)
    phis = 2.0 * math.pi * np.arange(segments) / segments
    around = np.cos(phis)[:, None] * e1 + np.sin(phis)[:, None] * e2  # (S,3)

    verts, normals, ts = [], [], []
    for s in np.linspace(0.0, 1.0, rings):
        verts.append(a + s * length * axis + radius * around)
        normals.append(around)
        ts.append(np.full(segments, s))
    # hemisphere caps: one 45° ring and a pole on each end
    c45 = math.cos(math.pi / 4)
    for end, sign, t in ((a, -1.0, 0.0), (b, 1.0, 1.0)):
        ring_n = c45 * around + sign * c45 * axis
        verts.append(end + radius * ring_n)
        normals.append(ring_n)
        ts.append(np.full(segments, t))
        verts.append((end + sign * radius * axis)[None])
        normals.append((sign * axis)[None])
        ts.append(np.array([t]))
    return np.concatenate(verts), np.concatenate(normals), np.concatenate(ts)


def _check_conventions(description: Dict[str, Any]) -> None:
    """Descriptions may omit these keys; present ones must match what the rig math assumes."""
    expected = {"version": RIG_FORMAT_VERSION, "units": "meters", "up_axis": "+y"}
    for key, value in expected.items():
        if key in description and description[key] != value:
            raise InvalidInputError(f"rig description {key} is {description[key]!r}, expected {value!r}")


def build_rig(description: Dict[str, Any]) -> BodyRig:
    """Build the template mesh, blend weights and bases from a skeleton description."""
    _check_conventions(description)
    parts = description["parts"]
    k = len(parts)
    rings = int(description.get("rings", 6))
    segments = int(description.get("segments", 8))
    margin = float(description.get("box_margin", 0.03))
    falloff = float(description.get("blend_falloff", 0.3))
    shape_dim = int(description.get("shape_dim", Rig.SHAPE_DIM))
    shape_amp = float(description.get("shape_amplitude", 0.01))
    pose_amp = float(description.get("pose_amplitude", Rig.POSE_BASIS_AMPLITUDE))
    rng = np.random.default_rng(int(description.get("basis_seed", 0)))

    names = tuple(str(p["name"]) for p in parts)
    parents = tuple(int(p["parent"]) for p in parts)
    joints = np.array([p["joint"] for p in parts], dtype=np.float64)
    cap_a = np.array([p["a"] for p in parts], dtype=np.float64)
    cap_b = np.array([p["b"] for p in parts], dtype=np.float64)
    radius = np.array([p["radius"] for p in parts], dtype=np.float64)

    lo = np.minimum(cap_a, cap_b) - (radius + margin)[:, None]
    hi = np.maximum(cap_a, cap_b) + (radius + margin)[:, None]

    all_verts, all_normals, all_w, owner = [], [], [], []
    for i in range(k):
        verts, normals, ts = _capsule_mesh(cap_a[i], cap_b[i], radius[i], rings, segments)
        w = np.zeros((len(verts), k))
        if parents[i] >= 0:
            w_parent = 0.5 * np.clip(1.0 - ts / falloff, 0.0, None)
            w[:, parents[i]] = w_parent
            w[:, i] = 1.0 - w_parent
        else:
            w[:, i] = 1.0
        all_verts.append(verts)
        all_normals.append(normals)
        all_w.append(w)
        owner.append(np.full(len(verts), i, dtype=np.int64))
    vertices = np.concatenate(all_verts)
    normals = np.concatenate(all_normals)
    weights = np.concatenate(all_w)
    vertex_part = np.concatenate(owner)
    n_verts = len(vertices)

    # shape basis: per-part girth changes along the surface normal; basis 0 is global girth
    coeffs = rng.standard_normal((shape_dim, k)) * shape_amp
    if shape_dim:
        coeffs[0] = shape_amp
    shape_basis = coeffs[:, vertex_part, None] * normals[None]

    # pose-corrective basis: random orthonormal columns, fixed at creation
    n_pose = 9 * (k - 1)
    if n_pose:
        q, _ = np.linalg.qr(rng.standard_normal((n_verts * 3, n_pose)))
        pose_basis = (q.T * pose_amp).reshape(n_pose, n_verts, 3)
    else:
        pose_basis = np.zeros((0, n_verts, 3))

    return BodyRig(
        names=names,
        parents=parents,
        joints=as_tensor(joints),
        box_min=as_tensor(lo),
        box_max=as_tensor(hi),
        capsule_a=as_tensor(cap_a),
        capsule_b=as_tensor(cap_b),
        capsule_radius=as_tensor(radius),
        vertices=as_tensor(vertices),
        weights=as_tensor(weights),
        vertex_part=torch.as_tensor(vertex_part, dtype=torch.long),
        shape_basis=as_tensor(shape_basis),
        pose_basis=as_tensor(pose_basis),
    )


def load_rig_description(path: str) -> BodyRig:
    return build_rig(load_json(path))


def save_rig(rig: BodyRig, path: str) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in rig.arrays().items()}
    with open(path, "wb") as f:
        np.savez(
            f,
            version=np.int64(RIG_FORMAT_VERSION),
            names=np.array(rig.names),
            parents=np.array(rig.parents, dtype=np.int64),
            **arrays,
        )


def load_rig(path: str) -> BodyRig:
    """Load a rig archive (.npz) or build one from a skeleton description (.json)."""
    if path.lower().endswith(".json"):
        return load_rig_description(path)
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"])
        if version != RIG_FORMAT_VERSION:
            raise InvalidInputError(f"rig file version {version}, expected {RIG_FORMAT_VERSION}")
        fields = {k: torch.from_numpy(np.array(data[k])) for k in (
            "joints", "box_min", "box_max", "capsule_a", "capsule_b", "capsule_radius",
            "vertices", "weights", "vertex_part", "shape_basis", "pose_basis")}
        names = tuple(str(n) for n in data["names"])
        parents = tuple(int(p) for p in data["parents"])
    return BodyRig(names=names, parents=parents, **fields)


# ---------------- Kinematics ---------------- #


def _skew(v: Tensor) -> Tensor:
    zero = torch.zeros_like(v[..., 0])
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return torch.stack([
        torch.stack([zero, -z, y], dim=-1),
        torch.stack([z, zero, -x], dim=-1),
        torch.stack([-y, x, zero], dim=-1),
    ], dim=-2)


def rodrigues(rotvec: Tensor) -> Tensor:
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3); smooth through zero."""
    sq = (rotvec * rotvec).sum(dim=-1)
    small = sq < 1e-12
    safe_sq = torch.where(small, torch.ones_like(sq), sq)
    angle = torch.sqrt(safe_sq)
    a = torch.where(small, 1.0 - sq / 6.0, torch.sin(angle) / angle)
    b = torch.where(small, 0.5 - sq / 24.0, (1.0 - torch.cos(angle)) / safe_sq)
    k = _skew(rotvec)
    eye = torch.eye(3, dtype=rotvec.dtype).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def _check_pose(rig: BodyRig, theta: Union[Tensor, Sequence]) -> Tensor:
    theta = as_tensor(theta)
    k = rig.num_parts
    if theta.numel() != 3 * k:
        raise InvalidInputError(f"pose needs {k} axis-angle entries, got {theta.numel()} values")
    theta = theta.reshape(k, 3)
    require_finite(theta, "pose theta")
    return theta


def joint_transforms(rig: BodyRig, theta: Union[Tensor, Sequence]) -> JointTransforms:
    """Forward kinematics; H_k maps rest-pose points rigidly attached to joint k."""
    theta = _check_pose(rig, theta)
    local_rot = rodrigues(theta)
    joints = rig.joints
    glob_rot = [local_rot[0]]
    posed = [joints[0]]
    for i in range(1, rig.num_parts):
        p = rig.parents[i]
        posed.append(posed[p] + glob_rot[p] @ (joints[i] - joints[p]))
        glob_rot.append(glob_rot[p] @ local_rot[i])
    rot = torch.stack(glob_rot)
    posed_joints = torch.stack(posed)
    trans = posed_joints - torch.einsum("kij,kj->ki", rot, joints)
    top = torch.cat([rot, trans[:, :, None]], dim=2)
    bottom = torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=DTYPE).expand(rig.num_parts, 1, 4)
    return JointTransforms(matrices=torch.cat([top, bottom], dim=1),
                           posed_joints=posed_joints,
                           local_rotations=local_rot)


def _matrices(transforms: Union[JointTransforms, Tensor]) -> Tensor:
    return transforms.matrices if isinstance(transforms, JointTransforms) else transforms


def lbs_forward(x: Tensor, weights: Tensor, transforms: Union[JointTransforms, Tensor]) -> Tensor:
    """x ↦ Σ_k h_k H_k x for points (..., 3) with weights (..., K)."""
    h = _matrices(transforms)
    require_finite(x, "lbs input points")
    blended = torch.einsum("...k,kij->...ij", weights, h)
    return torch.einsum("...ij,...j->...i", blended[..., :3, :3], x) + blended[..., :3, 3]


def blend_shape_offsets(rig: BodyRig, beta: Union[Tensor, Sequence],
                        theta: Union[Tensor, Sequence]) -> Tensor:
    """Σ_s β_s B^S_s + B^P(θ), with B^P linear in the flattened (R_k - I), k >= 1."""
    beta = as_tensor(beta).reshape(-1)
    if beta.numel() != rig.shape_dim:
        raise InvalidInputError(f"shape needs {rig.shape_dim} coefficients, got {beta.numel()}")
    require_finite(beta, "shape beta")
    theta = _check_pose(rig, theta)
    rot = rodrigues(theta[1:])
    features = (rot - torch.eye(3, dtype=rot.dtype)).reshape(-1)
    return (torch.einsum("s,svc->vc", beta, rig.shape_basis)
            + torch.einsum("p,pvc->vc", features, rig.pose_basis))


def posed_vertices(rig: BodyRig, offsets: Tensor, transforms: Union[JointTransforms,
                                                                    Tensor]) -> Tensor:
    return lbs_forward(rig.vertices + offsets, rig.weights, transforms)


def transform_bboxes(rig: BodyRig, transforms: Union[JointTransforms, Tensor]) -> OrientedBoxes:
    h = _matrices(transforms)
    return OrientedBoxes(rotation=h[:, :3, :3],
                         translation=h[:, :3, 3],
                         box_min=rig.box_min,
                         box_max=rig.box_max)


# ---------------- Inverse skinning ---------------- #


def inverse_lbs_transforms(points: Tensor,
                           rig: BodyRig,
                           transforms: Union[JointTransforms, Tensor],
                           offsets: Tensor,
                           neighbors: int = Rig.NEIGHBORS,
                           observed: Optional[Tensor] = None) -> Tensor:
    """Blended observed->canonical matrices (P,4,4) from the Kn nearest observed vertices."""
    if neighbors < 1:
        raise InvalidInputError(f"neighbor count must be >= 1, got {neighbors}")
    h = _matrices(transforms)
    if observed is None:
        observed = posed_vertices(rig, offsets, h)
    kn = min(neighbors, rig.num_vertices)

    # the neighbor set is a constant of the graph
    with torch.no_grad():
        idx = torch.cdist(points.detach(), observed.detach()).topk(kn, largest=False).indices

    diff = points[:, None, :] - observed[idx]
    dist = torch.sqrt((diff * diff).sum(dim=-1).clamp_min(Rig.DIST_EPS**2))
    g = 1.0 / dist
    g = g / g.sum(dim=-1, keepdim=True)

    skin = torch.einsum("pnk,kij->pnij", rig.weights[idx], h)
    rot = skin[..., :3, :3]
    trans = skin[..., :3, 3] + torch.einsum("pnij,pnj->pni", rot, offsets[idx])
    rot_inv = torch.linalg.inv(rot)
    trans_inv = -torch.einsum("pnij,pnj->pni", rot_inv, trans)

    blend_rot = torch.einsum("pn,pnij->pij", g, rot_inv)
    blend_trans = torch.einsum("pn,pni->pi", g, trans_inv)
    top = torch.cat([blend_rot, blend_trans[..., None]], dim=-1)
    bottom = torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=points.dtype).expand(points.shape[0], 1, 4)
    return torch.cat([top, bottom], dim=1)


def inverse_lbs(points: Tensor,
                rig: BodyRig,
                transforms: Union[JointTransforms, Tensor],
                offsets: Tensor,
                neighbors: int = Rig.NEIGHBORS) -> Tensor:
    """Map observed points (P,3) back to the canonical space."""
    points = as_tensor(points)
    require_finite(points, "inverse lbs points")
    m = inverse_lbs_transforms(points, rig, transforms, offsets, neighbors)
    return torch.einsum("pij,pj->pi", m[:, :3, :3], points) + m[:, :3, 3]
