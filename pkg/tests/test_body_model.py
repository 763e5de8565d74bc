import math

import numpy as np
import pytest
import torch

from cch.body_model import (build_rig, blend_shape_offsets, inverse_lbs, joint_transforms,
                            lbs_forward, load_rig, posed_vertices, rodrigues, save_rig,
                            transform_bboxes)
from utils.errors import InvalidInputError


def _eye(k):
    return torch.eye(4, dtype=torch.float64).expand(k, 4, 4).clone()


# ---------------- Rig ---------------- #


def test_default_rig_layout(rig):
    assert rig.num_parts == 16
    assert rig.parents[0] == -1
    assert all(0 <= p < k for k, p in enumerate(rig.parents) if k > 0)
    assert 500 <= rig.num_vertices <= 2000
    assert torch.allclose(rig.weights.sum(dim=1), torch.ones(rig.num_vertices, dtype=torch.float64),
                          atol=1e-12)
    assert bool(torch.all(rig.box_min < rig.box_max))


def test_rig_archive_round_trip(rig, tmp_path):
    path = str(tmp_path / "rig.npz")
    save_rig(rig, path)
    assert load_rig(path).equals(rig)


def test_parents_must_precede_children(two_joint_description):
    desc = two_joint_description
    desc["parts"][1]["parent"] = 1
    with pytest.raises(InvalidInputError):
        build_rig(desc)


@pytest.mark.parametrize("key,value", [("version", 2), ("units", "centimeters"), ("up_axis", "+z")])
def test_description_conventions_are_checked(two_joint_description, key, value):
    desc = two_joint_description
    desc.update(version=1, units="meters", up_axis="+y")
    build_rig(desc)
    desc[key] = value
    with pytest.raises(InvalidInputError):
        build_rig(desc)


# ---------------- Kinematics ---------------- #


def test_rodrigues_is_a_rotation(seeded):
    rot = rodrigues(torch.from_numpy(seeded.normal(size=(20, 3))))
    eye = torch.eye(3, dtype=torch.float64).expand(20, 3, 3)
    assert torch.allclose(rot @ rot.transpose(-1, -2), eye, atol=1e-12)
    assert torch.allclose(torch.linalg.det(rot), torch.ones(20, dtype=torch.float64), atol=1e-12)


def test_rest_pose_gives_identity_transforms(rig):
    h = joint_transforms(rig, torch.zeros(rig.num_parts, 3, dtype=torch.float64))
    assert torch.allclose(h.matrices, _eye(rig.num_parts), atol=1e-15)


def test_root_quarter_turn_about_z_moves_child_joint(two_joint_rig):
    theta = torch.zeros(2, 3, dtype=torch.float64)
    theta[0, 2] = math.pi / 2
    h = joint_transforms(two_joint_rig, theta)
    assert torch.allclose(h.posed_joints[1], torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64),
                          atol=1e-12)


def test_random_pose_rotations_are_rigid(rig, seeded):
    h = joint_transforms(rig, seeded.normal(0.0, 0.5, size=(rig.num_parts, 3)))
    rot = h.rotations
    eye = torch.eye(3, dtype=torch.float64).expand(rig.num_parts, 3, 3)
    assert torch.allclose(rot.transpose(-1, -2) @ rot, eye, atol=1e-9)
    assert torch.allclose(torch.linalg.det(rot), torch.ones(rig.num_parts, dtype=torch.float64),
                          atol=1e-9)


def test_non_finite_pose_is_rejected(rig):
    theta = np.zeros((rig.num_parts, 3))
    theta[3, 1] = math.nan
    with pytest.raises(InvalidInputError):
        joint_transforms(rig, theta)


def test_wrong_pose_length_is_rejected(rig):
    with pytest.raises(InvalidInputError):
        joint_transforms(rig, np.zeros((rig.num_parts - 1, 3)))


# ---------------- Skinning ---------------- #


def test_lbs_forward_cases():
    x = torch.tensor([[0.3, -0.2, 0.5]], dtype=torch.float64)
    h = _eye(2)
    assert torch.equal(lbs_forward(x, torch.tensor([[0.4, 0.6]], dtype=torch.float64), h), x)

    t = torch.tensor([0.1, 0.2, -0.3], dtype=torch.float64)
    h[0, :3, 3] = t
    h[1, :3, 3] = -t
    moved = lbs_forward(x, torch.tensor([[1.0, 0.0]], dtype=torch.float64), h)
    assert torch.allclose(moved, x + t, atol=1e-15)
    still = lbs_forward(x, torch.tensor([[0.5, 0.5]], dtype=torch.float64), h)
    assert torch.allclose(still, x, atol=1e-15)


def test_blend_shape_offsets_are_linear(rig):
    rest = torch.zeros(rig.num_parts, 3, dtype=torch.float64)
    zero = blend_shape_offsets(rig, torch.zeros(rig.shape_dim), rest)
    assert torch.count_nonzero(zero) == 0
    e1 = torch.zeros(rig.shape_dim, dtype=torch.float64)
    e1[0] = 1.0
    one = blend_shape_offsets(rig, e1, rest)
    assert torch.equal(one, rig.shape_basis[0])
    assert torch.equal(blend_shape_offsets(rig, 2 * e1, rest), 2 * one)


def test_shape_dimension_mismatch(rig):
    with pytest.raises(InvalidInputError):
        blend_shape_offsets(rig, torch.zeros(rig.shape_dim + 1), torch.zeros(rig.num_parts, 3))


def test_boxes_follow_transforms(rig):
    k = rig.num_parts
    boxes = transform_bboxes(rig, _eye(k))
    assert torch.allclose(boxes.corners().amin(dim=1), rig.box_min)
    assert torch.allclose(boxes.corners().amax(dim=1), rig.box_max)

    t = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    h = _eye(k)
    h[:, :3, 3] = t
    moved = transform_bboxes(rig, h)
    assert torch.allclose(moved.corners(), boxes.corners() + t, atol=1e-12)
    assert torch.allclose(moved.volumes(), boxes.volumes())


def test_quarter_turn_permutes_box_axes(rig):
    k = rig.num_parts
    h = _eye(k)
    h[:, :3, :3] = rodrigues(torch.tensor([0.0, 0.0, math.pi / 2], dtype=torch.float64))
    corners = transform_bboxes(rig, h).corners()
    extent = corners.amax(dim=1) - corners.amin(dim=1)
    size = rig.box_max - rig.box_min
    assert torch.allclose(extent[:, 0], size[:, 1], atol=1e-12)
    assert torch.allclose(extent[:, 1], size[:, 0], atol=1e-12)
    assert torch.allclose(extent[:, 2], size[:, 2], atol=1e-12)


# ---------------- Inverse skinning ---------------- #


def test_inverse_lbs_at_rest_is_identity(rig, seeded):
    rest = torch.zeros(rig.num_parts, 3, dtype=torch.float64)
    h = joint_transforms(rig, rest)
    offsets = torch.zeros_like(rig.vertices)
    p = torch.from_numpy(seeded.uniform(-0.4, 0.4, size=(64, 3))) + torch.tensor(
        [0.0, 1.0, 0.0], dtype=torch.float64)
    assert torch.allclose(inverse_lbs(p, rig, h, offsets), p, atol=1e-12, rtol=0)


def test_inverse_lbs_recovers_template_vertices(rig, seeded):
    theta = seeded.normal(0.0, 0.3, size=(rig.num_parts, 3))
    beta = seeded.normal(0.0, 1.0, size=rig.shape_dim)
    h = joint_transforms(rig, theta)
    offsets = blend_shape_offsets(rig, beta, theta)
    observed = posed_vertices(rig, offsets, h)
    pick = torch.from_numpy(seeded.choice(rig.num_vertices, size=100, replace=False))
    canonical = inverse_lbs(observed[pick], rig, h, offsets, neighbors=1)
    assert torch.allclose(canonical, rig.vertices[pick], atol=1e-9, rtol=0)


def test_inverse_lbs_round_trips_near_surface(two_joint_rig, seeded):
    rig = two_joint_rig
    theta = torch.zeros(2, 3, dtype=torch.float64)
    theta[1, 2] = 0.2
    h = joint_transforms(rig, theta)
    offsets = torch.zeros_like(rig.vertices)
    observed = posed_vertices(rig, offsets, h)

    jitter = seeded.normal(size=(observed.shape[0], 3))
    jitter *= seeded.uniform(0.0, 0.01, size=(observed.shape[0], 1)) / np.linalg.norm(
        jitter, axis=1, keepdims=True)
    p = observed + torch.from_numpy(jitter)
    x = inverse_lbs(p, rig, h, offsets)

    # forward again with blend weights interpolated like the inverse map
    dist, idx = torch.cdist(p, observed).topk(4, largest=False)
    g = 1.0 / dist.clamp_min(1e-8)
    g = g / g.sum(dim=1, keepdim=True)
    weights = torch.einsum("pn,pnk->pk", g, rig.weights[idx])
    back = lbs_forward(x, weights, h)
    err = (back - p).norm(dim=1)
    assert float(err.max()) <= 1e-3


def test_neighbor_count_must_be_positive(rig):
    h = joint_transforms(rig, torch.zeros(rig.num_parts, 3))
    with pytest.raises(InvalidInputError):
        inverse_lbs(torch.zeros(1, 3), rig, h, torch.zeros_like(rig.vertices), neighbors=0)
