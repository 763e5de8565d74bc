import math
from collections import Counter

import numpy as np
import pytest
import torch

from Constants.palette import PALETTE
from cch.dataset import (COLORS, FABRICS, LOWER_SHAPES, PATTERNS, UPPER_SHAPES, FashionGrammar,
                         Outfit, garment_masks, generate_dataset, load_dataset, make_record,
                         rasterize_capsules, sample_outfit, save_dataset, upper_region)
from cch.ray_geometry import Camera
from utils.errors import InvalidInputError
from utils.images import read_image


def _camera(height=32, width=16):
    return Camera.look_at([0.0, 0.9, 3.2], [0.0, 0.9, 0.0], [0.0, 1.0, 0.0], 215.0 * height / 128,
                          height, width)


# ---------------- Grammar ---------------- #


def test_grammar_rejects_unknown_values():
    with pytest.raises(InvalidInputError):
        FashionGrammar.from_mapping({"colors": ["mauve"]})
    with pytest.raises(InvalidInputError):
        FashionGrammar.from_mapping({"sleeves": ["long"]})
    with pytest.raises(InvalidInputError):
        FashionGrammar.from_mapping({"fabrics": []})


def test_attributes_are_sampled_uniformly():
    rng = np.random.default_rng(2024)
    grammar = FashionGrammar()
    outfits = [sample_outfit(np.random.default_rng(int(s)), grammar)
               for s in rng.integers(0, 2**63 - 1, size=1000)]
    axes = {
        "upper shape": ([o.upper.shape for o in outfits], UPPER_SHAPES),
        "lower shape": ([o.lower.shape for o in outfits], LOWER_SHAPES),
        "fabric": ([o.upper.fabric for o in outfits], FABRICS),
        "pattern": ([o.lower.pattern for o in outfits], PATTERNS),
        "color": ([o.upper.color for o in outfits], COLORS),
    }
    for axis, (values, allowed) in axes.items():
        counts = Counter(values)
        p = 1.0 / len(allowed)
        bound = 3.0 * math.sqrt(1000 * p * (1 - p))
        for value in allowed:
            assert abs(counts[value] - 1000 * p) <= bound, (axis, value, counts[value])


def test_description_round_trips_through_the_parser():
    outfit = sample_outfit(np.random.default_rng(3), FashionGrammar())
    assert Outfit.parse(outfit.describe()) == outfit
    with pytest.raises(InvalidInputError):
        Outfit.parse("red shirt")


# ---------------- Records ---------------- #


def test_pure_red_upper_garment_is_exact(rig):
    grammar = FashionGrammar.from_mapping(
        {"fabrics": ["cotton"], "patterns": ["pure color"], "colors": ["red"]})
    camera = _camera()
    record = make_record(17, grammar, rig, camera)
    assert record.description.startswith(f"{record.outfit.upper.shape} cotton pure color red upper")
    raster = rasterize_capsules(rig, record.pose, camera)
    upper, _ = garment_masks(rig, raster, record.outfit)
    assert bool(upper.any())
    pixels = record.image[upper.numpy()]
    assert np.array_equal(pixels, np.tile(np.array(PALETTE["red"]), (pixels.shape[0], 1)))


def test_records_are_rebuilt_from_their_seed(rig):
    camera = _camera()
    a = make_record(99, FashionGrammar(), rig, camera)
    b = make_record(99, FashionGrammar(), rig, camera)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.segmentation, b.segmentation)
    assert a.description == b.description


def test_a_single_outfit_grammar_only_varies_with_pose(rig):
    grammar = FashionGrammar.from_mapping({
        "upper_shapes": [UPPER_SHAPES[0]], "lower_shapes": [LOWER_SHAPES[0]],
        "fabrics": ["cotton"], "patterns": ["floral"], "colors": ["blue"]})
    camera = _camera()
    still = [make_record(s, grammar, rig, camera, pose_std=0.0, root_yaw=0.0) for s in (1, 2, 3)]
    assert len({r.description for r in still}) == 1
    for other in still[1:]:
        assert np.array_equal(other.image, still[0].image)
        assert np.array_equal(other.segmentation, still[0].segmentation)
    posed = make_record(4, grammar, rig, camera, pose_std=0.4, root_yaw=0.0)
    assert not np.array_equal(posed.image, still[0].image)


def test_shape_variation_is_refused(rig):
    with pytest.raises(InvalidInputError):
        make_record(1, FashionGrammar(), rig, _camera(), shape_std=0.05)
    assert not make_record(1, FashionGrammar(), rig, _camera()).shape.any()


def test_segmentation_matches_the_painted_body(rig):
    record = make_record(5, FashionGrammar(), rig, _camera())
    background = record.segmentation == 0
    assert np.array_equal(record.image[background], np.ones((int(background.sum()), 3)))
    assert set(np.unique(record.segmentation)) <= set(range(rig.num_parts + 1))
    torso = upper_region(rig, torch.from_numpy(record.segmentation))
    assert bool(torso.any())


# ---------------- Archive ---------------- #


def test_archive_round_trip_with_previews(rig, tmp_path):
    records = generate_dataset(3, FashionGrammar(), np.random.default_rng(8), rig=rig,
                               camera=_camera())
    path = tmp_path / "toy.npz"
    save_dataset(records, str(path), previews=2)
    loaded = load_dataset(str(path))
    assert len(loaded) == 3
    for original, back in zip(records, loaded):
        assert np.array_equal(original.image, back.image)
        assert np.array_equal(original.segmentation, back.segmentation)
        assert original.description == back.description
        assert original.seed == back.seed
        assert back.outfit == original.outfit
    preview = read_image(str(tmp_path / "previews" / "record_0001.ppm"))
    assert preview.shape == (32, 16, 3)
    assert not (tmp_path / "previews" / "record_0002.ppm").exists()


def test_missing_or_empty_archives(tmp_path):
    with pytest.raises(InvalidInputError):
        load_dataset(str(tmp_path / "absent.npz"))
    with pytest.raises(InvalidInputError):
        save_dataset([], str(tmp_path / "empty.npz"))
