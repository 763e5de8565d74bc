import math

import pytest
import torch

from cch.checks import DESCRIPTION, discriminator_path_check
from cch.discriminator import (DiscriminatorNet, SegmentationMap, discriminate, fashion_map,
                               fashion_maps, loss_d, loss_eik, loss_g, loss_off,
                               total_generator_loss)
from cch.fashion_text import FashionText
from utils.errors import InvalidInputError


@pytest.fixture
def net(vocab):
    torch.manual_seed(0)
    return DiscriminatorNet(vocab, embed_dim=8, widths=(4, 6, 8, 8), seg_dim=6)


def _seg(h=16, w=16):
    labels = torch.zeros(h, w, dtype=torch.long)
    labels[2:8, 4:12] = 3  # chest
    labels[8:15, 4:12] = 1  # pelvis
    return labels


def _words(ids, dim, seed=0):
    g = torch.Generator().manual_seed(seed)
    emb = torch.randn(len(ids), dim, generator=g, dtype=torch.float64)
    return FashionText(ids=torch.tensor(ids), embeddings=emb)


# ---------------- Fashion map ---------------- #


def test_segmentation_one_hot_has_every_label():
    one_hot = SegmentationMap(_seg()).one_hot()
    assert one_hot.shape == (17, 16, 16)
    assert torch.equal(one_hot.sum(dim=0), torch.ones(16, 16, dtype=torch.float64))


def test_out_of_range_labels_are_rejected():
    with pytest.raises(InvalidInputError):
        SegmentationMap(torch.full((4, 4), 17))


def test_single_word_fashion_map(net):
    words = _words([5], 8)
    fm = fashion_map(_seg(), words, net)
    assert fm.q.shape == (8, 4, 4)
    assert torch.allclose(fm.q, words.embeddings[0][:, None, None].expand(8, 4, 4), atol=1e-15)


def test_zero_attention_gives_mean_word(net):
    with torch.no_grad():
        net.attention.zero_()
    words = _words([4, 9, 12], 8)
    fm = fashion_map(_seg(), words, net)
    mean = words.embeddings.mean(dim=0)[:, None, None].expand(8, 4, 4)
    assert torch.allclose(fm.q, mean, atol=1e-12)


def test_attention_rows_sum_to_one(net):
    fm = fashion_map(_seg(), net.encode(DESCRIPTION), net)
    assert float((fm.attention.sum(dim=-1) - 1.0).abs().max()) <= 1e-6


def test_word_width_must_match(net):
    with pytest.raises(InvalidInputError):
        fashion_map(_seg(), _words([3], 5), net)


# ---------------- Classification ---------------- #


def test_logits_are_finite_small_and_repeatable(net, seeded):
    q = fashion_maps([_seg()] * 4, [DESCRIPTION] * 4, net)
    for _ in range(25):
        images = torch.from_numpy(seeded.uniform(0, 1, size=(4, 3, 16, 16)))
        logits = net(images, q)
        assert bool(torch.isfinite(logits).all())
        assert float(logits.abs().max()) <= 10.0
    image = torch.from_numpy(seeded.uniform(0, 1, size=(16, 16, 3)))
    assert torch.equal(discriminate(image, q[0], net), discriminate(image, q[0], net))


def test_mismatched_fashion_map_is_rejected(net):
    q = fashion_maps([_seg(8, 8)], [DESCRIPTION], net)
    with pytest.raises(InvalidInputError):
        net(torch.zeros(1, 3, 16, 16, dtype=torch.float64), q)


# ---------------- Losses ---------------- #


def _zero_critic(images):
    return (images * 0.0).sum(dim=(1, 2, 3))


def test_zero_critic_loss_is_two_log_two():
    real = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    fake = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    out = loss_d(real, fake, _zero_critic)
    assert abs(float(out.total) - 2.0 * math.log(2.0)) <= 1e-12
    assert float(out.r1) == 0.0


def test_saturated_critic_drives_the_loss_to_zero():
    real = torch.ones(1, 3, 2, 2, dtype=torch.float64)
    fake = torch.zeros(1, 3, 2, 2, dtype=torch.float64)

    def critic(images):
        return torch.where(images.mean(dim=(1, 2, 3)) > 0.5, torch.tensor(50.0, dtype=torch.float64),
                           torch.tensor(-50.0, dtype=torch.float64)) + 0.0 * images.sum()

    assert float(loss_d(real, fake, critic).total) < 1e-20


def test_swapping_images_and_negating_the_critic_keeps_the_loss(seeded):
    g = torch.from_numpy(seeded.normal(size=(1, 3, 4, 4)))

    def critic(images):
        return 5.0 * torch.sin((images * g).sum(dim=(1, 2, 3)))

    def flipped(images):
        return -critic(images)

    for _ in range(10):
        real = torch.from_numpy(seeded.uniform(0, 1, size=(3, 3, 4, 4)))
        fake = torch.from_numpy(seeded.uniform(0, 1, size=(3, 3, 4, 4)))
        logits = critic(torch.cat([real, fake]))
        assert float(logits.abs().max()) > 0.0
        forward = loss_d(real, fake, critic, r1_weight=0.0)
        swapped = loss_d(fake, real, flipped, r1_weight=0.0)
        assert float(forward.r1) == float(swapped.r1) == 0.0
        assert float(forward.total) == pytest.approx(float(swapped.total), rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("mode", ["autograd", "finite_difference"])
def test_linear_critic_r1_term(mode):
    g = torch.linspace(-1.0, 1.0, 3 * 4 * 4, dtype=torch.float64).reshape(1, 3, 4, 4)

    def critic(images):
        return (images * g).sum(dim=(1, 2, 3))

    real = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    out = loss_d(real, torch.rand(1, 3, 4, 4, dtype=torch.float64), critic, 10.0, mode)
    assert float(out.r1) == pytest.approx(10.0 * float(g.pow(2).sum()), rel=1e-9)


def test_unknown_r1_mode():
    with pytest.raises(InvalidInputError):
        loss_d(torch.zeros(1, 3, 2, 2), torch.zeros(1, 3, 2, 2), _zero_critic, mode="magic")


def test_generator_adversarial_loss():
    fake = torch.zeros(1, 3, 2, 2, dtype=torch.float64)
    at = lambda v: float(loss_g(fake, lambda x: torch.full((1,), v, dtype=torch.float64)))  # noqa: E731
    assert at(0.0) == pytest.approx(math.log(2.0), abs=1e-15)
    assert at(20.0) <= 2.1e-9
    assert at(1.0) < at(0.0)


def test_offset_loss():
    assert float(loss_off(torch.zeros(5))) == 0.0
    assert float(loss_off(torch.tensor([1.0, -1.0]))) == 1.0
    assert float(loss_off([torch.tensor([0.3])])) == pytest.approx(0.09)
    with pytest.raises(InvalidInputError):
        loss_off([])


def test_eikonal_loss():
    pts = torch.rand(10, 3, dtype=torch.float64)
    assert float(loss_eik(pts, lambda x: x[:, 0])) == pytest.approx(1.0)
    assert float(loss_eik(pts, lambda x: torch.zeros(10, dtype=torch.float64))) == 0.0
    assert float(loss_eik(torch.zeros(0, 3), lambda x: x[:, 0])) == 0.0


def test_eikonal_autodiff_matches_finite_differences(seeded):
    pts = torch.from_numpy(seeded.uniform(-1, 1, size=(5, 3)))
    w = torch.from_numpy(seeded.normal(size=3))

    def delta(x):
        return torch.sin(3.0 * x @ w)

    value = float(loss_eik(pts, delta))
    h = 1e-6
    grads = []
    for i in range(3):
        step = torch.zeros(3, dtype=torch.float64)
        step[i] = h
        grads.append((delta(pts + step) - delta(pts - step)) / (2 * h))
    numeric = float(torch.stack(grads, dim=1).pow(2).sum(dim=1).mean())
    assert value == pytest.approx(numeric, rel=1e-4)


def test_total_generator_loss_weights():
    assert total_generator_loss(1.0, 0.0, 0.0) == 1.0
    assert total_generator_loss(0.0, 2.0, 4.0) == 5.0
    assert total_generator_loss(1.0, 1.0, 1.0) == 3.0


# ---------------- Gradients ---------------- #


def test_discriminator_path_gradcheck_with_r1(rig, net):
    report = discriminator_path_check(net, rig, size=16, probes=50, seed=0)
    assert report.passed(1e-4), report.lines()
