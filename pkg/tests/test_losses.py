import itertools
import math

import pytest
import torch
from conftest import gradient_error
from torch import nn

from hcd.errors import ConfigurationError, InvalidArgumentError
from hcd.imaging import build_target_pyramid, resize_bilinear
from hcd.losses import (
    PerceptualEncoder,
    charbonnier_loss,
    hcl_loss,
    perceptual_embed,
    total_loss,
)
from hcd.state_model import PerceptualConfig


def _scales(*values, dtype=torch.float64):
    return tuple(torch.tensor(v, dtype=dtype).view(1, 1, 1) for v in values)


class TestCharbonnier:
    def test_equal_images_give_epsilon(self):
        images = build_target_pyramid(torch.rand(3, 8, 8, dtype=torch.float64))
        assert charbonnier_loss(images, images, 1e-3).item() == pytest.approx(1e-3, rel=1e-12)

    def test_hand_example(self):
        loss = charbonnier_loss(_scales(3e-3, 0.0, 0.0), _scales(0.0, 0.0, 0.0), 1e-3)
        expected = (math.sqrt(9e-6 + 1e-6) + 2e-3) / 3
        assert loss.item() == pytest.approx(expected, rel=1e-12)
        assert loss.item() == pytest.approx(1.7208e-3, abs=1e-7)

    def test_large_residual_approaches_l1(self):
        outputs = tuple(torch.ones(3, s, s, dtype=torch.float64) for s in (8, 4, 2))
        targets = tuple(torch.zeros_like(o) for o in outputs)
        loss = charbonnier_loss(outputs, targets, 1e-3).item()
        assert loss == pytest.approx(math.sqrt(1 + 1e-6), rel=1e-12)
        assert loss == pytest.approx(1.0, rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            charbonnier_loss((torch.zeros(3, 4, 4),), (torch.zeros(3, 4, 5),))


class TestEncoders:
    def test_identity_embeds_the_image(self):
        x = torch.rand(1, 3, 4, 4)
        features = perceptual_embed(x, PerceptualEncoder.identity())
        assert len(features) == 1 and torch.equal(features[0], x)
        assert PerceptualEncoder.identity().coefficients == (1.0,)

    def test_vgg_taps(self):
        torch.manual_seed(0)
        encoder = PerceptualEncoder.vgg19()
        features = encoder(torch.rand(1, 3, 32, 32))
        sides = [f.shape[-1] for f in features]
        assert len(features) == 5
        assert all(a >= b for a, b in zip(sides, sides[1:]))
        assert encoder.coefficients == (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)
        assert not any(p.requires_grad for p in encoder.parameters())

    def test_missing_vgg_weights_names_the_path(self, tmp_path):
        path = tmp_path / "vgg19.pth"
        with pytest.raises(ConfigurationError, match="vgg19.pth"):
            PerceptualEncoder.from_config(PerceptualConfig(weights_path=str(path)))

    def test_random_tiny_is_deterministic(self):
        x = torch.rand(2, 3, 16, 16)
        before = torch.get_rng_state()
        a = PerceptualEncoder.random_tiny(3)(x)
        b = PerceptualEncoder.random_tiny(3)(x)
        assert torch.equal(before, torch.get_rng_state())
        assert len(a) == 3
        assert all(torch.equal(u, v) for u, v in zip(a, b))

    def test_rejects_wrong_channels(self):
        with pytest.raises(InvalidArgumentError):
            PerceptualEncoder.random_tiny()(torch.rand(1, 1, 8, 8))

    def test_rejects_dtype_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            PerceptualEncoder.random_tiny()(torch.rand(1, 3, 8, 8, dtype=torch.float64))


def brute_force_hcl(outputs, positives, negatives, encoder, delta=1e-7):
    """Triple loop over (i, j, k), embedding every image on its own."""
    mid = outputs[len(outputs) // 2].shape[-2:]

    def embed(img):
        return [f[0] for f in encoder(resize_bilinear(img, *mid).unsqueeze(0))]

    def distance(x, y):
        total = 0.0
        for coeff, a, b in zip(encoder.coefficients, x, y):
            diffs = [abs(u - v) for u, v in zip(a.flatten().tolist(), b.flatten().tolist())]
            total += coeff * sum(diffs) / len(diffs)
        return total

    loss = 0.0
    for a in outputs:
        ea = embed(a)
        pull = 0.0
        push = 0.0
        for p in positives:
            pull += distance(ea, embed(p))
        for n in negatives:
            push += 1.0 / max(distance(ea, embed(n)), delta)
        loss += pull * push
    return loss


class TestContrastive:
    def test_scalar_example(self):
        (a,), (p,), (n,) = _scales(2.0), _scales(1.0), _scales(0.0)
        loss = hcl_loss((a,), (p,), (n,), PerceptualEncoder.identity())
        assert loss.item() == pytest.approx(0.5, rel=1e-12)

    def test_zero_when_outputs_match_positives(self):
        a = torch.rand(1, 4, 4, dtype=torch.float64)
        loss = hcl_loss((a,), (a.clone(),), (torch.zeros_like(a),), PerceptualEncoder.identity())
        assert loss.item() == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force_identity(self, seed):
        gen = torch.Generator().manual_seed(seed)
        images = [torch.rand(1, 4, 4, generator=gen, dtype=torch.float64) for _ in range(9)]
        encoder = PerceptualEncoder.identity()
        got = hcl_loss(images[:3], images[3:6], images[6:], encoder).item()
        want = brute_force_hcl(images[:3], images[3:6], images[6:], encoder)
        assert got == pytest.approx(want, rel=1e-6)

    def test_matches_brute_force_across_scales(self):
        gen = torch.Generator().manual_seed(42)
        encoder = PerceptualEncoder.random_tiny(1).double()
        triple = [
            build_target_pyramid(torch.rand(3, 16, 16, generator=gen, dtype=torch.float64))
            for _ in range(3)
        ]
        got = hcl_loss(*triple, encoder).item()
        want = brute_force_hcl(*triple, encoder)
        assert got == pytest.approx(want, rel=1e-6)

    def test_batched_equals_mean_distances(self):
        gen = torch.Generator().manual_seed(7)
        a, p, n = (torch.rand(2, 1, 4, 4, generator=gen, dtype=torch.float64) for _ in range(3))
        got = hcl_loss((a,), (p,), (n,), PerceptualEncoder.identity()).item()
        want = (a - p).abs().mean().item() / (a - n).abs().mean().item()
        assert got == pytest.approx(want, rel=1e-12)

    def test_scales_with_residual(self):
        p = torch.zeros(1, 1, 2, dtype=torch.float64)
        n = torch.full_like(p, -10.0)
        base = torch.tensor([[[0.5, -0.5]]], dtype=torch.float64)
        encoder = PerceptualEncoder.identity()
        one = hcl_loss((p + base,), (p,), (n,), encoder).item()
        for c in (2.0, 3.5, 7.0):
            scaled = hcl_loss((p + c * base,), (p,), (n,), encoder).item()
            assert scaled == pytest.approx(c * one, rel=1e-12)

    def test_inner_sums_are_order_free(self):
        gen = torch.Generator().manual_seed(3)
        images = [torch.rand(1, 4, 4, generator=gen, dtype=torch.float64) for _ in range(9)]
        encoder = PerceptualEncoder.identity()
        reference = hcl_loss(images[:3], images[3:6], images[6:], encoder).item()
        for pos, neg in itertools.product(itertools.permutations(images[3:6]), [images[6:][::-1]]):
            assert hcl_loss(images[:3], list(pos), neg, encoder).item() == pytest.approx(reference, rel=1e-12)

    def test_non_negative(self):
        gen = torch.Generator().manual_seed(11)
        for _ in range(10):
            images = [torch.rand(1, 4, 4, generator=gen) for _ in range(9)]
            assert hcl_loss(images[:3], images[3:6], images[6:], PerceptualEncoder.identity()).item() >= 0.0

    def test_guard_on_identical_negative(self):
        a = torch.rand(1, 4, 4, dtype=torch.float64)
        p = torch.zeros_like(a)
        loss = hcl_loss((a,), (p,), (a.clone(),), PerceptualEncoder.identity())
        assert torch.isfinite(loss)
        assert loss.item() == pytest.approx(a.abs().mean().item() / 1e-7, rel=1e-9)

    def test_mismatched_counts(self):
        x = torch.rand(1, 4, 4)
        with pytest.raises(InvalidArgumentError):
            hcl_loss((x, x), (x,), (x,), PerceptualEncoder.identity())

    def test_works_with_any_multi_scale_model(self):
        class StubModel(nn.Module):
            def __init__(self):
                super().__init__()
                self.conv = nn.Conv2d(3, 3, 3, padding=1)

            def forward(self, x):
                y = x + self.conv(x)
                return y, nn.functional.avg_pool2d(y, 2), nn.functional.avg_pool2d(y, 4)

        torch.manual_seed(0)
        stub = StubModel()
        hazy, clear = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
        loss = hcl_loss(stub(hazy), build_target_pyramid(clear), build_target_pyramid(hazy),
                        PerceptualEncoder.random_tiny())
        loss.backward()
        assert torch.isfinite(loss) and loss.item() > 0
        assert stub.conv.weight.grad is not None and stub.conv.weight.grad.abs().sum() > 0


class TestTotal:
    @pytest.fixture
    def triple(self):
        gen = torch.Generator().manual_seed(0)
        return [build_target_pyramid(torch.rand(1, 3, 16, 16, generator=gen)) for _ in range(3)]

    def test_without_contrastive_term(self, triple):
        losses = total_loss(*triple, use_hcl=False)
        assert torch.equal(losses.total, losses.char)
        assert losses.hcl.item() == 0.0

    def test_zero_lambda(self, triple):
        losses = total_loss(*triple, lam=0.0, use_hcl=True, encoder=PerceptualEncoder.random_tiny())
        assert torch.equal(losses.total, losses.char)
        assert losses.hcl.item() > 0.0

    def test_weighted_sum(self, triple):
        losses = total_loss(*triple, lam=0.1, use_hcl=True, encoder=PerceptualEncoder.identity())
        assert losses.total.item() == pytest.approx(losses.char.item() + 0.1 * losses.hcl.item(), rel=1e-6)
        assert (losses.lam, losses.epsilon) == (0.1, 1e-3)

    def test_known_terms_combine(self):
        # constant single-scale images: residual 1e-3, anchor-to-negative distance 2e-3
        epsilon = math.sqrt(1.7208e-3 ** 2 - 1e-3 ** 2)
        losses = total_loss(
            _scales(0.5), _scales(0.501), _scales(0.498),
            lam=0.1, epsilon=epsilon, use_hcl=True, encoder=PerceptualEncoder.identity(),
        )
        assert losses.char.item() == pytest.approx(1.7208e-3, rel=1e-9)
        assert losses.hcl.item() == pytest.approx(0.5, rel=1e-9)
        assert losses.total.item() == pytest.approx(0.0517208, rel=1e-9)

    def test_contrastive_needs_an_encoder(self, triple):
        with pytest.raises(ConfigurationError):
            total_loss(*triple, use_hcl=True, encoder=None)


def _objective(encoder):
    gen = torch.Generator().manual_seed(5)
    clear = torch.rand(1, 3, 32, 32, generator=gen, dtype=torch.float64)
    hazy = torch.rand(1, 3, 32, 32, generator=gen, dtype=torch.float64)
    targets, negatives = build_target_pyramid(clear), build_target_pyramid(hazy)

    def fn(a1, a2, a3):
        return total_loss((a1, a2, a3), targets, negatives, lam=0.1, use_hcl=True, encoder=encoder).total

    outputs = build_target_pyramid(torch.rand(1, 3, 32, 32, generator=gen, dtype=torch.float64))
    return fn, outputs


class TestGradients:
    def test_charbonnier(self):
        gen = torch.Generator().manual_seed(0)
        targets = build_target_pyramid(torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64))
        outputs = build_target_pyramid(torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64))
        assert gradient_error(lambda *o: charbonnier_loss(o, targets), *outputs) <= 1e-4

    def test_identity_backend(self):
        fn, outputs = _objective(PerceptualEncoder.identity())
        assert gradient_error(fn, *outputs) <= 1e-4

    def test_random_tiny_backend(self):
        fn, outputs = _objective(PerceptualEncoder.random_tiny(0).double())
        assert gradient_error(fn, *outputs) <= 1e-4

    def test_vgg_backend(self):
        torch.manual_seed(0)
        fn, outputs = _objective(PerceptualEncoder.vgg19().double())
        assert gradient_error(fn, *outputs) <= 1e-4
