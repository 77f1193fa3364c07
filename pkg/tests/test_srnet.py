import numpy as np
import pytest
import torch
import torch.nn.functional as F

from srseg.srnet import (DiscriminatorConfig, GeneratorConfig, LossWeights,
                         PerceptualExtractor, RRDB, SNConv2d, UNetDiscriminator,
                         build_discriminator, build_generator, gan_losses,
                         perceptual_loss, spectral_normalize)

from _gradcheck import finite_diff_max_rel_err

TINY = GeneratorConfig(n_rrdb_stage1=1, n_rrdb_stage2=1, feat_width=8,
                       growth_channels=8)

torch.manual_seed(0)


class TestGeneratorConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            GeneratorConfig(n_rrdb_stage1=0)
        with pytest.raises(ValueError):
            GeneratorConfig(feat_width=4)
        with pytest.raises(ValueError):
            GeneratorConfig(fusion="mean")
        with pytest.raises(ValueError):
            GeneratorConfig(total_scale=8)


class TestGeneratorShapes:
    def test_desk_config_32(self):
        gen = build_generator()
        sr4, sr10 = gen.predict(torch.rand(1, 3, 32, 32))
        assert sr4.shape == (1, 3, 128, 128)
        assert sr10.shape == (1, 3, 320, 320)

    def test_160_to_1600_tiny(self):
        gen = build_generator(TINY)
        sr4, sr10 = gen.predict(torch.rand(1, 3, 160, 160))
        assert sr4.shape == (1, 3, 640, 640)
        assert sr10.shape == (1, 3, 1600, 1600)

    @pytest.mark.parametrize("h, w", [(8, 8), (8, 12), (16, 10)])
    def test_scale_contract_sweep(self, h, w):
        gen = build_generator(TINY)
        sr4, sr10 = gen.predict(torch.rand(1, 3, h, w))
        assert sr4.shape == (1, 3, 4 * h, 4 * w)
        assert sr10.shape == (1, 3, 10 * h, 10 * w)

    def test_odd_dims_rejected(self):
        gen = build_generator(TINY)
        with pytest.raises(ValueError, match="even"):
            gen(torch.rand(1, 3, 15, 16))

    def test_param_count_deterministic(self):
        assert build_generator(TINY).n_parameters() == build_generator(TINY).n_parameters()

    def test_predict_clamps(self):
        gen = build_generator(TINY)
        sr4, sr10 = gen.predict(torch.rand(2, 3, 8, 8))
        for t in (sr4, sr10):
            assert t.min() >= 0.0 and t.max() <= 1.0


class TestProgressiveStructure:
    def test_zeroed_heads_equal_nearest_interpolation(self):
        gen = build_generator(TINY).zero_residual_heads_().eval()
        lr = torch.rand(1, 3, 8, 8)
        with torch.no_grad():
            sr4, sr10 = gen(lr)
        oracle4 = F.interpolate(lr, scale_factor=4, mode="nearest")
        oracle10 = F.interpolate(lr, size=(80, 80), mode="nearest")
        assert torch.equal(sr4, oracle4)
        assert torch.equal(sr10, oracle10)

    def test_batch_rows_independent(self):
        gen = build_generator(TINY).eval()
        x = torch.rand(1, 3, 8, 8)
        with torch.no_grad():
            sr4, sr10 = gen(torch.cat([x, x], dim=0))
        assert torch.equal(sr4[0], sr4[1])
        assert torch.equal(sr10[0], sr10[1])

    def test_fusion_add_variant(self):
        cfg = GeneratorConfig(n_rrdb_stage1=1, n_rrdb_stage2=1, feat_width=8,
                              growth_channels=8, fusion="add")
        sr4, sr10 = build_generator(cfg).predict(torch.rand(1, 3, 8, 8))
        assert sr10.shape == (1, 3, 80, 80)

    def test_rrdb_identity_at_zero_scale(self):
        block = RRDB(8, 8, residual_scale=0.0)
        x = torch.rand(2, 8, 12, 12)
        assert torch.equal(block(x), x)

    def test_rrdb_preserves_shape(self):
        block = RRDB(8, 8, residual_scale=0.2)
        x = torch.rand(2, 8, 10, 14)
        assert block(x).shape == x.shape

    def test_receptive_field_radius(self):
        small = build_generator(TINY).receptive_field_radius()
        big = build_generator(GeneratorConfig(n_rrdb_stage1=4, n_rrdb_stage2=4,
                                              feat_width=8, growth_channels=8)
                              ).receptive_field_radius()
        assert isinstance(small, int) and 0 < small < big


class TestSpectralNormalize:
    def test_diag_matrix(self):
        w = torch.diag(torch.tensor([3.0, 1.0]))
        normalized, _, sigma = spectral_normalize(w, n_iters=20)
        top = torch.linalg.svdvals(normalized)[0].item()
        assert abs(top - 1.0) <= 1e-6
        assert abs(sigma - 3.0) <= 1e-5

    def test_identity_unchanged(self):
        w = torch.eye(8)
        normalized, _, sigma = spectral_normalize(w, n_iters=20)
        assert torch.allclose(normalized, w, atol=1e-6)

    def test_random_matrix_against_svd(self):
        torch.manual_seed(3)
        w = torch.randn(16, 16)
        normalized, _, _ = spectral_normalize(w, n_iters=50)
        top = torch.linalg.svdvals(normalized)[0].item()
        assert top <= 1.0 + 1e-3

    def test_zero_matrix_unchanged(self):
        w = torch.zeros(4, 4)
        normalized, _, _ = spectral_normalize(w, n_iters=5)
        assert torch.equal(normalized, w)

    def test_persistent_state_improves_estimate(self):
        torch.manual_seed(4)
        w = torch.randn(12, 12)
        _, u, sigma_first = spectral_normalize(w, n_iters=1)
        for _ in range(300):
            _, u, sigma = spectral_normalize(w, n_iters=1, u=u)
        true = torch.linalg.svdvals(w)[0].item()
        assert abs(sigma - true) <= abs(sigma_first - true)
        assert abs(sigma - true) / true < 1e-3

    def test_bad_iters_rejected(self):
        with pytest.raises(ValueError):
            spectral_normalize(torch.eye(2), n_iters=0)


class TestSNConv2d:
    def test_effective_weight_bounded_after_updates(self):
        torch.manual_seed(5)
        conv = SNConv2d(4, 8, 3, n_power_iterations=2)
        conv.train()
        x = torch.rand(1, 4, 16, 16)
        for _ in range(30):
            conv(x)
        w = conv.effective_weight().flatten(1)
        assert torch.linalg.svdvals(w)[0].item() <= 1.0 + 1e-3


class TestDiscriminator:
    def test_output_matches_input_dims(self):
        disc = build_discriminator(DiscriminatorConfig(depth=3, base_channels=8))
        for size in (128, 64):
            out = disc(torch.rand(1, 3, size, size))
            assert out.shape == (1, 1, size, size)

    def test_rectangular_input(self):
        disc = build_discriminator(DiscriminatorConfig(depth=2, base_channels=8))
        assert disc(torch.rand(1, 3, 32, 48)).shape == (1, 1, 32, 48)

    def test_indivisible_dims_rejected(self):
        disc = build_discriminator(DiscriminatorConfig(depth=3, base_channels=8))
        with pytest.raises(ValueError, match="divisible"):
            disc(torch.rand(1, 3, 60, 60))

    def test_constant_weight_disc_distinguishes_inputs(self):
        disc = build_discriminator(DiscriminatorConfig(depth=2, base_channels=8))
        with torch.no_grad():
            for m in disc.modules():
                if isinstance(m, torch.nn.Conv2d):
                    m.weight.fill_(0.05)
                    m.bias.zero_()
        a = disc(torch.zeros(1, 3, 16, 16))
        b = disc(torch.ones(1, 3, 16, 16))
        assert not torch.allclose(a, b)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DiscriminatorConfig(depth=0)
        with pytest.raises(ValueError):
            DiscriminatorConfig(n_power_iterations=0)


class TestPerceptualLoss:
    def test_identity_is_zero(self):
        ext = PerceptualExtractor(seed=0)
        x = torch.rand(1, 3, 32, 32)
        assert perceptual_loss(x, x, ext).item() == 0.0

    def test_symmetry(self):
        ext = PerceptualExtractor(seed=0)
        a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
        assert torch.isclose(perceptual_loss(a, b, ext), perceptual_loss(b, a, ext))

    def test_linear_in_layer_weights(self):
        ext = PerceptualExtractor(seed=1)
        a, b = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
        w1 = (1.0, 0.0, 0.0, 0.0, 0.0)
        w2 = (2.0, 0.0, 0.0, 0.0, 0.0)
        l1 = perceptual_loss(a, b, ext, w1)
        l2 = perceptual_loss(a, b, ext, w2)
        assert torch.isclose(l2, 2 * l1)

    def test_extractor_is_frozen_and_deterministic(self):
        e1, e2 = PerceptualExtractor(seed=7), PerceptualExtractor(seed=7)
        x = torch.rand(1, 3, 16, 16)
        assert torch.equal(e1.features(x)[-1], e2.features(x)[-1])
        assert all(not p.requires_grad for p in e1.parameters())

    def test_shape_mismatch(self):
        ext = PerceptualExtractor(seed=0)
        with pytest.raises(ValueError):
            perceptual_loss(torch.rand(1, 3, 16, 16), torch.rand(1, 3, 8, 8), ext)


class TestGanLosses:
    def test_zero_maps_closed_form(self):
        zeros = torch.zeros(1, 1, 8, 8)
        loss_d, loss_g = gan_losses(zeros, zeros)
        ln2 = float(np.log(2.0))
        assert abs(loss_d.item() - 2 * ln2) < 1e-6
        assert abs(loss_g.item() - ln2) < 1e-6

    def test_perfect_discriminator_limit(self):
        loss_d, _ = gan_losses(torch.full((1, 1, 4, 4), 40.0),
                               torch.full((1, 1, 4, 4), -40.0))
        assert loss_d.item() < 1e-12

    def test_generator_gradient_sign(self):
        d_fake = torch.zeros(1, 1, 4, 4, requires_grad=True)
        _, loss_g = gan_losses(torch.zeros(1, 1, 4, 4), d_fake)
        loss_g.backward()
        assert (d_fake.grad < 0).all()

    def test_loss_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(l1=-1.0)
        with pytest.raises(ValueError):
            LossWeights(l1=0.0, perceptual=0.0, gan=0.0)


class TestGradients:
    def test_generator_l1_plus_perceptual_matches_finite_differences(self):
        torch.manual_seed(11)
        cfg = GeneratorConfig(n_rrdb_stage1=1, n_rrdb_stage2=1, feat_width=8,
                              growth_channels=8)
        gen = build_generator(cfg).double().eval()
        ext = PerceptualExtractor(seed=2).double()
        lr = torch.rand(1, 3, 4, 4, dtype=torch.float64)
        hr = torch.rand(1, 3, 40, 40, dtype=torch.float64)

        def loss_fn():
            sr4, sr10 = gen(lr)
            return F.l1_loss(sr10, hr) + 0.5 * perceptual_loss(sr10, hr, ext)

        err = finite_diff_max_rel_err(loss_fn, gen.parameters(), n_samples=10,
                                      eps=1e-5, seed=0)
        assert err < 1e-4
