import math

import pytest
import torch

from vital.config import StageConfig, TextConfig
from vital.stackgman import (GmanModel, StageDiscriminator, disc_objective, gen_objective, sample_noise,
                             synthesize)
from vital.textenc import Vocabulary

LN2 = math.log(2)


def _model(K=3, tied=True, scales=(4, 8, 16)):
    torch.manual_seed(0)
    stage = StageConfig(scales=list(scales), K=K, z_dim=4, tied_weights=tied, g_ch=4, d_ch=4)
    text = TextConfig(max_len=8, embed_dim=6, e_dim=6, c_dim=3)
    return GmanModel(stage, text, vocab_size=12)


class TestNoise:
    def test_shape_and_determinism(self):
        a = sample_noise(5, 8, torch.Generator().manual_seed(3))
        b = sample_noise(5, 8, torch.Generator().manual_seed(3))
        assert a.shape == (5, 8)
        torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_moments(self):
        z = sample_noise(1, 10_000, torch.Generator().manual_seed(0), dtype=torch.float64)
        assert abs(float(z.mean())) < 0.05 and abs(float(z.std()) - 1) < 0.05

    def test_zero_k(self):
        with pytest.raises(ValueError):
            sample_noise(0, 4)


class TestGenerator:
    def test_stage_sizes_and_range(self):
        m = _model()
        c = torch.randn(2, 3)
        images = m.generate(c, torch.randn(3, 2, 4))
        assert [im.shape for im in images] == [(3, 2, 3, s, s) for s in (4, 8, 16)]
        for im in images:
            assert im.abs().max() < 1

    def test_equal_noise_gives_equal_images(self):
        m = _model()
        c = torch.randn(1, 3)
        z = torch.randn(1, 1, 4).expand(3, 1, 4)
        for im in m.generate(c, z):
            torch.testing.assert_close(im[0], im[1], rtol=0, atol=0)
            torch.testing.assert_close(im[0], im[2], rtol=0, atol=0)

    def test_untied_names_and_counts(self):
        tied, untied = _model(K=3), _model(K=3, tied=False)
        assert untied.generator_parameter_count() == 3 * tied.generator_parameter_count()
        assert any(n.startswith("F.0.2.") for n, _ in untied.named_parameters())

    def test_untied_branch_out_of_range(self):
        m = _model(K=2, tied=False)
        with pytest.raises(ValueError):
            m.generator_forward(torch.randn(1, 3), torch.randn(1, 4), k=2)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            _model().generator_forward(torch.randn(2, 3), torch.randn(1, 4))


class TestDiscriminator:
    def test_zero_heads_give_half(self):
        d = StageDiscriminator(8, 3, 4)
        u, v = d(torch.randn(5, 3, 8, 8), torch.randn(5, 3))
        torch.testing.assert_close(u, torch.full((5,), 0.5))
        torch.testing.assert_close(v, torch.full((5,), 0.5))

    def test_open_interval(self):
        torch.manual_seed(0)
        d = StageDiscriminator(8, 3, 4, zero_heads=False)
        u, v = d(10 * torch.randn(16, 3, 8, 8), torch.randn(16, 3))
        assert ((u > 0) & (u < 1) & (v > 0) & (v < 1)).all()

    def test_wrong_scale(self):
        with pytest.raises(ValueError):
            StageDiscriminator(8, 3, 4).logits(torch.randn(1, 3, 16, 16), torch.randn(1, 3))


def _half(*shape):
    return torch.full(shape, 0.5, dtype=torch.float64)


class TestObjectives:
    @pytest.mark.parametrize("K, expected", [(1, -4 * LN2), (2, -8 * LN2)])
    def test_disc_half(self, K, expected):
        assert float(disc_objective(_half(4), _half(4), _half(K, 4), _half(K, 4))) == pytest.approx(expected, abs=1e-12)

    def test_disc_confident(self):
        real = torch.full((4,), 0.9, dtype=torch.float64)
        fake = torch.full((3, 4), 0.1, dtype=torch.float64)
        assert float(disc_objective(real, real, fake, fake)) == pytest.approx(12 * math.log(0.9), abs=1e-12)

    def test_gen_half(self):
        assert float(gen_objective([(_half(3, 2), _half(3, 2))], lambda_kl=0)) == pytest.approx(6 * LN2, abs=1e-12)
        two = [(_half(1, 2), _half(1, 2))] * 2
        assert float(gen_objective(two, lambda_kl=0)) == pytest.approx(4 * LN2, abs=1e-12)

    def test_gen_point_eight(self):
        s = torch.full((2, 3), 0.8, dtype=torch.float64)
        assert float(gen_objective([(s, s)], lambda_kl=0)) == pytest.approx(-4 * math.log(0.8), abs=1e-12)

    def test_kl_term(self):
        kl = torch.tensor([1.0, 3.0], dtype=torch.float64)
        assert float(gen_objective([(_half(1, 2), _half(1, 2))], kl, 0.5)) == pytest.approx(2 * LN2 + 1.0)

    def test_saturated_scores_are_finite(self):
        zero = torch.zeros(4, dtype=torch.float64)
        assert math.isfinite(float(disc_objective(zero, zero, zero[None] + 1, zero[None] + 1)))

    def test_empty(self):
        with pytest.raises(ValueError):
            disc_objective(torch.zeros(0), torch.zeros(0), torch.zeros(1, 0), torch.zeros(1, 0))
        with pytest.raises(ValueError):
            gen_objective([])


class TestSynthesize:
    @pytest.fixture
    def vocab(self):
        return Vocabulary.build(["a red circle", "a blue cross"], max_len=8)

    def test_shape_and_determinism(self, vocab):
        m = _model(K=5)
        a = synthesize("a red circle", 5, m, vocab, seed=4)
        b = synthesize("a red circle", 5, m, vocab, seed=4)
        assert a.shape == (5, 3, 16, 16)
        torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_prefix_stability(self, vocab):
        m = _model(K=5)
        torch.testing.assert_close(synthesize("a red circle", 3, m, vocab, seed=1),
                                   synthesize("a red circle", 5, m, vocab, seed=1)[:3], rtol=0, atol=0)

    def test_distinct_noise_gives_distinct_images(self, vocab):
        imgs = synthesize("a blue cross", 5, _model(K=5), vocab, seed=0).flatten(1)
        dist = torch.cdist(imgs, imgs)
        assert (dist[~torch.eye(5, dtype=bool)] > 0).all()

    def test_rejects_non_finite_model(self, vocab):
        m = _model()
        with torch.no_grad():
            m.G[0].conv.weight[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            synthesize("a red circle", 2, m, vocab)
