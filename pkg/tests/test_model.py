import numpy as np
import pytest

from probsa import autodiff as ad
from probsa.data import Bag, build_adjacency
from probsa.gradcheck import check
from probsa.model import (
    SIGMA2_FLOOR,
    AttentionPosterior,
    CheckpointError,
    MILModel,
    ModelVariant,
    load_checkpoint,
    sample_attention,
    sampled_probabilities,
    save_checkpoint,
    sigma2_from_raw,
)
from probsa.objective import bag_loss_tensor

SMALL = dict(P=5, D=8, D_f=4, layers=1, heads=2, d_qk=4, d_v=4)
ALL_VARIANTS = [(t, p) for t in ("ABMIL", "T-ABMIL") for p in ("DiracDelta", "DiagGaussian")]


def small_model(transform="ABMIL", posterior="DiagGaussian", seed=0, **kw):
    dims = {**SMALL, **kw}
    return MILModel(ModelVariant(transform, posterior, **dims), seed=seed)


def random_bag(rng, n, p=5, label=1):
    return Bag("r", rng.normal(size=(n, p)), np.arange(n)[:, None], label)


class TestVariant:
    def test_rejects_unknown_transform(self):
        with pytest.raises(ValueError):
            ModelVariant("TransMIL", "DiracDelta")

    def test_df_not_above_d(self):
        with pytest.raises(ValueError):
            ModelVariant(D=8, D_f=16)

    def test_heads_divide_dv(self):
        with pytest.raises(ValueError):
            ModelVariant(heads=3, d_v=64)

    def test_names(self):
        assert ModelVariant("ABMIL", "DiracDelta").name == "ABMIL+ProbSA[Sigma=0]"
        assert ModelVariant("T-ABMIL", "DiagGaussian").name == "T-ABMIL+ProbSA[Sigma=Diag]"


class TestEmbed:
    def test_abmil_row_equivariance(self):
        rng = np.random.default_rng(0)
        m = small_model()
        bag = random_bag(rng, 7)
        perm = rng.permutation(7)
        np.testing.assert_array_equal(m.embed(bag.permuted(perm)).data, m.embed(bag).data[perm])

    def test_zero_affine_gives_zero(self):
        m = small_model()
        m["embed.W"].data[:] = 0.0
        out = m.embed(np.random.default_rng(1).normal(size=(4, 5)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_wrong_feature_width(self):
        with pytest.raises(ad.ShapeError):
            small_model().embed(np.zeros((3, 4)))

    def test_gradient_through_embed(self):
        m = small_model()
        X = np.random.default_rng(2).normal(size=(3, 5))
        w = np.random.default_rng(3).normal(size=(3, 8))
        err = check(lambda: ad.tsum(m.embed(X) * w), [m["embed.W"], m["embed.b"]])
        assert err < 1e-4


class TestTransformer:
    def test_zero_layers_is_identity(self):
        m = small_model("T-ABMIL", layers=0)
        x = np.random.default_rng(4).normal(size=(6, 8))
        assert np.array_equal(m.transformer_encode(x).data, x)

    def test_single_instance(self):
        m = small_model("T-ABMIL")
        x = np.random.default_rng(5).normal(size=(1, 8))
        p = "enc0."
        ln1 = ad.layer_norm(x, m[p + "ln1.g"], m[p + "ln1.b"]).data
        # one key: softmax weight 1, so each head returns its value row
        z = x + (ln1 @ m[p + "Wv"].data) @ m[p + "Wo"].data
        ln2 = ad.layer_norm(z, m[p + "ln2.g"], m[p + "ln2.b"]).data
        hidden = np.tanh(ln2 @ m[p + "mlp.W1"].data + m[p + "mlp.b1"].data)
        y = z + hidden @ m[p + "mlp.W2"].data + m[p + "mlp.b2"].data
        np.testing.assert_allclose(m.transformer_encode(x).data, y, atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        m = small_model("T-ABMIL", layers=2)
        x = rng.normal(size=(9, 8))
        perm = rng.permutation(9)
        np.testing.assert_allclose(m.transformer_encode(x[perm]).data,
                                   m.transformer_encode(x).data[perm], atol=1e-10)


class TestAttentionHeads:
    def test_zero_w_gives_zero_mu(self):
        m = small_model()
        m["att.w"].data[:] = 0.0
        post = m.attention_heads(m.embed(np.random.default_rng(7).normal(size=(5, 5))))
        np.testing.assert_array_equal(post.mu.data, 0.0)

    def test_identical_rows(self):
        m = small_model()
        post = m.attention_heads(m.embed(np.tile(np.random.default_rng(8).normal(size=5), (4, 1))))
        assert np.all(post.mu.data == post.mu.data[0])
        assert np.all(post.sigma2.data == post.sigma2.data[0])

    def test_sigma2_floor(self):
        assert abs(sigma2_from_raw(-1e9).item() - 1e-6) < 1e-12
        assert SIGMA2_FLOOR == 1e-6

    def test_dirac_has_no_variance(self):
        m = small_model(posterior="DiracDelta")
        post = m.attention_heads(m.embed(np.zeros((3, 5))))
        assert post.sigma2 is None and len(post) == 3


class TestSampling:
    def test_zero_noise_returns_mu(self):
        post = AttentionPosterior(ad.Tensor([0.3, -1.0]), ad.Tensor([2.0, 0.5]))
        assert np.array_equal(sample_attention(post, np.zeros(2)).data, [0.3, -1.0])

    def test_floor_variance(self):
        post = AttentionPosterior(ad.Tensor([0.3, -1.0]), ad.Tensor([1e-6, 1e-6]))
        noise = np.array([2.5, -3.0])
        f = sample_attention(post, noise).data
        assert np.linalg.norm(f - post.mu.data) <= 1e-3 * np.linalg.norm(noise)

    def test_dirac_ignores_noise(self):
        post = AttentionPosterior(ad.Tensor([1.0, 2.0]))
        assert np.array_equal(sample_attention(post, [9.0, 9.0]).data, [1.0, 2.0])

    def test_monte_carlo_mean(self):
        mu = np.array([0.5, -2.0, 1.0])
        s2 = np.array([0.2, 1.5, 3.0])
        post = AttentionPosterior(ad.Tensor(mu), ad.Tensor(s2))
        rng = np.random.default_rng(9)
        noise = rng.standard_normal((100_000, 3))
        draws = mu + np.sqrt(s2) * noise
        for k in range(5):
            np.testing.assert_allclose(sample_attention(post, noise[k]).data, draws[k], atol=1e-15)
        assert np.all(np.abs(draws.mean(0) - mu) < 3 * np.sqrt(s2 / 100_000))

    def test_noise_shape(self):
        post = AttentionPosterior(ad.Tensor([0.0, 0.0]), ad.Tensor([1.0, 1.0]))
        with pytest.raises(ad.ShapeError):
            sample_attention(post, np.zeros(3))


class TestPoolAndClassify:
    def test_constant_logits_average_rows(self):
        m = small_model()
        H = ad.Tensor(np.random.default_rng(10).normal(size=(4, 8)))
        p = m.pool_and_classify(H, np.full(4, 0.7)).item()
        z = H.data.mean(0)
        expected = 1 / (1 + np.exp(-(z @ m["cls.w"].data + m["cls.b"].item())))
        assert p == pytest.approx(expected, rel=1e-12)

    def test_saturated_logits_pick_row(self):
        m = small_model()
        H = ad.Tensor(np.random.default_rng(11).normal(size=(2, 8)))
        z = (ad.softmax([800.0, 0.0]) @ H).data
        np.testing.assert_allclose(z, H.data[0], atol=1e-300)
        assert 0.0 < m.pool_and_classify(H, [800.0, 0.0]).item() < 1.0

    def test_zero_classifier_is_one_half(self):
        m = small_model()
        m["cls.w"].data[:] = 0.0
        H = ad.Tensor(np.random.default_rng(12).normal(size=(5, 8)))
        assert m.pool_and_classify(H, np.arange(5.0)).item() == 0.5

    def test_length_mismatch(self):
        m = small_model()
        with pytest.raises(ad.ShapeError):
            m.pool_and_classify(ad.Tensor(np.zeros((3, 8))), np.zeros(2))


class TestPredict:
    def test_dirac_ignores_s(self):
        m = small_model(posterior="DiracDelta")
        bag = random_bag(np.random.default_rng(13), 6)
        assert m.predict_bag(bag, S=1) == m.predict_bag(bag, S=50, seed=3)

    def test_floor_variance_near_deterministic(self):
        m = small_model()
        bag = random_bag(np.random.default_rng(14), 6)
        H, post = m.posterior(bag)
        s2 = np.full(6, SIGMA2_FLOOR)
        a = sampled_probabilities(m, H.data, post.mu.data, s2, 1, np.random.default_rng(0)).mean()
        b = sampled_probabilities(m, H.data, post.mu.data, s2, 64, np.random.default_rng(1)).mean()
        assert abs(a - b) < 1e-3

    def test_seeded(self):
        m = small_model()
        bag = random_bag(np.random.default_rng(15), 6)
        assert m.predict_bag(bag, 16, seed=4) == m.predict_bag(bag, 16, seed=4)

    def test_rejects_zero_samples(self):
        with pytest.raises(ValueError):
            small_model().predict_bag(random_bag(np.random.default_rng(0), 3), S=0)

    @pytest.mark.parametrize("transform,posterior", ALL_VARIANTS)
    def test_probability_strictly_inside_unit_interval(self, transform, posterior):
        m = small_model(transform, posterior)
        for k in range(5):
            p = m.predict_bag(random_bag(np.random.default_rng(k), 4 + k), S=8)
            assert 0.0 < p < 1.0

    @pytest.mark.parametrize("transform,posterior", ALL_VARIANTS)
    def test_permutation_invariance(self, transform, posterior):
        rng = np.random.default_rng(16)
        m = small_model(transform, posterior)
        bag = random_bag(rng, 8)
        perm = rng.permutation(8)
        with ad.no_grad():
            H, post = m.posterior(bag)
            Hp, postp = m.posterior(bag.permuted(perm))
            np.testing.assert_allclose(postp.mu.data, post.mu.data[perm], atol=1e-10)
            p = m.pool_and_classify(H, post.mu).item()
            pp = m.pool_and_classify(Hp, postp.mu).item()
        assert abs(p - pp) < 1e-10


class TestGradients:
    @pytest.mark.parametrize("transform,posterior", ALL_VARIANTS)
    def test_full_loss_all_parameters(self, transform, posterior):
        rng = np.random.default_rng(17)
        m = small_model(transform, posterior, seed=1)
        bag = random_bag(rng, 4)
        graph = build_adjacency(bag, "chain")
        noise = rng.standard_normal(4)
        params = list(m.params.values())

        def loss():
            return bag_loss_tensor(bag, graph, m, 1.0, noise)[0]

        assert check(loss, params) < 1e-4


class TestCheckpoint:
    @pytest.mark.parametrize("transform,posterior", ALL_VARIANTS)
    def test_round_trip_bit_exact(self, tmp_path, transform, posterior):
        m = small_model(transform, posterior, seed=5)
        save_checkpoint(tmp_path / "m.psac", m, {"epoch": 3})
        back, extra = load_checkpoint(tmp_path / "m.psac")
        assert back.variant == m.variant and extra == {"epoch": 3}
        for name, p in m.params.items():
            assert p.data.tobytes() == back[name].data.tobytes()
            assert p.shape == back[name].shape

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.psac").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.psac")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "m.psac", small_model())
        raw = (tmp_path / "m.psac").read_bytes()
        (tmp_path / "m.psac").write_bytes(raw[:-9])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.psac")
