import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from probsa import autodiff as ad
from probsa.data import AdjacencyGraph, Bag, build_adjacency
from probsa.model import MILModel, ModelVariant
from probsa.objective import (
    LambdaPolicy,
    LossBreakdown,
    accumulate_batch,
    bag_loss,
    bag_loss_tensor,
    imbalance_weight,
    lambda_at,
)

SMALL = dict(P=5, D=8, D_f=4, layers=1, heads=2, d_qk=4, d_v=4)


def model(posterior="DiracDelta", transform="ABMIL", seed=0):
    return MILModel(ModelVariant(transform, posterior, **SMALL), seed=seed)


def random_bag(rng, n, label=None):
    label = int(rng.integers(0, 2)) if label is None else label
    return Bag(f"r{n}", rng.normal(size=(n, 5)), np.arange(n)[:, None], label)


def sa_objective(m, bag, A, lam):
    """Attention-MIL loss with a Dirichlet smoothness penalty, written out in plain numpy."""
    X = bag.features
    H = np.maximum(X @ m["embed.W"].data + m["embed.b"].data, 0.0)
    f = np.tanh(H @ m["att.W"].data) @ m["att.w"].data
    a = np.exp(f - f.max())
    a /= a.sum()
    z = a @ H
    p = 1.0 / (1.0 + np.exp(-(z @ m["cls.w"].data + m["cls.b"].data)))
    y = bag.label
    nll = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    energy = 0.5 * np.sum(A * (f[:, None] - f[None, :]) ** 2)
    return float(nll + lam * energy)


class TestLambdaSchedule:
    def test_closed_form_ramp(self):
        pol = LambdaPolicy.cyclical(100, cycles=5, ramp=0.8)
        seq = [lambda_at(pol, s) for s in range(100)]
        assert seq[0] == 0.0 and seq[8] == 0.5 and seq[20] == 0.0
        assert seq[16:20] == [1.0] * 4
        expected = [min(1.0, (s % 20) / 16) for s in range(100)]
        assert seq == expected

    @pytest.mark.parametrize("value", [0.0, 0.1, 1.0])
    def test_constant(self, value):
        pol = LambdaPolicy.constant(value, 30)
        assert {lambda_at(pol, s) for s in range(30)} == {value}

    def test_zero_ramp_forces_one(self):
        pol = LambdaPolicy.cyclical(10, cycles=5, ramp=0.4)  # window 2, ramp floor(0.8) = 0
        assert [lambda_at(pol, s) for s in range(10)] == [1.0] * 10

    def test_out_of_range(self):
        pol = LambdaPolicy.cyclical(10)
        with pytest.raises(IndexError):
            lambda_at(pol, 10)
        with pytest.raises(IndexError):
            lambda_at(pol, -1)

    def test_unresolved_total(self):
        with pytest.raises(ValueError):
            lambda_at(LambdaPolicy.cyclical(), 0)

    def test_invalid_policies(self):
        with pytest.raises(ValueError):
            LambdaPolicy.constant(1.5)
        with pytest.raises(ValueError):
            LambdaPolicy.cyclical(3, cycles=5)
        with pytest.raises(ValueError):
            LambdaPolicy.cyclical(100, ramp=0.0)
        with pytest.raises(ValueError):
            LambdaPolicy("logistic")

    def test_partial_final_cycle_follows_modulo(self):
        pol = LambdaPolicy.cyclical(23, cycles=5, ramp=0.5)  # window 4, ramp 2
        assert [lambda_at(pol, s) for s in range(20, 23)] == [0.0, 0.5, 1.0]

    @given(st.integers(1, 500), st.integers(1, 10), st.floats(0.01, 1.0))
    def test_range_and_cycle_landmarks(self, total, cycles, ramp):
        if total // cycles < 1:
            return
        pol = LambdaPolicy.cyclical(total, cycles, ramp)
        window = total // cycles
        ramp_len = int(np.floor(ramp * window))
        for s in range(total):
            lam = lambda_at(pol, s)
            assert 0.0 <= lam <= 1.0
            if s % window == 0 and ramp_len > 0:
                assert lam == 0.0
            if ramp_len > 0 and s % window == ramp_len:
                assert lam == 1.0


class TestBagLoss:
    @pytest.mark.parametrize("label", [0, 1])
    def test_half_probability_gives_ln2(self, label):
        m = model()
        m["cls.w"].data[:] = 0.0
        bag = random_bag(np.random.default_rng(0), 5, label)
        out = bag_loss(bag, build_adjacency(bag), m, 0.0)
        assert out.ll_term == pytest.approx(np.log(2.0), abs=1e-15)

    def test_constant_mu_has_zero_kl(self):
        m = model()
        m["att.w"].data[:] = 0.0
        bag = random_bag(np.random.default_rng(1), 6)
        assert bag_loss(bag, build_adjacency(bag), m, 1.0).kl_term == 0.0

    def test_total_identity(self):
        rng = np.random.default_rng(2)
        m = model("DiagGaussian")
        bag = random_bag(rng, 7)
        out = bag_loss(bag, build_adjacency(bag), m, 0.37, rng.standard_normal(7))
        assert abs(out.total - (out.ll_term + 0.37 * out.kl_term)) < 1e-12
        assert out.lambda_used == 0.37

    def test_gaussian_needs_noise(self):
        bag = random_bag(np.random.default_rng(3), 4)
        with pytest.raises(ValueError):
            bag_loss(bag, build_adjacency(bag), model("DiagGaussian"), 1.0)

    def test_graph_size_mismatch(self):
        bag = random_bag(np.random.default_rng(3), 4)
        g = AdjacencyGraph(3, [0], [1], [1.0])
        with pytest.raises(ValueError):
            bag_loss(bag, g, model(), 1.0)

    def test_positive_weight_scales_only_likelihood(self):
        rng = np.random.default_rng(4)
        m = model()
        bag = random_bag(rng, 6, label=1)
        g = build_adjacency(bag)
        plain = bag_loss(bag, g, m, 1.0)
        weighted = bag_loss(bag, g, m, 1.0, pos_weight=3.0)
        assert weighted.ll_term == pytest.approx(3.0 * plain.ll_term, rel=1e-14)
        assert weighted.kl_term == plain.kl_term
        neg = random_bag(rng, 6, label=0)
        gn = build_adjacency(neg)
        assert bag_loss(neg, gn, m, 1.0, pos_weight=3.0) == bag_loss(neg, gn, m, 1.0)

    def test_dirac_matches_independent_sa_objective(self):
        rng = np.random.default_rng(5)
        for k in range(100):
            m = model(seed=k)
            bag = random_bag(rng, int(rng.integers(1, 12)))
            g = build_adjacency(bag)
            got = bag_loss(bag, g, m, 1.0).total
            assert abs(got - sa_objective(m, bag, g.dense(), 1.0)) < 1e-10

    def test_dirac_kl_nonnegative(self):
        rng = np.random.default_rng(6)
        for k in range(20):
            bag = random_bag(rng, 8)
            assert bag_loss(bag, build_adjacency(bag), model(seed=k), 1.0).kl_term >= -1e-10

    def test_lambda_zero_ignores_graph(self):
        rng = np.random.default_rng(7)
        m = model("DiagGaussian")
        bag = random_bag(rng, 6)
        noise = rng.standard_normal(6)
        g1 = build_adjacency(bag)
        g2 = AdjacencyGraph(6, [0, 2], [5, 3], [4.0, 0.1])
        m.zero_grad()
        t1, _ = bag_loss_tensor(bag, g1, m, 0.0, noise)
        grads1 = ad.grad(t1, list(m.params.values()))
        t2, _ = bag_loss_tensor(bag, g2, m, 0.0, noise)
        grads2 = ad.grad(t2, list(m.params.values()))
        assert float(t1.data) == float(t2.data)
        for a, b in zip(grads1, grads2):
            assert np.array_equal(a, b)


class TestAccumulate:
    def _grads(self, m):
        return {k: p.grad.copy() for k, p in m.params.items()}

    def test_single_bag_equals_bag_loss(self):
        rng = np.random.default_rng(8)
        m = model()
        bag = random_bag(rng, 5)
        g = build_adjacency(bag)
        m.zero_grad()
        assert accumulate_batch([bag], [g], m, 0.5) == bag_loss(bag, g, m, 0.5)

    def test_duplicate_doubles_gradient(self):
        rng = np.random.default_rng(9)
        m = model("DiagGaussian", "T-ABMIL")
        bag = random_bag(rng, 5)
        g = build_adjacency(bag)
        noise = rng.standard_normal(5)
        m.zero_grad()
        accumulate_batch([bag], [g], m, 1.0, [noise])
        once = self._grads(m)
        m.zero_grad()
        accumulate_batch([bag, bag], [g, g], m, 1.0, [noise, noise])
        for k, v in self._grads(m).items():
            assert np.array_equal(v, 2.0 * once[k])

    def test_sum_of_per_bag_gradients(self):
        rng = np.random.default_rng(10)
        m = model("DiagGaussian")
        bags = [random_bag(rng, n) for n in (3, 6, 9)]
        graphs = [build_adjacency(b) for b in bags]
        noises = [rng.standard_normal(b.n) for b in bags]
        total = {k: np.zeros_like(p.data) for k, p in m.params.items()}
        for b, g, e in zip(bags, graphs, noises):
            m.zero_grad()
            accumulate_batch([b], [g], m, 0.8, [e])
            for k, v in self._grads(m).items():
                total[k] += v
        m.zero_grad()
        accumulate_batch(bags, graphs, m, 0.8, noises)
        for k, v in self._grads(m).items():
            np.testing.assert_allclose(v, total[k], rtol=0, atol=1e-10)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            accumulate_batch([], [], model(), 1.0)

    def test_breakdown_sum(self):
        a = LossBreakdown(1.0, 0.5, 2.0, 0.25)
        b = LossBreakdown(2.0, 1.0, 4.0, 0.25)
        assert a + b == LossBreakdown(3.0, 1.5, 6.0, 0.25)


class TestImbalanceWeight:
    def test_ratio(self):
        rng = np.random.default_rng(11)
        bags = [random_bag(rng, 2, label=l) for l in (1, 0, 0, 0)]
        assert imbalance_weight(bags) == 3.0

    def test_single_class(self):
        rng = np.random.default_rng(12)
        assert imbalance_weight([random_bag(rng, 2, label=1)]) == 1.0
