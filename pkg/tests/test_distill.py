import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eakd import distill as dl
from eakd import tensor as tn
from eakd.distill import DistillConfig, EntropyPair, SampleWeights
from eakd.errors import ConfigError, ContractError, DimensionError, InputError
from eakd.tensor import Graph, Tensor, backward

from conftest import central_diff, rel_err

LN100 = 4.605170185988091


def pair(ht, hs, c):
    return EntropyPair(np.atleast_1d(np.asarray(ht, float)), np.atleast_1d(np.asarray(hs, float)), c)


def mp_softmax(z, t):
    zs = [mpmath.mpf(float(v)) / t for v in z]
    m = max(zs)
    e = [mpmath.exp(v - m) for v in zs]
    s = sum(e)
    return [v / s for v in e]


def mp_kl(p, q):
    return sum(pi * mpmath.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


class TestConfig:
    def test_defaults(self):
        cfg = DistillConfig(100)
        assert (cfg.distill_temperature, cfg.entropy_temperature, cfg.dkd_beta) == (4.0, 3.0, 8.0)
        assert cfg.entropy_bound == pytest.approx(LN100, abs=1e-15)

    @pytest.mark.parametrize("kwargs", [
        {"class_count": 1}, {"class_count": 10, "distill_temperature": 0},
        {"class_count": 10, "entropy_temperature": -1}, {"class_count": 10, "kd_weight": -0.1},
        {"class_count": 10, "weighting_mode": "bogus"},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            DistillConfig(**kwargs)


class TestEntropy:
    def test_uniform(self):
        for t in (0.5, 1.0, 3.0):
            assert dl.entropy(Tensor(np.zeros((1, 4))), t)[0] == pytest.approx(1.3862943611198906, abs=1e-14)

    def test_near_one_hot(self):
        assert dl.entropy(Tensor([[50.0, 0, 0, 0]]), 1.0)[0] < 1e-18

    def test_two_class(self):
        h = dl.entropy(Tensor([[math.log(0.7), math.log(0.3)]]), 1.0)[0]
        assert h == pytest.approx(0.6108643020548935, abs=1e-14)

    def test_non_finite(self):
        with pytest.raises(InputError):
            dl.entropy(Tensor([[np.nan, 0.0]]), 1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 50), st.floats(0.1, 10), st.integers(0, 2**32 - 1))
    def test_bounds(self, c, t, seed):
        z = np.random.default_rng(seed).normal(scale=20, size=(8, c))
        h = dl.entropy(Tensor(z), t)
        assert np.all(h >= 0) and np.all(h <= math.log(c))


class TestWeights:
    def test_base(self):
        for h in (LN100, 0.0, 2.0):
            assert dl.weight_base(pair(h, 1.0, 100)).values[0] == h

    def test_interact(self):
        assert dl.weight_interact(pair(LN100, LN100, 100)).values[0] == pytest.approx(LN100, abs=1e-15)
        assert dl.weight_interact(pair(2.0, 0.0, 100)).values[0] == 0.0
        assert dl.weight_interact(pair(2.0, 1.0, 100)).values[0] == pytest.approx(0.4342944819032518, abs=1e-15)

    def test_ea(self):
        assert dl.weight_ea(pair(2.0, 1.0, 100)).values[0] == pytest.approx(1.2171472409516259, abs=1e-15)

    @pytest.mark.parametrize("c", [2, 10, 100])
    def test_ea_limits(self, c):
        ub = math.log(c)
        assert dl.weight_ea(pair(ub, ub, c)).values[0] == pytest.approx(ub, abs=1e-9)
        assert dl.weight_ea(pair(ub, 0.0, c)).values[0] == pytest.approx(ub / 2, abs=1e-9)
        for hs in (0.0, ub / 3, ub):
            assert dl.weight_ea(pair(0.0, hs, c)).values[0] == pytest.approx(0.0, abs=1e-9)

    def test_inverted(self):
        ub = LN100
        assert dl.weight_inverted(SampleWeights(np.array([0.0]), "base"), ub).values[0] == ub
        assert dl.weight_inverted(SampleWeights(np.array([ub]), "base"), ub).values[0] == 0.0
        assert dl.weight_inverted(SampleWeights(np.array([2.0]), "base"), ub).values[0] == pytest.approx(
            2.6051701859880914, abs=1e-15)
        with pytest.raises(ContractError):
            dl.weight_inverted(SampleWeights(np.array([ub + 0.1]), "base"), ub)

    def test_averaged_equals_factored(self):
        rng = np.random.default_rng(0)
        c = rng.integers(2, 1001, size=100_000)
        ub = np.log(c)
        ht, hs = rng.uniform(0, 1, size=c.size) * ub, rng.uniform(0, 1, size=c.size) * ub
        h = EntropyPair(ht, hs, 2)
        # per-sample bounds: build directly from the formulas with vector H_ub
        averaged = (ht + ht * hs / ub) / 2
        factored = 0.5 * ht * (1 + hs / ub)
        np.testing.assert_allclose(averaged, factored, rtol=0, atol=1e-12)
        assert np.allclose(dl.weight_ea(h).values, dl.weight_ea_factored(h), rtol=0, atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 1000), st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 0.5))
    def test_monotone(self, c, a, b, d):
        ub = math.log(c)
        ht, hs = a * ub * 0.5 + 1e-3, b * ub * 0.5 + 1e-3
        base = dl.weight_ea(pair(ht, hs, c)).values[0]
        assert dl.weight_ea(pair(ht + d * ub / 2, hs, c)).values[0] > base
        assert dl.weight_ea(pair(ht, hs + d * ub / 2, c)).values[0] > base

    @pytest.mark.parametrize("mode", dl.WEIGHTING_MODES)
    def test_mode_bounds(self, mode):
        rng = np.random.default_rng(3)
        c = 20
        t, s = rng.normal(scale=5, size=(64, c)), rng.normal(scale=5, size=(64, c))
        w = dl.sample_weights(mode, Tensor(t), Tensor(s), 3.0).values
        assert np.all(w >= 0) and np.all(w <= math.log(c))


class TestKdLoss:
    def test_identical_logits(self, rng):
        z = rng.normal(size=(5, 7))
        np.testing.assert_allclose(dl.kd_loss(Tensor(z), Tensor(z), 4.0).data, 0.0, atol=1e-12)

    def test_one_hot_teacher_uniform_student(self):
        t = np.full((1, 100), -1e4)
        t[0, 3] = 0.0
        loss = dl.kd_loss(Tensor(t), Tensor(np.zeros((1, 100))), 1.0).data[0]
        assert loss == pytest.approx(LN100, abs=1e-9)

    def test_uniform_teacher_uniform_student(self):
        assert abs(dl.kd_loss(Tensor(np.zeros((1, 100))), Tensor(np.zeros((1, 100))), 1.0).data[0]) <= 1e-12

    def test_matches_mpmath(self, rng):
        t, s = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        got = dl.kd_loss(Tensor(t), Tensor(s), 2.5).data
        for n in range(4):
            ref = mp_kl(mp_softmax(t[n], 2.5), mp_softmax(s[n], 2.5)) * 2.5**2
            assert got[n] == pytest.approx(float(ref), abs=1e-12)

    def test_shift_invariance(self, rng):
        t, s = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        base = dl.kd_loss(Tensor(t), Tensor(s), 4.0).data
        shifted = dl.kd_loss(Tensor(t + rng.normal(size=(4, 1)) * 50), Tensor(s - 30.0), 4.0).data
        np.testing.assert_allclose(shifted, base, rtol=0, atol=1e-11)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dl.kd_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), 4.0)

    def test_teacher_gets_no_gradient(self, rng):
        t = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        s = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with Graph() as g:
            loss = tn.mean_all(dl.kd_loss(t, s, 4.0))
        backward(g, loss)
        assert t.grad is None
        assert s.grad is not None and np.any(s.grad != 0)


def brute_dkd(t, s, target, alpha, beta, temp):
    """Builds the binary and non-target distributions explicitly, in mpmath."""
    out = []
    for n in range(len(target)):
        pt, ps = mp_softmax(t[n], temp), mp_softmax(s[n], temp)
        k = int(target[n])
        bt = [pt[k], 1 - pt[k]]
        bs = [ps[k], 1 - ps[k]]
        others = [i for i in range(len(pt)) if i != k]
        qt = [pt[i] / (1 - pt[k]) for i in others]
        qs = [ps[i] / (1 - ps[k]) for i in others]
        out.append(float((alpha * mp_kl(bt, bs) + beta * mp_kl(qt, qs)) * temp**2))
    return np.array(out)


class TestDkdLoss:
    def test_identical(self, rng):
        z = rng.normal(size=(4, 5))
        np.testing.assert_allclose(dl.dkd_loss(Tensor(z), Tensor(z), np.array([0, 1, 2, 3])).data, 0, atol=1e-12)

    @pytest.mark.parametrize("c", [10, 100])
    def test_beta_zero_binary_term(self, c):
        t = np.full((1, c), -1e4)
        t[0, 0] = 0.0
        loss = dl.dkd_loss(Tensor(t), Tensor(np.zeros((1, c))), np.array([0]), alpha=1.0, beta=0.0,
                           temperature=1.0).data[0]
        assert loss == pytest.approx(math.log(c), abs=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        r = np.random.default_rng(seed)
        t, s = r.normal(scale=2, size=(6, 5)), r.normal(scale=2, size=(6, 5))
        target = r.integers(0, 5, size=6)
        got = dl.dkd_loss(Tensor(t), Tensor(s), target, alpha=0.7, beta=3.0, temperature=2.0).data
        np.testing.assert_allclose(got, brute_dkd(t, s, target, 0.7, 3.0, 2.0), rtol=1e-10, atol=1e-12)

    def test_two_classes(self):
        t, s = np.array([[2.0, -1.0]]), np.array([[0.5, 0.1]])
        got = dl.dkd_loss(Tensor(t), Tensor(s), np.array([1]), 1.0, 8.0, 1.0).data
        np.testing.assert_allclose(got, brute_dkd(t, s, [1], 1.0, 8.0, 1.0), atol=1e-12)

    def test_alpha_equals_beta_bounds_kd(self, rng):
        # KL chain rule: KD = TCKD + (1 - p_T,target) * NCKD <= TCKD + NCKD
        t, s = rng.normal(size=(8, 6)), rng.normal(size=(8, 6))
        target = rng.integers(0, 6, size=8)
        dkd = dl.dkd_loss(Tensor(t), Tensor(s), target, 1.0, 1.0, 3.0).data
        kd = dl.kd_loss(Tensor(t), Tensor(s), 3.0).data
        tckd, nckd = dl.tckd_nckd(Tensor(t), Tensor(s), target, 3.0)
        pt = np.exp(tn.log_softmax(Tensor(t), 3.0).data)[np.arange(8), target]
        np.testing.assert_allclose(kd, (tckd.data + (1 - pt) * nckd.data) * 9.0, rtol=1e-10)
        assert np.all(dkd >= kd - 1e-12)

    def test_target_out_of_range(self):
        with pytest.raises(InputError):
            dl.dkd_loss(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))), np.array([3]))


class TestReweightedLoss:
    def test_identity_weights(self, rng):
        per = Tensor(rng.uniform(size=5))
        assert dl.reweighted_loss(per, np.ones(5), "sum").item() == pytest.approx(per.data.sum(), abs=1e-15)

    def test_hand_sum(self):
        assert dl.reweighted_loss(Tensor([1.0, 2.0]), np.array([0.5, 2.0]), "sum").item() == 4.5

    def test_zero_weights_zero_gradient(self, rng):
        s = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with Graph() as g:
            loss = dl.reweighted_loss(dl.kd_loss(Tensor(rng.normal(size=(3, 4))), s, 4.0), np.zeros(3))
        backward(g, loss)
        assert loss.item() == 0.0
        np.testing.assert_array_equal(s.grad, 0.0)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            dl.reweighted_loss(Tensor([1.0, 2.0]), np.ones(3))

    def test_normalize(self):
        w = np.array([1.0, 3.0])
        got = dl.reweighted_loss(Tensor([1.0, 1.0]), w, "mean", normalize=True).item()
        assert got == pytest.approx(1.0)

    @pytest.mark.parametrize("kind", ["kd", "dkd"])
    def test_gradient_is_weight_times_unweighted(self, kind, rng):
        c, n = 5, 4
        t = rng.normal(size=(n, c))
        z0 = rng.normal(size=(n, c))
        y = rng.integers(0, c, size=n)
        cfg = DistillConfig(c)
        w = dl.sample_weights("ea", Tensor(t), Tensor(z0), 3.0).values

        def per_sample(z):
            return dl.per_sample_distill_loss(cfg, kind, Tensor(t), z, y)

        s = Tensor(z0.copy(), requires_grad=True)
        with Graph() as g:
            loss = dl.reweighted_loss(per_sample(s), w, "sum")
        backward(g, loss)
        for i in range(n):
            probe = Tensor(z0.copy())
            numeric = central_diff(lambda: per_sample(probe).data[i], probe.data)
            assert rel_err(s.grad[i], w[i] * numeric[i]) <= 1e-4
            assert np.all(np.abs(numeric[np.arange(n) != i]) < 1e-8)


class TestCrossEntropy:
    def test_confident(self):
        assert dl.cross_entropy(Tensor([[0.0, 1e4, 0.0]]), np.array([1])).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self):
        assert dl.cross_entropy(Tensor(np.zeros((3, 10))), np.array([0, 4, 9])).item() == pytest.approx(
            2.302585092994046, abs=1e-14)

    def test_hand_value(self):
        assert dl.cross_entropy(Tensor([[1.0, 2.0, 3.0]]), np.array([2])).item() == pytest.approx(
            0.40760596444438034, abs=1e-14)

    def test_bad_target(self):
        with pytest.raises(InputError):
            dl.cross_entropy(Tensor(np.zeros((1, 3))), np.array([5]))
