"""Tests for plain and regularized activations against trivial cases and the
independent brute-force minimizers."""

import numpy as np
import pytest

from tvseg.activations import (RegActConfig, post_tv, reg_relu_iterative,
                               reg_softmax_iterative, reg_softmax_onestep,
                               relu, softmax)
from tvseg.grid import tv_value

from oracles import (nonneg_rof_minimizer, relu_by_projected_gradient,
                     simplex_tv_minimizer)


def _noisy_logit_field(rng, c=3, n=8, margin=2.0, sigma=1.0):
    """Piecewise-constant class logits plus gaussian logit noise."""
    labels = np.zeros((n, n), dtype=int)
    labels[:, n // 3:] = 1
    labels[n // 2:, 2 * n // 3:] = 2 % c
    o = np.full((c, n, n), -margin)
    for cls in range(c):
        o[cls][labels == cls] = margin
    return o + sigma * rng.normal(size=o.shape), labels


class TestSoftmax:
    def test_symmetric_pair(self):
        o = np.zeros((2, 1, 1))
        assert np.allclose(softmax(o), 0.5)

    def test_ln2_pair(self):
        o = np.array([[[np.log(2.0)]], [[0.0]]])
        assert np.allclose(softmax(o)[:, 0, 0], [2 / 3, 1 / 3])

    def test_overflow_safe(self):
        o = np.array([[[1000.0]], [[0.0]]])
        a = softmax(o)
        assert np.isfinite(a).all()
        assert abs(a[0, 0, 0] - 1.0) < 1e-12
        assert a[1, 0, 0] < 1e-12

    def test_simplex_sums(self):
        rng = np.random.default_rng(0)
        a = softmax(rng.normal(size=(4, 5, 5)) * 10)
        assert np.abs(a.sum(axis=0) - 1.0).max() < 1e-12


class TestRelu:
    def test_elementwise(self):
        o = np.array([[[-1.0, 0.0, 2.0]]])
        assert np.array_equal(relu(o), [[[0.0, 0.0, 2.0]]])

    def test_all_negative(self):
        assert np.all(relu(np.full((2, 3, 3), -4.0)) == 0.0)

    def test_matches_variational_oracle(self):
        rng = np.random.default_rng(1)
        o = rng.normal(size=(1, 2, 2)) * 3
        assert np.allclose(relu(o), relu_by_projected_gradient(o), atol=1e-10)


class TestRegSoftmaxIterative:
    def test_lambda_zero_is_softmax(self):
        rng = np.random.default_rng(2)
        o = rng.normal(size=(3, 4, 4))
        cfg = RegActConfig(lam=0.0, iterations=20, mode="iterative")
        a, eta, tape = reg_softmax_iterative(o, cfg)
        s = softmax(o)
        for a_k in tape.probs:
            assert np.array_equal(a_k, s)
        assert np.all(eta == 0.0)

    def test_spatially_constant_logits_unchanged(self):
        o = np.tile(np.array([1.0, -0.5, 0.2])[:, None, None], (1, 5, 5))
        cfg = RegActConfig(lam=2.0, iterations=50, mode="iterative")
        a, eta, _ = reg_softmax_iterative(o, cfg)
        assert np.allclose(a, softmax(o), atol=1e-15)
        assert np.all(eta == 0.0)

    def test_matches_bruteforce_oracle_2x2(self):
        rng = np.random.default_rng(3)
        for _ in range(4):
            o = rng.normal(size=(2, 2, 2)) * 1.5
            cfg = RegActConfig(lam=1.0, tau=0.125, iterations=500, mode="iterative")
            a, _, _ = reg_softmax_iterative(o, cfg)
            assert np.abs(a - simplex_tv_minimizer(o, 1.0)).max() < 1e-3

    def test_matches_bruteforce_oracle_1x3(self):
        rng = np.random.default_rng(4)
        for _ in range(3):
            o = rng.normal(size=(2, 1, 3))
            cfg = RegActConfig(lam=1.0, tau=0.125, iterations=800, mode="iterative")
            a, _, _ = reg_softmax_iterative(o, cfg)
            assert np.abs(a - simplex_tv_minimizer(o, 1.0)).max() < 1e-3

    def test_simplex_preserved_every_iteration(self):
        rng = np.random.default_rng(5)
        o = rng.normal(size=(3, 4, 4)) * 3
        cfg = RegActConfig(lam=1.5, iterations=40, mode="iterative")
        _, _, tape = reg_softmax_iterative(o, cfg)
        for a_k in tape.probs:
            assert np.abs(a_k.sum(axis=0) - 1.0).max() < 1e-12
            assert a_k.min() > 0.0

    def test_fixed_point_consistency(self):
        rng = np.random.default_rng(6)
        o = rng.normal(size=(2, 3, 3))
        cfg = RegActConfig(lam=0.8, iterations=3000, mode="iterative")
        a, eta, tape = reg_softmax_iterative(o, cfg)
        from tvseg.grid import div
        assert np.abs(a - softmax(o - cfg.lam * div(eta))).max() <= tape.residual + 1e-12

    def test_tv_never_increased_on_noisy_logits(self):
        rng = np.random.default_rng(7)
        violations = 0
        for _ in range(10):
            o, _ = _noisy_logit_field(rng)
            cfg = RegActConfig(lam=1.0, iterations=100, mode="iterative")
            a, _, _ = reg_softmax_iterative(o, cfg)
            if tv_value(a) > tv_value(softmax(o)):
                violations += 1
        assert violations == 0

    def test_rejects_wrong_mode(self):
        with pytest.raises(ValueError):
            reg_softmax_iterative(np.zeros((2, 2, 2)), RegActConfig(mode="one_step"))


class TestRegSoftmaxOneStep:
    def test_lambda_zero_is_softmax(self):
        rng = np.random.default_rng(8)
        o = rng.normal(size=(3, 4, 4))
        cfg = RegActConfig(lam=0.0, kappa=0.7, mode="one_step")
        a, _ = reg_softmax_onestep(o, cfg)
        assert np.array_equal(a, softmax(o))

    def test_spatially_constant_logits_unchanged(self):
        o = np.tile(np.array([0.4, -1.1])[:, None, None], (1, 3, 3))
        a, tape = reg_softmax_onestep(o, RegActConfig(lam=1.0, mode="one_step"))
        assert np.allclose(a, softmax(o), atol=1e-15)
        assert np.all(tape.xi == 0.0)

    def test_hand_value_1x2(self):
        # logits ch1 (2, 0) / ch2 (0, 0) on a 1x2 grid: one dual step pulls
        # the two pixels toward each other
        o = np.array([[[2.0, 0.0]], [[0.0, 0.0]]])
        cfg = RegActConfig(lam=1.0, kappa=0.25, mode="one_step")
        a, _ = reg_softmax_onestep(o, cfg)
        assert a[0, 0, 0] == pytest.approx(0.8593137, abs=1e-6)
        assert a[0, 0, 1] == pytest.approx(0.5474564, abs=1e-6)
        s = softmax(o)
        assert s[0, 0, 0] == pytest.approx(0.8807971, abs=1e-6)
        assert s[0, 0, 1] == pytest.approx(0.5)

    def test_rejects_wrong_mode(self):
        with pytest.raises(ValueError):
            reg_softmax_onestep(np.zeros((2, 2, 2)), RegActConfig(mode="iterative"))


class TestRegReluIterative:
    def test_lambda_zero_is_relu(self):
        rng = np.random.default_rng(9)
        o = rng.normal(size=(2, 4, 4))
        cfg = RegActConfig(lam=0.0, iterations=10, mode="iterative")
        a, eta = reg_relu_iterative(o, cfg)
        assert np.array_equal(a, relu(o))
        assert np.all(eta == 0.0)

    def test_constant_nonnegative_unchanged(self):
        o = np.full((1, 4, 4), 0.9)
        cfg = RegActConfig(lam=1.0, iterations=30, mode="iterative")
        a, _ = reg_relu_iterative(o, cfg)
        assert np.allclose(a, o, atol=1e-15)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(10)
        for shape in [(1, 2, 2), (1, 1, 3), (2, 2, 2)]:
            o = rng.normal(size=shape) * 2
            cfg = RegActConfig(lam=0.5, tau=0.125, iterations=500, mode="iterative")
            a, _ = reg_relu_iterative(o, cfg)
            assert np.abs(a - nonneg_rof_minimizer(o, 0.5)).max() < 1e-3


class TestPostTv:
    def test_lambda_zero_is_softmax(self):
        rng = np.random.default_rng(11)
        o = rng.normal(size=(3, 4, 4))
        assert np.array_equal(post_tv(o, 0.0, 10), softmax(o))

    def test_isolated_flip_removed(self):
        # piecewise-constant logits, one interior pixel flipped to the wrong
        # class: 100 TV iterations restore its region's argmax
        n = 8
        o = np.full((2, n, n), -2.0)
        o[0, :, : n // 2] = 2.0
        o[1, :, n // 2:] = 2.0
        o[:, 2, 1] = [-2.0, 2.0]  # flip one left-region pixel to class 1
        plain = np.argmax(softmax(o), axis=0)
        assert plain[2, 1] == 1
        smoothed = np.argmax(post_tv(o, 1.0, 100), axis=0)
        assert smoothed[2, 1] == 0
        # everything else keeps its label
        expected = np.zeros((n, n), dtype=int)
        expected[:, n // 2:] = 1
        assert np.array_equal(smoothed, expected)

    def test_re_not_increased_on_noisy_logit_corpus(self):
        from tvseg.metrics import regularization_effect
        rng = np.random.default_rng(12)
        for _ in range(20):
            o, _ = _noisy_logit_field(rng, sigma=1.5)
            plain_lab = np.argmax(softmax(o), axis=0)
            tv_lab = np.argmax(post_tv(o, 1.0, 100), axis=0)
            assert (regularization_effect(tv_lab)
                    <= regularization_effect(plain_lab) + 1e-12)


class TestRegActConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            RegActConfig(lam=-0.1)
        with pytest.raises(ValueError):
            RegActConfig(kappa=0.0)
        with pytest.raises(ValueError):
            RegActConfig(tau=0.2)
        with pytest.raises(ValueError):
            RegActConfig(iterations=0)
        with pytest.raises(ValueError):
            RegActConfig(mode="bogus")
