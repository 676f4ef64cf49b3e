"""Tests for the miniature segmentation network and its training loop."""

import numpy as np
import pytest

from tvseg.activations import RegActConfig
from tvseg.backward import finite_diff_check
from tvseg.net import (MiniUnet, NetSpec, backward, build, cross_entropy,
                       forward, load_checkpoint, predict, save_checkpoint,
                       sgd_momentum_step, train)


def tiny_spec(activation="plain", lam=0.5):
    return NetSpec(in_channels=2, num_classes=3, widths=(4, 6),
                   activation=activation,
                   reg=RegActConfig(lam=lam, kappa=0.25, mode="one_step"))


def tiny_dataset(rng, n=4, size=16, channels=2, classes=3):
    images = rng.uniform(size=(n, channels, size, size))
    labels = rng.integers(0, classes, size=(n, size, size))
    return [(images[i], labels[i]) for i in range(n)]


class TestBuild:
    def test_same_seed_is_bit_identical(self):
        a = build(tiny_spec(), seed=5)
        b = build(tiny_spec(), seed=5)
        for wa, wb in zip(a.params.weights, b.params.weights):
            assert np.array_equal(wa, wb)

    def test_output_shape(self):
        spec = NetSpec(in_channels=3, num_classes=3, widths=(16, 32))
        net = build(spec, seed=0)
        logits, probs, _ = forward(net, np.zeros((3, 64, 64)))
        assert logits.shape == (3, 64, 64)
        assert probs.shape == (3, 64, 64)

    def test_zero_level_spec_is_single_1x1_conv(self):
        spec = NetSpec(in_channels=3, num_classes=2, widths=())
        net = build(spec, seed=0)
        assert len(net.params.weights) == 1
        assert net.params.weights[0].shape == (2, 3, 1, 1)
        rng = np.random.default_rng(0)
        data = tiny_dataset(rng, n=2, size=8, channels=3, classes=2)
        log = train(net, data, epochs=3, batch_size=2, seed=0)
        assert len(log.losses) == 3

    def test_bad_spec_rejected(self):
        with pytest.raises(ValueError):
            NetSpec(num_classes=1)
        with pytest.raises(ValueError):
            NetSpec(widths=(8, 0))
        with pytest.raises(ValueError):
            NetSpec(activation="other")

    def test_indivisible_input_rejected(self):
        net = build(tiny_spec(), seed=0)
        with pytest.raises(ValueError):
            forward(net, np.zeros((2, 10, 10)))  # 10 not divisible by 4
        with pytest.raises(ValueError):
            forward(net, np.zeros((3, 16, 16)))  # wrong channel count


class TestForward:
    def test_zero_parameters_give_uniform_probs(self):
        net = build(tiny_spec(), seed=0)
        for w in net.params.weights:
            w[:] = 0.0
        _, probs, _ = forward(net, np.random.default_rng(0).uniform(size=(2, 8, 8)))
        assert np.abs(probs - 1.0 / 3.0).max() == 0.0

    def test_probs_are_valid_simplex_for_random_builds(self):
        rng = np.random.default_rng(1)
        for seed in range(50):
            net = build(tiny_spec(), seed=seed)
            _, probs, _ = forward(net, rng.uniform(size=(2, 8, 8)))
            assert np.abs(probs.sum(axis=0) - 1.0).max() < 1e-12
            assert probs.min() > 0.0

    def test_regularized_lambda_zero_equals_plain(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(size=(2, 8, 8))
        plain = build(tiny_spec("plain"), seed=3)
        reg = build(tiny_spec("regularized", lam=0.0), seed=3)
        _, p1, _ = forward(plain, x, train=True)
        _, p2, _ = forward(reg, x, train=True)
        assert np.array_equal(p1, p2)


class TestCrossEntropy:
    def test_perfect_prediction_zero_loss(self):
        probs = np.zeros((2, 2, 2))
        target = np.array([[0, 1], [1, 0]])
        probs[target, np.arange(2)[:, None], np.arange(2)[None, :]] = 1.0
        probs[probs == 0.0] = 1e-30  # keep off-target entries positive
        loss, _ = cross_entropy(probs, target)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_uniform_two_class_is_ln2(self):
        probs = np.full((2, 3, 3), 0.5)
        target = np.zeros((3, 3), dtype=int)
        loss, _ = cross_entropy(probs, target)
        assert loss == pytest.approx(np.log(2.0))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        raw = rng.uniform(0.1, 1.0, size=(3, 4, 4))
        probs = raw / raw.sum(axis=0, keepdims=True)
        target = rng.integers(0, 3, size=(4, 4))
        _, d = cross_entropy(probs, target)
        rep = finite_diff_check(lambda a: cross_entropy(a, target)[0],
                                probs, d, epsilon=1e-6, tolerance=1e-8)
        assert rep.passed, rep

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            cross_entropy(np.full((2, 4, 4), 0.5), np.zeros((3, 3), dtype=int))


class TestBackward:
    def test_full_network_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        for act in ("plain", "regularized"):
            net = build(tiny_spec(act, lam=0.8), seed=5)
            xs = rng.uniform(size=(2, 2, 16, 16))
            ys = rng.integers(0, 3, size=(2, 16, 16))
            _, probs, tape = forward(net, xs, train=True)
            _, d_probs = cross_entropy(probs, ys)
            grads_w, _, _ = backward(net, tape, d_probs)
            for li in (0, 2, 5):
                w = net.params.weights[li]

                def loss_with(wflat, li=li, w=w):
                    saved = w.copy()
                    w[:] = wflat.reshape(w.shape)
                    _, p, _ = forward(net, xs, train=True)
                    value, _ = cross_entropy(p, ys)
                    w[:] = saved
                    return value

                rep = finite_diff_check(loss_with, w.reshape(1, 1, -1),
                                        grads_w[li].reshape(1, 1, -1),
                                        epsilon=1e-5, tolerance=1e-5,
                                        max_probes=8)
                assert rep.passed, (act, li, rep)

    def test_zero_upstream_gives_zero_grads(self):
        net = build(tiny_spec(), seed=6)
        x = np.random.default_rng(5).uniform(size=(2, 8, 8))
        _, probs, tape = forward(net, x)
        grads_w, grads_b, _ = backward(net, tape, np.zeros_like(probs))
        assert all(np.all(g == 0.0) for g in grads_w)
        assert all(np.all(g == 0.0) for g in grads_b)

    def test_lambda_zero_matches_plain_gradients_bitwise(self):
        rng = np.random.default_rng(6)
        xs = rng.uniform(size=(2, 2, 8, 8))
        ys = rng.integers(0, 3, size=(2, 8, 8))
        plain = build(tiny_spec("plain"), seed=7)
        reg = build(tiny_spec("regularized", lam=0.0), seed=7)
        _, p1, t1 = forward(plain, xs, train=True)
        _, p2, t2 = forward(reg, xs, train=True)
        _, d1 = cross_entropy(p1, ys)
        _, d2 = cross_entropy(p2, ys)
        gw1, gb1, lg1 = backward(plain, t1, d1)
        gw2, gb2, lg2 = backward(reg, t2, d2)
        assert lg1 is None and lg2 is not None
        for a, b in zip(gw1 + gb1, gw2 + gb2):
            assert np.array_equal(a, b)

    def test_stale_tape_rejected(self):
        net = build(tiny_spec(), seed=8)
        x = np.random.default_rng(7).uniform(size=(2, 8, 8))
        _, probs, tape = forward(net, x)
        zeros_w = [np.zeros_like(w) for w in net.params.weights]
        zeros_b = [np.zeros_like(b) for b in net.params.biases]
        sgd_momentum_step(net, zeros_w, zeros_b)
        with pytest.raises(RuntimeError):
            backward(net, tape, np.zeros_like(probs))


class TestSgdMomentum:
    def test_zero_gradients_fresh_state_keeps_params(self):
        net = build(tiny_spec(), seed=9)
        before = [w.copy() for w in net.params.weights]
        zeros_w = [np.zeros_like(w) for w in net.params.weights]
        zeros_b = [np.zeros_like(b) for b in net.params.biases]
        sgd_momentum_step(net, zeros_w, zeros_b)
        for a, b in zip(before, net.params.weights):
            assert np.array_equal(a, b)

    def test_momentum_decays_by_mu_on_zero_gradient(self):
        net = build(tiny_spec(), seed=9)
        net.params.vel_w[0][:] = 1.0
        zeros_w = [np.zeros_like(w) for w in net.params.weights]
        zeros_b = [np.zeros_like(b) for b in net.params.biases]
        sgd_momentum_step(net, zeros_w, zeros_b)
        assert np.all(net.params.vel_w[0] == 0.9)

    def test_two_step_hand_computation(self):
        spec = NetSpec(in_channels=1, num_classes=2, widths=())
        net = build(spec, seed=0)
        net.params.lr = 0.1
        net.params.weights[0][:] = 0.0
        ones_w = [np.ones_like(w) for w in net.params.weights]
        zeros_b = [np.zeros_like(b) for b in net.params.biases]
        sgd_momentum_step(net, ones_w, zeros_b)
        theta1 = net.params.weights[0][0, 0, 0, 0]
        assert theta1 == pytest.approx(-0.1)
        sgd_momentum_step(net, ones_w, zeros_b)
        theta2 = net.params.weights[0][0, 0, 0, 0]
        assert theta2 - theta1 == pytest.approx(-0.19)

    def test_lambda_updated_and_clamped_in_same_call(self):
        net = build(tiny_spec("regularized", lam=0.05), seed=10)
        zeros_w = [np.zeros_like(w) for w in net.params.weights]
        zeros_b = [np.zeros_like(b) for b in net.params.biases]
        sgd_momentum_step(net, zeros_w, zeros_b, lam_grad=1.0, tau_lambda=0.1)
        assert net.lam == 0.0


class TestTrain:
    def test_same_seed_identical_log(self):
        rng = np.random.default_rng(8)
        data = tiny_dataset(rng)
        log1 = train(build(tiny_spec(), seed=11), data, epochs=3,
                     batch_size=2, seed=13)
        log2 = train(build(tiny_spec(), seed=11), data, epochs=3,
                     batch_size=2, seed=13)
        assert log1.losses == log2.losses
        assert log1.lambdas == log2.lambdas

    def test_single_image_overfit(self):
        # a single easy image: loss must collapse well below 10% of start
        rng = np.random.default_rng(9)
        image = rng.uniform(size=(2, 8, 8))
        label = (image[0] > 0.5).astype(int)
        net = build(NetSpec(in_channels=2, num_classes=2, widths=(4,)), seed=12)
        net.params.lr = 0.05
        log = train(net, [(image, label)], epochs=200, batch_size=1, seed=0)
        assert log.losses[-1] < 0.1 * log.losses[0]

    def test_lambda_trajectory_nonnegative(self):
        rng = np.random.default_rng(10)
        data = tiny_dataset(rng)
        net = build(tiny_spec("regularized", lam=0.02), seed=13)
        log = train(net, data, epochs=4, batch_size=2, seed=0, tau_lambda=5.0)
        assert all(lam >= 0.0 for lam in log.lambdas)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train(build(tiny_spec(), seed=0), [], epochs=1, batch_size=1, seed=0)

    def test_trainlog_csv_round_shape(self):
        rng = np.random.default_rng(11)
        data = tiny_dataset(rng, n=2)
        net = build(tiny_spec(), seed=14)
        log = train(net, data, epochs=2, batch_size=2, seed=0)
        lines = log.to_csv().strip().split("\n")
        assert lines[0] == "iteration,loss,lambda"
        assert len(lines) == 1 + log.iterations


class TestPredict:
    def test_plain_mode_is_argmax_of_softmax(self):
        net = build(tiny_spec(), seed=15)
        x = np.random.default_rng(12).uniform(size=(2, 8, 8))
        probs, labels = predict(net, x)
        assert np.array_equal(labels, np.argmax(probs, axis=0))

    def test_regularized_lambda_zero_identical_to_plain(self):
        x = np.random.default_rng(13).uniform(size=(2, 8, 8))
        plain = build(tiny_spec("plain"), seed=16)
        reg = build(tiny_spec("regularized", lam=0.0), seed=16)
        p1, l1 = predict(plain, x)
        p2, l2 = predict(reg, x, test_mode_iterations=50)
        assert np.array_equal(p1, p2)
        assert np.array_equal(l1, l2)

    def test_argmax_tie_breaks_to_lowest_class(self):
        assert np.argmax(np.array([[0.5], [0.5]]), axis=0)[0] == 0


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        net = build(tiny_spec("regularized", lam=0.37), seed=17)
        net.lam = 0.21  # trained-away value must survive the round trip
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        loaded = load_checkpoint(path)
        assert loaded.spec.widths == net.spec.widths
        assert loaded.spec.activation == "regularized"
        assert loaded.lam == 0.21
        for a, b in zip(net.params.weights, loaded.params.weights):
            assert np.array_equal(a, b)
        for a, b in zip(net.params.biases, loaded.params.biases):
            assert np.array_equal(a, b)

    def test_same_seed_same_bytes(self, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(build(tiny_spec(), seed=18), p1)
        save_checkpoint(build(tiny_spec(), seed=18), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\0" * 64)
        with pytest.raises(ValueError):
            load_checkpoint(path)
