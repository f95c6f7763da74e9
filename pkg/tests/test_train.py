import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snnqp.core import LayerSpec, NetworkSpec
from snnqp.train import (
    DivergenceError,
    SurrogateConfig,
    TrainingHooks,
    TrainSchedule,
    bptt_grad,
    lr_at,
    reset_factors,
    smooth_loss,
    surrogate_grad,
    train,
)


def small_conv_net(timesteps=6):
    return NetworkSpec((LayerSpec("conv2d", in_channels=2, out_channels=2, kernel=(3, 3)),
                        LayerSpec("lif", tau=0.8), LayerSpec("dense", in_features=18, out_features=4),
                        LayerSpec("lif", tau=0.7)), (2, 5, 5), timesteps, 4)


def fd_grads(net, w, batch, frozen=None, eps=1e-3):
    out = []
    for k, wk in enumerate(w):
        g = np.zeros_like(wk)
        for idx in np.ndindex(wk.shape):
            wp = [v.copy() for v in w]
            wp[k][idx] += eps
            lp = smooth_loss(net, wp, batch, frozen_reset=frozen)
            wp[k][idx] -= 2 * eps
            lm = smooth_loss(net, wp, batch, frozen_reset=frozen)
            g[idx] = (lp - lm) / (2 * eps)
        out.append(g)
    return out


def rel_err(a, b):
    a = np.concatenate([v.ravel() for v in a])
    b = np.concatenate([v.ravel() for v in b])
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestSurrogate:
    def test_peak(self):
        assert surrogate_grad(0.0, SurrogateConfig(2.0)) == pytest.approx(1.0)

    def test_tail(self):
        assert surrogate_grad(1e6) < 1e-9 and surrogate_grad(-1e6) < 1e-9

    def test_closed_form(self):
        assert surrogate_grad(1.0) == pytest.approx(2 / (2 * (1 + math.pi ** 2)), rel=1e-12)
        assert surrogate_grad(1.0) == pytest.approx(0.0920, abs=1e-4)

    def test_matches_numeric_derivative(self):
        xs = np.linspace(-2, 2, 11)
        h = 1e-6
        f = lambda x: np.arctan(math.pi * 1.5 * x / 2) / math.pi + 0.5
        np.testing.assert_allclose(surrogate_grad(xs, SurrogateConfig(1.5)), (f(xs + h) - f(xs - h)) / (2 * h),
                                   rtol=1e-6)

    def test_alpha_positive(self):
        with pytest.raises(ValueError):
            SurrogateConfig(0.0)


class TestSchedule:
    sched = TrainSchedule(epochs=1, peak_lr=0.1, warmup_fraction=0.1)

    def test_endpoints(self):
        assert lr_at(0, 100, self.sched) == 0.0
        assert lr_at(10, 100, self.sched) == pytest.approx(0.1)
        assert lr_at(99, 100, self.sched) <= 1e-9 * 0.1

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(100, 100, self.sched)

    @given(st.integers(2, 400), st.floats(0, 1))
    def test_shape(self, total, frac):
        s = TrainSchedule(peak_lr=1.0, warmup_fraction=frac)
        lrs = [lr_at(k, total, s) for k in range(total)]
        warm = int(frac * total)
        assert all(a <= b for a, b in zip(lrs[:warm], lrs[1:warm + 1]))
        assert all(a >= b - 1e-15 for a, b in zip(lrs[warm:], lrs[warm + 1:]))


class TestBptt:
    def test_zero_weights_zero_input(self):
        net = small_conv_net()
        w = [np.zeros(s) for s in net.weight_shapes()]
        x = np.zeros((2, 6, 2, 5, 5))
        _, grads = bptt_grad(net, w, (x, np.array([0, 1])))
        assert all(np.all(g == 0) for g in grads)

    def test_two_step_scalar_by_hand(self):
        tau, vth = 0.5, 1.0
        net = NetworkSpec((LayerSpec("dense", in_features=1, out_features=2), LayerSpec("lif", tau=tau, v_th=vth)),
                          (1,), 2, 2)
        w = np.array([[1.3], [0.4]])
        x = np.array([[[1.0], [1.0]]])
        loss, (g,) = bptt_grad(net, [w], (x, np.array([1])))
        expected = np.zeros(2)
        counts = np.zeros(2)
        dcounts = np.zeros(2)
        for j in range(2):
            u1 = w[j, 0]
            s1 = float(u1 >= vth)
            u2 = tau * u1 * (1 - s1) + w[j, 0]
            s2 = float(u2 >= vth)
            counts[j] = s1 + s2
            dcounts[j] = surrogate_grad(u1 - vth) + surrogate_grad(u2 - vth) * (tau * (1 - s1) + 1)
        p = np.exp(counts) / np.exp(counts).sum()
        expected = (p - np.array([0.0, 1.0])) * dcounts
        assert loss == pytest.approx(-math.log(p[1]))
        np.testing.assert_allclose(g[:, 0], expected, rtol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences_full_smooth(self, seed):
        net = small_conv_net()
        rng = np.random.default_rng(seed)
        w = net.init_weights(seed, gain=1.5)
        batch = ((rng.random((3, 6, 2, 5, 5)) < 0.4).astype(float), rng.integers(0, 4, 3))
        _, g = bptt_grad(net, w, batch, smooth=True, detach_reset=False)
        assert rel_err(g, fd_grads(net, w, batch)) <= 1e-3

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences_detached_reset(self, seed):
        net = small_conv_net()
        rng = np.random.default_rng(100 + seed)
        w = net.init_weights(seed, gain=1.5)
        batch = ((rng.random((3, 6, 2, 5, 5)) < 0.4).astype(float), rng.integers(0, 4, 3))
        frozen = reset_factors(net, w, batch)
        _, g = bptt_grad(net, w, batch, smooth=True, frozen_reset=frozen)
        assert rel_err(g, fd_grads(net, w, batch, frozen)) <= 1e-3


def separable_task(n=96, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    rates = np.where(y[:, None] == 0, [0.7] * 4 + [0.1] * 4, [0.1] * 4 + [0.7] * 4)
    x = (rng.random((n, 6, 8)) < rates[:, None, :]).astype(float)
    return x, y


def dense_net():
    return NetworkSpec((LayerSpec("dense", in_features=8, out_features=2), LayerSpec("lif", tau=0.8)), (8,), 6, 2)


class TestTrain:
    def test_learns_separable_task(self):
        net = dense_net()
        res = train(net, net.init_weights(0), separable_task(),
                    TrainSchedule(epochs=50, peak_lr=0.05, batch_size=16))
        assert res.trace[-1].accuracy >= 0.95

    def test_zero_lr_keeps_weights(self):
        net = dense_net()
        w0 = net.init_weights(1)
        res = train(net, w0, separable_task(), TrainSchedule(epochs=1, peak_lr=0.0))
        assert all(np.array_equal(a, b) for a, b in zip(w0, res.weights))

    def test_deterministic(self):
        net = dense_net()
        sched = TrainSchedule(epochs=3, peak_lr=0.05, batch_size=16, seed=4)
        a = train(net, net.init_weights(2), separable_task(), sched)
        b = train(net, net.init_weights(2), separable_task(), sched)
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
        assert a.trace == b.trace

    def test_identity_hooks_transparent(self):
        net = dense_net()
        sched = TrainSchedule(epochs=2, peak_lr=0.05, batch_size=16)
        a = train(net, net.init_weights(3), separable_task(), sched)
        b = train(net, net.init_weights(3), separable_task(), sched, hooks=TrainingHooks())
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))

    def test_divergence_reports_trace(self):
        class Blowup(TrainingHooks):
            def backward(self, grads, weights):
                return [np.full_like(g, np.inf) for g in grads]

        net = dense_net()
        with pytest.raises(DivergenceError) as info:
            train(net, net.init_weights(0), separable_task(), TrainSchedule(epochs=3, peak_lr=0.05), hooks=Blowup())
        assert "layer 0" in str(info.value) and info.value.trace == []

    def test_trace_csv(self, tmp_path):
        net = dense_net()
        res = train(net, net.init_weights(0), separable_task(), TrainSchedule(epochs=2, peak_lr=0.05))
        path = tmp_path / "trace.csv"
        res.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,loss,accuracy,lr" and len(lines) == 3
