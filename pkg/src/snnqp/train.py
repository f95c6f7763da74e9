"""Backpropagation through time with arc-tangent surrogate gradients.

The forward pass is stored on a tape so the backward pass can run in
reverse time. Three forward modes share one implementation:

* hard (training): Heaviside spikes, surrogate derivative in backward, the
  reset term is treated as a constant.
* smooth: spikes are the arc-tangent sigmoid itself, so the loss is a
  differentiable function of the weights (used for finite-difference checks).
* smooth with ``frozen_reset``: as above but the reset factors are supplied
  constants, which makes the detached-reset gradient exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    NetworkSpec,
    NonFiniteError,
    affine,
    conv2d_batch,
    dense_batch,
    im2col,
    maxpool_batch,
    predict,
    _check_weights,
)


@dataclass(frozen=True)
class SurrogateConfig:
    alpha: float = 2.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("surrogate sharpness alpha must be positive")


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 50
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.1
    seed: int = 0
    batch_size: int = 32
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.peak_lr >= 0:
            raise ValueError("peak_lr must be non-negative")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def surrogate_grad(x, cfg: SurrogateConfig = SurrogateConfig()):
    """Derivative of ``arctan(pi*alpha*x/2)/pi + 1/2``."""
    a = cfg.alpha
    return a / (2.0 * (1.0 + (math.pi * a * np.asarray(x, dtype=float) / 2.0) ** 2))


def surrogate_spike(x, cfg: SurrogateConfig = SurrogateConfig()):
    return np.arctan(math.pi * cfg.alpha * np.asarray(x, dtype=float) / 2.0) / math.pi + 0.5


def lr_at(step: int, total_steps: int, sched: TrainSchedule) -> float:
    """Linear warm-up to ``peak_lr`` then cosine decay to 0 at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warm = int(sched.warmup_fraction * total_steps)
    if step < warm:
        return sched.peak_lr * step / warm
    span = total_steps - 1 - warm
    progress = (step - warm) / span if span > 0 else 0.0
    return sched.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- tape forward / backward ---------------------------------------------------

@dataclass
class Tape:
    inputs: list = field(default_factory=list)    # per t: {layer: input}
    pool_idx: list = field(default_factory=list)  # per t: {layer: argmax}
    u_cand: list = field(default_factory=list)    # per t: {layer: pre-reset membrane}
    reset: list = field(default_factory=list)     # per t: {layer: reset factor}
    counts: np.ndarray | None = None


def tape_forward(net: NetworkSpec, weights: Sequence[np.ndarray], x: np.ndarray,
                 cfg: SurrogateConfig = SurrogateConfig(), smooth: bool = False,
                 frozen_reset: list | None = None) -> Tape:
    w_of = dict(zip(net.weighted_layers, weights))
    b = x.shape[0]
    shapes = net.shapes()
    mem = {i: np.zeros((b, *shapes[i])) for i, layer in enumerate(net.layers) if layer.kind == "lif"}
    tape = Tape()
    counts = np.zeros((b, net.num_classes))
    for t in range(net.timesteps):
        h = x[:, t]
        ins, pidx, ucs, rs = {}, {}, {}, {}
        for i, layer in enumerate(net.layers):
            if layer.kind == "dense":
                ins[i] = h
                h = affine(layer, dense_batch(h, w_of[i]))
            elif layer.kind == "conv2d":
                ins[i] = h
                h = affine(layer, conv2d_batch(h, w_of[i], layer.stride, layer.padding))
            elif layer.kind == "maxpool2d":
                ins[i] = h
                h, pidx[i] = maxpool_batch(h, layer.window)
            else:
                u = layer.tau * mem[i] + h
                if not np.all(np.isfinite(u)):
                    raise NonFiniteError(f"non-finite membrane at layer {i}, timestep {t}")
                v = u - layer.v_th
                s = surrogate_spike(v, cfg) if smooth else (v >= 0).astype(float)
                r = frozen_reset[t][i] if frozen_reset is not None else s
                ucs[i], rs[i] = u, r
                mem[i] = u * (1.0 - r)
                h = s
        tape.inputs.append(ins)
        tape.pool_idx.append(pidx)
        tape.u_cand.append(ucs)
        tape.reset.append(rs)
        counts += h.reshape(b, -1)
    tape.counts = counts
    return tape


def cross_entropy(counts: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy on spike counts and its gradient."""
    z = counts - counts.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = counts.shape[0]
    loss = -float(logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def _conv_backward(x, w, gout, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    m, c, r, s = w.shape
    b, _, p, q = gout.shape
    cols = im2col(x, r, s, stride).reshape(b * p * q, c * r * s)
    g2 = gout.transpose(0, 2, 3, 1).reshape(b * p * q, m)
    gw = (g2.T @ cols).reshape(w.shape)
    gcols = (g2 @ w.reshape(m, -1)).reshape(b, p, q, c, r, s)
    gx = np.zeros_like(x)
    for ri in range(r):
        for si in range(s):
            gx[:, :, ri:ri + stride * (p - 1) + 1:stride, si:si + stride * (q - 1) + 1:stride] += \
                gcols[:, :, :, :, ri, si].transpose(0, 3, 1, 2)
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return gw, gx


def _bn_backward(layer, g):
    if layer.bn_scale is None:
        return g
    return g * np.asarray(layer.bn_scale).reshape(1, -1, *((1,) * (g.ndim - 2)))


def bptt_grad(net: NetworkSpec, weights: Sequence[np.ndarray], batch: tuple[np.ndarray, np.ndarray],
              cfg: SurrogateConfig = SurrogateConfig(), smooth: bool = False,
              detach_reset: bool = True, frozen_reset: list | None = None
              ) -> tuple[float, list[np.ndarray]]:
    """Loss and reverse-mode gradients for every weight tensor."""
    ws = _check_weights(net, weights)
    x, labels = np.asarray(batch[0], dtype=float), np.asarray(batch[1])
    tape = tape_forward(net, ws, x, cfg, smooth=smooth, frozen_reset=frozen_reset)
    loss, gcounts = cross_entropy(tape.counts, labels)
    if not math.isfinite(loss):
        raise NonFiniteError(f"non-finite loss at layer {len(net.layers) - 1}, "
                             f"timestep {net.timesteps - 1}")
    w_of = dict(zip(net.weighted_layers, ws))
    grads = {i: np.zeros_like(w) for i, w in w_of.items()}
    b = x.shape[0]
    g_state = {i: 0.0 for i, layer in enumerate(net.layers) if layer.kind == "lif"}
    couple = not detach_reset and frozen_reset is None
    out_shape = net.shapes()[-1]
    for t in reversed(range(net.timesteps)):
        g = gcounts.reshape(b, *out_shape)
        for i in reversed(range(len(net.layers))):
            layer = net.layers[i]
            if layer.kind == "lif":
                u, r = tape.u_cand[t][i], tape.reset[t][i]
                sg = surrogate_grad(u - layer.v_th, cfg)
                gu = g * sg + g_state[i] * (1.0 - r)
                if couple:
                    gu = gu - g_state[i] * u * sg
                g_state[i] = layer.tau * gu
                g = gu
            elif layer.kind == "maxpool2d":
                xin = tape.inputs[t][i]
                k = layer.window
                bb, c, hh, ww = xin.shape
                blocks = np.zeros((bb, c, hh // k, ww // k, k * k))
                np.put_along_axis(blocks, tape.pool_idx[t][i][..., None], g[..., None], axis=-1)
                g = blocks.reshape(bb, c, hh // k, ww // k, k, k).transpose(0, 1, 2, 4, 3, 5) \
                    .reshape(bb, c, hh, ww)
            elif layer.kind == "dense":
                xin = tape.inputs[t][i]
                g = _bn_backward(layer, g)
                grads[i] += g.T @ xin.reshape(b, -1)
                if i > 0:
                    g = (g @ w_of[i]).reshape(xin.shape)
            else:
                xin = tape.inputs[t][i]
                g = _bn_backward(layer, g)
                gw, gx = _conv_backward(xin, w_of[i], g, layer.stride, layer.padding)
                grads[i] += gw
                g = gx
            if i == 0:
                break
    return loss, [grads[i] for i in net.weighted_layers]


def smooth_loss(net: NetworkSpec, weights: Sequence[np.ndarray], batch,
                cfg: SurrogateConfig = SurrogateConfig(), frozen_reset: list | None = None) -> float:
    """Loss of the network with Heaviside replaced by the arc-tangent sigmoid."""
    tape = tape_forward(net, [np.asarray(w, dtype=float) for w in weights],
                        np.asarray(batch[0], dtype=float), cfg, smooth=True, frozen_reset=frozen_reset)
    return cross_entropy(tape.counts, np.asarray(batch[1]))[0]


def reset_factors(net: NetworkSpec, weights, batch, cfg: SurrogateConfig = SurrogateConfig()) -> list:
    """Per-timestep reset factors of the smooth forward pass, for freezing."""
    tape = tape_forward(net, [np.asarray(w, dtype=float) for w in weights],
                        np.asarray(batch[0], dtype=float), cfg, smooth=True)
    return tape.reset


# -- training loop -------------------------------------------------------------------

class TrainingHooks:
    """Extension points for compression schemes. The base class is the identity."""

    def on_train_start(self, weights: list[np.ndarray]) -> None:
        pass

    def on_epoch_start(self, epoch: int) -> None:
        pass

    def forward_weights(self, weights: list[np.ndarray]) -> list[np.ndarray]:
        return weights

    def backward(self, grads: list[np.ndarray], weights: list[np.ndarray]) -> list[np.ndarray]:
        return grads

    def after_step(self, weights: list[np.ndarray], lr: float) -> None:
        pass


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    lr: float


@dataclass
class TrainResult:
    weights: list[np.ndarray]
    trace: list[EpochRecord]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,loss,accuracy,lr\n")
            for rec in self.trace:
                fh.write(f"{rec.epoch},{rec.loss!r},{rec.accuracy!r},{rec.lr!r}\n")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, trace: list[EpochRecord]):
        super().__init__(message)
        self.trace = trace


def _check_step(w, loss, epoch, k, trace) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(f"epoch {epoch} step {k}: non-finite loss (all layers affected)", trace)
    for i, v in enumerate(w):
        if not np.all(np.isfinite(v)):
            raise DivergenceError(f"epoch {epoch} step {k}: non-finite weights in layer {i}", trace)


def train(net: NetworkSpec, weights: Sequence[np.ndarray], dataset: tuple[np.ndarray, np.ndarray],
          sched: TrainSchedule, hooks: TrainingHooks | None = None,
          surrogate: SurrogateConfig = SurrogateConfig(), step_callback=None) -> TrainResult:
    """Mini-batch SGD with momentum and the warm-up/cosine schedule.

    ``step_callback(epoch, step, weights)`` runs after every optimizer step
    (after the hooks), which is where tests assert per-step invariants.
    """
    hooks = hooks or TrainingHooks()
    w = [np.array(v, dtype=float) for v in _check_weights(net, weights)]
    x_all, y_all = dataset
    n = len(x_all)
    if n == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(sched.seed)
    steps_per_epoch = math.ceil(n / sched.batch_size)
    total = steps_per_epoch * sched.epochs
    velocity = [np.zeros_like(v) for v in w]
    hooks.on_train_start(w)
    trace: list[EpochRecord] = []
    step = 0
    for epoch in range(sched.epochs):
        hooks.on_epoch_start(epoch)
        order = rng.permutation(n)
        loss_sum, lr = 0.0, 0.0
        for k in range(steps_per_epoch):
            idx = order[k * sched.batch_size:(k + 1) * sched.batch_size]
            xb, yb = np.asarray(x_all[idx], dtype=float), np.asarray(y_all[idx])
            eff = hooks.forward_weights(w)
            try:
                loss, grads = bptt_grad(net, eff, (xb, yb), surrogate)
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch} step {k}: {exc}", trace) from exc
            grads = hooks.backward(grads, w)
            lr = lr_at(step, total, sched)
            for v, vel, g in zip(w, velocity, grads):
                vel *= sched.momentum
                vel += g
                v -= lr * vel
            hooks.after_step(w, lr)
            _check_step(w, loss, epoch, k, trace)
            if step_callback is not None:
                step_callback(epoch, k, w)
            loss_sum += loss * len(idx)
            step += 1
        acc = accuracy(net, hooks.forward_weights(w), x_all, y_all)
        trace.append(EpochRecord(epoch, loss_sum / n, acc, lr))
    return TrainResult(w, trace)


def accuracy(net: NetworkSpec, weights, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(net, weights, x) == np.asarray(y)))
