"""Spiking network primitives: layer specs, LIF dynamics and time-stepped simulation.

Tensors are plain ``numpy.ndarray`` values in row-major (C) order. Spike
trains are arrays with a leading time axis whose elements are 0 or 1.
Batched helpers take an extra leading batch axis; the unbatched public
operations (``lif_step``, ``layer_apply``, ``forward``) wrap them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("dense", "conv2d", "maxpool2d", "lif")
WEIGHTED_KINDS = ("dense", "conv2d")


class ShapeError(ValueError):
    """Raised when tensor extents disagree with a layer or network spec."""


class NonFiniteError(ValueError):
    """Raised when a NaN or infinity reaches the simulator."""


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a feed-forward spiking network.

    ``dense`` weights have shape ``(out_features, in_features)`` and flatten
    their input. ``conv2d`` weights have shape ``(M, C, R, S)``. Optional
    ``bn_scale``/``bn_bias`` hold inference-time batch norm folded into a
    per-output-channel affine map applied to the pre-activation.
    """

    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    window: int = 2
    tau: float = 0.9
    v_th: float = 1.0
    bn_scale: tuple[float, ...] | None = None
    bn_bias: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "lif":
            if not 0.0 <= self.tau <= 1.0:
                raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
            if not self.v_th > 0:
                raise ValueError(f"v_th must be positive, got {self.v_th}")
        if self.kind == "dense" and (self.in_features < 1 or self.out_features < 1):
            raise ValueError("dense layer needs positive in/out features")
        if self.kind == "conv2d":
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError("conv2d layer needs positive channel counts")
            if min(self.kernel) < 1 or self.stride < 1 or self.padding < 0:
                raise ValueError("conv2d kernel/stride must be positive")
        if self.kind == "maxpool2d" and self.window < 1:
            raise ValueError("pool window must be positive")
        n_out = self.out_features if self.kind == "dense" else self.out_channels
        for name in ("bn_scale", "bn_bias"):
            vals = getattr(self, name)
            if vals is not None and len(vals) != n_out:
                raise ValueError(f"{name} needs {n_out} entries, got {len(vals)}")

    @property
    def has_weights(self) -> bool:
        return self.kind in WEIGHTED_KINDS

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.out_features, self.in_features)
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, *self.kernel)
        raise ValueError(f"{self.kind} layer has no weights")

    def output_shape(self, in_shape: Sequence[int]) -> tuple[int, ...]:
        in_shape = tuple(in_shape)
        if self.kind == "lif":
            return in_shape
        if self.kind == "dense":
            if int(np.prod(in_shape)) != self.in_features:
                raise ShapeError(f"dense expects {self.in_features} inputs, got shape {in_shape}")
            return (self.out_features,)
        if len(in_shape) != 3:
            raise ShapeError(f"{self.kind} expects a (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        if self.kind == "maxpool2d":
            if h % self.window or w % self.window:
                raise ShapeError(f"pool window {self.window} does not tile {h}x{w}")
            return (c, h // self.window, w // self.window)
        if c != self.in_channels:
            raise ShapeError(f"conv2d expects {self.in_channels} channels, got {c}")
        r, s = self.kernel
        hp, wp = h + 2 * self.padding, w + 2 * self.padding
        if hp < r or wp < s:
            raise ShapeError(f"kernel {self.kernel} larger than padded input {hp}x{wp}")
        return (self.out_channels, (hp - r) // self.stride + 1, (wp - s) // self.stride + 1)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    timesteps: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if not self.layers or self.layers[-1].kind != "lif":
            raise ValueError("the final layer must be a LIF layer (spike-count readout)")
        shapes = self.shapes()
        if int(np.prod(shapes[-1])) != self.num_classes:
            raise ShapeError(f"network emits {shapes[-1]} outputs, expected {self.num_classes} classes")

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-layer input shapes followed by the final output shape."""
        out = [self.input_shape]
        for layer in self.layers:
            out.append(layer.output_shape(out[-1]))
        return out

    @property
    def weighted_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.has_weights]

    def weight_shapes(self) -> list[tuple[int, ...]]:
        return [self.layers[i].weight_shape() for i in self.weighted_layers]

    def init_weights(self, seed: int = 0, gain: float = 1.0) -> list[np.ndarray]:
        """Gaussian weights with std ``gain / sqrt(fan_in)``."""
        rng = np.random.default_rng(seed)
        weights = []
        for shape in self.weight_shapes():
            fan_in = int(np.prod(shape[1:]))
            weights.append(rng.normal(0.0, gain / np.sqrt(fan_in), size=shape))
        return weights


@dataclass
class LIFState:
    """Mutable membrane potentials, one array per LIF layer index."""

    membranes: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, net: NetworkSpec, batch: int | None = None) -> "LIFState":
        shapes = net.shapes()
        mem = {}
        for i, layer in enumerate(net.layers):
            if layer.kind == "lif":
                shape = shapes[i] if batch is None else (batch, *shapes[i])
                mem[i] = np.zeros(shape)
        return cls(mem)


@dataclass(frozen=True)
class LayerStats:
    """Exact nonzero counts for one layer, accumulated over time and batch."""

    index: int
    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    input_nnz: int
    input_total: int
    output_nnz: int
    output_total: int
    weight_nnz: int = 0
    weight_total: int = 0

    @property
    def input_density(self) -> float:
        return self.input_nnz / self.input_total if self.input_total else 0.0

    @property
    def output_density(self) -> float:
        return self.output_nnz / self.output_total if self.output_total else 0.0

    @property
    def weight_density(self) -> float:
        return self.weight_nnz / self.weight_total if self.weight_total else 0.0


@dataclass(frozen=True)
class ActivityStats:
    layers: tuple[LayerStats, ...]
    timesteps: int
    samples: int

    def for_weighted(self, net: NetworkSpec) -> list[dict]:
        """Densities the cost model needs for every weighted layer.

        The output density of a weighted layer is taken from the first LIF
        layer that follows it.
        """
        rows = []
        for i in net.weighted_layers:
            out = next((s for s in self.layers[i + 1:] if s.kind == "lif"), self.layers[i])
            st = self.layers[i]
            rows.append({
                "layer": i,
                "input_density": st.input_density,
                "output_density": out.output_density,
                "weight_density": st.weight_density,
            })
        return rows


# -- batched kernels ---------------------------------------------------------

def dense_batch(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1) @ w.T


def conv2d_batch(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    m, c, r, s = w.shape
    cols = im2col(x, r, s, stride)
    b, p, q = cols.shape[:3]
    out = cols.reshape(b * p * q, c * r * s) @ w.reshape(m, -1).T
    return out.reshape(b, p, q, m).transpose(0, 3, 1, 2)


def im2col(x: np.ndarray, r: int, s: int, stride: int) -> np.ndarray:
    """``(B, C, H, W)`` -> contiguous ``(B, P, Q, C, R, S)`` patches."""
    win = sliding_window_view(x, (r, s), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def maxpool_batch(x: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Window max and the flat in-window argmax (first maximum wins)."""
    b, c, h, w = x.shape
    blocks = x.reshape(b, c, h // window, window, w // window, window)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // window, w // window, window * window)
    idx = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], idx


def affine(layer: LayerSpec, pre: np.ndarray) -> np.ndarray:
    if layer.bn_scale is None and layer.bn_bias is None:
        return pre
    extra = (1,) * (pre.ndim - 2)
    if layer.bn_scale is not None:
        pre = pre * np.asarray(layer.bn_scale).reshape(1, -1, *extra)
    if layer.bn_bias is not None:
        pre = pre + np.asarray(layer.bn_bias).reshape(1, -1, *extra)
    return pre


def apply_batch(layer: LayerSpec, w: np.ndarray | None, x: np.ndarray) -> np.ndarray:
    if layer.kind == "dense":
        return affine(layer, dense_batch(x, w))
    if layer.kind == "conv2d":
        return affine(layer, conv2d_batch(x, w, layer.stride, layer.padding))
    if layer.kind == "maxpool2d":
        return maxpool_batch(x, layer.window)[0]
    raise ValueError("lif layers are stepped with lif_step")


# -- public operations -------------------------------------------------------

def lif_step(u_prev: np.ndarray, weighted_input: np.ndarray, tau: float, v_th: float
             ) -> tuple[np.ndarray, np.ndarray]:
    """Leak, integrate, fire at ``u >= v_th`` and hard-reset to 0."""
    u_prev = np.asarray(u_prev, dtype=float)
    weighted_input = np.asarray(weighted_input, dtype=float)
    if u_prev.shape != weighted_input.shape:
        raise ShapeError(f"membrane {u_prev.shape} vs input {weighted_input.shape}")
    if not v_th > 0:
        raise ValueError("v_th must be positive")
    _check_finite(u_prev, "membrane")
    _check_finite(weighted_input, "weighted input")
    u = tau * u_prev + weighted_input
    spikes = (u >= v_th).astype(float)
    return np.where(spikes > 0, 0.0, u), spikes


def layer_apply(layer: LayerSpec, weights: np.ndarray | None, x: np.ndarray) -> np.ndarray:
    """Pre-activation of one (unbatched) layer for a single timestep."""
    x = np.asarray(x, dtype=float)
    expected_out = layer.output_shape(x.shape)  # validates input extents
    if layer.has_weights:
        w = np.asarray(weights, dtype=float)
        if w.shape != layer.weight_shape():
            raise ShapeError(f"weights {w.shape} do not match layer {layer.weight_shape()}")
    else:
        w = None
    out = apply_batch(layer, w, x[None])[0]
    assert out.shape == expected_out
    return out


def _check_weights(net: NetworkSpec, weights: Sequence[np.ndarray]) -> list[np.ndarray]:
    shapes = net.weight_shapes()
    if len(weights) != len(shapes):
        raise ShapeError(f"expected {len(shapes)} weight tensors, got {len(weights)}")
    out = []
    for i, (w, shape) in enumerate(zip(weights, shapes)):
        w = np.asarray(w, dtype=float)
        if w.shape != shape:
            raise ShapeError(f"weight {i}: shape {w.shape}, layer expects {shape}")
        _check_finite(w, f"weight {i}")
        out.append(w)
    return out


def simulate(net: NetworkSpec, weights: Sequence[np.ndarray], x: np.ndarray
             ) -> tuple[np.ndarray, ActivityStats]:
    """Batched inference. ``x`` has shape ``(B, T, *input_shape)``.

    Returns per-sample output spike counts of shape ``(B, num_classes)``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != len(net.input_shape) + 2 or x.shape[2:] != net.input_shape:
        raise ShapeError(f"input {x.shape} does not match (B, T, {net.input_shape})")
    if x.shape[1] != net.timesteps:
        raise ShapeError(f"input has {x.shape[1]} timesteps, network expects {net.timesteps}")
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("input spike train must be binary")
    ws = _check_weights(net, weights)
    b = x.shape[0]
    w_of = dict(zip(net.weighted_layers, ws))
    state = LIFState.zeros(net, batch=b)
    shapes = net.shapes()
    in_nnz = [0] * len(net.layers)
    out_nnz = [0] * len(net.layers)
    counts = np.zeros((b, net.num_classes))
    for t in range(net.timesteps):
        h = x[:, t]
        for i, layer in enumerate(net.layers):
            in_nnz[i] += int(np.count_nonzero(h))
            if layer.kind == "lif":
                state.membranes[i], h = lif_step(state.membranes[i], h, layer.tau, layer.v_th)
            else:
                h = apply_batch(layer, w_of.get(i), h)
            out_nnz[i] += int(np.count_nonzero(h))
        counts += h.reshape(b, -1)
    layer_stats = []
    for i, layer in enumerate(net.layers):
        w = w_of.get(i)
        layer_stats.append(LayerStats(
            index=i, kind=layer.kind, in_shape=shapes[i], out_shape=shapes[i + 1],
            input_nnz=in_nnz[i], input_total=b * net.timesteps * int(np.prod(shapes[i])),
            output_nnz=out_nnz[i], output_total=b * net.timesteps * int(np.prod(shapes[i + 1])),
            weight_nnz=int(np.count_nonzero(w)) if w is not None else 0,
            weight_total=int(w.size) if w is not None else 0,
        ))
    return counts, ActivityStats(tuple(layer_stats), net.timesteps, b)


def forward(net: NetworkSpec, weights: Sequence[np.ndarray], spikes: np.ndarray
            ) -> tuple[np.ndarray, ActivityStats]:
    """Run one spike train of shape ``(T, *input_shape)`` from zero membrane state."""
    counts, stats = simulate(net, weights, np.asarray(spikes)[None])
    return counts[0], stats


def predict(net: NetworkSpec, weights: Sequence[np.ndarray], x: np.ndarray,
            batch_size: int = 256) -> np.ndarray:
    """Predicted class (argmax of spike counts, lowest index on ties)."""
    preds = [simulate(net, weights, x[i:i + batch_size])[0].argmax(axis=1)
             for i in range(0, len(x), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def merge_stats(parts: Iterable[ActivityStats]) -> ActivityStats:
    parts = list(parts)
    first = parts[0]
    merged = []
    for i, st in enumerate(first.layers):
        merged.append(LayerStats(
            index=st.index, kind=st.kind, in_shape=st.in_shape, out_shape=st.out_shape,
            input_nnz=sum(p.layers[i].input_nnz for p in parts),
            input_total=sum(p.layers[i].input_total for p in parts),
            output_nnz=sum(p.layers[i].output_nnz for p in parts),
            output_total=sum(p.layers[i].output_total for p in parts),
            weight_nnz=st.weight_nnz, weight_total=st.weight_total,
        ))
    return ActivityStats(tuple(merged), first.timesteps, sum(p.samples for p in parts))


def activity(net: NetworkSpec, weights: Sequence[np.ndarray], x: np.ndarray,
             batch_size: int = 256) -> ActivityStats:
    return merge_stats(simulate(net, weights, x[i:i + batch_size])[1]
                       for i in range(0, len(x), batch_size))


# -- event ingestion ---------------------------------------------------------

def events_to_frames(events: Iterable[tuple[float, int, int, int]], timesteps: int,
                     bin_width: float, size: tuple[int, int]) -> np.ndarray:
    """OR-bin DVS events into a ``(T, 2, H, W)`` spike train.

    ``size`` is ``(height, width)``; ``x`` indexes columns and ``y`` rows.
    Events at or after ``timesteps * bin_width`` are dropped.
    """
    if timesteps < 1 or bin_width <= 0:
        raise ValueError("timesteps must be >= 1 and bin_width positive")
    height, width = size
    frames = np.zeros((timesteps, 2, height, width))
    for t, x, y, pol in events:
        if t < 0:
            raise ValueError(f"negative timestamp {t}")
        if not (0 <= x < width and 0 <= y < height):
            raise ValueError(f"event coordinate ({x}, {y}) outside {width}x{height}")
        if pol not in (0, 1):
            raise ValueError(f"polarity must be 0 or 1, got {pol}")
        k = int(t // bin_width)
        if k < timesteps:
            frames[k, pol, y, x] = 1.0
    return frames


def read_events(path) -> list[tuple[float, int, int, int]]:
    """Parse a newline-delimited ``t x y polarity`` event file."""
    events = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 't x y polarity', got {line!r}")
            events.append((float(parts[0]), int(parts[1]), int(parts[2]), int(parts[3])))
    return events
