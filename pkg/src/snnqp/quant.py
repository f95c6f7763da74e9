"""Learnable-scale fixed-point weight quantization.

    Q(x) = clip(round(x / s_in), lo, hi) * s_out

with ``[lo, hi] = [-2**(b-1), 2**(b-1) - 1]`` for ``b`` bits and ``[-1, 1]``
in ternary mode. Rounding is half-away-from-zero. Training uses a
straight-through estimator with element-wise gradient scaling.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

SCALE_EPS = 1e-8


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 8
    ternary: bool = False
    s_in: float = 1.0
    s_out: float = 1.0
    delta: float = 0.1

    def __post_init__(self):
        if not self.ternary and self.bits < 2:
            raise ValueError(f"need at least 2 bits, got {self.bits}")
        if not (self.s_in > 0 and self.s_out > 0):
            raise ValueError("quantizer scales must be positive")
        if self.delta < 0:
            raise ValueError("gradient-scaling strength must be >= 0")

    @property
    def levels(self) -> tuple[int, int]:
        if self.ternary:
            return -1, 1
        return -(2 ** (self.bits - 1)), 2 ** (self.bits - 1) - 1

    @property
    def value_bits(self) -> int:
        """Two's-complement width of the integer codes."""
        return 2 if self.ternary else self.bits

    @property
    def label(self) -> str:
        return "ternary" if self.ternary else f"{self.bits}b"

    def with_scales(self, s_in: float, s_out: float) -> "QuantConfig":
        return replace(self, s_in=float(s_in), s_out=float(s_out))


def parse_precision(value) -> tuple[int, bool]:
    """``'ternary'``, ``'4b'`` or ``4`` -> ``(bits, ternary)``."""
    if isinstance(value, str):
        v = value.strip().lower()
        if v in ("ternary", "t", "2t"):
            return 2, True
        return int(v.rstrip("b")), False
    return int(value), False


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def init_scales(weights: np.ndarray) -> tuple[float, float]:
    """Mean plus three standard deviations, with fallbacks for degenerate inputs."""
    w = np.asarray(weights, dtype=float)
    if w.size == 0:
        raise ValueError("cannot initialise scales from an empty tensor")
    std = float(w.std())
    if std == 0.0:
        s = max(float(np.abs(w).max()), SCALE_EPS)
        return s, s
    s = float(w.mean()) + 3.0 * std
    if s <= 0:
        s = 3.0 * std
    return s, s


def initial_config(weights: np.ndarray, cfg: QuantConfig) -> QuantConfig:
    """``cfg`` with both scales set so the largest code lands on ``init_scales``.

    The mean + 3 std value is the clipping range; the step is that range over
    the largest positive code (the range itself in ternary mode).
    """
    s_in, s_out = init_scales(weights)
    hi = cfg.levels[1]
    return cfg.with_scales(s_in / hi, s_out / hi)


def quantize_codes(x: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Integer codes ``clip(round(x / s_in), lo, hi)`` as int64."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    lo, hi = cfg.levels
    return np.clip(round_half_away(x / cfg.s_in), lo, hi).astype(np.int64)


def quantize(x: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    return quantize_codes(x, cfg) * cfg.s_out


def qat_backward(upstream: np.ndarray, x: np.ndarray, x_q: np.ndarray, cfg: QuantConfig
                 ) -> tuple[np.ndarray, float, float]:
    """Gradients of ``quantize`` w.r.t. its input and both scales.

    Inside the clip range the input gradient is the straight-through value
    scaled by ``1 + delta * sign(g) * (x/s_in - q)``; outside it is zero.
    ``x_q`` must come from ``quantize(x, cfg)``.
    """
    g = np.asarray(upstream, dtype=float)
    x = np.asarray(x, dtype=float)
    lo, hi = cfg.levels
    xn = x / cfg.s_in
    q = np.clip(round_half_away(xn), lo, hi)
    inside = (xn >= lo) & (xn <= hi)
    grad_x = np.where(inside, g * (1.0 + cfg.delta * np.sign(g) * (xn - q)), 0.0)
    # round() passes gradients straight through; clipped codes are constant in s_in
    grad_s_in = float(np.sum(np.where(inside, g * cfg.s_out * (-x / cfg.s_in ** 2), 0.0)))
    if np.shape(x_q) != x.shape:
        raise ValueError("x_q must come from the same quantize call as x")
    grad_s_out = float(np.sum(g * q))
    return grad_x, grad_s_in, grad_s_out


def induced_sparsity(weights_q: np.ndarray) -> float:
    w = np.asarray(weights_q)
    if w.size == 0:
        raise ValueError("empty tensor has no sparsity")
    return float(np.count_nonzero(w == 0)) / w.size
