"""Global magnitude pruning and the compression-scheme training hooks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .quant import QuantConfig, initial_config, qat_backward, quantize, quantize_codes, SCALE_EPS
from .train import TrainingHooks

SCHEMES = ("quant_only", "prune_only", "cumulative", "joint")
DEFAULT_SPARSITY_SWEEP = (0.75, 0.80, 0.85, 0.90, 0.925, 0.95, 0.975)


@dataclass(frozen=True)
class PruneMask:
    masks: tuple[np.ndarray, ...]
    omega: float

    @property
    def pruned(self) -> int:
        return int(sum(m.size - np.count_nonzero(m) for m in self.masks))

    @property
    def total(self) -> int:
        return int(sum(m.size for m in self.masks))


def prune_count(omega: float, n: int) -> int:
    """floor(omega * n), with omega read as the decimal it prints as."""
    return math.floor(Fraction(str(omega)) * n)


def global_prune_mask(all_weights: Sequence[np.ndarray], omega: float) -> PruneMask:
    """Mask the floor(omega*N) smallest-magnitude weights across all layers.

    Ties in magnitude go to the lower (layer, flat index) first.
    """
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"sparsity target must lie in [0, 1], got {omega}")
    ws = [np.asarray(w, dtype=float) for w in all_weights]
    mags = np.concatenate([np.abs(w).ravel() for w in ws]) if ws else np.zeros(0)
    layer_id = np.concatenate([np.full(w.size, i) for i, w in enumerate(ws)]) if ws else np.zeros(0)
    flat_id = np.concatenate([np.arange(w.size) for w in ws]) if ws else np.zeros(0)
    k = prune_count(omega, mags.size)
    keep = np.ones(mags.size, dtype=bool)
    keep[np.lexsort((flat_id, layer_id, mags))[:k]] = False
    masks, start = [], 0
    for w in ws:
        masks.append(keep[start:start + w.size].reshape(w.shape).astype(float))
        start += w.size
    return PruneMask(tuple(masks), float(omega))


def apply_mask(weights: Sequence[np.ndarray], mask: PruneMask) -> list[np.ndarray]:
    if len(weights) != len(mask.masks):
        raise ValueError(f"{len(weights)} weight tensors but {len(mask.masks)} masks")
    out = []
    for w, m in zip(weights, mask.masks):
        w = np.asarray(w, dtype=float)
        if w.shape != m.shape:
            raise ValueError(f"mask shape {m.shape} does not match weights {w.shape}")
        out.append(w * m)
    return out


def scale_step(s: float, grad: float, n: int, q: QuantConfig, step: float) -> float:
    """One SGD step on log(s) with the gradient normalised by sqrt(n * max code).

    Working in log space keeps the scale positive and makes the step size
    independent of the scale's magnitude, which differs by ~100x across widths.
    """
    g = s * grad / math.sqrt(n * q.levels[1])
    return max(s * math.exp(-step * g), SCALE_EPS)


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str
    omega: float = 0.0
    quant: QuantConfig | None = None
    epochs: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.scheme in ("quant_only", "cumulative") and self.quant is None:
            raise ValueError(f"{self.scheme} needs a quantizer config")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @property
    def prunes(self) -> bool:
        return self.scheme in ("prune_only", "cumulative", "joint")

    @property
    def quantizes(self) -> bool:
        return self.quant is not None and self.scheme != "prune_only"

    @property
    def quant_start_epoch(self) -> int:
        return math.ceil(self.epochs / 2) if self.scheme == "cumulative" else 0


@dataclass
class CompressionHooks(TrainingHooks):
    """Prune-then-quantize forward weights with a frozen mask and learnable scales.

    The mask is built from the weights seen at ``on_train_start`` and never
    re-ranked. Quantizer scales are initialised from the masked weights when
    quantization switches on.
    """

    cfg: SchemeConfig
    mask: PruneMask | None = None
    qcfgs: list[QuantConfig] | None = None
    scale_lr_mult: float = 10.0
    _epoch: int = 0
    _masked: list = field(default_factory=list)
    _scale_grads: list = field(default_factory=list)

    @property
    def quant_active(self) -> bool:
        return self.cfg.quantizes and self._epoch >= self.cfg.quant_start_epoch

    def on_train_start(self, weights):
        if self.cfg.prunes and self.mask is None:
            self.mask = global_prune_mask(weights, self.cfg.omega)
        self._apply_mask_inplace(weights)
        self._last = weights

    def on_epoch_start(self, epoch):
        self._epoch = epoch
        if self.quant_active and self.qcfgs is None:
            base = self._masked_weights(self._last)
            self.qcfgs = [initial_config(w, self.cfg.quant) for w in base]

    def _masked_weights(self, weights):
        return apply_mask(weights, self.mask) if self.mask is not None else list(weights)

    def forward_weights(self, weights):
        self._last = weights
        masked = self._masked_weights(weights)
        self._masked = masked
        if not self.quant_active:
            return masked
        return [quantize(w, q) for w, q in zip(masked, self.qcfgs)]

    def backward(self, grads, weights):
        out = list(grads)
        if self.quant_active:
            self._scale_grads = []
            for k, (g, w, q) in enumerate(zip(grads, self._masked, self.qcfgs)):
                gx, gs_in, gs_out = qat_backward(g, w, quantize(w, q), q)
                out[k] = gx
                self._scale_grads.append((gs_in, gs_out))
        if self.mask is not None:
            out = [g * m for g, m in zip(out, self.mask.masks)]
        return out

    def after_step(self, weights, lr):
        if self.quant_active and self._scale_grads:
            step = lr * self.scale_lr_mult
            self.qcfgs = [q.with_scales(scale_step(q.s_in, gi, w.size, q, step),
                                        scale_step(q.s_out, go, w.size, q, step))
                          for q, (gi, go), w in zip(self.qcfgs, self._scale_grads, weights)]
            self._scale_grads = []
        self._apply_mask_inplace(weights)

    def _apply_mask_inplace(self, weights):
        if self.mask is not None:
            for w, m in zip(weights, self.mask.masks):
                w *= m

    def export(self, weights) -> "CompressedModel":
        """Deployed weights plus the integer codes that get stored on chip."""
        masked = self._masked_weights(weights)
        if self.cfg.quantizes:
            qcfgs = self.qcfgs or [initial_config(w, self.cfg.quant) for w in masked]
            codes = [quantize_codes(w, q) for w, q in zip(masked, qcfgs)]
            eff = [c * q.s_out for c, q in zip(codes, qcfgs)]
            return CompressedModel(eff, codes, [q.value_bits for q in qcfgs], qcfgs)
        return CompressedModel(masked, None, None, None)


@dataclass
class CompressedModel:
    weights: list[np.ndarray]
    codes: list[np.ndarray] | None
    value_bits: list[int] | None
    qcfgs: list[QuantConfig] | None

    @property
    def sparsity(self) -> float:
        total = sum(w.size for w in self.weights)
        return sum(w.size - np.count_nonzero(w) for w in self.weights) / total


def scheme_hooks(cfg: SchemeConfig) -> CompressionHooks:
    return CompressionHooks(cfg)
