"""YAML experiment configs: defaults, deep merge, and object builders."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np
import yaml

from .arch.spec import ArchitectureSpec
from .core import LayerSpec, NetworkSpec
from .data import SyntheticTask
from .prune import SCHEMES, SchemeConfig
from .quant import QuantConfig, parse_precision
from .train import SurrogateConfig, TrainSchedule

FORMAT_CHOICES = ("ubm", "uop", "cp", "rle", "auto", "dense")

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "data": {"height": 12, "width": 12, "timesteps": 8, "signal_rate": 0.8, "noise_rate": 0.02,
             "radius": 1.5, "speed": 1.0, "trail": 2, "train_size": 512, "test_size": 256},
    "network": {
        "tau": 0.8,
        "v_th": 1.0,
        "init_gain": 2.0,
        "layers": [
            {"kind": "conv2d", "out_channels": 8, "kernel": 3},
            {"kind": "lif"},
            {"kind": "maxpool2d", "window": 2},
            {"kind": "conv2d", "out_channels": 8, "kernel": 3},
            {"kind": "lif"},
            {"kind": "dense", "out_features": 4},
            {"kind": "lif"},
        ],
    },
    "surrogate": {"alpha": 2.0},
    "pretrain": {"epochs": 30, "peak_lr": 0.05, "batch_size": 32, "warmup_fraction": 0.1, "momentum": 0.9},
    "finetune": {"epochs": 20, "peak_lr": 0.05, "batch_size": 32, "warmup_fraction": 0.1, "momentum": 0.9},
    "scheme": {"name": "quant_only", "precision": "8b", "omega": 0.0, "delta": 0.1, "scale_lr_mult": 10.0},
    "storage": {"weight_format": "auto", "spike_format": "auto", "rle_bits": 4, "baseline_bits": 8},
    "search": {"budget": 2000, "objective": "energy", "seed": 0},
    "arch": {},
    "sweep": {
        "schemes": list(SCHEMES),
        "precisions": ["8b", "6b", "4b", "3b", "ternary"],
        "sparsities": [0.75, 0.80, 0.85, 0.90, 0.925, 0.95, 0.975],
        "formats": ["auto"],
    },
}


class ConfigError(ValueError):
    pass


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "arch":
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
    unknown = set(data) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    cfg = deep_merge(DEFAULT_CONFIG, data)
    cfg = deep_merge(cfg, overrides or {})
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    fmt = cfg["storage"]["weight_format"]
    if fmt not in FORMAT_CHOICES:
        raise ConfigError(f"weight_format must be one of {FORMAT_CHOICES}, got {fmt!r}")
    if cfg["storage"]["spike_format"] not in FORMAT_CHOICES:
        raise ConfigError(f"spike_format must be one of {FORMAT_CHOICES}")
    if cfg["search"]["objective"] not in ("energy", "edp"):
        raise ConfigError("search.objective must be energy or edp")
    if cfg["scheme"]["name"] not in SCHEMES:
        raise ConfigError(f"scheme.name must be one of {SCHEMES}")
    try:
        build_network(cfg)
        build_arch(cfg)
        scheme_config(cfg)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def build_task(cfg: dict) -> SyntheticTask:
    d = cfg["data"]
    return SyntheticTask(d["height"], d["width"], d["timesteps"], d["signal_rate"], d["noise_rate"],
                         d["radius"], d["speed"], d["trail"])


def build_network(cfg: dict) -> NetworkSpec:
    """Layer list with input sizes filled in by shape propagation."""
    task = build_task(cfg)
    net = cfg["network"]
    shape = task.input_shape
    layers = []
    for raw in net["layers"]:
        spec = dict(raw)
        kind = spec.get("kind")
        if kind == "conv2d":
            k = spec.pop("kernel", 3)
            spec["kernel"] = (k, k) if isinstance(k, int) else tuple(k)
            spec.setdefault("in_channels", shape[0])
        elif kind == "dense":
            spec.setdefault("in_features", int(np.prod(shape)))
        elif kind == "lif":
            spec.setdefault("tau", net["tau"])
            spec.setdefault("v_th", net["v_th"])
        for key in ("bn_scale", "bn_bias"):
            if spec.get(key) is not None:
                spec[key] = tuple(spec[key])
        layer = LayerSpec(**spec)
        layers.append(layer)
        shape = layer.output_shape(shape)
    return NetworkSpec(tuple(layers), task.input_shape, task.timesteps, num_classes=4)


def schedule(cfg: dict, section: str, seed: int) -> TrainSchedule:
    s = cfg[section]
    return TrainSchedule(epochs=s["epochs"], peak_lr=s["peak_lr"], warmup_fraction=s["warmup_fraction"],
                         seed=seed, batch_size=s["batch_size"], momentum=s["momentum"])


def surrogate(cfg: dict) -> SurrogateConfig:
    return SurrogateConfig(alpha=cfg["surrogate"]["alpha"])


def build_arch(cfg: dict) -> ArchitectureSpec:
    return ArchitectureSpec.from_dict(cfg.get("arch") or {})


def scheme_config(cfg: dict) -> SchemeConfig:
    sc = cfg["scheme"]
    bits, ternary = parse_precision(sc["precision"])
    quant = QuantConfig(bits=bits, ternary=ternary, delta=sc["delta"])
    return SchemeConfig(sc["name"], float(sc["omega"]), quant, cfg["finetune"]["epochs"])
