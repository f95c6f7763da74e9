"""End-to-end experiment points, sweeps, Pareto frontiers and report files."""

from __future__ import annotations

import contextlib
import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .arch.model import BREAKDOWN_COLUMNS, EnergyReport
from .arch.search import search_mappings
from .arch.spec import Workload
from .config import (build_arch, build_network, build_task, config_hash, deep_merge, scheme_config,
                     schedule, surrogate)
from .core import NetworkSpec, activity
from .formats import Format, FormatParams, best_format
from .prune import CompressionHooks
from .quant import QuantConfig, initial_config, quantize_codes
from .train import accuracy, train

SCHEMA_VERSION = 1
ENERGY_SCOPE = "per-inference (all timesteps)"
POINT_COLUMNS = ("scheme", "precision", "omega", "format", "weight_bits", "accuracy", "float_accuracy",
                 "sparsity", "energy", "cycles", "edp", "status", "error")
PARETO_COLUMNS = POINT_COLUMNS
BREAKDOWN_CSV_COLUMNS = ("scheme", "precision", "omega", "format") + BREAKDOWN_COLUMNS + ("total",)


class StageError(RuntimeError):
    """A failure tagged with the pipeline stage it came from."""

    def __init__(self, stage: str, cause: BaseException | str):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass
class ExperimentPoint:
    scheme: str
    precision: str
    omega: float
    format: str
    weight_bits: int
    accuracy: float
    float_accuracy: float
    sparsity: float
    energy: float
    cycles: float
    edp: float
    breakdown: dict = field(default_factory=dict)
    layers: list = field(default_factory=list)
    status: str = "ok"
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def row(self) -> dict:
        return {k: getattr(self, k) for k in POINT_COLUMNS}

    @classmethod
    def failed(cls, cfg: dict, exc: BaseException) -> "ExperimentPoint":
        sc = cfg["scheme"]
        nan = float("nan")
        return cls(sc["name"], str(sc["precision"]), float(sc["omega"]), cfg["storage"]["weight_format"],
                   0, nan, nan, nan, nan, nan, nan, {c: nan for c in BREAKDOWN_COLUMNS}, [],
                   "failed", str(exc))


# -- pipeline pieces -----------------------------------------------------------------

_PRETRAINED: dict[str, tuple] = {}


def dataset(cfg: dict):
    return build_task(cfg).splits(cfg["data"]["train_size"], cfg["data"]["test_size"], cfg["seed"])


def pretrain(cfg: dict):
    """Float model trained from scratch; cached per (data, network, schedule, seed)."""
    key = config_hash({k: cfg[k] for k in ("seed", "data", "network", "surrogate", "pretrain")})
    if key not in _PRETRAINED:
        net = build_network(cfg)
        (xtr, ytr), (xte, yte) = dataset(cfg)
        w0 = net.init_weights(cfg["seed"], gain=cfg["network"]["init_gain"])
        res = train(net, w0, (xtr, ytr), schedule(cfg, "pretrain", cfg["seed"]), surrogate=surrogate(cfg))
        _PRETRAINED[key] = (res.weights, accuracy(net, res.weights, xte, yte), res.trace)
    weights, acc, trace = _PRETRAINED[key]
    return [w.copy() for w in weights], acc, trace


def finetune(cfg: dict, weights):
    scfg = scheme_config(cfg)
    hooks = CompressionHooks(scfg, scale_lr_mult=cfg["scheme"]["scale_lr_mult"])
    (xtr, ytr), _ = dataset(cfg)
    res = train(build_network(cfg), weights, (xtr, ytr), schedule(cfg, "finetune", cfg["seed"] + 1),
                hooks=hooks, surrogate=surrogate(cfg))
    return hooks.export(res.weights), res


def storage_codes(cfg: dict, model) -> tuple[list[np.ndarray], list[int]]:
    """Integer codes as stored on chip; unquantized schemes use the baseline width."""
    if model.codes is not None:
        return model.codes, model.value_bits
    bits = cfg["storage"]["baseline_bits"]
    codes = [quantize_codes(w, initial_config(w, QuantConfig(bits))) for w in model.weights]
    return codes, [bits] * len(codes)


def choose_format(choice: str, n: int, density: float, value_bits: int, rle_bits: int,
                  values=None) -> Format | None:
    """Resolve a storage choice; ``auto`` keeps dense storage unless a format is smaller."""
    if choice == "dense" or n == 0:
        return None
    if choice != "auto":
        return Format.parse(choice)
    fmt, bits = best_format(density, n, value_bits, FormatParams(rle_bits), values=values)
    return None if n * value_bits <= bits else fmt


def layer_workloads(cfg: dict, net: NetworkSpec, stats, codes, value_bits) -> list[Workload]:
    st = cfg["storage"]
    shapes = net.shapes()
    rows = stats.for_weighted(net)
    out = []
    for (i, row), c, vb in zip(zip(net.weighted_layers, rows), codes, value_bits):
        layer = net.layers[i]
        in_shape, out_shape = shapes[i], shapes[i + 1]
        if layer.kind == "conv2d":
            m, p, q = out_shape
            r, s = layer.kernel
            dims = dict(T=net.timesteps, M=m, C=layer.in_channels, P=p, Q=q, R=r, S=s)
        else:
            dims = dict(T=net.timesteps, M=layer.out_features, C=layer.in_features)
        w_density = float(np.count_nonzero(c)) / c.size
        n_in, n_out = int(np.prod(in_shape)), int(np.prod(out_shape))
        out.append(Workload(
            dims, stride=layer.stride, weight_bits=vb, weight_density=w_density,
            input_density=row["input_density"], output_density=row["output_density"],
            weight_format=choose_format(st["weight_format"], c.size, w_density, vb, st["rle_bits"], c),
            input_format=choose_format(st["spike_format"], n_in, row["input_density"], 1, st["rle_bits"]),
            output_format=choose_format(st["spike_format"], n_out, row["output_density"], 1, st["rle_bits"]),
            rle_bits=st["rle_bits"], name=f"layer{i}",
        ))
    return out


def _format_label(workloads) -> str:
    names = [w.weight_format.value if w.weight_format else "dense" for w in workloads]
    return names[0] if len(set(names)) == 1 else "/".join(names)


def run_point(cfg: dict) -> ExperimentPoint:
    """Pretrain (cached), fine-tune under the scheme, measure, encode, map and cost."""
    with stage("config"):
        net = build_network(cfg)
        arch = build_arch(cfg)
        scfg = scheme_config(cfg)
    with stage("pretrain"):
        base, float_acc, _ = pretrain(cfg)
    with stage("finetune"):
        model, _ = finetune(cfg, base)
    with stage("stats"):
        _, (xte, yte) = dataset(cfg)
        acc = accuracy(net, model.weights, xte, yte)
        stats = activity(net, model.weights, xte)
    with stage("encode"):
        codes, value_bits = storage_codes(cfg, model)
        workloads = layer_workloads(cfg, net, stats, codes, value_bits)
        total_w = sum(c.size for c in codes)
        sparsity = sum(c.size - np.count_nonzero(c) for c in codes) / total_w
    with stage("search"):
        sc = cfg["search"]
        report: EnergyReport | None = None
        layers = []
        for wl in workloads:
            res = search_mappings(wl, arch, budget=sc["budget"], objective=sc["objective"], seed=sc["seed"])
            report = res.report if report is None else report + res.report
            layers.append({"name": wl.name, "dims": wl.dims, "weight_bits": wl.weight_bits,
                           "weight_density": wl.weight_density, "input_density": wl.input_density,
                           "output_density": wl.output_density,
                           "weight_format": wl.weight_format.value if wl.weight_format else "dense",
                           "mapping": res.mapping.to_dict(), "energy": res.report.total,
                           "cycles": res.report.cycles})
    label = "float" if scfg.scheme == "prune_only" else scfg.quant.label
    return ExperimentPoint(
        scheme=scfg.scheme, precision=label, omega=scfg.omega if scfg.prunes else 0.0,
        format=_format_label(workloads), weight_bits=max(value_bits), accuracy=acc,
        float_accuracy=float_acc, sparsity=float(sparsity), energy=report.total, cycles=report.cycles,
        edp=report.edp, breakdown=report.breakdown(), layers=layers,
    )


# -- sweeps ------------------------------------------------------------------------------

def expand_grid(cfg: dict) -> list[dict]:
    """Config overrides, one per (scheme, precision, sparsity, format) row.

    ``quant_only`` ignores the sparsity axis and ``prune_only`` the precision
    axis, so each contributes one row per value of the axis it uses.
    """
    sw = cfg["sweep"]
    rows = []
    for fmt in sw["formats"]:
        for scheme in sw["schemes"]:
            if scheme == "quant_only":
                combos = [(p, 0.0) for p in sw["precisions"]]
            elif scheme == "prune_only":
                combos = [(cfg["scheme"]["precision"], om) for om in sw["sparsities"]]
            else:
                combos = [(p, om) for p in sw["precisions"] for om in sw["sparsities"]]
            for p, om in combos:
                rows.append({"scheme": {"name": scheme, "precision": p, "omega": om},
                             "storage": {"weight_format": fmt}})
    return rows


def sweep(cfg: dict, grid: list[dict] | None = None, progress=None) -> list[ExperimentPoint]:
    """Run every grid row; failed rows are kept and flagged rather than aborting."""
    grid = expand_grid(cfg) if grid is None else grid
    if not grid:
        raise ValueError("sweep grid is empty")
    points = []
    for k, override in enumerate(grid):
        point_cfg = deep_merge(cfg, override)
        try:
            point = run_point(point_cfg)
        except Exception as exc:  # noqa: BLE001 - recorded in the row
            point = ExperimentPoint.failed(point_cfg, exc)
        points.append(point)
        if progress is not None:
            progress(k, len(grid), point)
    return points


# -- Pareto --------------------------------------------------------------------------------

def dominates(a: tuple[float, float], b: tuple[float, float]) -> bool:
    """``a`` is no worse on both axes (lower x, higher y) and better on one."""
    return a[0] <= b[0] and a[1] >= b[1] and (a[0] < b[0] or a[1] > b[1])


def pareto_indices(xy: list[tuple[float, float]]) -> list[int]:
    """Non-dominated indices, exact duplicates collapsed to the first, sorted by x (stable)."""
    keep = []
    for i, p in enumerate(xy):
        if any(dominates(q, p) for q in xy) or any(q == p for q in xy[:i]):
            continue
        keep.append(i)
    return sorted(keep, key=lambda i: xy[i][0])


def pareto(points, x: str = "energy", y: str = "accuracy"):
    if x not in ("energy", "edp"):
        raise ValueError(f"x must be energy or edp, got {x!r}")
    pts = [p for p in points if getattr(p, "ok", True)]
    idx = pareto_indices([(getattr(p, x), getattr(p, y)) for p in pts])
    return [pts[i] for i in idx]


# -- reports -------------------------------------------------------------------------------

def _cell(v):
    return repr(v) if isinstance(v, float) else v


def write_csv(path: Path, columns, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(columns)
            for row in rows:
                wr.writerow([_cell(row[c]) for c in columns])
    except OSError as exc:
        raise StageError("report", f"cannot write {path}: {exc}") from exc


def manifest(cfg: dict, n_points: int, x: str) -> dict:
    return {"schema_version": SCHEMA_VERSION, "tool_version": __version__,
            "config_sha256": config_hash(cfg), "seed": cfg["seed"], "energy_scope": ENERGY_SCOPE,
            "energy_units": "model units", "pareto_axis": x, "points": n_points,
            "point_columns": list(POINT_COLUMNS), "breakdown_columns": list(BREAKDOWN_CSV_COLUMNS)}


def report(points, out_dir, cfg: dict, x: str = "energy") -> dict[str, Path]:
    """Write points.csv/json, pareto.csv, energy_breakdown.csv and manifest.json."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StageError("report", f"cannot create {out}: {exc}") from exc
    paths = {name: out / name for name in
             ("points.csv", "points.json", "pareto.csv", "energy_breakdown.csv", "manifest.json")}
    write_csv(paths["points.csv"], POINT_COLUMNS, [p.row() for p in points])
    write_csv(paths["pareto.csv"], PARETO_COLUMNS, [p.row() for p in pareto(points, x)])
    write_csv(paths["energy_breakdown.csv"], BREAKDOWN_CSV_COLUMNS,
               [{**p.row(), **p.breakdown, "total": p.energy} for p in points])
    for name, payload in (("points.json", [asdict(p) for p in points]),
                          ("manifest.json", manifest(cfg, len(points), x))):
        try:
            paths[name].write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise StageError("report", f"cannot write {paths[name]}: {exc}") from exc
    return paths


def load_points(path) -> list[ExperimentPoint]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise StageError("report", f"cannot read points from {path}: {exc}") from exc
    return [ExperimentPoint(**d) for d in data]
