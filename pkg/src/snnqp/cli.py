"""Command-line entry point: ``snnqp <train|compress|estimate|sweep|pareto|report>``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import FORMAT_CHOICES, ConfigError, build_network, load_config
from .formats import FormatParams, encode, save
from .harness import (PARETO_COLUMNS, StageError, choose_format, dataset, finetune, load_points, pareto,
                      pretrain, report, run_point, stage, storage_codes, sweep, write_csv)
from .train import TrainResult, accuracy


def _overrides(args) -> dict:
    ov: dict = {}
    if args.seed is not None:
        ov["seed"] = args.seed
    if args.objective is not None:
        ov["search"] = {"objective": args.objective}
    if args.format is not None:
        ov["storage"] = {"weight_format": args.format}
    return ov


def _write_json(path: Path, payload) -> None:
    with stage("report"):
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_train(args, cfg) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with stage("pretrain"):
        weights, acc, trace = pretrain(cfg)
    np.savez(out / "float_weights.npz", *weights)
    TrainResult(weights, trace).to_csv(out / "pretrain_trace.csv")
    _write_json(out / "train_summary.json", {"float_accuracy": acc, "epochs": len(trace)})
    print(f"float accuracy {acc:.4f}; weights in {out / 'float_weights.npz'}")


def cmd_compress(args, cfg) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with stage("pretrain"):
        base, float_acc, _ = pretrain(cfg)
    with stage("finetune"):
        model, res = finetune(cfg, base)
    res.to_csv(out / "finetune_trace.csv")
    with stage("encode"):
        codes, value_bits = storage_codes(cfg, model)
        st = cfg["storage"]
        layers = []
        for k, (c, vb) in enumerate(zip(codes, value_bits)):
            density = float(np.count_nonzero(c)) / c.size
            fmt = choose_format(st["weight_format"], c.size, density, vb, st["rle_bits"], c)
            row = {"layer": k, "format": fmt.value if fmt else "dense", "value_bits": vb,
                   "density": density, "elements": int(c.size)}
            if fmt is not None:
                enc = encode(c.ravel(), fmt, vb, FormatParams(st["rle_bits"]))
                save(enc, out / f"layer{k}.spen")
                row.update(metadata_bits=enc.metadata_bits, payload_bits=enc.payload_bits)
            else:
                row.update(metadata_bits=0, payload_bits=int(c.size) * vb)
            layers.append(row)
    np.savez(out / "deployed_weights.npz", *model.weights)
    np.savez(out / "codes.npz", *codes)
    net = build_network(cfg)
    _, (xte, yte) = dataset(cfg)
    acc = accuracy(net, model.weights, xte, yte)
    _write_json(out / "compress_summary.json", {"accuracy": acc, "float_accuracy": float_acc,
                                                "sparsity": model.sparsity, "layers": layers})
    print(f"accuracy {acc:.4f} (float {float_acc:.4f}), weight sparsity {model.sparsity:.4f}")


def cmd_estimate(args, cfg) -> None:
    point = run_point(cfg)
    report([point], args.out, cfg, x=cfg["search"]["objective"])
    print(f"{point.scheme} {point.precision} omega={point.omega} format={point.format}: "
          f"accuracy {point.accuracy:.4f}, energy {point.energy:.6g}, cycles {point.cycles:.6g}, "
          f"EDP {point.edp:.6g}")


def cmd_sweep(args, cfg) -> None:
    def progress(k, n, p):
        status = "ok" if p.ok else f"FAILED {p.error}"
        print(f"[{k + 1}/{n}] {p.scheme} {p.precision} omega={p.omega} {p.format}: {status}", flush=True)

    points = sweep(cfg, progress=progress)
    report(points, args.out, cfg, x=cfg["search"]["objective"])
    failed = sum(not p.ok for p in points)
    print(f"{len(points)} points ({failed} failed) written to {args.out}")


def _points_path(args) -> Path:
    return Path(args.points) if args.points else Path(args.out) / "points.json"


def cmd_pareto(args, cfg) -> None:
    points = load_points(_points_path(args))
    x = cfg["search"]["objective"]
    front = pareto(points, x=x)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "pareto.csv", PARETO_COLUMNS, [p.row() for p in front])
    for p in front:
        print(f"{getattr(p, x):.6g}\t{p.accuracy:.4f}\t{p.scheme} {p.precision} omega={p.omega} {p.format}")


def cmd_report(args, cfg) -> None:
    points = load_points(_points_path(args))
    paths = report(points, args.out, cfg, x=cfg["search"]["objective"])
    for p in paths.values():
        print(p)


COMMANDS = {"train": cmd_train, "compress": cmd_compress, "estimate": cmd_estimate,
            "sweep": cmd_sweep, "pareto": cmd_pareto, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snnqp", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--objective", choices=("energy", "edp"))
    common.add_argument("--format", choices=FORMAT_CHOICES, help="weight storage format")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"train": "pretrain the float model", "compress": "fine-tune under the configured scheme",
             "estimate": "cost one experiment point", "sweep": "run the configured sweep grid",
             "pareto": "frontier of an existing points.json", "report": "rewrite report files"}
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        if name in ("pareto", "report"):
            p.add_argument("--points", help="points.json to read (default <out>/points.json)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
