"""Command-line entry point: train | connect | sweep | ensemble | gen-data.

Every command takes an optional JSON config; flags override its keys.  The
fully resolved config, seed included, is written next to the outputs so a
run can be repeated bit-for-bit.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np

from modeconnect.connect_direct import arc_connect, linear_connect
from modeconnect.connect_learnable import (
    BijectionConfig,
    CouplingFlow,
    FlowTrainConfig,
    ModelSet,
    connect_with_flow,
    train_bijection,
    train_flow_nll,
)
from modeconnect.connect_ot import ot_connect
from modeconnect.connect_wa import DEFAULT_ADJUST_CAP, DEFAULT_BREAKPOINTS, WaConfig, adjustment_features, wa_connect_multilayer
from modeconnect.dataio import IdxError, SyntheticSpec, gen_synthetic, load_mnist_dir, train_test_split
from modeconnect.ensemble import build_wa_ensemble, ensemble_predict, independent_predict_proba
from modeconnect.netcore import (
    CheckpointError,
    Dataset,
    MlpSpec,
    SgdConfig,
    ShapeError,
    WeightVector,
    accuracy,
    check_same_architecture,
    cross_entropy,
    evaluate_weights,
    load_checkpoint,
    particle_dim,
    save_checkpoint,
    train_sgd,
)
from modeconnect.paths import DEFAULT_POINTS_PER_LEG, evaluate

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

METHODS = (
    "linear", "arc", "rnvp-flow", "rnvp-bijection", "ot",
    "linear-wa", "arc-wa", "ot-wa", "linear-bfly", "arc-bfly", "ot-bfly",
)
SWEEP_SCHEMA = "# modeconnect sweep v1"
TRAIN_SCHEMA = "# modeconnect training curve v1"
ENSEMBLE_SCHEMA = "# modeconnect ensemble v1"

COMMON_KEYS = {"seed": int, "out": str, "grid_points": int, "breakpoints": int, "adjust_cap": int}
DATASET_KEYS = {
    "kind": str, "root": str, "path": str, "train_size": int, "test_size": int, "test_fraction": float,
    "classes": int, "dim": int, "samples_per_class": int, "std": float, "radius": float, "seed": int,
}
SGD_KEYS = {"lr": float, "batch": int, "epochs": int}
FLOW_KEYS = {"layers": int, "hidden": int, "scale_bound": float, "steps": int, "lr": float, "batch": int}
COMMAND_KEYS = {
    "train": {"dataset": dict, "hidden": list, "sgd": dict, "seeds": list},
    "connect": {"dataset": dict, "method": str, "endpoints": list, "models": list, "flow": dict},
    "sweep": {"dataset": dict, "hidden": list, "axis": str, "values": list, "methods": list, "seeds": list,
              "width": int, "depth": int, "sgd": dict, "flow": dict, "models_per_set": int},
    "ensemble": {"dataset": dict, "members": list, "split": int},
    "gen-data": {"dataset": dict},
}
DEFAULTS: dict[str, Any] = {
    "seed": 0, "out": "out", "grid_points": DEFAULT_POINTS_PER_LEG,
    "breakpoints": DEFAULT_BREAKPOINTS, "adjust_cap": DEFAULT_ADJUST_CAP,
}


class ConfigError(ValueError):
    pass


# --- config -----------------------------------------------------------------


def _check_keys(doc: dict, schema: dict, where: str) -> None:
    for key, value in doc.items():
        if key not in schema:
            raise ConfigError(f"unknown key {where}{key!r}")
        want = schema[key]
        ok = isinstance(value, want) and not (want is int and isinstance(value, bool))
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            ok = True
        if not ok:
            raise ConfigError(f"{where}{key} must be {want.__name__}, got {type(value).__name__}")


def validate_config(command: str, cfg: dict) -> None:
    # one config file may serve several commands, so any known key is accepted
    schema = dict(COMMON_KEYS)
    for keys in COMMAND_KEYS.values():
        schema.update(keys)
    _check_keys(cfg, schema, "")
    for name, sub in (("dataset", DATASET_KEYS), ("sgd", SGD_KEYS), ("flow", FLOW_KEYS)):
        if name in cfg:
            _check_keys(cfg[name], sub, f"{name}.")
    kind = cfg.get("dataset", {}).get("kind", "synthetic")
    if kind not in ("synthetic", "mnist", "npz"):
        raise ConfigError(f"dataset.kind must be synthetic, mnist or npz, got {kind!r}")
    if kind in ("mnist", "npz") and not ({"root", "path"} & set(cfg["dataset"])):
        raise ConfigError(f"dataset.kind={kind} needs a root or path")
    for key in ("grid_points", "breakpoints"):
        if cfg[key] < 2:
            raise ConfigError(f"{key} must be at least 2")
    if cfg["adjust_cap"] < 1:
        raise ConfigError("adjust_cap must be positive")
    if command == "connect":
        if cfg.get("method") not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}; got {cfg.get('method')!r}")
        if len(cfg.get("endpoints", [])) != 2:
            raise ConfigError("connect needs exactly two endpoints")
    if command == "sweep":
        if cfg.get("axis") not in ("width", "depth"):
            raise ConfigError("sweep axis must be width or depth")
        if not cfg.get("values"):
            raise ConfigError("sweep needs at least one value")
        for m in cfg.get("methods", []):
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
    if command == "ensemble":
        if not cfg.get("members"):
            raise ConfigError("ensemble needs at least one member checkpoint")
    if command == "train" and any(int(h) < 1 for h in cfg.get("hidden", [1])):
        raise ConfigError("hidden widths must be positive")


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        cfg.update(doc)
    for key in COMMON_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    for key in ("method", "split", "axis"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    for key in ("endpoints", "members", "values", "methods", "seeds"):
        value = getattr(args, key, None)
        if value:
            cfg[key] = value
    validate_config(args.command, cfg)
    return cfg


def write_resolved(cfg: dict, command: str, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True))


def _threads() -> int:
    raw = os.environ.get("MODECONNECT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"MODECONNECT_THREADS must be an integer, got {raw!r}") from exc


# --- data and models ---------------------------------------------------------


def load_data(spec: dict) -> tuple[Dataset, Dataset]:
    """Train and test splits described by a ``dataset`` config block."""
    kind = spec.get("kind", "synthetic")
    if kind == "mnist":
        train = load_mnist_dir(spec["root"], "train")
        test = load_mnist_dir(spec["root"], "test")
        seed = spec.get("seed", 0)
        train = _head(train, spec.get("train_size"), seed)
        test = _head(test, spec.get("test_size"), seed + 1)
        return train, test
    if kind == "npz":
        with np.load(spec.get("path") or spec["root"]) as z:
            data = Dataset(z["features"], z["labels"], int(z["classes"]))
    else:
        keys = ("classes", "dim", "samples_per_class", "std", "seed", "radius")
        data = gen_synthetic(SyntheticSpec(**{k: spec[k] for k in keys if k in spec}))
    return train_test_split(data, spec.get("test_fraction", 0.2), spec.get("seed", 0))


def _head(data: Dataset, size: int | None, seed: int) -> Dataset:
    if size is None or size >= len(data):
        return data
    idx = np.sort(np.random.Generator(np.random.PCG64(seed)).choice(len(data), size, replace=False))
    return data.subset(idx)


def _spec_for(data: Dataset, hidden) -> MlpSpec:
    return MlpSpec((data.dim, *[int(h) for h in hidden], data.classes))


def _sgd(cfg: dict, seed: int) -> SgdConfig:
    return SgdConfig(seed=seed, **cfg.get("sgd", {}))


def build_connection(
    method: str,
    a: WeightVector,
    b: WeightVector,
    train: Dataset,
    cfg: dict,
    models: list[WeightVector] | None = None,
):
    """Connection path between ``a`` and ``b`` with a CLI method name."""
    check_same_architecture(a, b)
    if method == "linear":
        return linear_connect(a, b)
    if method == "arc":
        return arc_connect(a, b)
    if method == "ot":
        return ot_connect(a, b)
    if method.startswith("rnvp-"):
        return _flow_connection(method, a, b, train, cfg, models or [a, b])
    base, variant = method.split("-")
    wa = WaConfig(adjustment_features(train, cfg["adjust_cap"], cfg["seed"]), cfg["breakpoints"])
    return wa_connect_multilayer(a, b, f"{base}+{'wa' if variant == 'wa' else 'butterfly'}", wa)


def _flow_connection(method, a, b, train, cfg, models):
    fc = cfg.get("flow", {})
    flow = CouplingFlow.create(
        particle_dim(a, 1), layers=fc.get("layers", 6), hidden=fc.get("hidden", 64),
        seed=cfg["seed"], scale_bound=fc.get("scale_bound", 2.0),
    )
    model_set = ModelSet(tuple(models))
    steps = {k: fc[k] for k in ("steps", "lr", "batch") if k in fc}
    if method == "rnvp-flow":
        flow = train_flow_nll(flow, model_set.particles(1), FlowTrainConfig(seed=cfg["seed"], **steps))
    else:
        flow = train_bijection(flow, model_set, train, BijectionConfig(seed=cfg["seed"], **steps))
    return connect_with_flow(a, b, flow)


# --- commands -------------------------------------------------------------


def cmd_train(cfg: dict, out: Path) -> None:
    train, test = load_data(cfg.get("dataset", {}))
    spec = _spec_for(train, cfg.get("hidden", [64]))
    seeds = cfg.get("seeds") or [cfg["seed"]]
    rows = []
    for seed in seeds:
        curve = []
        w = train_sgd(spec, train, _sgd(cfg, int(seed)), on_epoch=lambda e, l: curve.append((e, l)))
        save_checkpoint(w, out / f"model_seed{seed}.json")
        train_loss, train_acc = evaluate_weights(spec, w, train)
        test_loss, test_acc = evaluate_weights(spec, w, test)
        rows += [(seed, e, l) for e, l in curve]
        print(f"seed {seed}: train acc {train_acc:.4f}  test acc {test_acc:.4f}")
    with open(out / "training_curve.csv", "w", newline="") as fh:
        fh.write(TRAIN_SCHEMA + "\n")
        writer = csv.writer(fh)
        writer.writerow(["seed", "epoch", "mean_loss"])
        writer.writerows((s, e, repr(l)) for s, e, l in rows)


def cmd_connect(cfg: dict, out: Path) -> None:
    train, test = load_data(cfg.get("dataset", {}))
    a, b = (load_checkpoint(p) for p in cfg["endpoints"])
    models = [load_checkpoint(p) for p in cfg.get("models", [])] or None
    path = build_connection(cfg["method"], a, b, train, cfg, models)
    spec = a.spec
    summary = {"method": cfg["method"], "legs": len(path)}
    for name, data in (("train", train), ("test", test)):
        report = evaluate(path, spec, data, cfg["grid_points"])
        report.summary["method"] = cfg["method"]
        report.write_csv(out / f"path_{name}.csv")
        summary[name] = report.summary
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"{cfg['method']}: worst test accuracy {summary['test']['worst_accuracy']:.4f} over {len(path)} legs")


def _sweep_cell(job: tuple) -> list[tuple]:
    """Train one endpoint pair for one sweep value and run every method on it."""
    cfg, value, seed, train, test = job
    if cfg["axis"] == "width":
        hidden = [int(value)] * cfg.get("depth", 1)
    else:
        hidden = [cfg.get("width", 64)] * int(value)
    spec = _spec_for(train, hidden)
    count = max(2, cfg.get("models_per_set", 2))
    models = [train_sgd(spec, train, _sgd(cfg, 1000 * seed + i)) for i in range(count)]
    a, b = models[0], models[1]
    ends = float(np.mean([evaluate_weights(spec, w, test)[1] for w in (a, b)]))
    cell_cfg = {**cfg, "seed": seed}
    rows = []
    for method in cfg.get("methods", ["linear", "arc"]):
        path = build_connection(method, a, b, train, cell_cfg, models)
        rows.append((value, method, seed, evaluate(path, spec, test, cfg["grid_points"]).worst_accuracy, ends))
    return rows


def cmd_sweep(cfg: dict, out: Path) -> None:
    train, test = load_data(cfg.get("dataset", {}))
    seeds = [int(s) for s in cfg.get("seeds") or [cfg["seed"]]]
    jobs = [(cfg, v, s, train, test) for v in cfg["values"] for s in seeds]
    threads = _threads()
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_sweep_cell, jobs))
    else:
        results = [_sweep_cell(j) for j in jobs]
    cells = [row for rows in results for row in rows]

    with open(out / "sweep_cells.csv", "w", newline="") as fh:
        fh.write(SWEEP_SCHEMA + "\n")
        writer = csv.writer(fh)
        writer.writerow([cfg["axis"], "method", "seed", "worst_test_accuracy", "endpoint_test_accuracy"])
        writer.writerows((v, m, s, repr(w), repr(e)) for v, m, s, w, e in cells)
    with open(out / "sweep.csv", "w", newline="") as fh:
        fh.write(SWEEP_SCHEMA + "\n")
        writer = csv.writer(fh)
        writer.writerow([cfg["axis"], "method", "mean", "std", "endpoint_mean", "runs"])
        for value in cfg["values"]:
            for method in cfg.get("methods", ["linear", "arc"]):
                worst = [w for v, m, _, w, _ in cells if v == value and m == method]
                ends = [e for v, m, _, _, e in cells if v == value and m == method]
                writer.writerow([value, method, repr(float(np.mean(worst))), repr(float(np.std(worst))),
                                 repr(float(np.mean(ends))), len(worst)])
                print(f"{cfg['axis']}={value} {method}: {100 * np.mean(worst):.2f} ± {100 * np.std(worst):.2f}")


def cmd_ensemble(cfg: dict, out: Path) -> None:
    train, test = load_data(cfg.get("dataset", {}))
    members = [load_checkpoint(p) for p in cfg["members"]]
    split = cfg.get("split", 1)
    x = adjustment_features(train, cfg["adjust_cap"], cfg["seed"])
    spec = members[0].spec
    rows = []
    for count in range(1, len(members) + 1):
        e = build_wa_ensemble(members[:count], split, x)
        if count == len(members):
            e.save(out / "ensemble.json")
        row = {"members": count}
        for name, data in (("train", train), ("test", test)):
            z = ensemble_predict(e, data.features)
            member_losses = [cross_entropy(m, data.labels) for m in e.member_logits(data.features)]
            loss = cross_entropy(z, data.labels)
            probs = independent_predict_proba(members[:count], data.features)
            row[f"{name}_wa_accuracy"] = accuracy(z, data.labels)
            row[f"{name}_wa_loss"] = loss
            row[f"{name}_max_member_loss"] = max(member_losses)
            row[f"{name}_jensen_ok"] = loss <= max(member_losses) + 1e-12
            row[f"{name}_independent_accuracy"] = accuracy(probs, data.labels)
        row["best_member_test_accuracy"] = max(evaluate_weights(spec, m, test)[1] for m in members[:count])
        rows.append(row)
        print(f"K={count}: WA({split}) test {row['test_wa_accuracy']:.4f}  "
              f"independent {row['test_independent_accuracy']:.4f}  jensen {row['test_jensen_ok']}")
    with open(out / "ensemble.csv", "w", newline="") as fh:
        fh.write(ENSEMBLE_SCHEMA + "\n")
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def cmd_gen_data(cfg: dict, out: Path) -> None:
    ds = cfg.get("dataset", {})
    if ds.get("kind", "synthetic") != "synthetic":
        raise ConfigError("gen-data only generates synthetic datasets")
    keys = ("classes", "dim", "samples_per_class", "std", "seed", "radius")
    spec = SyntheticSpec(**{k: ds[k] for k in keys if k in ds})
    data = gen_synthetic(spec)
    np.savez(out / "dataset.npz", features=data.features, labels=data.labels, classes=data.classes)
    (out / "dataset_spec.json").write_text(json.dumps(asdict(spec), indent=2))
    print(f"wrote {len(data)} samples with {data.dim} features to {out / 'dataset.npz'}")


COMMANDS = {
    "train": cmd_train,
    "connect": cmd_connect,
    "sweep": cmd_sweep,
    "ensemble": cmd_ensemble,
    "gen-data": cmd_gen_data,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config; flags override its keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--grid-points", dest="grid_points", type=int, help="points per leg (default 25)")
    common.add_argument("--breakpoints", type=int, help="WA breakpoints (default 16)")
    common.add_argument("--adjust-cap", dest="adjust_cap", type=int, help="adjustment sample cap (default 4096)")

    parser = argparse.ArgumentParser(prog="modeconnect", description="Low-loss paths between trained networks")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common], help="train seeded endpoint models")
    p.add_argument("--seeds", type=int, nargs="+")
    p = sub.add_parser("connect", parents=[common], help="build and evaluate a path")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--endpoints", nargs=2)
    p = sub.add_parser("sweep", parents=[common], help="width or depth sweep")
    p.add_argument("--axis", choices=("width", "depth"))
    p.add_argument("--values", type=int, nargs="+")
    p.add_argument("--methods", nargs="+")
    p.add_argument("--seeds", type=int, nargs="+")
    p = sub.add_parser("ensemble", parents=[common], help="WA ensembles over member counts")
    p.add_argument("--members", nargs="+")
    p.add_argument("--split", type=int)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(cfg["out"])
        write_resolved(cfg, args.command, out)
        COMMANDS[args.command](cfg, out)
    except (ConfigError, ShapeError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError, IdxError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
