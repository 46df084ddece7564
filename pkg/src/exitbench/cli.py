"""exitbench command line: train, corrupt, trace, knn_build, adapt_bn,
eval, sweep, report.

Every command takes --config pointing at a strict JSON run config, plus
optional --out / --seed overrides and --threads. Commands communicate
through files under the run's out_dir, so each stage can be rerun or
inspected in isolation:

    checkpoint.npz            trained model + normalization stats
    train_log.csv             per-epoch loss and per-exit accuracy
    corrupted/<name>_s<k>/    corrupted copies of the test split
    traces/<split>.jsonl      per-sample per-exit logits (+ reprs)
    knn/exit_<i>.npz          per-exit neighbor indices over train reprs
    adapted/<name>_s<k>.npz   batch-norm-adapted checkpoints
    metrics/<split>_<cfg>.json  single-strategy metric reports
    curves/<split>.csv        threshold-sweep curves per strategy
    report/                   cross-split summary (json, csv, png)

JSON and CSV outputs are byte-identical across reruns with the same
config; PNG figures are excluded from that guarantee.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .adapt import adapt_batchnorm
from .config import load_run_config
from .corruptions import corrupt_dataset
from .data import (DatasetContainer, compute_norm_stats, gen_minishapes,
                   load_cifar10_bin, normalize, split_validation)
from .knn import FlatIndex, build_exit_indices
from .metrics import build_metrics_report
from .model import build_model, load_checkpoint, save_checkpoint
from .seeding import derive_rng, derive_seed
from .strategies import StrategyConfig, apply_strategy, default_k, sweep
from .traces import TraceMatrix, TraceRecord, read_traces, write_traces
from .train import train_joint
from .augmix import train_augmix_sdn

CURVE_COLUMNS = ("strategy", "threshold", "accuracy", "compute_fraction",
                 "CR", "UT_pct", "OT_pct")


# ---- small file helpers ----------------------------------------------


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _json_dump(obj, path):
    with open(path, "w", encoding="ascii") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def _fmt_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt_cell(row[c]) for c in columns))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def _read_curve_csv(path):
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    columns = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        row = {}
        for col, cell in zip(columns, cells):
            if col == "strategy":
                row[col] = cell
            elif cell == "":
                row[col] = None
            elif col == "threshold" and "." not in cell:
                row[col] = int(cell)
            else:
                row[col] = float(cell)
        rows.append(row)
    return rows


def _require(path, hint):
    if not os.path.exists(path):
        raise ValueError(f"missing input: {path} (run `exitbench {hint}` first)")
    return path


def _clean_floats(obj):
    """NaN -> None recursively so json stays strict."""
    if isinstance(obj, float):
        return None if obj != obj else obj
    if isinstance(obj, dict):
        return {k: _clean_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean_floats(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return _clean_floats(obj.item())
    return obj


# ---- dataset / checkpoint plumbing -----------------------------------


def _load_splits(config):
    ds = config.dataset
    if ds.kind == "minishapes":
        full = gen_minishapes(derive_seed(config.seed, "data", "train"),
                              ds.n_train, ds.num_classes, split="train")
        test = gen_minishapes(derive_seed(config.seed, "data", "test"),
                              ds.n_test, ds.num_classes, split="test")
    else:
        full = load_cifar10_bin(ds.train_path)
        test = load_cifar10_bin(ds.test_path)
    train, val = split_validation(full, ds.n_val,
                                  derive_seed(config.seed, "data", "val"))
    return train, val, test


def _checkpoint_path(config):
    return os.path.join(config.out_dir, "checkpoint.npz")


def _load_model(config, path=None):
    path = path or _require(_checkpoint_path(config), "train")
    model, meta = load_checkpoint(path)
    mean = np.asarray(meta["norm_mean"], dtype=np.float32)
    std = np.asarray(meta["norm_std"], dtype=np.float32)
    return model, meta, mean, std


def _corrupted_splits(config):
    """Sorted (split_name, directory) pairs under out_dir/corrupted."""
    root = os.path.join(config.out_dir, "corrupted")
    if not os.path.isdir(root):
        return []
    return [(name, os.path.join(root, name)) for name in sorted(os.listdir(root))
            if os.path.isdir(os.path.join(root, name))]


def _split_dir_name(spec):
    return f"{spec.name}_s{spec.severity}"


def _trace_path(config, split):
    return os.path.join(config.out_dir, "traces", f"{split}.jsonl")


def _forward_records(model, dataset, mean, std, source, include_repr,
                     batch_size=256):
    cost = np.asarray(model.exit_cost_fractions(), dtype=np.float64)
    images = normalize(dataset.images, mean, std)
    records = []
    for start in range(0, len(images), batch_size):
        batch = images[start:start + batch_size]
        if include_repr:
            logits, reprs = model.forward_all_exits(batch, need_repr=True)
        else:
            logits, reprs = model.forward_all_exits(batch), None
        stacked = np.stack(logits, axis=1).astype(np.float32)
        for j in range(len(batch)):
            rep = [r[j] for r in reprs] if reprs is not None else None
            records.append(TraceRecord(
                id=start + j,
                label=int(dataset.labels[start + j]),
                logits=stacked[j],
                cost=cost,
                source=source,
                repr=rep,
            ))
    return records


def _load_matrix(config, split, hint="trace"):
    records = read_traces(_require(_trace_path(config, split), hint))
    if not records:
        raise ValueError(f"trace file for split {split!r} is empty")
    return records, TraceMatrix(records)


def _load_indices(config):
    knn_dir = os.path.join(config.out_dir, "knn")
    _require(knn_dir, "knn_build")
    indices = []
    for i in range(len(os.listdir(knn_dir))):
        indices.append(FlatIndex.load(
            _require(os.path.join(knn_dir, f"exit_{i + 1}.npz"), "knn_build")))
    return indices


# ---- commands --------------------------------------------------------


def cmd_train(config):
    train, val, _ = _load_splits(config)
    rng = derive_rng(config.seed, "init")
    model = build_model(config.model.arch, num_classes=train.num_classes,
                        input_shape=train.images.shape[1:], rng=rng,
                        fractions=config.model.exit_fractions)
    tc = dataclasses.replace(config.train,
                             seed=derive_seed(config.seed, "train"))
    if config.augmix_enabled:
        model, log = train_augmix_sdn(model, train, val, tc, config.augmix)
    else:
        model, log = train_joint(model, train, val, tc)
    mean, std = compute_norm_stats(train.images)

    _ensure_dir(config.out_dir)
    meta = {
        "arch": config.model.arch,
        "num_classes": train.num_classes,
        "norm_mean": [float(x) for x in mean],
        "norm_std": [float(x) for x in std],
        "augmix": bool(config.augmix_enabled),
        "seed": config.seed,
    }
    save_checkpoint(model, _checkpoint_path(config), meta=meta)

    num_exits = model.num_exits
    columns = (["epoch", "lr", "train_loss"]
               + [f"train_acc_exit{i + 1}" for i in range(num_exits)]
               + [f"val_acc_exit{i + 1}" for i in range(num_exits)])
    rows = []
    for entry in log:
        row = {"epoch": entry["epoch"], "lr": entry["lr"],
               "train_loss": entry["train_loss"]}
        for i in range(num_exits):
            row[f"train_acc_exit{i + 1}"] = entry["train_acc"][i]
            row[f"val_acc_exit{i + 1}"] = entry["val_acc"][i]
        rows.append(row)
    _write_csv(os.path.join(config.out_dir, "train_log.csv"), columns, rows)
    final = log[-1]["val_acc"][-1] if log else float("nan")
    print(f"trained {config.model.arch} for {len(log)} epochs; "
          f"final-exit val accuracy {final:.4f}")
    print(f"wrote {_checkpoint_path(config)}")
    return 0


def cmd_corrupt(config):
    if not config.corruptions:
        raise ValueError("config lists no corruptions")
    _, _, test = _load_splits(config)
    out_root = _ensure_dir(os.path.join(config.out_dir, "corrupted"))
    corrupted = corrupt_dataset(test, config.corruptions,
                                derive_seed(config.seed, "corrupt"))
    for (name, severity), dataset in sorted(corrupted.items()):
        dest = os.path.join(out_root, f"{name}_s{severity}")
        dataset.save(dest)
        print(f"wrote {dest} ({len(dataset)} images)")
    return 0


def cmd_trace(config):
    model, _, mean, std = _load_model(config)
    train, val, test = _load_splits(config)
    _ensure_dir(os.path.join(config.out_dir, "traces"))

    jobs = [("train", train, "clean", True),
            ("val", val, "clean", config.include_repr),
            ("test", test, "clean", config.include_repr)]
    for split, directory in _corrupted_splits(config):
        dataset = DatasetContainer.load(directory)
        source = f"{dataset.meta['corruption']}:{dataset.meta['severity']}"
        jobs.append((split, dataset, source, config.include_repr))

    for split, dataset, source, include_repr in jobs:
        records = _forward_records(model, dataset, mean, std, source,
                                   include_repr)
        path = _trace_path(config, split)
        write_traces(records, path)
        print(f"wrote {path} ({len(records)} records)")
    return 0


def cmd_knn_build(config):
    _, matrix = _load_matrix(config, "train")
    if matrix.reprs is None:
        raise ValueError("train traces carry no representations; "
                         "enable trace.include_repr and rerun `exitbench trace`")
    logits_per_exit = [matrix.logits[:, e, :] for e in range(matrix.num_exits)]
    indices = build_exit_indices(matrix.reprs, logits_per_exit)
    out = _ensure_dir(os.path.join(config.out_dir, "knn"))
    for i, index in enumerate(indices):
        path = os.path.join(out, f"exit_{i + 1}.npz")
        index.save(path)
        print(f"wrote {path} ({index.count} vectors, dim {index.dim})")
    return 0


def cmd_adapt_bn(config):
    splits = _corrupted_splits(config)
    if not splits:
        raise ValueError(
            f"no corrupted splits under "
            f"{os.path.join(config.out_dir, 'corrupted')} "
            f"(run `exitbench corrupt` first)")
    checkpoint = _require(_checkpoint_path(config), "train")
    _ensure_dir(os.path.join(config.out_dir, "adapted"))
    _ensure_dir(os.path.join(config.out_dir, "traces"))
    for split, directory in splits:
        model, meta, mean, std = _load_model(config, checkpoint)
        dataset = DatasetContainer.load(directory)
        adapt_batchnorm(model, normalize(dataset.images, mean, std),
                        config.adapt)
        out_path = os.path.join(config.out_dir, "adapted", f"{split}.npz")
        adapted_meta = dict(meta)
        adapted_meta["adapted_on"] = split
        save_checkpoint(model, out_path, meta=adapted_meta)
        source = f"{dataset.meta['corruption']}:{dataset.meta['severity']}"
        records = _forward_records(model, dataset, mean, std, source,
                                   config.include_repr)
        trace_path = _trace_path(config, f"adapted_{split}")
        write_traces(records, trace_path)
        print(f"wrote {out_path} and {trace_path}")
    return 0


def _strategy_config(config, kind, threshold, num_classes):
    k = config.strategies.k or default_k(num_classes)
    if kind == "oracle":
        return StrategyConfig("oracle"), None
    if kind == "confidence":
        return StrategyConfig("confidence", tau_c=float(threshold)), None
    if kind == "patience":
        return StrategyConfig("patience", patience_t=int(threshold)), None
    if kind == "knn":
        return (StrategyConfig("knn", k=k, tau_a=float(threshold)),
                _load_indices(config))
    raise ValueError(f"unknown strategy kind {kind!r}")


def cmd_eval(config):
    split = config.eval.split
    records, matrix = _load_matrix(config, split)
    strategy, indices = _strategy_config(config, config.eval.kind,
                                         config.eval.threshold,
                                         matrix.num_classes)
    decisions = apply_strategy(records, strategy, indices=indices)
    report = build_metrics_report(matrix, decisions, config.eval.kind,
                                  strategy.threshold)
    out = _ensure_dir(os.path.join(config.out_dir, "metrics"))
    suffix = "" if strategy.threshold is None else \
        "_" + str(strategy.threshold).replace(".", "p")
    path = os.path.join(out, f"{split}_{config.eval.kind}{suffix}.json")
    _json_dump(report.to_json_dict(), path)
    print(f"wrote {path}")
    print(f"split={split} strategy={config.eval.kind} "
          f"threshold={strategy.threshold} "
          f"accuracy={report.accuracy:.4f} CR={report.cr:.2f} "
          f"oracle_accuracy={report.oracle_accuracy:.4f}")
    return 0


def _sweep_split(config, split):
    records, matrix = _load_matrix(config, split)
    rows = []
    for kind in config.strategies.kinds:
        indices = _load_indices(config) if kind == "knn" else None
        grid = None if kind == "oracle" else config.strategies.grids[kind]
        k = config.strategies.k or default_k(matrix.num_classes)
        rows.extend(sweep(records, kind, grid=grid, indices=indices, k=k))
    return rows


def _sweepable_splits(config):
    root = os.path.join(config.out_dir, "traces")
    _require(root, "trace")
    splits = [f[:-len(".jsonl")] for f in sorted(os.listdir(root))
              if f.endswith(".jsonl")]
    return [s for s in splits if s != "train"]


def cmd_sweep(config):
    out = _ensure_dir(os.path.join(config.out_dir, "curves"))
    for split in _sweepable_splits(config):
        rows = _sweep_split(config, split)
        path = os.path.join(out, f"{split}.csv")
        _write_csv(path, CURVE_COLUMNS, rows)
        print(f"wrote {path} ({len(rows)} points)")
    return 0


def _split_block(config, split):
    """Per-split summary joining the sweep curve with trace-level
    per-exit metrics."""
    from .metrics import EvalUniverse, per_exit_rmsce, inconsistency

    curve = _read_curve_csv(
        _require(os.path.join(config.out_dir, "curves", f"{split}.csv"),
                 "sweep"))
    _, matrix = _load_matrix(config, split, hint="trace")
    universe = EvalUniverse.from_matrix(matrix)
    rmsce = per_exit_rmsce(matrix.logits, matrix.labels)
    incons = inconsistency(universe.correct)
    per_exit_acc = universe.correct.mean(axis=0)

    oracle_rows = [r for r in curve if r["strategy"] == "oracle"]
    practical = [r for r in curve if r["strategy"] != "oracle"]
    best = max(practical, key=lambda r: r["accuracy"]) if practical else None
    block = {
        "num_samples": len(matrix),
        "oracle_accuracy": universe.oracle_accuracy,
        "per_exit_accuracy": [float(a) for a in per_exit_acc],
        "per_exit_rmsce": list(rmsce),
        "mean_rmsce": float(np.mean(rmsce)),
        "per_exit_inconsistency": [float(v) for v in incons],
        "curve": curve,
    }
    if oracle_rows:
        block["oracle_compute_fraction"] = oracle_rows[0]["compute_fraction"]
        block["oracle_CR"] = oracle_rows[0]["CR"]
    if best is not None:
        block["best_practical"] = dict(best)
        block["gap"] = universe.oracle_accuracy - best["accuracy"]
    return block


def _mean_blocks(blocks):
    """Average numeric per-split summaries (uniform over splits)."""
    if not blocks:
        return {}
    out = {"num_splits": len(blocks)}
    for key in ("oracle_accuracy", "mean_rmsce", "gap", "oracle_CR",
                "oracle_compute_fraction"):
        values = [b[key] for b in blocks if key in b]
        if values:
            out[key] = float(np.mean(values))
    for key in ("per_exit_accuracy", "per_exit_rmsce"):
        out[key] = np.mean([b[key] for b in blocks], axis=0).tolist()
    incons = np.array([b["per_exit_inconsistency"] for b in blocks],
                      dtype=np.float64)
    with np.errstate(invalid="ignore"):
        out["per_exit_inconsistency"] = np.nanmean(incons, axis=0).tolist()
    if all("best_practical" in b for b in blocks):
        out["best_practical_accuracy"] = float(
            np.mean([b["best_practical"]["accuracy"] for b in blocks]))
    curves = [b["curve"] for b in blocks]
    mean_curve = []
    for i, row in enumerate(curves[0]):
        peers = [c[i] for c in curves]
        if any(p["strategy"] != row["strategy"] or
               p["threshold"] != row["threshold"] for p in peers):
            continue
        merged = {"strategy": row["strategy"], "threshold": row["threshold"]}
        for col in ("accuracy", "compute_fraction", "CR", "UT_pct", "OT_pct"):
            merged[col] = float(np.mean([p[col] for p in peers]))
        mean_curve.append(merged)
    out["curve"] = mean_curve
    return out


def cmd_report(config):
    from .plotting import (plot_accuracy_compute, plot_per_exit,
                           plot_threshold_curves)

    corrupted_names = [s for s, _ in _corrupted_splits(config)]
    clean = _split_block(config, "test")
    corrupted = {s: _split_block(config, s) for s in corrupted_names}
    adapted = {}
    for s in corrupted_names:
        if os.path.exists(_trace_path(config, f"adapted_{s}")):
            adapted[s] = _split_block(config, f"adapted_{s}")

    report = {
        "clean": clean,
        "corrupted": corrupted,
        "corrupted_mean": _mean_blocks(list(corrupted.values())),
        "adapted": adapted,
        "adapted_mean": _mean_blocks(list(adapted.values())),
    }

    out = _ensure_dir(os.path.join(config.out_dir, "report"))
    _json_dump(_clean_floats(report), os.path.join(out, "report.json"))

    columns = ("split", "oracle_accuracy", "best_strategy", "best_threshold",
               "best_accuracy", "gap", "mean_rmsce", "oracle_CR", "best_CR")
    rows = []
    named = [("test", clean)]
    named += [(s, b) for s, b in sorted(corrupted.items())]
    if corrupted:
        named.append(("corrupted_mean", report["corrupted_mean"]))
    named += [(f"adapted_{s}", b) for s, b in sorted(adapted.items())]
    for split, block in named:
        best = block.get("best_practical")
        rows.append({
            "split": split,
            "oracle_accuracy": block.get("oracle_accuracy"),
            "best_strategy": (best or {}).get("strategy"),
            "best_threshold": (best or {}).get("threshold"),
            "best_accuracy": (best or {}).get("accuracy",
                                              block.get("best_practical_accuracy")),
            "gap": block.get("gap"),
            "mean_rmsce": block.get("mean_rmsce"),
            "oracle_CR": block.get("oracle_CR"),
            "best_CR": (best or {}).get("CR"),
        })
    _write_csv(os.path.join(out, "report.csv"), columns, rows)

    groups = {"clean": clean}
    if corrupted:
        groups["corrupted_mean"] = report["corrupted_mean"]
    if adapted:
        groups["adapted_mean"] = report["adapted_mean"]
    plot_accuracy_compute({k: v["curve"] for k, v in groups.items()},
                          os.path.join(out, "accuracy_vs_compute.png"))
    plot_per_exit({k: v["per_exit_rmsce"] for k, v in groups.items()},
                  os.path.join(out, "rmsce_per_exit.png"),
                  "RMSCE", "per-exit calibration error")
    plot_per_exit({k: v["per_exit_inconsistency"] for k, v in groups.items()},
                  os.path.join(out, "inconsistency_per_exit.png"),
                  "inconsistency", "per-exit prediction inconsistency")
    plot_threshold_curves({k: v["curve"] for k, v in groups.items()},
                          os.path.join(out, "ut_ot_vs_threshold.png"))
    for name in ("report.json", "report.csv", "accuracy_vs_compute.png",
                 "rmsce_per_exit.png", "inconsistency_per_exit.png",
                 "ut_ot_vs_threshold.png"):
        print(f"wrote {os.path.join(out, name)}")
    return 0


# ---- entry point -----------------------------------------------------

COMMANDS = {
    "train": cmd_train,
    "corrupt": cmd_corrupt,
    "trace": cmd_trace,
    "knn_build": cmd_knn_build,
    "adapt_bn": cmd_adapt_bn,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="exitbench",
        description="multi-exit classifier benchmark pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help="path to a JSON run config")
        p.add_argument("--out", default=None,
                       help="override the config's out_dir")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's root seed")
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS thread pools (exported as env vars)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        config = load_run_config(args.config)
        if args.out is not None:
            config = dataclasses.replace(config, out_dir=args.out)
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
        return COMMANDS[args.command](config)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
