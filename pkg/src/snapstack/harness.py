"""Experiment orchestration and the command-line interface.

Subcommands: train, sweep-temp, sweep-offset, compare, report. Every command
is deterministic given (config, seed); CSV payloads carry no timestamps. Exit
codes: 0 success, 1 validation error, 2 runtime/training error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import SplitSpec, fingerprint, load_idx, make_blobs, split
from .errors import (
    FormatError,
    InputError,
    SelectionError,
    TrainingError,
)
from .nn import Dataset, MlpArchitecture
from .schedule import CycleConfig, cycle_minima
from .snapshots import (
    Snapshot,
    SnapshotStore,
    load_store,
    plan_captures,
    save_store,
    select_mid,
    select_min,
    select_offset,
    select_window,
    train_with_capture,
)
from .stacking import (
    WeightingSpec,
    build_ensemble,
    ensemble_predictor,
    evaluate,
    model_predictor,
    swa_average,
    weights_equal,
    weights_temperature,
)

# test partitions reuse the training cluster geometry but a disjoint noise stream
TEST_SEED_OFFSET = 1_000_003

DEFAULT_TAU_GRID = (0.1, 0.3, 0.5, 0.9, 1.0, 2.0, 5.0, 10.0, 1000.0)

POLICIES = ("min", "mid", "min+mid", "window", "offset")

SWEEP_COLUMNS = ("tau", "n_models", "accuracy", "mean_nll", "policy", "source")
OFFSET_COLUMNS = ("offset", "tau", "n_models", "accuracy", "mean_nll", "policy", "source")
COMPARE_COLUMNS = ("model", "type", "n_models", "tau", "accuracy", "mean_nll")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    hidden: tuple[int, ...]
    cycle: CycleConfig
    seed: int
    val_fraction: float = 0.2
    batch_size: int = 32
    window_halfwidth: int = 0
    offsets: tuple[int, ...] = ()
    offset_steps: int = 10
    tau_grid: tuple[float, ...] = DEFAULT_TAU_GRID
    n_models_grid: tuple[int, ...] | None = None
    num_independent: int = 5
    weighting_source: str = "train"

    def __post_init__(self):
        if any(tau <= 0.0 for tau in self.tau_grid):
            raise InputError("temperature grid values must be positive")
        if self.weighting_source not in ("train", "validation"):
            raise InputError(f"unknown weighting source {self.weighting_source!r}")
        if self.num_independent < 1:
            raise InputError("num_independent must be at least 1")
        if self.n_models_grid is not None:
            bad = [n for n in self.n_models_grid if n < 1 or n > self.cycle.num_cycles]
            if bad:
                raise InputError(
                    f"ensemble sizes {bad} outside [1, {self.cycle.num_cycles} cycles]"
                )

    @property
    def n_grid(self) -> tuple[int, ...]:
        if self.n_models_grid is not None:
            return self.n_models_grid
        return tuple(range(1, self.cycle.num_cycles + 1))


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate a config from parsed JSON."""
    try:
        dataset = dict(raw["dataset"])
        kind = dataset.get("kind")
        if kind not in ("blobs", "idx"):
            raise InputError(f"dataset.kind must be 'blobs' or 'idx', got {kind!r}")
        return ExperimentConfig(
            dataset=dataset,
            hidden=tuple(int(h) for h in raw.get("hidden", (32,))),
            cycle=CycleConfig(
                alpha_min=float(raw["cycle"]["alpha_min"]),
                alpha_max=float(raw["cycle"]["alpha_max"]),
                cycle_len=int(raw["cycle"]["cycle_len"]),
                total_iters=int(raw["cycle"]["total_iters"]),
            ),
            seed=int(raw["seed"]),
            val_fraction=float(raw.get("val_fraction", 0.2)),
            batch_size=int(raw.get("batch_size", 32)),
            window_halfwidth=int(raw.get("window_halfwidth", 0)),
            offsets=tuple(int(o) for o in raw.get("offsets", ())),
            offset_steps=int(raw.get("offset_steps", 10)),
            tau_grid=tuple(float(t) for t in raw.get("tau_grid", DEFAULT_TAU_GRID)),
            n_models_grid=(
                tuple(int(n) for n in raw["n_models_grid"])
                if raw.get("n_models_grid") is not None
                else None
            ),
            num_independent=int(raw.get("num_independent", 5)),
            weighting_source=str(raw.get("weighting_source", "train")),
        )
    except KeyError as e:
        raise InputError(f"config missing required key: {e}") from e
    except (TypeError, ValueError) as e:
        raise InputError(f"malformed config value: {e}") from e


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: config is not valid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise InputError(f"{path}: config must be a JSON object")
    return config_from_dict(raw)


def build_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset, MlpArchitecture]:
    """Materialize (train, val, test) and the matching architecture."""
    ds = config.dataset
    if ds["kind"] == "blobs":
        try:
            k = int(ds["num_classes"])
            per_class = int(ds["per_class"])
            dim = int(ds["dim"])
            spread = float(ds["spread"])
            test_per_class = int(ds.get("test_per_class", per_class))
        except KeyError as e:
            raise InputError(f"blobs dataset config missing key: {e}") from e
        except (TypeError, ValueError) as e:
            raise InputError(f"malformed blobs dataset config: {e}") from e
        pool = make_blobs(k, per_class, dim, spread, seed=config.seed, centers_seed=config.seed)
        train, val = split(pool, SplitSpec(config.val_fraction, config.seed))
        test = make_blobs(
            k, test_per_class, dim, spread,
            seed=config.seed + TEST_SEED_OFFSET, centers_seed=config.seed,
        )
    else:
        try:
            paths = [ds["train_images"], ds["train_labels"], ds["test_images"], ds["test_labels"]]
            limit = int(ds["limit"]) if ds.get("limit") is not None else None
            test_limit = int(ds["test_limit"]) if ds.get("test_limit") is not None else None
            k = int(ds["num_classes"]) if ds.get("num_classes") is not None else None
        except KeyError as e:
            raise InputError(f"idx dataset config missing key: {e}") from e
        except (TypeError, ValueError) as e:
            raise InputError(f"malformed idx dataset config: {e}") from e
        pool = load_idx(paths[0], paths[1], limit=limit, num_classes=k)
        test = load_idx(
            paths[2], paths[3], limit=test_limit,
            num_classes=k if k is not None else pool.num_classes,
        )
        train, val = split(pool, SplitSpec(config.val_fraction, config.seed))
    arch = MlpArchitecture((train.dim, *config.hidden, train.num_classes))
    return train, val, test, arch


def policy_snapshots(
    store: SnapshotStore, policy: str, config: ExperimentConfig
) -> list[Snapshot]:
    if policy == "min":
        return select_min(store)
    if policy == "mid":
        return select_mid(store)
    if policy == "min+mid":
        merged = select_min(store) + select_mid(store)
        return sorted(merged, key=lambda s: s.iteration)
    if policy == "window":
        return select_window(store, config.window_halfwidth)
    if policy == "offset":
        return select_offset(store, config.offset_steps)
    raise InputError(f"unknown policy {policy!r}, expected one of {POLICIES}")


def _fmt(v) -> str:
    # repr keeps the full float and round-trips, so reruns are byte-identical
    return repr(v) if isinstance(v, float) else str(v)


def _write_csv(path: Path, columns: tuple[str, ...], rows: list[tuple]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _full_plan(config: ExperimentConfig) -> dict[int, str]:
    offsets = set(config.offsets) | {config.offset_steps}
    return plan_captures(
        config.cycle,
        include_min=True,
        include_mid=True,
        window_halfwidth=config.window_halfwidth,
        offsets=sorted(offsets),
        include_final=True,
    )


def cmd_train(config: ExperimentConfig, out_dir: str | Path, store_name: str = "store.snap") -> Path:
    """Train once with the full capture plan; write the store and its sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.cycle.cycle_len < 4:
        warnings.warn(f"degenerate cycle_len {config.cycle.cycle_len}: schedule has almost no descent")
    train, val, _, arch = build_datasets(config)
    plan = _full_plan(config)
    t0 = time.perf_counter()
    store = train_with_capture(
        arch, train, val, config.cycle, config.seed, plan, batch_size=config.batch_size
    )
    elapsed = time.perf_counter() - t0
    path = out_dir / store_name
    save_store(store, path)
    for i, m in enumerate(cycle_minima(config.cycle), start=1):
        snap = store.get(m)
        if snap is not None:
            print(
                f"cycle {i:2d}  iter {m:6d}  train_nll {snap.train_nll:.4f}  "
                f"val_nll {snap.val_nll:.4f}"
            )
    print(f"saved {len(store.snapshots)} snapshots to {path} ({elapsed:.1f}s)")
    return path


def _check_store_matches(store: SnapshotStore, train: Dataset, val: Dataset) -> None:
    if store.train_fingerprint != fingerprint(train) or store.val_fingerprint != fingerprint(val):
        warnings.warn(
            "store was trained on different data than this config produces; "
            "weights may be stale"
        )


def cmd_sweep_temperature(
    config: ExperimentConfig,
    store: SnapshotStore,
    policy: str,
    source: str,
    out_dir: str | Path,
    tau_grid: tuple[float, ...] | None = None,
    n_grid: tuple[int, ...] | None = None,
) -> Path:
    """Accuracy over the (temperature, ensemble size) grid for one policy.

    For each cell the LAST n snapshots of the policy (the most recent cycles)
    are stacked with temperature weights and scored on the held-out test set.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, val, test, _ = build_datasets(config)
    _check_store_matches(store, train, val)
    snaps = policy_snapshots(store, policy, config)
    taus = tau_grid if tau_grid is not None else config.tau_grid
    sizes = n_grid if n_grid is not None else config.n_grid
    rows = []
    for tau in taus:
        for n in sizes:
            if n > len(snaps):
                warnings.warn(f"policy {policy!r} has {len(snaps)} snapshots, skipping n={n}")
                continue
            ens = build_ensemble(snaps[-n:], WeightingSpec("temperature", tau=tau, source=source))
            met = evaluate(ensemble_predictor(ens), test)
            rows.append((float(tau), n, met.accuracy, met.mean_nll, policy, source))
    path = out_dir / f"sweep_temp_{policy.replace('+', '_')}_{source}.csv"
    _write_csv(path, SWEEP_COLUMNS, rows)
    return path


def cmd_sweep_offset(
    config: ExperimentConfig,
    store: SnapshotStore,
    out_dir: str | Path,
    offsets: tuple[int, ...] | None = None,
    tau: float = 1.0,
    source: str | None = None,
) -> Path:
    """Accuracy per capture offset from the rate minima, at a fixed temperature."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, val, test, _ = build_datasets(config)
    _check_store_matches(store, train, val)
    offs = offsets if offsets is not None else config.offsets
    src = source if source is not None else config.weighting_source
    rows = []
    for steps in offs:
        try:
            snaps = select_offset(store, steps)
        except SelectionError as e:
            warnings.warn(f"offset {steps} skipped: {e}")
            continue
        ens = build_ensemble(snaps, WeightingSpec("temperature", tau=tau, source=src))
        met = evaluate(ensemble_predictor(ens), test)
        rows.append((steps, float(tau), len(snaps), met.accuracy, met.mean_nll, "offset", src))
    path = out_dir / "sweep_offset.csv"
    _write_csv(path, OFFSET_COLUMNS, rows)
    return path


def _best_tau(tau_grid: tuple[float, ...], test: Dataset, predict_of_tau):
    """Scan the grid, keep the first tau with the highest accuracy."""
    best = None
    for tau in tau_grid:
        met = evaluate(predict_of_tau(tau), test)
        if best is None or met.accuracy > best[1].accuracy:
            best = (float(tau), met)
    return best


def cmd_compare(config: ExperimentConfig, out_dir: str | Path) -> dict:
    """Comparison table: single model, independent ensemble, snapshot and SWA rows.

    Every snapshot and SWA row derives from ONE capture run; only the
    independent-ensemble baseline trains additional models.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, val, test, arch = build_datasets(config)

    t0 = time.perf_counter()
    store = train_with_capture(
        arch, train, val, config.cycle, config.seed, _full_plan(config),
        batch_size=config.batch_size,
    )
    snapshot_train_time = time.perf_counter() - t0

    rows: list[tuple] = []
    final = store.get(config.cycle.total_iters - 1)
    single = evaluate(model_predictor(final.params), test)
    rows.append(("single", "-", 1, "-", single.accuracy, single.mean_nll))

    t0 = time.perf_counter()
    finals = []
    last = config.cycle.total_iters - 1
    for i in range(config.num_independent):
        run = train_with_capture(
            arch, train, val, config.cycle, config.seed + i, {last: "window"},
            batch_size=config.batch_size,
        )
        finals.append(run.get(last))
    independent_train_time = time.perf_counter() - t0
    ens = build_ensemble(finals, WeightingSpec("equal"))
    met = evaluate(ensemble_predictor(ens), test)
    rows.append(("ensemble", "individual", len(finals), "-", met.accuracy, met.mean_nll))

    src = config.weighting_source
    for policy in ("min", "min+mid", "offset"):
        try:
            snaps = policy_snapshots(store, policy, config)
        except SelectionError as e:
            warnings.warn(f"policy {policy!r} skipped: {e}")
            continue
        met = evaluate(ensemble_predictor(build_ensemble(snaps, WeightingSpec("equal"))), test)
        rows.append(("snapshot", f"{policy}, eq", len(snaps), "-", met.accuracy, met.mean_nll))
        tau, met = _best_tau(
            config.tau_grid, test,
            lambda tau: ensemble_predictor(
                build_ensemble(snaps, WeightingSpec("temperature", tau=tau, source=src))
            ),
        )
        rows.append(("snapshot", f"{policy}, stack", len(snaps), tau, met.accuracy, met.mean_nll))

    swa_snaps = select_min(store)
    log_liks = np.array(
        [-(s.train_nll if src == "train" else s.val_nll) for s in swa_snaps]
    )
    met = evaluate(
        model_predictor(swa_average(swa_snaps, weights_equal(len(swa_snaps)))), test
    )
    rows.append(("swa", "min, eq", len(swa_snaps), "-", met.accuracy, met.mean_nll))
    tau, met = _best_tau(
        config.tau_grid, test,
        lambda tau: model_predictor(
            swa_average(swa_snaps, weights_temperature(log_liks, tau))
        ),
    )
    rows.append(("swa", "min, stack", len(swa_snaps), tau, met.accuracy, met.mean_nll))

    csv_path = out_dir / "compare.csv"
    _write_csv(csv_path, COMPARE_COLUMNS, rows)
    md_path = out_dir / "compare.md"
    md_path.write_text(_compare_markdown(rows))
    return {
        "rows": rows,
        "csv_path": csv_path,
        "md_path": md_path,
        "snapshot_trainings": 1,
        "independent_trainings": config.num_independent,
        "snapshot_train_time": snapshot_train_time,
        "independent_train_time": independent_train_time,
    }


def _compare_markdown(rows: list[tuple]) -> str:
    lines = [
        "| Model | Type | Models | tau | Accuracy | Mean NLL |",
        "|---|---|---|---|---|---|",
    ]
    for model, kind, n, tau, acc, nll in rows:
        tau_s = tau if isinstance(tau, str) else f"{tau:g}"
        lines.append(f"| {model} | {kind} | {n} | {tau_s} | {acc:.4f} | {nll:.4f} |")
    return "\n".join(lines) + "\n"


def _read_csv(path: Path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise FormatError(f"{path}: empty CSV")
        return list(reader.fieldnames), list(reader)


def cmd_report(csv_paths: list[str | Path], out_path: str | Path) -> Path:
    """Markdown summary: best cells per sweep CSV plus any comparison tables."""
    out_path = Path(out_path)
    sections = []
    for raw_path in csv_paths:
        path = Path(raw_path)
        columns, rows = _read_csv(path)
        for required in ("accuracy", "mean_nll"):
            if required not in columns:
                raise FormatError(f"{path}: missing required column {required!r}")
        if not rows:
            raise FormatError(f"{path}: no data rows")
        sections.append(f"## {path.name}\n")
        if "model" in columns:
            # comparison table: reproduce it whole
            sections.append("| " + " | ".join(columns) + " |")
            sections.append("|" + "---|" * len(columns))
            for r in rows:
                sections.append("| " + " | ".join(r[c] for c in columns) + " |")
            sections.append("")
        try:
            accuracies = [float(r["accuracy"]) for r in rows]
        except (TypeError, ValueError) as e:
            raise FormatError(f"{path}: column 'accuracy' is not numeric ({e})") from e
        best_acc = max(accuracies)
        best_rows = [r for r, a in zip(rows, accuracies) if a == best_acc]
        label_cols = [c for c in columns if c not in ("accuracy", "mean_nll")]
        sections.append(f"Best accuracy: {best_acc}")
        for r in best_rows:
            desc = ", ".join(f"{c}={r[c]}" for c in label_cols)
            sections.append(f"- {desc} (mean_nll={r['mean_nll']})")
        sections.append("")
    out_path.write_text("# Results\n\n" + "\n".join(sections))
    return out_path


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snapstack",
        description="Snapshot ensembling with training-time likelihood stacking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out-dir", default="out", help="output directory")

    p = sub.add_parser("train", help="train once and write the snapshot store")
    add_common(p)

    p = sub.add_parser("sweep-temp", help="temperature x ensemble-size sweep")
    add_common(p)
    p.add_argument("--store", required=True, help="snapshot store file")
    p.add_argument("--policy", default="min", choices=POLICIES)
    p.add_argument("--source", default="train", choices=("train", "validation"))

    p = sub.add_parser("sweep-offset", help="accuracy vs capture offset from the minima")
    add_common(p)
    p.add_argument("--store", required=True, help="snapshot store file")
    p.add_argument("--tau", type=float, default=1.0)

    p = sub.add_parser("compare", help="comparison table across ensembling methods")
    add_common(p)

    p = sub.add_parser("report", help="summarize sweep/compare CSVs as Markdown")
    p.add_argument("csvs", nargs="+", help="CSV files produced by the sweep commands")
    p.add_argument("--out", default="report.md", help="output Markdown file")
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "report":
        out = cmd_report(args.csvs, args.out)
        print(f"wrote {out}")
        return 0

    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)

    if args.command == "train":
        cmd_train(config, args.out_dir)
    elif args.command == "sweep-temp":
        store = load_store(args.store)
        out = cmd_sweep_temperature(config, store, args.policy, args.source, args.out_dir)
        print(f"wrote {out}")
    elif args.command == "sweep-offset":
        store = load_store(args.store)
        out = cmd_sweep_offset(config, store, args.out_dir, tau=args.tau)
        print(f"wrote {out}")
    elif args.command == "compare":
        result = cmd_compare(config, args.out_dir)
        print(f"wrote {result['csv_path']} and {result['md_path']}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainingError, SelectionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
