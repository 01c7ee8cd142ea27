"""``trompt`` command line: prepare, train, evaluate, importance, synth, gridsearch.

Every command accepts ``--config FILE`` with a flat TOML document whose keys
are the long flag names (dashes or underscores); explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import tomli

from . import data as dp
from .layers import CheckpointError
from .model import CLASSIFICATION, REGRESSION, ConfigError, LabelError, ModelConfig, TromptModel, schema_hash
from .search import HarnessError, SearchSpace, config_id, enumerate_space, rank_results, run_grid, write_summary
from .train import PRECISIONS, DivergenceError, TrainConfig, TrainConfigError, evaluate, fit

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_TRAIN = 4

MANIFEST = "manifest.json"
CHECKPOINT = "model.ckpt"


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _fractions(text: str):
    try:
        parts = tuple(float(p) for p in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"fractions must be comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("fractions need exactly three values")
    return parts


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat TOML file of flag values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--precision", choices=sorted(PRECISIONS), default="f32")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--d", type=int, default=128, help="embedding width")
    g.add_argument("--prompts", type=int, default=128, help="number of prompts P")
    g.add_argument("--layers", type=int, default=6, help="number of cells L")
    g.add_argument("--importance-combine", choices=("concat", "add"), default="concat")
    g.add_argument("--importance-dense", type=_bool, default=True)
    g.add_argument("--importance-residual", type=_bool, default=True)
    g.add_argument("--importance-share-dense", type=_bool, default=True)
    g.add_argument("--feature-expand-dense", type=_bool, default=True)
    g.add_argument("--feature-expand-residual", type=_bool, default=True)
    g.add_argument("--connect-prev-output", type=_bool, default=True)
    g.add_argument("--column-embeddings-independent", type=_bool, default=True)


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=100)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--batch-ratio", type=float, default=0.01)
    g.add_argument("--min-batch", type=int, default=32)
    g.add_argument("--patience", type=int, default=None)
    g.add_argument("--checkpoint-policy", choices=("best", "last"), default="best")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trompt", description="Prompt-based tabular model toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="normalize, split and encode a CSV into a dataset cache")
    _shared(p)
    p.add_argument("--csv", type=Path, required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--task", choices=(CLASSIFICATION, REGRESSION), required=True)
    p.add_argument("--size-cap", choices=sorted(dp.SIZE_CAPS), default="medium")
    p.add_argument("--target-transform", choices=("none", "standardize", "quantile_normal"), default=None)
    p.add_argument("--fractions", type=_fractions, default=(0.7, 0.15, 0.15))
    p.add_argument("--categorical", nargs="*", default=[], help="columns forced categorical")
    p.add_argument("--numerical", nargs="*", default=[], help="columns forced numerical")

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    _shared(p)
    p.add_argument("--data", type=Path, required=True, help="directory written by prepare")
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    _shared(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=dp.SPLITS, default="test")

    p = sub.add_parser("importance", help="export per-sample feature importances")
    _shared(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=dp.SPLITS, default="test")
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--per-cell", action="store_true")
    p.add_argument("--top-k", type=int, default=3)

    p = sub.add_parser("synth", help="generate a synthetic interpretability dataset")
    _shared(p)
    p.add_argument("--kind", choices=("syn2", "syn4"), required=True)
    p.add_argument("--n", type=int, default=10_000)

    p = sub.add_parser("gridsearch", help="run the 40-combination search grid")
    _shared(p)
    p.add_argument("--data", type=Path, help="directory written by prepare")
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--metric", choices=("accuracy", "r2"), default=None)
    _model_flags(p)
    _train_flags(p)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _config_value(sub: argparse.ArgumentParser, action: argparse.Action, key: str, value, source):
    if isinstance(value, dict):
        sub.error(f"config {source}: nested table '{key}' not allowed (flat key-value only)")
    try:
        if isinstance(value, list):
            value = tuple(float(v) for v in value) if action.dest == "fractions" else [str(v) for v in value]
        elif action.type is _bool:
            value = value if isinstance(value, bool) else _bool(value)
        elif action.type is not None:
            value = action.type(value)
    except (argparse.ArgumentTypeError, ValueError, TypeError) as exc:
        sub.error(f"config {source}: bad value for '{key}': {exc}")
    if action.choices is not None and value not in action.choices:
        sub.error(f"config {source}: '{key}' must be one of {list(action.choices)}")
    return value


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse flags with config-file values installed as subcommand defaults."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    if known.config is None or command not in COMMANDS:
        return parser.parse_args(argv)
    sub = _subparser(parser, command)
    try:
        doc = tomli.loads(known.config.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, tomli.TOMLDecodeError) as exc:
        sub.error(f"cannot read config {known.config}: {exc}")
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest not in actions:
            sub.error(f"config {known.config}: unknown key '{key}'")
        defaults[dest] = _config_value(sub, actions[dest], key, value, known.config)
    sub.set_defaults(**defaults)
    for dest in defaults:
        actions[dest].required = False
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST)
    entries = [{"path": str(p.relative_to(out)), "sha256": _sha256(p), "bytes": p.stat().st_size} for p in files]
    path = out / MANIFEST
    path.write_text(json.dumps({"files": entries}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def model_config_from(args, dataset) -> ModelConfig:
    cfg = ModelConfig(
        d=args.d,
        P=args.prompts,
        L=args.layers,
        T=dataset.output_dim() if dataset is not None else 2,
        C=len(dataset.columns) if dataset is not None else 1,
        importance_combine=args.importance_combine,
        importance_dense=args.importance_dense,
        importance_residual=args.importance_residual,
        importance_share_dense=args.importance_share_dense,
        feature_expand_dense=args.feature_expand_dense,
        feature_expand_residual=args.feature_expand_residual,
        connect_prev_output=args.connect_prev_output,
        column_embeddings_independent=args.column_embeddings_independent,
    )
    return cfg.validate()


def train_config_from(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_ratio=args.batch_ratio,
        min_batch=args.min_batch,
        patience=args.patience,
        seed=args.seed,
        precision=args.precision,
        checkpoint_policy=args.checkpoint_policy,
    ).validate()


def _load_prepared(path: Path) -> dp.Dataset:
    ds = dp.load_cache(path)
    if not ds.encoded or ds.split is None:
        raise dp.DataError(f"{path}: dataset cache is not prepared (run 'trompt prepare' first)")
    return ds


def _load_checkpoint_for(checkpoint: Path, ds: dp.Dataset):
    model, meta = TromptModel.load(checkpoint)
    if schema_hash(ds.feature_columns()) != meta.get("schema_hash"):
        raise CheckpointError(f"{checkpoint}: schema does not match dataset columns {ds.column_names}")
    return model, meta


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    kinds = {c: "categorical" for c in args.categorical}
    kinds.update({c: "numerical" for c in args.numerical})
    table = dp.load_csv(args.csv, args.target, declared_kinds=kinds)
    mode = args.target_transform
    if mode is None:
        mode = "standardize" if args.task == REGRESSION else "none"
    ds = dp.prepare(table, args.task, size_cap=dp.SIZE_CAPS[args.size_cap], target_mode=mode, fractions=args.fractions, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    dp.save_cache(ds, args.out)
    _dump(args.out / "normalization_log.json", ds.log)
    write_manifest(args.out)
    counts = {s: int((ds.split == s).sum()) for s in dp.SPLITS}
    print(json.dumps({"rows": ds.n_rows, "columns": ds.column_names, "splits": counts, "log_entries": len(ds.log)}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _load_prepared(args.data)
    mcfg = model_config_from(args, ds)
    tcfg = train_config_from(args)
    args.out.mkdir(parents=True, exist_ok=True)
    model = TromptModel(mcfg, ds.feature_columns(), dtype=PRECISIONS[args.precision]).init(args.seed)
    try:
        result = fit(model, ds, tcfg, history_path=args.out / "history.jsonl")
    except DivergenceError as exc:
        model.registry.load(exc.state)
        model.save(args.out / "last_finite.ckpt", {"train_config": tcfg.to_dict(), "diverged": True})
        _dump(args.out / "report.json", {"status": "diverged", "message": str(exc), "step": exc.step,
                                         "model_config": mcfg.to_dict(), "train_config": tcfg.to_dict(), "seed": args.seed})
        write_manifest(args.out)
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    model.save(args.out / CHECKPOINT, {"train_config": tcfg.to_dict()})
    metrics = {s: evaluate(model, ds, s).to_dict() for s in dp.SPLITS}
    report = {
        "status": "ok",
        "model_config": mcfg.to_dict(),
        "train_config": tcfg.to_dict(),
        "seed": args.seed,
        "batch_size": result.batch_size,
        "steps": result.steps,
        "best_epoch": result.best_epoch,
        "selected_epoch": result.selected_epoch,
        "stopped_early": result.stopped_early,
        "metrics": metrics,
    }
    _dump(args.out / "report.json", report)
    write_manifest(args.out)
    print(json.dumps({s: m["value"] for s, m in metrics.items()}, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ds = _load_prepared(args.data)
    model, _ = _load_checkpoint_for(args.checkpoint, ds)
    m = evaluate(model, ds, args.split)
    args.out.mkdir(parents=True, exist_ok=True)
    _dump(args.out / f"evaluation_{args.split}.json", m.to_dict())
    write_manifest(args.out)
    print(json.dumps(m.to_dict(), sort_keys=True))
    return EXIT_OK


def _write_matrix(path: Path, rows: np.ndarray, names: List[str], matrix: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", *names])
        for r, vals in zip(rows, matrix):
            w.writerow([int(r), *(repr(float(v)) for v in vals)])


def importance_ranking(averaged: np.ndarray, names: Sequence[str]) -> List[dict]:
    """Mean importance per column over samples, normalized to ratios, descending."""
    score = averaged.astype(np.float64).mean(axis=0)
    ratio = score / score.sum()
    order = sorted(range(len(names)), key=lambda j: (-ratio[j], j))
    return [{"rank": k + 1, "column": names[j], "ratio": float(ratio[j])} for k, j in enumerate(order)]


def cmd_importance(args) -> int:
    ds = _load_prepared(args.data)
    model, _ = _load_checkpoint_for(args.checkpoint, ds)
    X, _ = ds.part(args.split)
    if len(X) == 0:
        raise dp.DataError(f"split '{args.split}' is empty")
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    k = min(args.samples, len(X))
    rows = np.sort(np.random.default_rng(args.seed).choice(len(X), size=k, replace=False))
    report = model.importances(X[rows].astype(model.dtype))
    names = report.column_names
    split_rows = ds.rows_of(args.split)[rows]
    args.out.mkdir(parents=True, exist_ok=True)
    _write_matrix(args.out / "importance.csv", split_rows, names, report.averaged)
    if args.per_cell:
        for i, mat in enumerate(report.per_cell):
            _write_matrix(args.out / f"importance_cell_{i}.csv", split_rows, names, mat)
    ranking = importance_ranking(report.averaged, names)
    with open(args.out / "importance_ranking.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "column", "ratio"])
        for r in ranking:
            w.writerow([r["rank"], r["column"], repr(r["ratio"])])
    write_manifest(args.out)
    for r in ranking[: args.top_k]:
        print(f"{r['rank']:>3}  {r['column']:<24} {100 * r['ratio']:6.2f}%")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    ds = dp.generate_syn(args.kind, args.n, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    dp.save_cache(ds, args.out)
    write_manifest(args.out)
    print(json.dumps({"kind": args.kind, "rows": ds.n_rows, "columns": len(ds.columns)}))
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    combos = enumerate_space(SearchSpace())
    if args.dry_run and args.data is None:
        for c in combos:
            print(config_id(c), json.dumps(c, sort_keys=True))
        return EXIT_OK
    if args.data is None:
        raise UsageError("--data is required unless --dry-run is given")
    ds = _load_prepared(args.data)
    expected = "accuracy" if ds.task == CLASSIFICATION else "r2"
    if args.metric is not None and args.metric != expected:
        raise UsageError(f"--metric {args.metric} does not apply to a {ds.task} dataset (use {expected})")
    base_model = model_config_from(args, ds)
    base_train = train_config_from(args)
    if args.dry_run:
        for c in combos:
            print(config_id(c), json.dumps(c, sort_keys=True))
        return EXIT_OK
    args.out.mkdir(parents=True, exist_ok=True)
    results = run_grid(SearchSpace(), ds, base_model, base_train, results_path=args.out / "trials.jsonl",
                       parallelism=args.parallelism, combos=combos)
    write_summary(results, args.out / "summary.csv")
    ranked, best = rank_results(results)
    _dump(args.out / "best.json", best.to_dict())
    write_manifest(args.out)
    print(f"best {best.config_id} valid {expected}={best.valid_metric:.4f} test {expected}={best.test_metric:.4f}")
    print(json.dumps(best.combo, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "importance": cmd_importance,
    "synth": cmd_synth,
    "gridsearch": cmd_gridsearch,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, TrainConfigError) as exc:
        print(f"trompt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dp.DataError, CheckpointError, LabelError, IndexError, HarnessError) as exc:
        print(f"trompt {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"trompt {args.command}: training failure: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
