"""CSV ingestion, benchmark-style normalization, encoding, splits, synthetic data.

A :class:`Dataset` moves through ``load_csv -> normalize_dataset -> split ->
encode_features -> transform_target``.  Every step returns a new object; the
input is never modified.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtr, ndtri

from .model import CATEGORICAL, CLASSIFICATION, NUMERICAL, REGRESSION, ConfigError, FeatureColumn

TARGET = "target"
SPLITS = ("train", "valid", "test")
SIZE_CAPS = {"medium": 10_000, "large": 50_000, "none": None}
SPLIT_COLUMN = "__split__"

MAX_CATEGORIES = 20
MIN_NUMERIC_UNIQUE = 10
QUANTILE_CLIP = 1e-7


class DataError(ValueError):
    """Input data cannot be read or does not satisfy a pipeline rule."""


class NormalizationError(DataError):
    pass


@dataclass
class ColumnSpec:
    name: str
    kind: str
    categories: Optional[List[str]] = None
    mean: Optional[float] = None
    std: Optional[float] = None

    @property
    def cardinality(self) -> int:
        """Category count, plus one reserved unknown id once encoded."""
        return 0 if self.categories is None else len(self.categories)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "categories": self.categories, "mean": self.mean, "std": self.std}


@dataclass
class Dataset:
    columns: List[ColumnSpec]
    target: ColumnSpec
    features: Dict[str, np.ndarray]
    y: np.ndarray
    task: Optional[str] = None
    split: Optional[np.ndarray] = None
    target_transform: dict = field(default_factory=lambda: {"mode": "none"})
    log: List[dict] = field(default_factory=list)
    encoded: bool = False

    @property
    def n_rows(self) -> int:
        return int(len(self.y))

    @property
    def column_names(self) -> List[str]:
        return [c.name for c in self.columns]

    @property
    def n_classes(self) -> int:
        return len(self.target.categories or [])

    def copy(self) -> "Dataset":
        return copy.deepcopy(self)

    def take(self, rows: np.ndarray) -> "Dataset":
        out = self.copy()
        out.features = {k: v[rows] for k, v in self.features.items()}
        out.y = self.y[rows]
        if self.split is not None:
            out.split = self.split[rows]
        return out

    def matrix(self) -> np.ndarray:
        """Encoded feature matrix ``[N, C]``; categorical columns hold integer ids."""
        if not self.encoded:
            raise DataError("dataset is not encoded yet")
        if not self.columns:
            return np.zeros((self.n_rows, 0))
        return np.stack([self.features[c.name] for c in self.columns], axis=1).astype(np.float64)

    def rows_of(self, split: str) -> np.ndarray:
        if self.split is None:
            raise DataError("dataset has no split assignment")
        return np.flatnonzero(self.split == split)

    def part(self, split: str) -> Tuple[np.ndarray, np.ndarray]:
        rows = self.rows_of(split)
        return self.matrix()[rows], self.y[rows]

    def feature_columns(self) -> List[FeatureColumn]:
        """Model-facing column layout; categorical tables get one extra unknown row."""
        out = []
        for c in self.columns:
            if c.kind == CATEGORICAL:
                out.append(FeatureColumn(c.name, CATEGORICAL, c.cardinality + 1))
            else:
                out.append(FeatureColumn(c.name, NUMERICAL, 0))
        return out

    def output_dim(self) -> int:
        return self.n_classes if self.task == CLASSIFICATION else 1


def _log(ds: Dataset, rule: str, action: str, **detail) -> None:
    ds.log.append({"rule": rule, "action": action, **detail})


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def _parse_float(s: str) -> Optional[float]:
    try:
        v = float(s)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def load_csv(path, target_column: str, declared_kinds: Optional[Mapping[str, str]] = None) -> Dataset:
    """Read a headed UTF-8 CSV into an unnormalized dataset.

    A column is numerical when every non-empty cell parses as a float, else
    categorical; ``declared_kinds`` overrides that.  Empty cells are missing
    (NaN for numerical, ``None`` for categorical and for the target).
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            header = [h.strip() for h in header]
            rows = []
            for row in reader:
                if not row:
                    continue
                if len(row) != len(header):
                    raise DataError(
                        f"{path}: line {reader.line_num} has {len(row)} fields, expected {len(header)}"
                    )
                rows.append([c.strip() for c in row])
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not valid UTF-8 ({exc})") from exc
    if target_column not in header:
        raise DataError(f"{path}: target column '{target_column}' not in header")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    declared = dict(declared_kinds or {})
    unknown = set(declared) - set(header)
    if unknown:
        raise DataError(f"declared kinds for unknown columns: {sorted(unknown)}")

    raw_cols = {name: [r[j] for r in rows] for j, name in enumerate(header)}
    columns, features = [], {}
    for name in header:
        if name == target_column:
            continue
        cells = raw_cols[name]
        kind = declared.get(name)
        if kind is None:
            present = [c for c in cells if c != ""]
            kind = NUMERICAL if present and all(_parse_float(c) is not None for c in present) else CATEGORICAL
        if kind == NUMERICAL:
            vals = []
            for i, c in enumerate(cells):
                v = _parse_float(c) if c != "" else math.nan
                if v is None:
                    raise DataError(f"{path}: column '{name}' declared numerical but row {i + 2} holds {c!r}")
                vals.append(v)
            features[name] = np.asarray(vals, dtype=np.float64)
        elif kind == CATEGORICAL:
            features[name] = np.asarray([c if c != "" else None for c in cells], dtype=object)
        else:
            raise DataError(f"column '{name}': unknown kind {kind!r}")
        columns.append(ColumnSpec(name, kind))
    y = np.asarray([c if c != "" else None for c in raw_cols[target_column]], dtype=object)
    return Dataset(columns=columns, target=ColumnSpec(target_column, TARGET), features=features, y=y)


# ---------------------------------------------------------------------------
# normalization rules
# ---------------------------------------------------------------------------


def _missing_mask(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == object:
        return np.asarray([v is None or (isinstance(v, float) and math.isnan(v)) for v in arr], dtype=bool)
    return np.isnan(arr)


def _encode_target(ds: Dataset, task: str) -> None:
    if ds.target.categories is not None or (task == REGRESSION and ds.y.dtype != object):
        return
    if task == CLASSIFICATION:
        labels = [str(v) for v in ds.y]
        classes = sorted(set(labels))
        index = {c: i for i, c in enumerate(classes)}
        ds.y = np.asarray([index[v] for v in labels], dtype=np.int64)
        ds.target = ColumnSpec(ds.target.name, TARGET, categories=classes)
    else:
        vals = [_parse_float(str(v)) for v in ds.y]
        if any(v is None for v in vals):
            raise DataError(f"regression target '{ds.target.name}' has non-numeric values")
        ds.y = np.asarray(vals, dtype=np.float64)


def _canonical(v) -> str:
    return repr(float(v))


def normalize_dataset(
    table: Dataset,
    task: str,
    size_cap: Optional[int] = SIZE_CAPS["medium"],
    seed: int = 0,
) -> Dataset:
    """Apply the benchmark curation rules and log every action.

    Row rules run first so that the column rules see the final rows, which
    makes the whole operation idempotent:

    1. drop rows with a missing cell (features or target);
    2. balance classes by undersampling every class to the minority count;
    3. truncate to ``size_cap`` rows by seeded uniform sampling (per class, so
       balance survives);
    4. numerical columns with exactly 2 unique values become categorical;
    5. numerical columns with fewer than 10 unique values are dropped;
    6. categorical columns with more than 20 categories are dropped.
    """
    if task not in (CLASSIFICATION, REGRESSION):
        raise ConfigError(f"unknown task {task!r}")
    if table.encoded:
        raise DataError("normalize_dataset expects an unencoded dataset")
    if isinstance(size_cap, str):
        size_cap = SIZE_CAPS[size_cap]
    ds = table.copy()
    ds.task = task
    rng = np.random.default_rng(seed)

    missing = _missing_mask(ds.y)
    for c in ds.columns:
        missing |= _missing_mask(ds.features[c.name])
    if missing.any():
        _log(ds, "drop_missing_rows", "drop_rows", count=int(missing.sum()))
        ds = ds.take(np.flatnonzero(~missing))

    _encode_target(ds, task)

    if task == CLASSIFICATION:
        counts = np.bincount(ds.y, minlength=ds.n_classes)
        present = np.flatnonzero(counts)
        if len(present) < 2:
            raise DataError("classification target has fewer than two classes")
        minority = int(counts[present].min())
        if (counts[present] > minority).any():
            keep = []
            for k in present:
                rows = np.flatnonzero(ds.y == k)
                if len(rows) > minority:
                    rows = np.sort(rng.choice(rows, size=minority, replace=False))
                keep.append(rows)
            keep = np.sort(np.concatenate(keep))
            _log(
                ds,
                "balance_classes",
                "drop_rows",
                count=int(ds.n_rows - len(keep)),
                per_class=minority,
                before={ds.target.categories[k]: int(counts[k]) for k in present},
            )
            ds = ds.take(keep)

    if size_cap is not None and ds.n_rows > size_cap:
        before = ds.n_rows
        if task == CLASSIFICATION:
            classes = np.unique(ds.y)
            per = size_cap // len(classes)
            keep = np.sort(
                np.concatenate([rng.choice(np.flatnonzero(ds.y == k), size=min(per, int((ds.y == k).sum())), replace=False) for k in classes])
            )
        else:
            keep = np.sort(rng.choice(ds.n_rows, size=size_cap, replace=False))
        _log(ds, "truncate_rows", "drop_rows", count=int(before - len(keep)), size_cap=int(size_cap), kept=int(len(keep)))
        ds = ds.take(keep)

    kept = []
    for c in ds.columns:
        values = ds.features[c.name]
        if c.kind == NUMERICAL:
            uniq = np.unique(values)
            if len(uniq) == 2:
                ds.features[c.name] = np.asarray([_canonical(v) for v in values], dtype=object)
                kept.append(ColumnSpec(c.name, CATEGORICAL))
                _log(ds, "binary_numeric_to_categorical", "convert_column", column=c.name)
                continue
            if len(uniq) < MIN_NUMERIC_UNIQUE:
                _log(ds, "drop_low_unique_numeric", "drop_column", column=c.name, unique=int(len(uniq)))
                del ds.features[c.name]
                continue
        else:
            n_cat = len(set(values.tolist()))
            if n_cat > MAX_CATEGORIES:
                _log(ds, "drop_high_cardinality_categorical", "drop_column", column=c.name, categories=n_cat)
                del ds.features[c.name]
                continue
        kept.append(c)
    ds.columns = kept
    if not ds.columns:
        raise NormalizationError("every feature column was dropped by normalization")
    if ds.n_rows == 0:
        raise NormalizationError("no rows left after normalization")
    return ds


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def _largest_remainder(total: int, fractions: Sequence[float]) -> np.ndarray:
    raw = np.asarray(fractions, dtype=np.float64) * total
    base = np.floor(raw).astype(int)
    short = total - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return base


def split(ds: Dataset, fractions: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0) -> Dataset:
    """Assign train/valid/test tags; class-stratified for classification."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = ds.n_rows
    totals = _largest_remainder(n, fractions)
    if (totals == 0).any():
        raise ConfigError(f"split sizes {totals.tolist()} leave a split empty")
    rng = np.random.default_rng(seed)
    tags = np.empty(n, dtype=object)
    cum_totals = np.cumsum(totals)[:-1]
    cum_frac = np.cumsum(fractions)[:-1]
    if ds.task == CLASSIFICATION:
        groups = [np.flatnonzero(ds.y == k) for k in np.unique(ds.y)]
    else:
        groups = [np.arange(n)]
    perms = [rng.permutation(g) for g in groups]
    sizes = np.array([len(g) for g in groups])
    bounds = np.zeros((len(groups), 2), dtype=int)
    for b, (frac, target_total) in enumerate(zip(cum_frac, cum_totals)):
        raw = sizes * frac
        base = np.floor(raw).astype(int)
        short = int(target_total - base.sum())
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
        bounds[:, b] = base
    for g, perm in enumerate(perms):
        a, b = bounds[g]
        tags[perm[:a]] = SPLITS[0]
        tags[perm[a:b]] = SPLITS[1]
        tags[perm[b:]] = SPLITS[2]
    out = ds.copy()
    out.split = tags.astype(str)
    return out


# ---------------------------------------------------------------------------
# encoding and target transforms
# ---------------------------------------------------------------------------


def encode_features(ds: Dataset) -> Dataset:
    """Fit encoders on the train split only and apply them to every row.

    Categorical values map to ids ``0..k-1`` in sorted order of the train-split
    categories; anything else maps to the reserved unknown id ``k``.  Numerical
    columns are standardized with the train-split mean and population std.
    """
    if ds.encoded:
        raise DataError("dataset is already encoded")
    if ds.split is None:
        raise DataError("assign splits before encoding")
    out = ds.copy()
    train = ds.split == "train"
    kept = []
    for c in ds.columns:
        values = ds.features[c.name]
        if c.kind == CATEGORICAL:
            cats = sorted({str(v) for v in values[train]})
            index = {v: i for i, v in enumerate(cats)}
            unknown = len(cats)
            out.features[c.name] = np.asarray([index.get(str(v), unknown) for v in values], dtype=np.float64)
            kept.append(ColumnSpec(c.name, CATEGORICAL, categories=cats))
        else:
            mean = float(values[train].mean())
            std = float(values[train].std())
            if not std > 0:
                _log(out, "zero_train_std", "drop_column", column=c.name)
                del out.features[c.name]
                continue
            out.features[c.name] = (values - mean) / std
            kept.append(ColumnSpec(c.name, NUMERICAL, mean=mean, std=std))
    if not kept:
        raise NormalizationError("every feature column was dropped during encoding")
    out.columns = kept
    out.encoded = True
    return out


def _quantile_forward(values: np.ndarray, refs: np.ndarray) -> np.ndarray:
    qs = np.linspace(0.0, 1.0, len(refs))
    # averaging increasing and decreasing interpolation spreads ties evenly
    up = np.interp(values, refs, qs)
    down = -np.interp(-values, -refs[::-1], -qs[::-1])
    q = np.clip(0.5 * (up + down), QUANTILE_CLIP, 1.0 - QUANTILE_CLIP)
    return ndtri(q)


def transform_target(ds: Dataset, mode: str = "standardize") -> Dataset:
    if mode not in ("none", "standardize", "quantile_normal"):
        raise ConfigError(f"unknown target transform {mode!r}")
    if mode == "none":
        out = ds.copy()
        out.target_transform = {"mode": "none"}
        return out
    if ds.task != REGRESSION:
        raise ConfigError(f"target transform '{mode}' only applies to regression")
    if ds.target_transform.get("mode", "none") != "none":
        raise DataError("target is already transformed")
    if ds.split is None:
        raise DataError("assign splits before transforming the target")
    out = ds.copy()
    train_y = ds.y[ds.split == "train"].astype(np.float64)
    if mode == "standardize":
        mean, std = float(train_y.mean()), float(train_y.std())
        if not std > 0:
            raise DataError("train-split target has zero variance")
        out.y = (ds.y - mean) / std
        out.target_transform = {"mode": mode, "mean": mean, "std": std}
    else:
        refs = np.sort(train_y)
        out.y = _quantile_forward(ds.y.astype(np.float64), refs)
        out.target_transform = {"mode": mode, "references": refs.tolist()}
    return out


def inverse_transform_target(values, transform: Mapping) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    mode = transform.get("mode", "none")
    if mode == "none":
        return values
    if mode == "standardize":
        return values * transform["std"] + transform["mean"]
    if mode == "quantile_normal":
        refs = np.asarray(transform["references"], dtype=np.float64)
        return np.interp(ndtr(values), np.linspace(0.0, 1.0, len(refs)), refs)
    raise ConfigError(f"unknown target transform {mode!r}")


def prepare(
    table: Dataset,
    task: str,
    size_cap=SIZE_CAPS["medium"],
    target_mode: str = "none",
    fractions: Sequence[float] = (0.7, 0.15, 0.15),
    seed: int = 0,
) -> Dataset:
    ds = normalize_dataset(table, task, size_cap=size_cap, seed=seed)
    ds = split(ds, fractions, seed=seed)
    ds = encode_features(ds)
    return transform_target(ds, target_mode)


# ---------------------------------------------------------------------------
# synthetic interpretability datasets
# ---------------------------------------------------------------------------


N_SYN_FEATURES = 11


def _syn2_logit(X: np.ndarray) -> np.ndarray:
    return np.exp((X[:, 2:6] ** 2).sum(axis=1) - 4.0)


def _syn4_logit(X: np.ndarray) -> np.ndarray:
    return np.where(X[:, 10] < 0, np.exp(X[:, 0] * X[:, 1]), _syn2_logit(X))


def syn_labels(kind: str, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if kind == "syn2":
        logit = _syn2_logit(X)
    elif kind == "syn4":
        logit = _syn4_logit(X)
    else:
        raise ConfigError(f"unsupported synthetic dataset {kind!r}; choose syn2 or syn4")
    p = logit / (1.0 + logit)
    return (rng.random(len(X)) < p).astype(np.int64)


def generate_syn(kind: str, n: int, seed: int = 0) -> Dataset:
    """Eleven i.i.d. N(0, 1) features with a binary label.

    ``syn2``: the label depends on features 2-5 only.
    ``syn4``: feature 10 switches between features 0-1 (when negative) and
    features 2-5.
    """
    if kind not in ("syn2", "syn4"):
        raise ConfigError(f"unsupported synthetic dataset {kind!r}; choose syn2 or syn4")
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, N_SYN_FEATURES))
    y = syn_labels(kind, X, rng)
    names = [f"feature_{i}" for i in range(N_SYN_FEATURES)]
    return Dataset(
        columns=[ColumnSpec(nm, NUMERICAL) for nm in names],
        target=ColumnSpec("label", TARGET, categories=["0", "1"]),
        features={nm: X[:, i].copy() for i, nm in enumerate(names)},
        y=y,
        task=CLASSIFICATION,
    )


# ---------------------------------------------------------------------------
# cache: CSV of current values + JSON sidecar
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)
    return str(v)


def save_cache(ds: Dataset, directory, stem: str = "dataset") -> Tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}.csv"
    meta_path = directory / f"{stem}.schema.json"
    names = ds.column_names
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = names + [ds.target.name] + ([SPLIT_COLUMN] if ds.split is not None else [])
        w.writerow(header)
        for i in range(ds.n_rows):
            row = [_fmt(ds.features[nm][i]) for nm in names] + [_fmt(ds.y[i])]
            if ds.split is not None:
                row.append(str(ds.split[i]))
            w.writerow(row)
    sidecar = {
        "columns": [c.to_dict() for c in ds.columns],
        "target": ds.target.to_dict(),
        "task": ds.task,
        "encoded": ds.encoded,
        "has_split": ds.split is not None,
        "target_transform": ds.target_transform,
        "normalization_log": ds.log,
        "n_rows": ds.n_rows,
    }
    meta_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, meta_path


def load_cache(directory, stem: str = "dataset") -> Dataset:
    directory = Path(directory)
    meta_path = directory / f"{stem}.schema.json"
    csv_path = directory / f"{stem}.csv"
    if not meta_path.exists() or not csv_path.exists():
        raise DataError(f"{directory}: no dataset cache ({stem}.csv + {stem}.schema.json)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    columns = [ColumnSpec(**c) for c in meta["columns"]]
    target = ColumnSpec(**meta["target"])
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    pos = {h: j for j, h in enumerate(header)}
    features = {}
    for c in columns:
        cells = [r[pos[c.name]] for r in rows]
        if meta["encoded"] or c.kind == NUMERICAL:
            features[c.name] = np.asarray([float(v) if v != "" else math.nan for v in cells], dtype=np.float64)
        else:
            features[c.name] = np.asarray([v if v != "" else None for v in cells], dtype=object)
    ycells = [r[pos[target.name]] for r in rows]
    if meta["task"] == CLASSIFICATION and target.categories is not None:
        y = np.asarray([int(v) for v in ycells], dtype=np.int64)
    elif meta["task"] == REGRESSION:
        y = np.asarray([float(v) for v in ycells], dtype=np.float64)
    else:
        y = np.asarray(ycells, dtype=object)
    split_tags = np.asarray([r[pos[SPLIT_COLUMN]] for r in rows]) if meta.get("has_split") else None
    return Dataset(
        columns=columns,
        target=target,
        features=features,
        y=y,
        task=meta["task"],
        split=split_tags,
        target_transform=meta.get("target_transform", {"mode": "none"}),
        log=meta.get("normalization_log", []),
        encoded=bool(meta["encoded"]),
    )
