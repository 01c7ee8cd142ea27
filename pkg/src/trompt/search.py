"""Grid search over the Trompt hyperparameter space with resumable JSONL results."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .model import ModelConfig, TromptModel
from .train import PRECISIONS, DivergenceError, TrainConfig, evaluate, fit

STATUSES = ("ok", "diverged", "error")


class HarnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    importance_combine: Tuple[str, ...] = ("concat", "add")
    importance_dense: Tuple[bool, ...] = (True, False)
    importance_residual: Tuple[bool, ...] = (True, False)
    importance_share_dense: Tuple[bool, ...] = (True, False)
    feature_expand_residual: Tuple[bool, ...] = (True, False)
    batch_ratio: Tuple[float, ...] = (0.1, 0.01)

    def axes(self) -> List[Tuple[str, tuple]]:
        return [(k, tuple(v)) for k, v in asdict(self).items()]


MODEL_AXES = ("importance_combine", "importance_dense", "importance_residual", "importance_share_dense", "feature_expand_residual")


def is_valid(combo: Dict[str, object]) -> bool:
    """Concatenation needs the dense layer; sharing needs a dense layer to share."""
    if combo["importance_combine"] == "concat" and not combo["importance_dense"]:
        return False
    if not combo["importance_dense"] and combo["importance_share_dense"]:
        return False
    return True


def config_id(combo: Dict[str, object]) -> str:
    text = json.dumps(combo, sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def enumerate_space(space: SearchSpace = SearchSpace()) -> List[Dict[str, object]]:
    names = [k for k, _ in space.axes()]
    out = []
    for values in itertools.product(*(v for _, v in space.axes())):
        combo = dict(zip(names, values))
        if is_valid(combo):
            out.append(combo)
    return out


@dataclass
class TrialResult:
    config_id: str
    combo: dict
    model_config: dict
    train_config: dict
    seed: int
    status: str
    valid_metric: Optional[float] = None
    test_metric: Optional[float] = None
    wall_ms: float = 0.0
    message: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrialResult":
        return cls(**d)


def trial_configs(combo: Dict[str, object], base_model: ModelConfig, base_train: TrainConfig) -> Tuple[ModelConfig, TrainConfig]:
    mcfg = replace(base_model, **{k: combo[k] for k in MODEL_AXES if k in combo})
    tcfg = replace(base_train, batch_ratio=float(combo["batch_ratio"])) if "batch_ratio" in combo else base_train
    return mcfg, tcfg


def run_trial(combo: Dict[str, object], dataset, base_model: ModelConfig, base_train: TrainConfig) -> TrialResult:
    """Train and score one combination; failures become a status, never an exception."""
    cid = config_id(combo)
    mcfg, tcfg = trial_configs(combo, base_model, base_train)
    t0 = time.perf_counter()
    result = TrialResult(cid, dict(combo), mcfg.to_dict(), tcfg.to_dict(), tcfg.seed, "error")
    try:
        mcfg = replace(mcfg, C=len(dataset.columns), T=dataset.output_dim()).validate()
        result.model_config = mcfg.to_dict()
        model = TromptModel(mcfg, dataset.feature_columns(), dtype=PRECISIONS[tcfg.precision]).init(tcfg.seed)
        fit(model, dataset, tcfg)
        result.valid_metric = evaluate(model, dataset, "valid").value
        result.test_metric = evaluate(model, dataset, "test").value
        result.status = "ok"
    except DivergenceError as exc:
        result.status = "diverged"
        result.message = str(exc)
    except Exception as exc:  # noqa: BLE001 - any trial failure is recorded, the grid goes on
        result.status = "error"
        result.message = f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"
    result.wall_ms = (time.perf_counter() - t0) * 1000.0
    return result


def load_results(path) -> List[TrialResult]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                out.append(TrialResult.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError):
                # a half-written trailing line from an interrupted run
                continue
    return out


def run_grid(
    space: SearchSpace,
    dataset,
    base_model: ModelConfig,
    base_train: TrainConfig,
    results_path=None,
    parallelism: int = 1,
    combos: Optional[Sequence[Dict[str, object]]] = None,
) -> List[TrialResult]:
    """Run every combination, skipping ids already present in ``results_path``.

    Results are appended by this process only, one line per finished trial, so
    an interrupted run can be resumed.  Returned results follow enumeration order.
    """
    combos = list(combos) if combos is not None else enumerate_space(space)
    done: Dict[str, TrialResult] = {}
    if results_path is not None:
        for r in load_results(results_path):
            done[r.config_id] = r
    todo = [c for c in combos if config_id(c) not in done]
    fh = None
    if results_path is not None:
        results_path = Path(results_path)
        ragged = results_path.exists() and results_path.stat().st_size > 0 and not results_path.read_bytes().endswith(b"\n")
        fh = open(results_path, "a", encoding="utf-8")
        if ragged:
            fh.write("\n")

    def record(res: TrialResult) -> None:
        done[res.config_id] = res
        if fh is not None:
            fh.write(json.dumps(res.to_dict(), sort_keys=True) + "\n")
            fh.flush()

    try:
        if parallelism <= 1 or len(todo) <= 1:
            for c in todo:
                record(run_trial(c, dataset, base_model, base_train))
        else:
            with ProcessPoolExecutor(max_workers=parallelism) as pool:
                futures = [pool.submit(run_trial, c, dataset, base_model, base_train) for c in todo]
                for fut in futures:
                    record(fut.result())
    finally:
        if fh is not None:
            fh.close()
    return [done[config_id(c)] for c in combos]


def rank_results(results: Iterable[TrialResult]) -> Tuple[List[TrialResult], TrialResult]:
    """Descending validation metric, then shorter wall time, then config id."""
    ok = [r for r in results if r.status == "ok"]
    if not ok:
        raise HarnessError("no trial finished successfully")
    ranked = sorted(ok, key=lambda r: (-r.valid_metric, r.wall_ms, r.config_id))
    return ranked, ranked[0]


def write_summary(results: Sequence[TrialResult], path) -> Path:
    path = Path(path)
    axes = [k for k, _ in SearchSpace().axes()]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_id", *axes, "status", "valid", "test", "wall_ms"])
        for r in results:
            w.writerow(
                [r.config_id, *(r.combo.get(a, "") for a in axes), r.status,
                 "" if r.valid_metric is None else repr(r.valid_metric),
                 "" if r.test_metric is None else repr(r.test_metric),
                 f"{r.wall_ms:.1f}"]
            )
    return path
