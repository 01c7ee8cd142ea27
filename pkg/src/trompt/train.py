"""Mini-batch training with Adam, metrics, early stopping and checkpoint selection."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tn
from .model import CLASSIFICATION, REGRESSION, TromptModel, model_forward, model_loss

PRECISIONS = {"f32": np.float32, "f64": np.float64}
CHECKPOINT_POLICIES = ("best", "last")


class TrainConfigError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Training hit a non-finite loss or gradient.

    ``state`` holds the last parameter values for which everything was finite,
    and ``history`` the epochs completed so far.
    """

    def __init__(self, message: str, state: Mapping[str, np.ndarray], history: List[dict], step: int):
        super().__init__(message)
        self.state = state
        self.history = history
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_ratio: float = 0.01
    min_batch: int = 32
    max_batch: Optional[int] = None
    patience: Optional[int] = None
    seed: int = 0
    precision: str = "f32"
    checkpoint_policy: str = "best"

    def validate(self) -> "TrainConfig":
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise TrainConfigError(f"epochs must be an integer >= 1, got {self.epochs!r}")
        if not 0.0 < self.batch_ratio <= 1.0:
            raise TrainConfigError(f"batch_ratio must lie in (0, 1], got {self.batch_ratio!r}")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise TrainConfigError(f"learning_rate must be finite and >= 0, got {self.learning_rate!r}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise TrainConfigError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise TrainConfigError("eps must be > 0")
        if self.min_batch < 1 or (self.max_batch is not None and self.max_batch < self.min_batch):
            raise TrainConfigError("batch bounds must satisfy 1 <= min_batch <= max_batch")
        if self.patience is not None and self.patience < 1:
            raise TrainConfigError("patience must be >= 1")
        if self.precision not in PRECISIONS:
            raise TrainConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if self.checkpoint_policy not in CHECKPOINT_POLICIES:
            raise TrainConfigError(f"checkpoint_policy must be one of {CHECKPOINT_POLICIES}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()


def batch_size_for(n_train: int, cfg: TrainConfig) -> int:
    """``clamp(ceil(batch_ratio * n_train), min_batch, n_train)``, optionally capped by ``max_batch``."""
    if n_train < 1:
        raise TrainConfigError("training split is empty")
    size = math.ceil(cfg.batch_ratio * n_train)
    if cfg.max_batch is not None:
        size = min(size, cfg.max_batch)
    return int(min(max(size, cfg.min_batch), n_train))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, values: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in values.items()}, {k: np.zeros_like(a) for k, a in values.items()})


def adam_step(values: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState, cfg: TrainConfig) -> None:
    """In-place bias-corrected Adam update.  A zero learning rate leaves values untouched."""
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for k, p in values.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        if cfg.learning_rate == 0:
            continue
        p -= (cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# loss / metrics
# ---------------------------------------------------------------------------


def loss_and_grads(model: TromptModel, X: np.ndarray, y: np.ndarray, task: str) -> Tuple[float, Dict[str, np.ndarray]]:
    tape = tn.Tape()
    leaves = model.registry.bind(tape)
    out = model_forward(model.bind(values=leaves), X, model.cfg)
    loss = model_loss(out.per_cell_predictions, y, task)
    g = tn.backward(tape, loss)
    return float(loss.data), {k: g[t.node_id] for k, t in leaves.items()}


def dataset_loss(model: TromptModel, X: np.ndarray, y: np.ndarray, task: str, batch_size: int = 1024) -> float:
    """Summed-over-cells loss averaged over all rows (chunk losses weighted by size)."""
    total = 0.0
    for s in range(0, len(X), batch_size):
        xb, yb = X[s : s + batch_size], y[s : s + batch_size]
        out = model.forward(xb)
        total += float(model_loss(out.per_cell_predictions, yb, task).data) * len(xb)
    return total / len(X)


@dataclass(frozen=True)
class Metrics:
    task: str
    name: str
    value: float
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)


def accuracy(pred_labels, targets) -> float:
    pred_labels = np.asarray(pred_labels).reshape(-1)
    targets = np.asarray(targets).reshape(-1)
    if pred_labels.size == 0:
        raise TrainConfigError("cannot score an empty split")
    return float(np.mean(pred_labels == targets))


def r2_score(pred, targets) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if pred.size == 0:
        raise TrainConfigError("cannot score an empty split")
    ss_res = float(np.sum((targets - pred) ** 2))
    ss_tot = float(np.sum((targets - targets.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def score(task: str, prediction: np.ndarray, targets) -> Metrics:
    """Accuracy via argmax of the averaged prediction (lowest index wins ties), or r2."""
    if task == CLASSIFICATION:
        return Metrics(task, "accuracy", accuracy(np.argmax(prediction, axis=1), targets), int(len(targets)))
    if task == REGRESSION:
        return Metrics(task, "r2", r2_score(prediction[:, 0], targets), int(len(targets)))
    raise TrainConfigError(f"unknown task {task!r}")


def evaluate(model: TromptModel, dataset, split: str = "test") -> Metrics:
    X, y = dataset.part(split)
    if len(y) == 0:
        raise TrainConfigError(f"split '{split}' is empty")
    return score(dataset.task, model.predict(X.astype(model.dtype)), y)


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------


def early_stop(valid_losses: Sequence[float], patience: Optional[int]) -> Tuple[bool, int]:
    """Return ``(stop, best_epoch)``; epochs are 1-based and ties keep the earliest."""
    if not valid_losses:
        raise TrainConfigError("history is empty")
    losses = np.asarray(valid_losses, dtype=np.float64)
    best = int(np.argmin(losses)) + 1
    if patience is None:
        return False, best
    return len(losses) - best >= patience, best


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    model: TromptModel
    history: List[dict]
    best_epoch: int
    selected_epoch: int
    batch_size: int
    steps: int
    stopped_early: bool
    info: dict = field(default_factory=dict)


def fit(model: TromptModel, dataset, cfg: TrainConfig, history_path=None) -> FitResult:
    """Train ``model`` in place and return it with the selected checkpoint loaded.

    With ``history_path`` set, each epoch is appended to that file as one JSON
    line as soon as it finishes.
    """
    cfg.validate()
    task = dataset.task
    if model.dtype != np.dtype(PRECISIONS[cfg.precision]):
        raise TrainConfigError(f"model dtype {model.dtype} does not match precision {cfg.precision}")
    Xtr, ytr = dataset.part("train")
    Xva, yva = dataset.part("valid")
    if len(ytr) == 0 or len(yva) == 0:
        raise TrainConfigError("train and valid splits must be non-empty")
    if Xtr.shape[1] != model.cfg.C:
        raise TrainConfigError(f"dataset has {Xtr.shape[1]} columns but the model expects C={model.cfg.C}")
    dtype = model.dtype
    Xtr, Xva = Xtr.astype(dtype), Xva.astype(dtype)
    if task == REGRESSION:
        ytr, yva = ytr.astype(dtype), yva.astype(dtype)

    bs = batch_size_for(len(ytr), cfg)
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState.zeros_like(model.registry.values)
    history: List[dict] = []
    best_state = model.registry.snapshot()
    best_loss = math.inf
    best_epoch = 0
    stopped = False
    fh = open(history_path, "w", encoding="utf-8") if history_path is not None else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(ytr))
            running, seen = 0.0, 0
            for s in range(0, len(order), bs):
                rows = order[s : s + bs]
                last_finite = model.registry.snapshot()
                try:
                    loss, grads = loss_and_grads(model, Xtr[rows], ytr[rows], task)
                except tn.NonFiniteError as exc:
                    raise DivergenceError(
                        f"non-finite value at epoch {epoch}, step {state.step + 1}: {exc}", last_finite, history, state.step
                    ) from exc
                if not all(np.isfinite(g).all() for g in grads.values()):
                    raise DivergenceError(
                        f"non-finite gradient at epoch {epoch}, step {state.step + 1}", last_finite, history, state.step
                    )
                adam_step(model.registry.values, grads, state, cfg)
                running += loss * len(rows)
                seen += len(rows)
            try:
                valid_loss = dataset_loss(model, Xva, yva, task)
            except tn.NonFiniteError as exc:
                raise DivergenceError(f"non-finite validation loss at epoch {epoch}: {exc}", best_state, history, state.step) from exc
            metric = score(task, model.predict(Xva), yva)
            rec = {
                "epoch": epoch,
                "train_loss": running / seen,
                "valid_loss": valid_loss,
                "valid_metric": metric.value,
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }
            history.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if valid_loss < best_loss:
                best_loss, best_epoch = valid_loss, epoch
                best_state = model.registry.snapshot()
            stop, _ = early_stop([h["valid_loss"] for h in history], cfg.patience)
            if stop:
                stopped = True
                break
    finally:
        if fh is not None:
            fh.close()

    selected = len(history)
    if cfg.checkpoint_policy == "best":
        model.registry.load(best_state)
        selected = best_epoch
    return FitResult(
        model=model,
        history=history,
        best_epoch=best_epoch,
        selected_epoch=selected,
        batch_size=bs,
        steps=state.step,
        stopped_early=stopped,
        info={"batch_ratio": cfg.batch_ratio, "n_train": int(len(ytr))},
    )


def write_history(history: Sequence[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")
    return path


def read_history(path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
