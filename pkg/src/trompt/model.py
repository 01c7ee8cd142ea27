"""Trompt: prompt-conditioned feature importances over column embeddings.

A model is ``L`` cells feeding one shared downstream head.  Each cell

1. fuses its prompt embeddings with the previous cell's output and queries the
   column embeddings, giving per-prompt importances over columns ``[B, P, C]``;
2. embeds every column of the input (lookup for categorical, a per-column
   1 -> d dense map for numerical), giving ``[B, C, d]``;
3. expands those embeddings to one copy per prompt ``[B, P, C, d]`` and takes
   the importance-weighted sum over columns, giving the cell output
   ``[B, P, d]``.

The downstream head weighs prompts with a softmax, sums them and maps the
result to ``T`` outputs through two dense layers.  Training sums the per-cell
losses; inference averages per-cell predictions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tn
from .layers import (
    DenseLayer,
    EmbeddingTable,
    ParamRegistry,
    bound_dense,
    bound_embedding,
    dense_forward,
    embedding_forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Tape, Tensor

CLASSIFICATION = "classification"
REGRESSION = "regression"
NUMERICAL = "numerical"
CATEGORICAL = "categorical"


class ConfigError(ValueError):
    pass


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Structural hyperparameters and ablation switches.

    Defaults are the published defaults (d = P = 128, L = 6) with every
    optional component switched on.
    """

    d: int = 128
    P: int = 128
    L: int = 6
    T: int = 2
    C: int = 1
    importance_combine: str = "concat"
    importance_dense: bool = True
    importance_residual: bool = True
    importance_share_dense: bool = True
    feature_expand_dense: bool = True
    feature_expand_residual: bool = True
    connect_prev_output: bool = True
    column_embeddings_independent: bool = True

    def validate(self) -> "ModelConfig":
        for name in ("d", "P", "L", "T", "C"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.importance_combine not in ("concat", "add"):
            raise ConfigError(f"importance_combine must be 'concat' or 'add', got {self.importance_combine!r}")
        if self.importance_combine == "concat" and not self.importance_dense:
            raise ConfigError("importance_combine='concat' requires importance_dense=true")
        if not self.importance_dense and self.importance_share_dense:
            raise ConfigError("importance_share_dense must be false when importance_dense is false")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**dict(d))


@dataclass(frozen=True)
class FeatureColumn:
    name: str
    kind: str
    cardinality: int = 0


def schema_hash(columns: Sequence[FeatureColumn]) -> str:
    payload = json.dumps([[c.name, c.kind, c.cardinality] for c in columns])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# bound parameters for one forward pass
# ---------------------------------------------------------------------------


@dataclass
class PromptDense:
    """One dense map per prompt: weight ``[P, in, out]``, bias ``[P, out]``."""

    weight: Tensor
    bias: Tensor
    name: str


@dataclass
class TromptCellParams:
    column_embeddings: Tensor
    prompt_embeddings: Tensor
    importance_dense: Optional[object]  # DenseLayer, PromptDense or None
    numeric_embed: Dict[int, DenseLayer]
    cat_embed: Dict[int, EmbeddingTable]
    expand_dense: Optional[DenseLayer]
    columns: Sequence[FeatureColumn]


@dataclass
class DownstreamParams:
    weight_dense: DenseLayer
    head1: DenseLayer
    head2: DenseLayer


@dataclass
class TromptParams:
    cells: List[TromptCellParams]
    downstream: DownstreamParams


@dataclass
class CellActivations:
    SE_prompt: np.ndarray
    SE_hat_prompt: np.ndarray
    SE_column: np.ndarray
    M_importance: np.ndarray
    E_feature: np.ndarray
    E_hat_feature: np.ndarray
    O: np.ndarray
    # embedding values as read during the pass, for input-independence checks
    column_embeddings_read: np.ndarray
    prompt_embeddings_read: np.ndarray


@dataclass
class DownstreamOut:
    W_prompt: Tensor
    O_hat: Tensor
    prediction: Tensor


@dataclass
class ImportanceReport:
    per_cell: List[np.ndarray]
    averaged: np.ndarray
    column_names: List[str]


@dataclass
class ForwardOutput:
    per_cell_predictions: List[Tensor]
    final_prediction: np.ndarray
    cells: List[CellActivations]
    downstream: List[DownstreamOut]


# ---------------------------------------------------------------------------
# the equations
# ---------------------------------------------------------------------------


def _prompt_dense_forward(layer: PromptDense, x: Tensor) -> Tensor:
    # x [B, P, in] -> [P, B, in] @ [P, in, out] -> [B, P, out]
    batch = x.shape[0]
    y = tn.batched_matmul(tn.permute(x, (1, 0, 2)), layer.weight)
    return tn.add(tn.permute(y, (1, 0, 2)), tn.stack_batch(layer.bias, batch))


def _apply_importance_dense(layer, x: Tensor) -> Tensor:
    if isinstance(layer, PromptDense):
        return _prompt_dense_forward(layer, x)
    return dense_forward(layer, x)


def fuse_prompts(cell: TromptCellParams, O_prev: Tensor, cfg: ModelConfig) -> Tuple[Tensor, Tensor]:
    """Return ``(SE_prompt, SE_hat_prompt)``, both ``[B, P, d]``."""
    batch = O_prev.shape[0]
    se_prompt = tn.stack_batch(cell.prompt_embeddings, batch)
    if cfg.importance_combine == "concat":
        fused = tn.concat_last_axis(se_prompt, O_prev)
    else:
        fused = tn.add(se_prompt, O_prev)
    if not cfg.importance_dense:
        return se_prompt, fused
    se_hat = _apply_importance_dense(cell.importance_dense, fused)
    if cfg.importance_residual:
        se_hat = tn.add(tn.add(se_hat, se_prompt), O_prev)
    return se_prompt, se_hat


def column_keys(cell: TromptCellParams, batch: int, cfg: ModelConfig, E_feature: Optional[Tensor] = None) -> Tensor:
    """``SE_column [B, C, d]``; each sample's own feature embeddings when columns are input-coupled."""
    if cfg.column_embeddings_independent:
        return tn.stack_batch(cell.column_embeddings, batch)
    if E_feature is None:
        raise ConfigError("column_embeddings_independent=false needs the feature embeddings")
    return E_feature


def derive_feature_importances(
    cell: TromptCellParams,
    O_prev: Tensor,
    cfg: ModelConfig,
    E_feature: Optional[Tensor] = None,
    _trace: Optional[dict] = None,
) -> Tensor:
    """``M_importance [B, P, C]``: softmax over columns of prompt-column scores."""
    cfg.validate()
    if O_prev.ndim != 3 or O_prev.shape[1:] != (cfg.P, cfg.d):
        raise tn.DimensionError(f"O_prev must be [B, {cfg.P}, {cfg.d}], got {O_prev.shape}")
    batch = O_prev.shape[0]
    if not cfg.connect_prev_output:
        O_prev = Tensor(np.zeros(O_prev.shape, dtype=O_prev.dtype))
    se_prompt, se_hat = fuse_prompts(cell, O_prev, cfg)
    se_column = column_keys(cell, batch, cfg, E_feature)
    scores = tn.batched_matmul(se_hat, tn.batched_transpose(se_column))
    M = tn.softmax_last_axis(scores)
    if _trace is not None:
        _trace.update(SE_prompt=se_prompt, SE_hat_prompt=se_hat, SE_column=se_column)
    return M


def build_feature_embeddings(cell: TromptCellParams, X: np.ndarray) -> Tensor:
    """``E_feature [B, C, d]`` in schema column order."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != len(cell.columns):
        raise tn.DimensionError(f"batch must be [B, {len(cell.columns)}], got {X.shape}")
    dtype = cell.column_embeddings.dtype
    parts = []
    for j, col in enumerate(cell.columns):
        if col.kind == CATEGORICAL:
            raw = X[:, j]
            idx = raw.astype(np.int64)
            bad = (idx != raw) | (idx < 0) | (idx >= col.cardinality)
            if bad.any():
                raise IndexError(
                    f"column '{col.name}': category value {raw[bad][0]!r} outside [0, {col.cardinality})"
                )
            parts.append(embedding_forward(cell.cat_embed[j], idx, column=col.name))
        else:
            x = Tensor(X[:, j : j + 1].astype(dtype))
            parts.append(dense_forward(cell.numeric_embed[j], x))
    return tn.stack(parts, axis=1)


def expand_feature_embeddings(cell: TromptCellParams, E_feature: Tensor, cfg: ModelConfig) -> Tensor:
    """``E_hat_feature [B, P, C, d]``: one copy of each column embedding per prompt."""
    batch, C, d = E_feature.shape
    tiled = tn.expand_axis(E_feature, 1, cfg.P)
    if not cfg.feature_expand_dense:
        return tiled
    grown = dense_forward(cell.expand_dense, E_feature)  # [B, C, P*d]
    grown = tn.permute(tn.reshape(grown, (batch, C, cfg.P, d)), (0, 2, 1, 3))
    if cfg.feature_expand_residual:
        grown = tn.add(grown, tiled)
    return grown


def combine_columns(E_hat_feature: Tensor, M_importance: Tensor) -> Tensor:
    B, P, C = M_importance.shape
    weighted = tn.mul_broadcast(E_hat_feature, tn.reshape(M_importance, (B, P, C, 1)))
    return tn.reduce_sum_axis(weighted, 2)


def cell_forward(
    cell: TromptCellParams, O_prev: Tensor, X: np.ndarray, cfg: ModelConfig
) -> Tuple[Tensor, CellActivations]:
    E_feature = build_feature_embeddings(cell, X)
    trace: dict = {}
    M = derive_feature_importances(cell, O_prev, cfg, E_feature=E_feature, _trace=trace)
    E_hat = expand_feature_embeddings(cell, E_feature, cfg)
    O = combine_columns(E_hat, M)
    acts = CellActivations(
        SE_prompt=trace["SE_prompt"].data,
        SE_hat_prompt=trace["SE_hat_prompt"].data,
        SE_column=trace["SE_column"].data,
        M_importance=M.data,
        E_feature=E_feature.data,
        E_hat_feature=E_hat.data,
        O=O.data,
        column_embeddings_read=cell.column_embeddings.data,
        prompt_embeddings_read=cell.prompt_embeddings.data,
    )
    return O, acts


def downstream_forward(ds: DownstreamParams, O: Tensor) -> DownstreamOut:
    B, P, d = O.shape
    logits = tn.reshape(dense_forward(ds.weight_dense, O), (B, P))
    W = tn.softmax_last_axis(logits)
    O_hat = tn.reduce_sum_axis(tn.mul_broadcast(O, tn.reshape(W, (B, P, 1))), 1)
    hidden = tn.relu(dense_forward(ds.head1, O_hat))
    return DownstreamOut(W_prompt=W, O_hat=O_hat, prediction=dense_forward(ds.head2, hidden))


def average_predictions(predictions: Sequence[np.ndarray]) -> np.ndarray:
    total = predictions[0].copy()
    for p in predictions[1:]:
        total = total + p
    return total / len(predictions)


def model_forward(params: TromptParams, X: np.ndarray, cfg: ModelConfig) -> ForwardOutput:
    X = np.asarray(X)
    dtype = params.cells[0].column_embeddings.dtype
    O = Tensor(np.zeros((X.shape[0], cfg.P, cfg.d), dtype=dtype))
    preds, cells, outs = [], [], []
    for cell in params.cells:
        O, acts = cell_forward(cell, O, X, cfg)
        out = downstream_forward(params.downstream, O)
        preds.append(out.prediction)
        cells.append(acts)
        outs.append(out)
    final = average_predictions([p.data for p in preds])
    return ForwardOutput(preds, final, cells, outs)


def model_loss(per_cell_predictions: Sequence[Tensor], targets, task: str) -> Tensor:
    """Sum over cells of the per-cell batch-mean loss."""
    targets = np.asarray(targets)
    losses = []
    for pred in per_cell_predictions:
        if task == CLASSIFICATION:
            labels = targets.reshape(-1)
            if labels.size and (labels.min() < 0 or labels.max() >= pred.shape[1]):
                raise LabelError(f"class index outside [0, {pred.shape[1]})")
            losses.append(tn.softmax_cross_entropy(pred, labels))
        elif task == REGRESSION:
            losses.append(tn.mean_squared_error(pred, targets.reshape(pred.shape)))
        else:
            raise ConfigError(f"unknown task {task!r}")
    total = losses[0]
    for extra in losses[1:]:
        total = tn.add(total, extra)
    return total


def sample_importances(
    cells: Sequence[CellActivations],
    downstream: Sequence[DownstreamOut],
    column_names: Optional[Sequence[str]] = None,
) -> ImportanceReport:
    """Prompt-weighted reduction of each cell's importances to ``[B, C]``."""
    per_cell = []
    for acts, out in zip(cells, downstream):
        W = out.W_prompt.data.astype(np.float64)
        M = acts.M_importance.astype(np.float64)
        per_cell.append((W[:, :, None] * M).sum(axis=1))
    averaged = average_predictions(per_cell)
    if column_names is None:
        column_names = [f"column_{j}" for j in range(averaged.shape[1])]
    return ImportanceReport(per_cell, averaged, list(column_names))


# ---------------------------------------------------------------------------
# model object: parameter layout, binding, persistence
# ---------------------------------------------------------------------------


class TromptModel:
    def __init__(self, cfg: ModelConfig, columns: Sequence[FeatureColumn], dtype=np.float32):
        cfg.validate()
        if len(columns) != cfg.C:
            raise ConfigError(f"config has C={cfg.C} but {len(columns)} columns were given")
        for col in columns:
            if col.kind == CATEGORICAL and col.cardinality < 1:
                raise ConfigError(f"categorical column '{col.name}' needs cardinality >= 1")
            if col.kind not in (CATEGORICAL, NUMERICAL):
                raise ConfigError(f"column '{col.name}' has unknown kind {col.kind!r}")
        self.cfg = cfg
        self.columns = list(columns)
        self.registry = ParamRegistry(dtype)
        self._declare()

    @property
    def dtype(self):
        return self.registry.dtype

    @property
    def column_names(self) -> List[str]:
        return [c.name for c in self.columns]

    def _declare(self) -> None:
        cfg, reg = self.cfg, self.registry
        d, P, C = cfg.d, cfg.P, cfg.C
        fuse_in = 2 * d if cfg.importance_combine == "concat" else d
        for i in range(cfg.L):
            pre = f"cells.{i}"
            reg.declare_embedding(f"{pre}.column_embeddings", C, d)
            reg.declare_embedding(f"{pre}.prompt_embeddings", P, d)
            if cfg.importance_dense:
                copies = None if cfg.importance_share_dense else P
                reg.declare_dense(f"{pre}.importance_dense", fuse_in, d, copies=copies)
            for j, col in enumerate(self.columns):
                if col.kind == CATEGORICAL:
                    reg.declare_embedding(f"{pre}.categorical.{j}", col.cardinality, d)
                else:
                    reg.declare_dense(f"{pre}.numeric.{j}", 1, d)
            if cfg.feature_expand_dense:
                reg.declare_dense(f"{pre}.expand_dense", d, P * d)
        reg.declare_dense("downstream.weight_dense", d, 1)
        reg.declare_dense("downstream.head1", d, d)
        reg.declare_dense("downstream.head2", d, cfg.T)

    def init(self, seed: int) -> "TromptModel":
        init_params(self.registry, seed)
        return self

    def bind(self, tape: Optional[Tape] = None, values: Optional[Mapping[str, Tensor]] = None) -> TromptParams:
        p = values if values is not None else self.registry.bind(tape)
        cfg = self.cfg
        cells = []
        for i in range(cfg.L):
            pre = f"cells.{i}"
            if not cfg.importance_dense:
                imp = None
            elif cfg.importance_share_dense:
                imp = bound_dense(p, f"{pre}.importance_dense")
            else:
                name = f"{pre}.importance_dense"
                imp = PromptDense(p[f"{name}.weight"], p[f"{name}.bias"], name)
            cells.append(
                TromptCellParams(
                    column_embeddings=p[f"{pre}.column_embeddings"],
                    prompt_embeddings=p[f"{pre}.prompt_embeddings"],
                    importance_dense=imp,
                    numeric_embed={
                        j: bound_dense(p, f"{pre}.numeric.{j}")
                        for j, c in enumerate(self.columns)
                        if c.kind == NUMERICAL
                    },
                    cat_embed={
                        j: bound_embedding(p, f"{pre}.categorical.{j}")
                        for j, c in enumerate(self.columns)
                        if c.kind == CATEGORICAL
                    },
                    expand_dense=bound_dense(p, f"{pre}.expand_dense") if cfg.feature_expand_dense else None,
                    columns=self.columns,
                )
            )
        ds = DownstreamParams(
            weight_dense=bound_dense(p, "downstream.weight_dense"),
            head1=bound_dense(p, "downstream.head1"),
            head2=bound_dense(p, "downstream.head2"),
        )
        return TromptParams(cells, ds)

    def forward(self, X: np.ndarray, tape: Optional[Tape] = None) -> ForwardOutput:
        return model_forward(self.bind(tape), X, self.cfg)

    def predict(self, X: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        """Averaged prediction ``[N, T]`` evaluated in chunks."""
        X = np.asarray(X)
        chunks = [self.forward(X[s : s + batch_size]).final_prediction for s in range(0, len(X), batch_size)]
        if not chunks:
            return np.zeros((0, self.cfg.T), dtype=self.dtype)
        return np.concatenate(chunks, axis=0)

    def importances(self, X: np.ndarray) -> ImportanceReport:
        out = self.forward(X)
        return sample_importances(out.cells, out.downstream, self.column_names)

    # -- persistence ---------------------------------------------------------

    def metadata(self) -> dict:
        return {
            "model_config": self.cfg.to_dict(),
            "columns": [asdict(c) for c in self.columns],
            "schema_hash": schema_hash(self.columns),
            "dtype": self.dtype.name,
        }

    def save(self, path, extra: Optional[dict] = None) -> None:
        meta = self.metadata()
        if extra:
            meta.update(extra)
        save_checkpoint(path, self.registry.values, meta)

    @classmethod
    def load(cls, path) -> Tuple["TromptModel", dict]:
        values, meta = load_checkpoint(path)
        cfg = ModelConfig.from_dict(meta["model_config"])
        columns = [FeatureColumn(**c) for c in meta["columns"]]
        model = cls(cfg, columns, dtype=np.dtype(meta.get("dtype", "float32")))
        model.registry.load(values)
        return model, meta
