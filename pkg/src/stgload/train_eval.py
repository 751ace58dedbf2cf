"""Training loop, forecast metrics, and the single-building baselines."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import numerics as nx
from .dataio import LOAD
from .model import GruLayer, _uniform, _zeros, copy_state, load_state, run_gru

log = logging.getLogger(__name__)

BASELINES = ("gru", "fcnn")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    dropout_p: float = 0.3
    seed: int = 0
    T: int = 12
    M: int = 1
    k: int | None = None
    variant: str = "att_gcn"


class Trainable(Protocol):
    def named_parameters(self) -> dict[str, nx.Parameter]: ...
    def forward(self, x, training: bool = False) -> nx.Tensor: ...


# ------------------------------------------------------------------ metrics


def mse_loss(pred, target) -> nx.Tensor:
    pred = nx.tensor(pred)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise nx.DimensionError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return nx.mean(diff * diff)


@dataclass
class Scores:
    mse: float
    mae: float
    r2: float
    smape: float


@dataclass
class MetricsReport(Scores):
    per_building: list[Scores] = field(default_factory=list)

    def rows(self, ids: Sequence[str] | None = None) -> list[tuple[str, Scores]]:
        ids = ids if ids is not None else [str(i) for i in range(len(self.per_building))]
        return [("overall", self)] + [(f"building_{b}", s) for b, s in zip(ids, self.per_building)]


def _scores(pred: np.ndarray, y: np.ndarray) -> Scores:
    pred, y = pred.ravel(), y.ravel()
    err = y - pred
    mse = float(np.mean(err * err))
    mae = float(np.mean(np.abs(err)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err * err)) / ss_tot if len(y) >= 2 and ss_tot > 0 else math.nan
    denom = (np.abs(y) + np.abs(pred)) / 2.0
    # 0/0 terms (both zero) count as perfect
    terms = np.divide(np.abs(pred - y), denom, out=np.zeros_like(denom), where=denom > 0)
    return Scores(mse, mae, r2, float(np.mean(terms)))


def metrics(pred, y, node_axis: int | None = None) -> MetricsReport:
    """MSE, MAE, R^2 and SMAPE pooled over all entries.

    With ``node_axis`` the same four scores are also reported per node.
    R^2 is NaN when the targets have no variance.
    """
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float)
    if pred.shape != y.shape:
        raise nx.DimensionError(f"metrics shape mismatch: {pred.shape} vs {y.shape}")
    overall = _scores(pred, y)
    per = []
    if node_axis is not None:
        per = [_scores(np.take(pred, i, axis=node_axis), np.take(y, i, axis=node_axis))
               for i in range(pred.shape[node_axis])]
    return MetricsReport(overall.mse, overall.mae, overall.r2, overall.smape, per)


def write_metrics_csv(path, report: MetricsReport, ids: Sequence[str] | None = None) -> None:
    with open(path, "w") as f:
        f.write("scope,mse,mae,r2,smape\n")
        for scope, s in report.rows(ids):
            f.write(f"{scope},{s.mse!r},{s.mae!r},{s.r2!r},{s.smape!r}\n")


# ------------------------------------------------------------------ training


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("epoch,train_loss,val_mse\n")
            for i, (tl, vm) in enumerate(zip(self.train_loss, self.val_mse), start=1):
                f.write(f"{i},{tl!r},{vm!r}\n")


def predict(model: Trainable, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([model.forward(X[i:i + batch_size]).data for i in range(0, len(X), batch_size)])


def train(model: Trainable, X_train: np.ndarray, Y_train: np.ndarray,
          X_val: np.ndarray, Y_val: np.ndarray, cfg: TrainConfig,
          progress: Callable[[int, float, float], None] | None = None) -> tuple[Trainable, History]:
    """Mini-batch Adam on MSE; the returned model holds the best-validation weights."""
    if len(X_train) == 0 or len(X_val) == 0:
        raise ValueError("training and validation splits must be nonempty")
    params = model.named_parameters()
    opt = nx.Adam(params.values(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    hist = History()
    best, best_state = math.inf, copy_state(params)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(X_train))
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = mse_loss(model.forward(X_train[idx], training=True), Y_train[idx])
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"loss became {loss.item()} at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        val = metrics(predict(model, X_val), Y_val).mse
        hist.train_loss.append(total / count)
        hist.val_mse.append(val)
        if val < best:
            best, best_state, hist.best_epoch = val, copy_state(params), epoch
        log.info("epoch %d train_loss %.6g val_mse %.6g", epoch, total / count, val)
        if progress is not None:
            progress(epoch, total / count, val)
    load_state(params, best_state)
    return model, hist


# ---------------------------------------------------------------- baselines


def naive_forecast(X: np.ndarray, M: int = 1) -> np.ndarray:
    """Repeat the last observed load: ``(S, T, N, d) -> (S, M, N, 1)``."""
    X = np.asarray(X, dtype=float)
    if X.shape[-3] < 1:
        raise ValueError("naive forecast needs at least one history step")
    last = X[..., -1, :, LOAD:LOAD + 1]
    return np.repeat(last[..., None, :, :], M, axis=-3)


class FCNN:
    """Fully connected net on a flattened single-building window ``(S, T, d)``."""

    def __init__(self, n_in: int, horizon: int = 1, hidden: int = 128, layers: int = 4, seed: int = 0):
        rng = np.random.default_rng(seed)
        widths = [n_in] + [hidden] * layers + [horizon]
        self.weights = [_uniform(rng, a, (a, b), f"fc{i}.w") for i, (a, b) in enumerate(zip(widths, widths[1:]))]
        self.biases = [_zeros((b,), f"fc{i}.b") for i, b in enumerate(widths[1:])]

    def named_parameters(self) -> dict[str, nx.Parameter]:
        return {p.name: p for pair in zip(self.weights, self.biases) for p in pair}

    def forward(self, x, training: bool = False) -> nx.Tensor:
        x = np.asarray(x, dtype=float)
        h = nx.Tensor(x.reshape(len(x), -1))
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = nx.matmul(h, w) + b
            if i < last:
                h = nx.relu(h)
        return h


class GruForecaster:
    """Stacked GRU over a single-building window ``(S, T, d)`` with a linear head."""

    def __init__(self, n_in: int, horizon: int = 1, hidden: int = 16, layers: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.layers = [GruLayer.init(rng, n_in if i == 0 else hidden, hidden, f"gru{i}") for i in range(layers)]
        self.w_head = _uniform(rng, hidden, (hidden, horizon), "head.w")
        self.b_head = _zeros((horizon,), "head.b")

    def named_parameters(self) -> dict[str, nx.Parameter]:
        params = [p for layer in self.layers for p in layer.parameters()] + [self.w_head, self.b_head]
        return {p.name: p for p in params}

    def forward(self, x, training: bool = False) -> nx.Tensor:
        last = run_gru(np.asarray(x, dtype=float), self.layers)
        return nx.matmul(last, self.w_head) + self.b_head


def make_baseline(kind: str, T: int, d: int, M: int = 1, seed: int = 0):
    if kind == "fcnn":
        return FCNN(T * d, M, seed=seed)
    if kind == "gru":
        return GruForecaster(d, M, seed=seed)
    raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")


def node_slice(X: np.ndarray, Y: np.ndarray | None, i: int):
    """One building's windows: ``X (S, T, d)``, ``Y (S, M)``."""
    return X[:, :, i, :], (None if Y is None else Y[:, :, i, 0])


def train_baseline(kind: str, splits, cfg: TrainConfig) -> tuple[list, list[History], MetricsReport]:
    """Fit one independent model per building and score them on the test split.

    ``splits`` is ``((X_tr, Y_tr), (X_va, Y_va), (X_te, Y_te))`` with arrays
    shaped like the graph model's.
    """
    (X_tr, Y_tr), (X_va, Y_va), (X_te, Y_te) = splits
    n_nodes = X_tr.shape[2]
    models, hists = [], []
    pred = np.zeros_like(Y_te)
    for i in range(n_nodes):
        m = make_baseline(kind, X_tr.shape[1], X_tr.shape[3], Y_tr.shape[1], seed=cfg.seed + i)
        m, h = train(m, *node_slice(X_tr, Y_tr, i), *node_slice(X_va, Y_va, i),
                     TrainConfig(**{**cfg.__dict__, "seed": cfg.seed + i}))
        pred[:, :, i, 0] = predict(m, X_te[:, :, i, :])
        models.append(m)
        hists.append(h)
    return models, hists, metrics(pred, Y_te, node_axis=2)


def baseline_predict(models: Sequence[Trainable], X: np.ndarray) -> np.ndarray:
    cols = [predict(m, X[:, :, i, :]) for i, m in enumerate(models)]
    return np.stack(cols, axis=2)[..., None]
