"""Conditional model P(y | x, w) for the one-hot categorical vector.

Every one-hot component y^j gets a logistic term

    P(Y = y^j | (x, m_j), w) = 1 / (1 + exp(-(2 y^j - 1) <w, (x, m_j)>))

with a single weight vector shared by all terms.  ``w`` is laid out as
``[continuous block | bias | one-hot block]``, so the logit of term j for a
row x is ``w_cont . x + w_bias + w_onehot[j]``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import UNKNOWN_LEVEL, Dataset, OneHotView, Schema
from .parallel import map_chunks

log = logging.getLogger(__name__)

# the (rows x one-hot width) temporaries stay cache-resident at this size
CAT_CHUNK = 2048


class SgdDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    batch_size: int = 256
    epochs: int = 10
    l2: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")


@dataclass(frozen=True)
class CategoricalModel:
    w: np.ndarray
    n_continuous: int
    one_hot_width: int

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        if w.shape != (self.n_continuous + 1 + self.one_hot_width,):
            raise ValueError(
                f"w has shape {w.shape}, layout needs {self.n_continuous} + 1 + {self.one_hot_width}"
            )
        if not np.isfinite(w).all():
            raise ValueError("w has non-finite entries")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @classmethod
    def zeros(cls, n_continuous: int, one_hot_width: int) -> "CategoricalModel":
        return cls(np.zeros(n_continuous + 1 + one_hot_width), n_continuous, one_hot_width)

    @property
    def w_continuous(self) -> np.ndarray:
        return self.w[: self.n_continuous]

    @property
    def bias(self) -> float:
        return float(self.w[self.n_continuous])

    @property
    def w_one_hot(self) -> np.ndarray:
        return self.w[self.n_continuous + 1 :]

    def layout(self) -> dict:
        return {"continuous": self.n_continuous, "bias": 1, "one_hot": self.one_hot_width}

    def to_dict(self) -> dict:
        return {"w": self.w.tolist(), "layout": self.layout()}

    @classmethod
    def from_dict(cls, obj: dict) -> "CategoricalModel":
        lay = obj["layout"]
        return cls(np.asarray(obj["w"], dtype=np.float64), int(lay["continuous"]), int(lay["one_hot"]))


def _log_sigmoid(t: np.ndarray) -> np.ndarray:
    # log s(t) = min(t, 0) - log(1 + exp(-|t|)), finite for every finite t
    return np.minimum(t, 0.0) - np.log1p(np.exp(-np.abs(t)))


def _sigmoid(t: np.ndarray) -> np.ndarray:
    # exp overflow gives inf and a correct 0; cheaper than scipy's expit here
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-t))


def active_columns(levels: np.ndarray, schema: Schema) -> tuple[np.ndarray, np.ndarray]:
    """(row, column) positions of the ones in the one-hot matrix of ``levels``."""
    levels = np.asarray(levels, dtype=np.int64)
    known = levels != UNKNOWN_LEVEL
    rows = np.broadcast_to(np.arange(levels.shape[0])[:, None], levels.shape)[known]
    cols = (levels + schema.one_hot_offsets[None, :])[known]
    return rows, cols


def logits(model: CategoricalModel, X: np.ndarray) -> np.ndarray:
    """(n, k+1) matrix of z_j = <w, (x, m_j)>."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    shared = X @ model.w_continuous + model.bias
    return shared[:, None] + model.w_one_hot[None, :]


def addends(model: CategoricalModel, x: np.ndarray, j: int) -> np.ndarray:
    """Coordinate-wise terms of <w, (x, m_j)>, in layout order."""
    x = np.asarray(x, dtype=np.float64)
    mask = np.zeros(model.one_hot_width)
    mask[j] = 1.0
    return model.w * np.concatenate([x, [1.0], mask])


def term_estimator(model: CategoricalModel, x: np.ndarray, j: int, y_j: int) -> float:
    if not 0 <= j < model.one_hot_width:
        raise IndexError(f"term index {j} outside [0, {model.one_hot_width})")
    z = float(np.dot(model.w_continuous, np.asarray(x, dtype=np.float64)) + model.bias + model.w_one_hot[j])
    sign = 2 * int(y_j) - 1
    return float(_sigmoid(np.float64(sign * z)))


def term_estimators(model: CategoricalModel, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Estimator of the observed bit for every (row, term)."""
    sign = 2.0 * np.asarray(Y, dtype=np.float64) - 1.0
    return _sigmoid(sign * logits(model, X))


def log_cond_prob(model: CategoricalModel, x: np.ndarray, y: OneHotView | np.ndarray) -> float:
    yv = y.y if isinstance(y, OneHotView) else np.asarray(y)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n_continuous,) or yv.shape != (model.one_hot_width,):
        raise ValueError(f"shape mismatch: x {x.shape}, y {yv.shape}")
    return float(log_cond_prob_matrix(model, x[None, :], yv[None, :])[0])


def log_cond_prob_matrix(model: CategoricalModel, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    sign = 2.0 * np.asarray(Y, dtype=np.float64) - 1.0
    return _log_sigmoid(sign * logits(model, X)).sum(axis=1)


def log_cond_prob_levels(model: CategoricalModel, X: np.ndarray, levels: np.ndarray, schema: Schema) -> np.ndarray:
    """Same as :func:`log_cond_prob_matrix` but straight from level indices.

    Uses log s(z) = log s(-z) + z, so only the active terms need a correction.
    """
    z = logits(model, X)
    out = _log_sigmoid(-z).sum(axis=1)
    rows, cols = active_columns(levels, schema)
    np.add.at(out, rows, z[rows, cols])
    return out


def log_cond_prob_dataset(
    model: CategoricalModel, x: np.ndarray, levels: np.ndarray, schema: Schema,
    workers: int = 1, chunk_size: int = CAT_CHUNK,
) -> np.ndarray:
    def work(a, b):
        return log_cond_prob_levels(model, x[a:b], levels[a:b], schema)

    parts = map_chunks(work, x.shape[0], workers, chunk_size)
    return np.concatenate(parts) if parts else np.empty(0)


def loss_and_gradient(model_w: np.ndarray, X: np.ndarray, Y: np.ndarray, l2: float) -> tuple[float, np.ndarray]:
    """Mean over rows of sum_j ln(1 + exp(-(2y^j-1) z_j)), plus l2 * ||w||^2."""
    n, d = X.shape
    wc, b, wo = model_w[:d], model_w[d], model_w[d + 1 :]
    z = (X @ wc + b)[:, None] + wo[None, :]
    sign = 2.0 * Y - 1.0
    loss = float(np.logaddexp(0.0, -sign * z).sum() / n + l2 * model_w @ model_w)
    resid = _sigmoid(z) - Y  # d loss / d z
    row = resid.sum(axis=1)
    grad = np.empty_like(model_w)
    grad[:d] = X.T @ row / n
    grad[d] = row.sum() / n
    grad[d + 1 :] = resid.sum(axis=0) / n
    grad += 2.0 * l2 * model_w
    return loss, grad


def _gradient_cols(w: np.ndarray, X: np.ndarray, cols: np.ndarray, l2: float) -> np.ndarray:
    """Gradient of :func:`loss_and_gradient` from active one-hot columns (-1 = unknown level)."""
    n, d = X.shape
    resid = _sigmoid((X @ w[:d] + w[d])[:, None] + w[d + 1 :][None, :])
    rows = np.broadcast_to(np.arange(n)[:, None], cols.shape)
    known = cols >= 0
    if known.all():
        resid[rows, cols] -= 1.0
    else:
        resid[rows[known], cols[known]] -= 1.0
    row = resid.sum(axis=1)
    grad = np.empty_like(w)
    grad[:d] = X.T @ row / n
    grad[d] = row.sum() / n
    grad[d + 1 :] = resid.sum(axis=0) / n
    grad += 2.0 * l2 * w
    return grad


def _mean_nll(w: np.ndarray, X: np.ndarray, L: np.ndarray, schema: Schema, workers: int) -> float:
    d = X.shape[1]
    model = CategoricalModel(w, d, schema.one_hot_width)
    lp = log_cond_prob_dataset(model, X, L, schema, workers)
    return float(-lp.mean())


def fit_sgd(train: Dataset, cfg: SgdConfig = SgdConfig(), workers: int = 1,
            history: list[float] | None = None) -> CategoricalModel:
    """Mini-batch SGD on the negative log-likelihood of the one-hot terms.

    The step size decays as ``learning_rate / sqrt(t)`` with t the 1-based epoch.  The continuous and
    bias coordinates appear in every one of the k+1 terms, so their step is
    divided by k+1 (a fixed diagonal preconditioner); without it the shared
    coordinates diverge at any step size that moves the per-term weights.
    """
    if len(train) == 0:
        raise ValueError("training data is empty")
    schema = train.schema
    X, L = train.x, train.levels
    n, d = X.shape
    width = schema.one_hot_width
    w = np.zeros(d + 1 + width)
    if width == 0:
        return CategoricalModel(w, d, width)

    precond = np.ones_like(w)
    precond[: d + 1] = 1.0 / width
    rng = np.random.default_rng(cfg.seed)
    initial = _mean_nll(w, X, L, schema, workers)
    if history is not None:
        history.append(initial)
    batch = cfg.batch_size
    all_cols = np.where(L == UNKNOWN_LEVEL, -1, L + schema.one_hot_offsets[None, :])
    for epoch in range(cfg.epochs):
        rate = cfg.learning_rate / math.sqrt(epoch + 1)
        order = rng.permutation(n)
        Xp, Cp = X[order], all_cols[order]
        for start in range(0, n, batch):
            grad = _gradient_cols(w, Xp[start : start + batch], Cp[start : start + batch], cfg.l2)
            w -= rate * precond * grad
        current = _mean_nll(w, X, L, schema, workers)
        if history is not None:
            history.append(current)
        if not math.isfinite(current) or current > 10.0 * initial:
            raise SgdDivergenceError(
                f"SGD diverged in epoch {epoch + 1} (loss {current:.4g} vs initial {initial:.4g}); "
                f"try a smaller learning_rate than {cfg.learning_rate}"
            )
        log.debug("sgd epoch %d: mean nll %.6f", epoch + 1, current)
    return CategoricalModel(w, d, width)
