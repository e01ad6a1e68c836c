"""The composite detector: log P(x) from a Gaussian mixture plus log P(y | x, w).

A record's anomaly score is the sum of the two log-likelihood terms; lower
means more anomalous.  Records scoring below a threshold calibrated on the
training data are flagged.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import categorical as catm
from . import gmm as gmmm
from .data import Dataset, DataError, MixedRecord, Schema, StandardizationStats, compute_stats, one_hot

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "eadmnc-model/1"


@dataclass(frozen=True)
class Thresholds:
    """Band edges on the rank-estimator scale: [0, adt) anomalous, [adt, ndt) transition, ndt normal."""

    adt: float
    ndt: float

    def __post_init__(self):
        if not 0.0 < self.adt < 1.0:
            raise ValueError(f"adt must be in (0, 1), got {self.adt}")
        if not 0.0 < self.ndt <= 1.0:
            raise ValueError(f"ndt must be in (0, 1], got {self.ndt}")
        if self.adt > self.ndt:
            raise ValueError(f"adt ({self.adt}) must not exceed ndt ({self.ndt})")


@dataclass(frozen=True)
class DetectorConfig:
    n_components: int = 2
    kmeans_subset: float = 0.2
    em_max_iter: int = 100
    em_tol: float = 1e-6
    sgd: catm.SgdConfig = field(default_factory=catm.SgdConfig)
    target_ratio: float = 0.05
    standardize: bool = True
    rule1_quantile: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if not 0.0 <= self.target_ratio < 1.0:
            raise ValueError(f"target_ratio must be in [0, 1), got {self.target_ratio}")
        if not 0.0 <= self.rule1_quantile <= 1.0:
            raise ValueError("rule1_quantile must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "DetectorConfig":
        obj = dict(obj)
        sgd = catm.SgdConfig(**obj.pop("sgd", {}))
        return cls(sgd=sgd, **obj)


@dataclass(frozen=True)
class AnomalyScore:
    log_continuous: float
    log_categorical: float
    total: float

    @classmethod
    def of(cls, log_continuous: float, log_categorical: float) -> "AnomalyScore":
        return cls(float(log_continuous), float(log_categorical), float(log_continuous) + float(log_categorical))


@dataclass(frozen=True)
class ScoreTable:
    """Column-wise scores of a whole dataset."""

    log_continuous: np.ndarray
    log_categorical: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.log_continuous + self.log_categorical

    def __len__(self) -> int:
        return int(self.log_continuous.shape[0])

    def __getitem__(self, i: int) -> AnomalyScore:
        return AnomalyScore.of(self.log_continuous[i], self.log_categorical[i])


@dataclass(frozen=True)
class AdmncModel:
    """Fitted detector.  ``gmm`` is None when the schema has no continuous features.

    Inputs are raw (unstandardized) records; ``stats`` is applied internally.
    """

    schema: Schema
    gmm: gmmm.GmmParams | None
    cat: catm.CategoricalModel
    stats: StandardizationStats | None
    anomaly_threshold: float
    thresholds: Thresholds
    log_pdf_threshold: float = -math.inf
    config: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        d = self.schema.n_continuous
        if (self.gmm is None) != (d == 0) or (self.gmm is not None and self.gmm.dim != d):
            raise ValueError("mixture dimension does not match the schema")
        if self.cat.n_continuous != d or self.cat.one_hot_width != self.schema.one_hot_width:
            raise ValueError("categorical model layout does not match the schema")

    # -- input handling -------------------------------------------------
    def model_x(self, x: np.ndarray, already_standardized: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if already_standardized or self.stats is None:
            return x
        return self.stats.transform(x)

    def dataset_x(self, ds: Dataset) -> np.ndarray:
        if ds.schema.n_continuous != self.schema.n_continuous or ds.schema.n_categorical != self.schema.n_categorical:
            raise DataError("dataset schema does not match the model")
        return self.model_x(ds.x, ds.is_standardized)

    # -- scoring --------------------------------------------------------
    def score_x(self, xm: np.ndarray, levels: np.ndarray, workers: int = 1) -> ScoreTable:
        """Score rows whose continuous part is already in model units."""
        n = xm.shape[0]
        if self.gmm is None:
            lc = np.zeros(n)
        else:
            lc = gmmm.log_pdf_vector(self.gmm, xm, workers)
        lk = catm.log_cond_prob_dataset(self.cat, xm, levels, self.schema, workers)
        return ScoreTable(lc, lk)

    def score_dataset(self, ds: Dataset, workers: int = 1) -> ScoreTable:
        return self.score_x(self.dataset_x(ds), ds.levels, workers)

    def score(self, r: MixedRecord) -> AnomalyScore:
        x = np.asarray(r.x, dtype=np.float64)
        if x.shape != (self.schema.n_continuous,):
            raise DataError(f"record has {x.shape[0]} continuous values, model expects {self.schema.n_continuous}")
        xm = self.model_x(x)
        lc = 0.0 if self.gmm is None else gmmm.log_pdf(self.gmm, xm)
        lk = catm.log_cond_prob(self.cat, xm, one_hot(r, self.schema))
        return AnomalyScore.of(lc, lk)

    def is_flagged(self, total: float | np.ndarray):
        return total < self.anomaly_threshold

    # -- persistence ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "schema": self.schema.to_dict(),
            "stats": None if self.stats is None else self.stats.to_dict(),
            "standardized_inputs": self.stats is not None,
            "gmm": None if self.gmm is None else self.gmm.to_dict(),
            "w": self.cat.to_dict(),
            "anomaly_threshold": self.anomaly_threshold,
            "log_pdf_threshold": self.log_pdf_threshold,
            "thresholds": {"adt": self.thresholds.adt, "ndt": self.thresholds.ndt},
            "config": self.config.to_dict(),
            "seed": self.config.seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "AdmncModel":
        if obj.get("format") != BUNDLE_FORMAT:
            raise ValueError(f"unsupported model bundle format {obj.get('format')!r}")
        return cls(
            schema=Schema.from_dict(obj["schema"]),
            gmm=None if obj["gmm"] is None else gmmm.GmmParams.from_dict(obj["gmm"]),
            cat=catm.CategoricalModel.from_dict(obj["w"]),
            stats=None if obj["stats"] is None else StandardizationStats.from_dict(obj["stats"]),
            anomaly_threshold=float(obj["anomaly_threshold"]),
            thresholds=Thresholds(**obj["thresholds"]),
            log_pdf_threshold=float(obj["log_pdf_threshold"]),
            config=DetectorConfig.from_dict(obj["config"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "AdmncModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def calibrate(train_scores: np.ndarray, target_ratio: float) -> float:
    """Threshold such that ``floor(target_ratio * n)`` training totals fall strictly below it.

    The cut sits halfway between the m-th and (m+1)-th lowest score; with
    ``target_ratio = 0`` it sits just under the minimum.
    """
    s = np.sort(np.asarray(train_scores, dtype=np.float64))
    if s.size == 0:
        raise ValueError("cannot calibrate on an empty score list")
    if not 0.0 <= target_ratio < 1.0:
        raise ValueError(f"target_ratio must be in [0, 1), got {target_ratio}")
    m = int(math.floor(target_ratio * s.size))
    if m == 0:
        return float(np.nextafter(s[0], -np.inf))
    return float(0.5 * (s[m - 1] + s[m]))


def rule1_threshold(gmm: gmmm.GmmParams | None, xm: np.ndarray, quantile: float) -> float:
    """Log-density cut for the "far from every Gaussian" rule.

    Taken as the ``quantile`` of each training row's best component
    log-density, so the rule fires on that share of the training data.
    """
    if gmm is None or xm.shape[0] == 0:
        return -math.inf
    best = gmmm.component_log_pdf_matrix(gmm, xm).max(axis=1)
    return float(np.quantile(best, quantile))


def fit(
    train: Dataset,
    cfg: DetectorConfig = DetectorConfig(),
    thresholds: Thresholds | None = None,
    workers: int = 1,
) -> AdmncModel:
    """Fit both likelihood terms on the normal rows of ``train``."""
    if train.has_labels:
        train = train.subset(np.flatnonzero(~train.labels))
    if len(train) < 2:
        raise DataError(f"insufficient data: {len(train)} normal training record(s)")
    if thresholds is None:
        thresholds = Thresholds(adt=cfg.target_ratio if cfg.target_ratio > 0 else 0.05, ndt=0.5)

    if train.is_standardized:
        stats = train.standardization_stats
        xm = train.x
    elif cfg.standardize:
        stats = compute_stats(train.x)
        xm = stats.transform(train.x)
    else:
        stats, xm = None, train.x
    model_train = Dataset(train.schema, xm, train.levels, None, stats, train.index)

    def fit_cont():
        if train.schema.n_continuous == 0:
            return None
        return gmmm.fit_gmm(
            xm, cfg.n_components, cfg.kmeans_subset, cfg.seed, cfg.em_max_iter, cfg.em_tol, workers
        )

    def fit_cat():
        return catm.fit_sgd(model_train, cfg.sgd, workers)

    if workers >= 2:
        # the two terms are independent, so they can train side by side
        with ThreadPoolExecutor(max_workers=2) as pool:
            f_cont, f_cat = pool.submit(fit_cont), pool.submit(fit_cat)
            gmm, cat = f_cont.result(), f_cat.result()
    else:
        gmm, cat = fit_cont(), fit_cat()

    model = AdmncModel(train.schema, gmm, cat, stats, 0.0, thresholds, -math.inf, cfg)
    scores = model.score_x(xm, train.levels, workers)
    threshold = calibrate(scores.total, cfg.target_ratio)
    pdf_cut = rule1_threshold(gmm, xm, cfg.rule1_quantile)
    log.info("calibrated anomaly threshold %.6g on %d training rows", threshold, len(train))
    return AdmncModel(train.schema, gmm, cat, stats, threshold, thresholds, pdf_cut, cfg)


def rank_estimators(totals: np.ndarray, ndt: float) -> np.ndarray:
    """Average rank of each total (ascending) divided by n, clamped at ``ndt``."""
    totals = np.asarray(totals, dtype=np.float64)
    if totals.size == 0:
        raise ValueError("cannot rank an empty score list")
    raw = rankdata(totals, method="average") / totals.size
    return np.minimum(raw, ndt)


def dataset_estimators(model: AdmncModel, ds: Dataset, th: Thresholds | None = None, workers: int = 1) -> np.ndarray:
    th = model.thresholds if th is None else th
    return rank_estimators(model.score_dataset(ds, workers).total, th.ndt)


def top_anomalies(model: AdmncModel, scores: ScoreTable, N: int = 400) -> list[tuple[int, AnomalyScore]]:
    """The N lowest flagged totals, ascending (ties keep row order)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    total = scores.total
    flagged = np.flatnonzero(total < model.anomaly_threshold)
    order = flagged[np.argsort(total[flagged], kind="stable")][:N]
    return [(int(i), scores[int(i)]) for i in order]
