"""Measurements: AUROC, surrogate MSE, complexity metrics, explanation coverage.

``run_protocol`` repeats split -> fit -> score -> tree -> prune -> explain
with seeds spawned from one master seed and aggregates the results.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import detector as det
from .data import Dataset, split
from .explain import COMBINED, PATH, ExplainConfig, Report, explain_top, render_dot, render_html, render_text
from .parallel import map_items
from .tree import (
    ComplexityMetrics, SurrogateTree, TreeConfig, build_full_tree, predict_means, prune, quality,
)

log = logging.getLogger(__name__)


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """P(random anomaly scores below random normal record), ties counted as 1/2.

    ``labels`` is boolean with True = anomalous.  Computed from average ranks
    (Mann-Whitney U).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_a = int(y.sum())
    n_n = int(y.size - n_a)
    if n_a == 0 or n_n == 0:
        raise ValueError("auroc needs both anomalous and normal records")
    ranks = rankdata(s, method="average")
    u = ranks[~y].sum() - n_n * (n_n + 1) / 2.0
    return float(u / (n_a * n_n))


def tree_mse(tree: SurrogateTree, ds: Dataset, targets: np.ndarray) -> float:
    """Mean squared error of leaf-mean predictions; ``ds`` in the tree's units."""
    t = np.asarray(targets, dtype=np.float64)
    pred = predict_means(tree, ds.x, ds.levels)
    return float(np.mean((t - pred) ** 2))


def explanation_fraction(reports: list[Report], flagged_count: int) -> tuple[float, float] | None:
    """(path reports / flagged, combined reports / flagged); None when nothing is flagged."""
    if flagged_count < 0:
        raise ValueError("flagged_count must be >= 0")
    if flagged_count == 0:
        return None
    n_path = sum(r.kind == PATH for r in reports)
    n_comb = sum(r.kind == COMBINED for r in reports)
    return n_path / flagged_count, n_comb / flagged_count


@dataclass(frozen=True)
class ProtocolConfig:
    name: str = "dataset"
    detector: det.DetectorConfig = field(default_factory=det.DetectorConfig)
    thresholds: det.Thresholds = field(default_factory=lambda: det.Thresholds(0.05, 0.5))
    tree: TreeConfig = field(default_factory=TreeConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    lam: float = 1e-4
    train_fraction: float = 0.7
    seed: int = 0


@dataclass
class RunResult:
    repetition: int
    seed: int
    auroc: float
    mse: float
    full: ComplexityMetrics
    pruned: ComplexityMetrics
    flagged: int
    n_path: int
    n_combined: int
    replay_ok: bool

    @property
    def fractions(self) -> tuple[float, float] | None:
        if self.flagged == 0:
            return None
        return self.n_path / self.flagged, self.n_combined / self.flagged


@dataclass
class EvalRow:
    dataset: str
    repetitions: int
    auroc_mean: float
    auroc_std: float
    mse_mean: float
    mse_std: float
    ndt: float
    lam: float
    full: ComplexityMetrics
    pruned: ComplexityMetrics
    path_fraction: float | None
    combined_fraction: float | None
    runs: list[RunResult] = field(default_factory=list, repr=False)

    CSV_FIELDS = (
        "dataset", "repetitions", "auroc_mean", "auroc_std", "mse_mean", "mse_std", "ndt", "lambda",
        "wv_pruned", "clusters_pruned", "nv_pruned", "q_pruned",
        "wv_full", "clusters_full", "nv_full", "q_full", "path_fraction", "combined_fraction",
    )

    def csv_row(self) -> dict:
        def na(v):
            return "NA" if v is None else repr(v)

        return {
            "dataset": self.dataset, "repetitions": self.repetitions,
            "auroc_mean": repr(self.auroc_mean), "auroc_std": repr(self.auroc_std),
            "mse_mean": repr(self.mse_mean), "mse_std": repr(self.mse_std),
            "ndt": repr(self.ndt), "lambda": repr(self.lam),
            "wv_pruned": repr(self.pruned.wv), "clusters_pruned": repr(self.pruned.num_clusters),
            "nv_pruned": repr(self.pruned.nv_total), "q_pruned": repr(self.pruned.q),
            "wv_full": repr(self.full.wv), "clusters_full": repr(self.full.num_clusters),
            "nv_full": repr(self.full.nv_total), "q_full": repr(self.full.q),
            "path_fraction": na(self.path_fraction), "combined_fraction": na(self.combined_fraction),
        }


def spawn_seeds(master: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master).spawn(n)]


def _write_run_artifacts(out: Path, model, full, pruned, reports, scores, est, test: Dataset, metrics: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    full.save(out / "tree_full.json")
    pruned.save(out / "tree_pruned.json")
    (out / "tree.dot").write_text(render_dot(full))
    (out / "tree_pruned.dot").write_text(render_dot(pruned))
    (out / "explanations.txt").write_text(render_text(reports))
    (out / "report.html").write_text(render_html(reports))
    (out / "reports.json").write_text(json.dumps([r.to_dict() for r in reports], indent=1))
    write_scores(out / "scores.csv", test, scores, est, model)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))


def write_scores(path: Path, ds: Dataset, scores: det.ScoreTable, est: np.ndarray, model: det.AdmncModel) -> None:
    total = scores.total
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "log_cont", "log_cat", "total", "estimator", "flagged"])
        for i in range(len(ds)):
            w.writerow([int(ds.index[i]), repr(float(scores.log_continuous[i])), repr(float(scores.log_categorical[i])),
                        repr(float(total[i])), repr(float(est[i])), int(total[i] < model.anomaly_threshold)])


def run_once(ds: Dataset, cfg: ProtocolConfig, repetition: int, seed: int, out_dir: Path | None = None,
             workers: int = 1) -> RunResult:
    train, test = split(ds, cfg.train_fraction, seed)
    if len(test) == 0:
        raise ValueError("the test split is empty; lower train_fraction")
    dcfg = dataclasses.replace(cfg.detector, seed=seed, sgd=dataclasses.replace(cfg.detector.sgd, seed=seed))
    model = det.fit(train, dcfg, cfg.thresholds, workers)
    scores = model.score_dataset(test, workers)
    total = scores.total
    score_auc = auroc(total, test.labels) if test.has_labels else float("nan")

    est = det.rank_estimators(total, cfg.thresholds.ndt)
    test_m = Dataset(test.schema, model.dataset_x(test), test.levels, test.labels, model.stats, test.index)
    full = build_full_tree(test_m, est, cfg.tree, cfg.thresholds, workers)
    pruned = prune(full, cfg.lam)
    mse = tree_mse(pruned, test_m, est)

    reports = explain_top(model, pruned, test, cfg.explain, scores, workers)
    flagged = len(det.top_anomalies(model, scores, cfg.explain.top_n))
    pos = {int(i): k for k, i in enumerate(test.index)}
    replay_ok = all(
        r.path.replay(test_m.x[pos[r.record_index]], test.levels[pos[r.record_index]], test.schema.n_continuous)
        for r in reports if r.kind == PATH
    )
    result = RunResult(
        repetition, seed, score_auc, mse, quality(full, cfg.lam), quality(pruned, cfg.lam), flagged,
        sum(r.kind == PATH for r in reports), sum(r.kind == COMBINED for r in reports), replay_ok,
    )
    if out_dir is not None:
        metrics = {
            "repetition": repetition, "seed": seed, "auroc": score_auc, "mse": mse,
            "full": result.full.to_dict(), "pruned": result.pruned.to_dict(), "flagged": flagged,
            "path_reports": result.n_path, "combined_reports": result.n_combined,
        }
        _write_run_artifacts(out_dir / f"run_{repetition}", model, full, pruned, reports, scores, est, test, metrics)
    log.info("run %d: auroc %.4f mse %.3g flagged %d", repetition, score_auc, mse, flagged)
    return result


def _mean_metrics(ms: list[ComplexityMetrics], lam: float) -> ComplexityMetrics:
    wv = float(np.mean([m.wv for m in ms]))
    nv = float(np.mean([m.nv_total for m in ms]))
    return ComplexityMetrics(wv, float(np.mean([m.num_clusters for m in ms])), nv, -wv - lam * nv, lam)


def run_protocol(
    ds: Dataset,
    cfg: ProtocolConfig = ProtocolConfig(),
    repetitions: int = 5,
    out_dir: str | Path | None = None,
    workers: int = 1,
) -> EvalRow:
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    seeds = spawn_seeds(cfg.seed, repetitions)
    out = None if out_dir is None else Path(out_dir)
    inner = 1 if repetitions > 1 and workers > 1 else workers
    runs = map_items(lambda r: run_once(ds, cfg, r, seeds[r], out, inner), list(range(repetitions)), workers)
    aucs = np.array([r.auroc for r in runs])
    mses = np.array([r.mse for r in runs])
    flagged = sum(r.flagged for r in runs)
    fr = None if flagged == 0 else (sum(r.n_path for r in runs) / flagged, sum(r.n_combined for r in runs) / flagged)
    return EvalRow(
        cfg.name, repetitions, float(aucs.mean()), float(aucs.std()), float(mses.mean()), float(mses.std()),
        cfg.thresholds.ndt, cfg.lam, _mean_metrics([r.full for r in runs], cfg.lam),
        _mean_metrics([r.pruned for r in runs], cfg.lam),
        None if fr is None else fr[0], None if fr is None else fr[1], runs,
    )


def write_eval_csv(rows: list[EvalRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EvalRow.CSV_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow(row.csv_row())


def format_table(rows: list[EvalRow]) -> str:
    head = f"{'dataset':<16} {'AUROC':>17} {'MSE':>21} {'NDT':>6} {'#Cl':>11} {'NV':>13} {'Q':>19} {'fractions':>13}"
    lines = [head, "-" * len(head)]
    for r in rows:
        frac = "n/a" if r.path_fraction is None else f"{r.path_fraction:.3f}-{r.combined_fraction:.3f}"
        lines.append(
            f"{r.dataset:<16} {r.auroc_mean:>8.3f} +/- {r.auroc_std:.3f} {r.mse_mean:>10.3g} +/- {r.mse_std:.2g} "
            f"{r.ndt:>6.3f} {r.pruned.num_clusters:>4.1f}({r.full.num_clusters:>4.1f}) "
            f"{r.pruned.nv_total:>5.1f}({r.full.nv_total:>5.1f}) {r.pruned.q:>8.4f}({r.full.q:>8.4f}) {frac:>13}"
        )
    return "\n".join(lines) + "\n"
