"""Command line entry point: ``eadmnc train|score|explain|tree|synth|eval --config <path>``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import detector as det
from .config import ConfigError, RunConfig, validate_config, with_overrides
from .data import Dataset, SyntheticGenerator, load_dataset, load_schema, save_dataset, save_schema
from .evaluation import ProtocolConfig, format_table, run_protocol, write_eval_csv, write_scores
from .explain import explain_top, render_dot, render_html, render_text
from .parallel import resolve_workers, single_threaded_blas
from .tree import SurrogateTree, build_full_tree, prune, quality

log = logging.getLogger("eadmnc")

COMMANDS = ("train", "score", "explain", "tree", "synth", "eval")
EXIT_STAGE = 1
EXIT_CONFIG = 2


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")


class PathProblem(FileNotFoundError):
    pass


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise PathProblem(f"{what} not found: {path}")
    return path


def _stage(name: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (PathProblem, ConfigError):
        raise
    except Exception as exc:  # every other failure is reported against its stage
        raise StageError(name, exc) from exc


def _load_data(cfg: RunConfig, model: det.AdmncModel | None = None) -> Dataset:
    """Load the dataset; with a model, its persisted level dictionaries are reused."""
    _require(cfg.schema, "schema file")
    _require(cfg.dataset, "dataset file")
    schema = model.schema if model is not None else _stage("load", load_schema, cfg.schema)
    return _stage("load", load_dataset, cfg.dataset, schema)


def _model_path(cfg: RunConfig) -> Path:
    return cfg.output_dir / "model.json"


def _load_model(cfg: RunConfig) -> det.AdmncModel:
    return _stage("load-model", det.AdmncModel.load, _require(_model_path(cfg), "model bundle (run 'train' first)"))


def _verify(paths: list[Path]) -> None:
    """Every declared artifact must exist and parse."""
    for p in paths:
        if not p.is_file():
            raise StageError("verify", FileNotFoundError(f"missing artifact {p}"))
        try:
            if p.suffix == ".json":
                json.loads(p.read_text())
            elif p.suffix == ".csv":
                with open(p, newline="") as fh:
                    rows = list(csv.reader(fh))
                if not rows:
                    raise ValueError("empty CSV")
            elif p.suffix == ".dot":
                text = p.read_text()
                if not text.startswith("digraph") or not text.rstrip().endswith("}"):
                    raise ValueError("not a DOT digraph")
            elif p.suffix == ".html":
                if "</html>" not in p.read_text():
                    raise ValueError("truncated HTML")
        except Exception as exc:
            raise StageError("verify", ValueError(f"artifact {p} does not parse: {exc}")) from exc


def cmd_train(cfg: RunConfig, workers: int) -> list[Path]:
    ds = _load_data(cfg)
    model = _stage("train", det.fit, ds, cfg.detector, cfg.thresholds, workers)
    out = _model_path(cfg)
    model.save(out)
    log.info("model written to %s (threshold %.6g)", out, model.anomaly_threshold)
    return [out]


def _estimators(model: det.AdmncModel, ds: Dataset, cfg: RunConfig, workers: int):
    scores = _stage("score", model.score_dataset, ds, workers)
    est = _stage("score", det.rank_estimators, scores.total, cfg.thresholds.ndt)
    return scores, est


def cmd_score(cfg: RunConfig, workers: int) -> list[Path]:
    model = _load_model(cfg)
    ds = _load_data(cfg, model)
    scores, est = _estimators(model, ds, cfg, workers)
    out = cfg.output_dir / "scores.csv"
    write_scores(out, ds, scores, est, model)
    return [out]


def _build_trees(cfg: RunConfig, model: det.AdmncModel, ds: Dataset, workers: int):
    scores, est = _estimators(model, ds, cfg, workers)
    ds_m = Dataset(ds.schema, model.dataset_x(ds), ds.levels, ds.labels, model.stats, ds.index)
    full = _stage("tree", build_full_tree, ds_m, est, cfg.tree, cfg.thresholds, workers)
    pruned = _stage("prune", prune, full, cfg.lam)
    return scores, full, pruned


def cmd_tree(cfg: RunConfig, workers: int) -> list[Path]:
    model = _load_model(cfg)
    ds = _load_data(cfg, model)
    _, full, pruned = _build_trees(cfg, model, ds, workers)
    out = cfg.output_dir
    full.save(out / "tree_full.json")
    pruned.save(out / "tree_pruned.json")
    (out / "tree.dot").write_text(render_dot(full))
    (out / "tree_pruned.dot").write_text(render_dot(pruned))
    metrics = {"full": quality(full, cfg.lam).to_dict(), "pruned": quality(pruned, cfg.lam).to_dict()}
    (out / "complexity.json").write_text(json.dumps(metrics, indent=2))
    print(f"full:   clusters={metrics['full']['num_clusters']} NV={metrics['full']['nv_total']} "
          f"WV={metrics['full']['wv']:.6g} Q={metrics['full']['q']:.6g}")
    print(f"pruned: clusters={metrics['pruned']['num_clusters']} NV={metrics['pruned']['nv_total']} "
          f"WV={metrics['pruned']['wv']:.6g} Q={metrics['pruned']['q']:.6g}")
    return [out / n for n in ("tree_full.json", "tree_pruned.json", "tree.dot", "tree_pruned.dot", "complexity.json")]


def cmd_explain(cfg: RunConfig, workers: int) -> list[Path]:
    model = _load_model(cfg)
    ds = _load_data(cfg, model)
    tree_path = cfg.output_dir / "tree_pruned.json"
    if tree_path.is_file():
        tree = _stage("load-tree", SurrogateTree.load, tree_path)
        scores = None
    else:
        scores, _, tree = _build_trees(cfg, model, ds, workers)
    reports = _stage("explain", explain_top, model, tree, ds, cfg.explain, scores, workers)
    out = cfg.output_dir
    (out / "explanations.txt").write_text(render_text(reports))
    (out / "report.html").write_text(render_html(reports))
    (out / "reports.json").write_text(json.dumps([r.to_dict() for r in reports], indent=1))
    n_path = sum(r.kind == "path" for r in reports)
    print(f"explained {len(reports)} anomalies: {n_path} path, {len(reports) - n_path} combined")
    return [out / "explanations.txt", out / "report.html", out / "reports.json"]


def cmd_synth(cfg: RunConfig, workers: int) -> list[Path]:
    s = cfg.synth
    gen = _stage("synth", SyntheticGenerator, s.d_cont, s.d_cat, s.cardinality)
    ds, _ = _stage("synth", gen.sample, s.n, s.nv, s.anomaly_ratio, cfg.seed)
    cfg.dataset.parent.mkdir(parents=True, exist_ok=True)
    cfg.schema.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, cfg.dataset)
    save_schema(gen.schema, cfg.schema)
    return [cfg.dataset, cfg.schema]


def cmd_eval(cfg: RunConfig, workers: int) -> list[Path]:
    ds = _load_data(cfg)
    pc = ProtocolConfig(
        name=cfg.name or cfg.dataset.stem, detector=cfg.detector, thresholds=cfg.thresholds, tree=cfg.tree,
        explain=cfg.explain, lam=cfg.lam, train_fraction=cfg.eval.train_fraction, seed=cfg.seed,
    )
    row = _stage("eval", run_protocol, ds, pc, cfg.eval.repetitions, cfg.output_dir / "runs", workers)
    out = cfg.output_dir / "eval_results.csv"
    write_eval_csv([row], out)
    table = format_table([row])
    (cfg.output_dir / "eval_results.txt").write_text(table)
    print(table, end="")
    return [out]


HANDLERS = {
    "train": cmd_train, "score": cmd_score, "explain": cmd_explain,
    "tree": cmd_tree, "synth": cmd_synth, "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eadmnc", description="Explainable anomaly detection on mixed tabular data.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="data-parallel workers (default: $EADMNC_WORKERS or all cores)")
    p.add_argument("--lambda", dest="lam", type=float, help="pruning penalty")
    p.add_argument("--adt", type=float)
    p.add_argument("--ndt", type=float)
    p.add_argument("--t-filter", dest="t_filter", type=float)
    p.add_argument("--top-n", dest="top_n", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = validate_config(args.config)
        cfg = with_overrides(cfg, seed=args.seed, workers=args.workers, lam=args.lam, adt=args.adt, ndt=args.ndt,
                             t_filter=args.t_filter, top_n=args.top_n, repetitions=args.repetitions,
                             output_dir=args.output_dir)
        workers = resolve_workers(cfg.workers)
        cfg.write_effective()
        with single_threaded_blas():
            artifacts = HANDLERS[args.command](cfg, workers)
        _verify(artifacts)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        # bad config, bad override or missing input path
        print(f"eadmnc: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"eadmnc: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
