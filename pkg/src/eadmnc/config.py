"""JSON run configuration: parsing, validation, defaults and echo."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .categorical import SgdConfig
from .detector import DetectorConfig, Thresholds
from .explain import ExplainConfig
from .tree import TreeConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class EvalSettings:
    repetitions: int = 5
    train_fraction: float = 0.7


@dataclass(frozen=True)
class SynthSettings:
    n: int = 20000
    d_cont: int = 2
    d_cat: int = 30
    cardinality: int = 4
    nv: int = 4
    anomaly_ratio: float = 0.05


@dataclass(frozen=True)
class RunConfig:
    dataset: Path
    schema: Path
    output_dir: Path
    seed: int = 0
    name: str = ""
    workers: int | None = None
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    thresholds: Thresholds = field(default_factory=lambda: Thresholds(0.05, 0.5))
    tree: TreeConfig = field(default_factory=TreeConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    lam: float = 1e-4
    eval: EvalSettings = field(default_factory=EvalSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)

    def to_dict(self) -> dict:
        det = asdict(self.detector)
        # the seed lives at the top level only
        det.pop("seed")
        det["sgd"].pop("seed")
        return {
            "dataset": str(self.dataset),
            "schema": str(self.schema),
            "output_dir": str(self.output_dir),
            "seed": self.seed,
            "name": self.name,
            "workers": self.workers,
            "detector": det,
            "thresholds": asdict(self.thresholds),
            "tree": asdict(self.tree),
            "explain": asdict(self.explain),
            "lambda": self.lam,
            "eval": asdict(self.eval),
            "synth": asdict(self.synth),
        }

    def write_effective(self, directory: Path | None = None) -> Path:
        out = Path(directory or self.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "effective_config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


_REQUIRED = ("dataset", "schema", "output_dir")
_TOP_KEYS = set(_REQUIRED) | {"seed", "name", "workers", "detector", "thresholds", "tree", "explain", "lambda",
                              "eval", "synth"}


class _Checker:
    """Collects every problem instead of stopping at the first one."""

    def __init__(self):
        self.problems: list[str] = []

    def section(self, obj: dict, key: str, prefix: str = "") -> dict:
        val = obj.get(key, {})
        if val is None:
            return {}
        if not isinstance(val, dict):
            self.problems.append(f"{prefix}{key}: expected an object")
            return {}
        return val

    def unknown(self, obj: dict, allowed, prefix: str) -> None:
        for k in sorted(set(obj) - set(allowed)):
            self.problems.append(f"{prefix}{k}: unknown field")

    def number(self, obj: dict, key: str, prefix: str, default, kind=float, lo=None, hi=None,
               lo_open=False, hi_open=False, nullable=False):
        path = prefix + key
        if key not in obj:
            return default
        val = obj[key]
        if val is None and nullable:
            return None
        if isinstance(val, bool) or not isinstance(val, (int, float)) or (kind is int and not float(val).is_integer()):
            self.problems.append(f"{path}: expected {'an integer' if kind is int else 'a number'}, got {val!r}")
            return default
        val = kind(val)
        if kind is float and not math.isfinite(val):
            self.problems.append(f"{path}: must be finite")
            return default
        bad = (lo is not None and (val <= lo if lo_open else val < lo)) or \
              (hi is not None and (val >= hi if hi_open else val > hi))
        if bad:
            lb = "(" if lo_open else "["
            rb = ")" if hi_open else "]"
            self.problems.append(f"{path}: {val} out of range {lb}{lo if lo is not None else '-inf'}, "
                                 f"{hi if hi is not None else 'inf'}{rb}")
            return default
        return val

    def boolean(self, obj: dict, key: str, prefix: str, default: bool) -> bool:
        if key not in obj:
            return default
        if not isinstance(obj[key], bool):
            self.problems.append(f"{prefix}{key}: expected true or false")
            return default
        return obj[key]


def parse_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a decoded JSON object and fill defaults."""
    c = _Checker()
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: expected a JSON object"])
    c.unknown(raw, _TOP_KEYS, "")
    base = Path(base_dir) if base_dir is not None else Path(".")
    paths = {}
    for key in _REQUIRED:
        val = raw.get(key)
        if val is None:
            c.problems.append(f"{key}: required field is missing")
        elif not isinstance(val, str) or not val:
            c.problems.append(f"{key}: expected a non-empty path string")
        else:
            p = Path(val)
            paths[key] = p if p.is_absolute() else base / p
    seed = c.number(raw, "seed", "", 0, int, lo=0)
    workers = c.number(raw, "workers", "", None, int, lo=1, nullable=True)
    name = raw.get("name", "")
    if not isinstance(name, str):
        c.problems.append("name: expected a string")
        name = ""

    d = c.section(raw, "detector")
    c.unknown(d, {"n_components", "kmeans_subset", "em_max_iter", "em_tol", "sgd", "target_ratio", "standardize",
                  "rule1_quantile"}, "detector.")
    s = c.section(d, "sgd", "detector.")
    c.unknown(s, {"learning_rate", "batch_size", "epochs", "l2"}, "detector.sgd.")
    sd = SgdConfig()
    sgd = SgdConfig(
        learning_rate=c.number(s, "learning_rate", "detector.sgd.", sd.learning_rate, lo=0, lo_open=True),
        batch_size=c.number(s, "batch_size", "detector.sgd.", sd.batch_size, int, lo=1),
        epochs=c.number(s, "epochs", "detector.sgd.", sd.epochs, int, lo=1),
        l2=c.number(s, "l2", "detector.sgd.", sd.l2, lo=0),
        seed=seed,
    )
    dd = DetectorConfig()
    detector = DetectorConfig(
        n_components=c.number(d, "n_components", "detector.", dd.n_components, int, lo=1),
        kmeans_subset=c.number(d, "kmeans_subset", "detector.", dd.kmeans_subset, lo=0, hi=1, lo_open=True),
        em_max_iter=c.number(d, "em_max_iter", "detector.", dd.em_max_iter, int, lo=1),
        em_tol=c.number(d, "em_tol", "detector.", dd.em_tol, lo=0),
        sgd=sgd,
        target_ratio=c.number(d, "target_ratio", "detector.", dd.target_ratio, lo=0, hi=1, hi_open=True),
        standardize=c.boolean(d, "standardize", "detector.", dd.standardize),
        rule1_quantile=c.number(d, "rule1_quantile", "detector.", dd.rule1_quantile, lo=0, hi=1),
        seed=seed,
    )

    t = c.section(raw, "thresholds")
    c.unknown(t, {"adt", "ndt"}, "thresholds.")
    default_adt = detector.target_ratio if detector.target_ratio > 0 else 0.05
    adt = c.number(t, "adt", "thresholds.", None, lo=0, hi=1, lo_open=True, hi_open=True, nullable=True)
    adt = default_adt if adt is None else adt
    ndt = c.number(t, "ndt", "thresholds.", 0.5, lo=0, hi=1, lo_open=True)
    if adt > ndt:
        c.problems.append(f"thresholds.adt: {adt} must not exceed thresholds.ndt ({ndt})")
        adt = ndt
    thresholds = Thresholds(adt, ndt)

    tr = c.section(raw, "tree")
    c.unknown(tr, {"l_max", "bins", "min_leaf"}, "tree.")
    tree = TreeConfig(
        l_max=c.number(tr, "l_max", "tree.", 5, int, lo=1),
        bins=c.number(tr, "bins", "tree.", 40, int, lo=2),
        min_leaf=c.number(tr, "min_leaf", "tree.", 1, int, lo=1),
    )

    e = c.section(raw, "explain")
    c.unknown(e, {"t_filter", "pdf_threshold", "tiny_fraction", "top_n"}, "explain.")
    explain = ExplainConfig(
        t_filter=c.number(e, "t_filter", "explain.", 0.40, lo=0, hi=1, lo_open=True, hi_open=True),
        pdf_threshold=c.number(e, "pdf_threshold", "explain.", None, lo=0, lo_open=True, nullable=True),
        tiny_fraction=c.number(e, "tiny_fraction", "explain.", 0.01, lo=0, hi=1, lo_open=True, hi_open=True),
        top_n=c.number(e, "top_n", "explain.", 400, int, lo=1),
    )
    lam = c.number(raw, "lambda", "", 1e-4, lo=0)

    ev = c.section(raw, "eval")
    c.unknown(ev, {"repetitions", "train_fraction"}, "eval.")
    evs = EvalSettings(
        repetitions=c.number(ev, "repetitions", "eval.", 5, int, lo=1),
        train_fraction=c.number(ev, "train_fraction", "eval.", 0.7, lo=0, hi=1, lo_open=True),
    )
    sy = c.section(raw, "synth")
    c.unknown(sy, {"n", "d_cont", "d_cat", "cardinality", "nv", "anomaly_ratio"}, "synth.")
    syn = SynthSettings(
        n=c.number(sy, "n", "synth.", 20000, int, lo=1),
        d_cont=c.number(sy, "d_cont", "synth.", 2, int, lo=0),
        d_cat=c.number(sy, "d_cat", "synth.", 30, int, lo=0),
        cardinality=c.number(sy, "cardinality", "synth.", 4, int, lo=3),
        nv=c.number(sy, "nv", "synth.", 4, int, lo=0),
        anomaly_ratio=c.number(sy, "anomaly_ratio", "synth.", 0.05, lo=0, hi=0.5, hi_open=True),
    )
    if syn.nv > syn.d_cont + syn.d_cat:
        c.problems.append(f"synth.nv: {syn.nv} exceeds d_cont + d_cat ({syn.d_cont + syn.d_cat})")

    if c.problems:
        raise ConfigError(c.problems)
    return RunConfig(
        paths["dataset"], paths["schema"], paths["output_dir"], seed, name, workers,
        detector, thresholds, tree, explain, lam, evs, syn,
    )


def validate_config(path: str | Path) -> RunConfig:
    """Read and validate a JSON config; relative paths resolve against its folder."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    if not text.strip():
        raw = {}
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"<root>: not valid JSON ({exc})"]) from None
    return parse_config(raw, path.parent)


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    """Apply command-line overrides; ``None`` values are ignored."""
    kw = {k: v for k, v in kw.items() if v is not None}
    if "seed" in kw:
        seed = kw["seed"]
        cfg = replace(cfg, seed=seed, detector=replace(cfg.detector, seed=seed, sgd=replace(cfg.detector.sgd, seed=seed)))
    if "workers" in kw:
        cfg = replace(cfg, workers=kw["workers"])
    if "lam" in kw:
        cfg = replace(cfg, lam=kw["lam"])
    if "output_dir" in kw:
        cfg = replace(cfg, output_dir=Path(kw["output_dir"]))
    if "adt" in kw or "ndt" in kw:
        cfg = replace(cfg, thresholds=Thresholds(kw.get("adt", cfg.thresholds.adt), kw.get("ndt", cfg.thresholds.ndt)))
    if "t_filter" in kw or "top_n" in kw:
        cfg = replace(cfg, explain=replace(cfg.explain, **{k: kw[k] for k in ("t_filter", "top_n") if k in kw}))
    if "repetitions" in kw:
        cfg = replace(cfg, eval=replace(cfg.eval, repetitions=kw["repetitions"]))
    return cfg
