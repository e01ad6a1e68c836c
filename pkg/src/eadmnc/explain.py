"""Local explanations for flagged records, and text/DOT/HTML renderers.

A flagged record that the surrogate tree sends to an anomalous leaf is
explained by the split conditions along its path.  Any other flagged record
gets a combined report: two rules over the Gaussian mixture for the
continuous part, and the low-probability one-hot terms of the categorical
model for the categorical part.
"""
from __future__ import annotations

import html
import math
from dataclasses import dataclass, field

import numpy as np

from . import categorical as catm
from . import gmm as gmmm
from .data import Dataset, MixedRecord, Schema, one_hot
from .detector import AdmncModel, AnomalyScore, ScoreTable, Thresholds, top_anomalies
from .parallel import map_items
from .tree import (
    ANOMALOUS_BAND, NORMAL_BAND, TRANSITION_BAND, SurrogateTree, TreeNode, classify_leaf, path_to_leaf, predict,
)

ALL_GAUSSIANS_UNLIKELY = "all_gaussians_unlikely"
TINY_COMPONENT = "tiny_component"
PATH = "path"
COMBINED = "combined"


class NotFlaggedError(ValueError):
    pass


@dataclass(frozen=True)
class ExplainConfig:
    t_filter: float = 0.40
    # density cut for the first rule; None uses the cut calibrated at fit time
    pdf_threshold: float | None = None
    tiny_fraction: float = 0.01
    top_n: int = 400

    def __post_init__(self):
        if not 0.0 < self.t_filter < 1.0:
            raise ValueError(f"t_filter must be in (0, 1), got {self.t_filter}")
        if not 0.0 < self.tiny_fraction < 1.0:
            raise ValueError(f"tiny_fraction must be in (0, 1), got {self.tiny_fraction}")
        if self.pdf_threshold is not None and not self.pdf_threshold > 0:
            raise ValueError("pdf_threshold must be a positive density")
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")

    def log_pdf_cut(self, model: AdmncModel) -> float:
        if self.pdf_threshold is None:
            return model.log_pdf_threshold
        return math.log(self.pdf_threshold)


@dataclass(frozen=True)
class Condition:
    feature: int
    name: str
    comparator: str  # "<=", ">", "in", "not in"
    value: float | tuple[int, ...]  # model units, or level indices
    display: str  # value in original units / level names

    def holds(self, x: np.ndarray, levels: np.ndarray, n_continuous: int) -> bool:
        if self.comparator == "<=":
            return bool(x[self.feature] <= self.value)
        if self.comparator == ">":
            return bool(x[self.feature] > self.value)
        inside = int(levels[self.feature - n_continuous]) in self.value
        return inside if self.comparator == "in" else not inside

    def text(self) -> str:
        return f'Feature "{self.name}" {self.comparator} {self.display}'

    def to_dict(self) -> dict:
        v = list(self.value) if isinstance(self.value, tuple) else self.value
        return {"feature": self.name, "index": self.feature, "comparator": self.comparator, "value": v, "display": self.display}


@dataclass(frozen=True)
class PathExplanation:
    conditions: tuple[Condition, ...]
    leaf_id: int
    leaf_share: float
    leaf_class: str

    def replay(self, x: np.ndarray, levels: np.ndarray, n_continuous: int) -> bool:
        return all(c.holds(x, levels, n_continuous) for c in self.conditions)

    def to_dict(self) -> dict:
        return {
            "conditions": [c.to_dict() for c in self.conditions],
            "leaf_id": self.leaf_id, "leaf_share": self.leaf_share, "leaf_class": self.leaf_class,
        }


@dataclass(frozen=True)
class RuleVerdict:
    rule_id: str
    fired: bool
    evidence: dict | None = None

    def __post_init__(self):
        if self.fired != (self.evidence is not None):
            raise ValueError("evidence must be present exactly when the rule fires")

    def to_dict(self) -> dict:
        return {"rule": self.rule_id, "fired": self.fired, "evidence": self.evidence}


@dataclass(frozen=True)
class CategoricalFinding:
    j: int
    feature: str
    level: str
    bit: int
    estimator: float
    involved_continuous: tuple[str, float] | None = None

    def to_dict(self) -> dict:
        d = {"j": self.j, "feature": self.feature, "level": self.level, "bit": self.bit, "estimator": self.estimator}
        if self.involved_continuous is not None:
            d["involved_continuous"] = {"feature": self.involved_continuous[0], "value": self.involved_continuous[1]}
        return d


@dataclass
class Report:
    number: int  # 1-based position among the explained anomalies
    record_index: int
    kind: str
    score: AnomalyScore
    path: PathExplanation | None = None
    verdicts: list[RuleVerdict] = field(default_factory=list)
    findings: list[CategoricalFinding] = field(default_factory=list)
    predicted_component: int | None = None
    component_log_pdfs: list[float] = field(default_factory=list)
    mean_categorical_estimator: float | None = None
    summary_text: str = ""

    def to_dict(self) -> dict:
        return {
            "number": self.number,
            "record_index": self.record_index,
            "kind": self.kind,
            "score": {"log_continuous": self.score.log_continuous, "log_categorical": self.score.log_categorical,
                      "total": self.score.total},
            "path": None if self.path is None else self.path.to_dict(),
            "verdicts": [v.to_dict() for v in self.verdicts],
            "findings": [f.to_dict() for f in self.findings],
            "predicted_component": self.predicted_component,
            "component_log_pdfs": self.component_log_pdfs,
            "mean_categorical_estimator": self.mean_categorical_estimator,
            "summary": self.summary_text,
        }


def _level_names(schema: Schema, c: int, levels: tuple[int, ...]) -> str:
    names = schema.categorical_levels[c] if schema.categorical_levels else ()
    shown = [names[v] if v < len(names) else str(v) for v in levels]
    return "{" + ", ".join(shown) + "}"


# -- tree path -----------------------------------------------------------------

def transcribe(tree: SurrogateTree, x: np.ndarray, levels: np.ndarray, require_anomalous: bool = True) -> PathExplanation:
    """Conditions from root to the record's leaf; ``x`` in the tree's units."""
    steps = path_to_leaf(tree, x, levels)
    d = tree.schema.n_continuous
    conds = []
    for node, went_left in steps:
        s = node.split
        if s.kind == "continuous":
            conds.append(Condition(s.feature, s.name, "<=" if went_left else ">", float(s.threshold),
                                   f"{tree.raw_value(s):.6g}"))
        else:
            conds.append(Condition(s.feature, s.name, "in" if went_left else "not in", s.left_levels,
                                   _level_names(tree.schema, s.feature - d, s.left_levels)))
    leaf = predict(tree, x, levels)
    band = classify_leaf(leaf, tree.thresholds)
    if require_anomalous and band != ANOMALOUS_BAND:
        raise ValueError(f"record lands in a {band} leaf; use the combined report")
    return PathExplanation(tuple(conds), leaf.node_id, leaf.count / tree.total_count, band)


# -- continuous rules ------------------------------------------------------------

def continuous_rules(model: AdmncModel, xm: np.ndarray, cfg: ExplainConfig = ExplainConfig()) -> list[RuleVerdict]:
    """Verdicts of the two mixture rules for one continuous vector in model units."""
    if model.gmm is None:
        return [RuleVerdict(ALL_GAUSSIANS_UNLIKELY, False), RuleVerdict(TINY_COMPONENT, False)]
    logs = gmmm.component_log_pdfs(model.gmm, xm)
    cut = cfg.log_pdf_cut(model)
    out = []
    if bool((logs < cut).all()):
        out.append(RuleVerdict(ALL_GAUSSIANS_UNLIKELY, True, {"log_pdfs": logs.tolist(), "log_threshold": cut}))
    else:
        out.append(RuleVerdict(ALL_GAUSSIANS_UNLIKELY, False))
    k = gmmm.assign(model.gmm, xm)
    share = float(model.gmm.weights[k])
    if share < cfg.tiny_fraction:
        out.append(RuleVerdict(TINY_COMPONENT, True, {"component": k, "weight": share, "tiny_fraction": cfg.tiny_fraction}))
    else:
        out.append(RuleVerdict(TINY_COMPONENT, False))
    return out


# -- categorical terms ---------------------------------------------------------

def estimator_list(cat: catm.CategoricalModel, xm: np.ndarray, y: np.ndarray) -> list[tuple[float, int, int]]:
    """(estimator, j, y^j) for every one-hot term, ascending by estimator then j."""
    est = catm.term_estimators(cat, xm[None, :], y[None, :])[0]
    order = np.lexsort((np.arange(est.size), est))
    return [(float(est[j]), int(j), int(y[j])) for j in order]


def filter_estimators(E: list[tuple[float, int, int]], t_filter: float) -> list[tuple[float, int, int]]:
    return [e for e in E if e[0] < t_filter]


def harmful_addend(cat: catm.CategoricalModel, xm: np.ndarray, j: int, bit: int) -> int | None:
    """Index of the addend of <w, (x, m_j)> pushing the observed bit's estimator down most.

    Returns None when no addend pushes it down.  Ties go to the lowest index.
    """
    signed = (2 * bit - 1) * catm.addends(cat, xm, j)
    i = int(np.argmin(signed))
    return i if signed[i] < 0 else None


def categorical_findings(
    model: AdmncModel, xm: np.ndarray, y: np.ndarray, cfg: ExplainConfig = ExplainConfig(),
    x_raw: np.ndarray | None = None,
) -> list[CategoricalFinding]:
    schema = model.schema
    d = schema.n_continuous
    x_raw = model.stats.inverse(xm) if x_raw is None and model.stats is not None else (xm if x_raw is None else x_raw)
    out = []
    for est, j, bit in filter_estimators(estimator_list(model.cat, xm, y), cfg.t_filter):
        feat, lvl = schema.one_hot_term(j)
        involved = None
        i = harmful_addend(model.cat, xm, j, bit)
        if i is not None and i < d:
            involved = (schema.continuous_names[i], float(x_raw[i]))
        out.append(CategoricalFinding(j, schema.categorical_names[feat], schema.categorical_levels[feat][lvl], bit, est, involved))
    return out


# -- summaries ---------------------------------------------------------------------

def _path_summary(number: int, path: PathExplanation) -> str:
    lines = [f"Positive anomaly detection N({number}).", "* Explanation:"]
    lines += [f"--> {c.text()}" for c in path.conditions]
    lines.append(f"* Leaf cluster share: {100 * path.leaf_share:.3f}% of the data.")
    return "\n".join(lines)


def _finding_text(f: CategoricalFinding) -> str:
    if f.bit == 1:
        what = f'categorical feature "{f.feature}" taking the value {f.level}'
    else:
        what = f'categorical feature "{f.feature}" not taking the value {f.level}'
    text = f"(2) Normal data rarely shows {what}"
    if f.involved_continuous is not None:
        name, value = f.involved_continuous
        text += f', given the continuous value {value:.6g} of feature "{name}"'
    return text + "."


def _combined_summary(number: int, verdicts: list[RuleVerdict], findings: list[CategoricalFinding], score: AnomalyScore) -> str:
    lines = [f"Detected anomaly N({number}):", "* Explanation:"]
    for v in verdicts:
        if v.fired and v.rule_id == ALL_GAUSSIANS_UNLIKELY:
            lines.append("-> (1) The continuous values lie far from every Gaussian component of the normal model.")
        elif v.fired and v.rule_id == TINY_COMPONENT:
            lines.append(f"-> (1) The continuous values fall in Gaussian component {v.evidence['component']}, "
                         f"which holds only {100 * v.evidence['weight']:.3f}% of the normal data.")
    lines += [f"-> {_finding_text(f)}" for f in findings]
    if len(lines) == 2:
        lines.append(f"-> (3) No single rule or categorical term stands out; the joint score {score.total:.3f} "
                     "is below the detection threshold.")
    return "\n".join(lines)


# -- dispatch -------------------------------------------------------------------------

def explain(
    model: AdmncModel,
    tree: SurrogateTree,
    r: MixedRecord,
    cfg: ExplainConfig = ExplainConfig(),
    number: int = 1,
    record_index: int = -1,
) -> Report:
    """Path report if the tree puts ``r`` in an anomalous leaf, combined report otherwise."""
    score = model.score(r)
    if not model.is_flagged(score.total):
        raise NotFlaggedError(f"record {record_index} is not flagged (score {score.total:.6g} >= "
                              f"threshold {model.anomaly_threshold:.6g})")
    x_raw = np.asarray(r.x, dtype=np.float64)
    xm = model.model_x(x_raw)
    levels = np.asarray(r.levels, dtype=np.int64)
    y = one_hot(r, model.schema).y
    est = catm.term_estimators(model.cat, xm[None, :], y[None, :])[0]
    report = Report(number, record_index, COMBINED, score,
                    mean_categorical_estimator=float(est.mean()) if est.size else None)
    if model.gmm is not None:
        report.predicted_component = gmmm.assign(model.gmm, xm)
        report.component_log_pdfs = gmmm.component_log_pdfs(model.gmm, xm).tolist()

    path = transcribe(tree, xm, levels, require_anomalous=False)
    if path.leaf_class == ANOMALOUS_BAND:
        report.kind = PATH
        report.path = path
        report.summary_text = _path_summary(number, path)
    else:
        report.verdicts = continuous_rules(model, xm, cfg)
        report.findings = categorical_findings(model, xm, y, cfg, x_raw)
        report.summary_text = _combined_summary(number, report.verdicts, report.findings, score)
    return report


def explain_top(
    model: AdmncModel,
    tree: SurrogateTree,
    ds: Dataset,
    cfg: ExplainConfig = ExplainConfig(),
    scores: ScoreTable | None = None,
    workers: int = 1,
) -> list[Report]:
    """Reports for the ``cfg.top_n`` lowest-scoring flagged records of ``ds`` (raw units)."""
    if ds.is_standardized:
        raise ValueError("explain_top expects the dataset in original units")
    scores = model.score_dataset(ds, workers) if scores is None else scores
    top = top_anomalies(model, scores, cfg.top_n)
    items = list(enumerate(top, start=1))
    return map_items(lambda it: explain(model, tree, ds[it[1][0]], cfg, it[0], int(ds.index[it[1][0]])), items, workers)


# -- renderers ---------------------------------------------------------------------

def render_text(reports: list[Report]) -> str:
    return "\n\n".join(r.summary_text for r in reports) + ("\n" if reports else "")


_BAND_COLORS = {
    ANOMALOUS_BAND: ((0xB7, 0x1C, 0x1C), (0xEF, 0x9A, 0x9A)),
    TRANSITION_BAND: ((0xF5, 0x7F, 0x17), (0xFF, 0xE0, 0x82)),
    NORMAL_BAND: ((0x2E, 0x7D, 0x32), (0x2E, 0x7D, 0x32)),
}
_PRUNED_FILL = "#d9d9d9"


def band_color(mean: float, th: Thresholds) -> str:
    """Fill colour: the band picks the hue, the position inside the band the shade."""
    band = classify_leaf(TreeNode(0, 1, mean, 0.0, 0), th)
    if band == ANOMALOUS_BAND:
        frac = mean / th.adt
    elif band == TRANSITION_BAND:
        frac = (mean - th.adt) / (th.ndt - th.adt)
    else:
        frac = 0.0
    frac = min(max(frac, 0.0), 1.0)
    lo, hi = _BAND_COLORS[band]
    rgb = [round(a + (b - a) * frac) for a, b in zip(lo, hi)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _edge_labels(tree: SurrogateTree, node: TreeNode) -> tuple[str, str]:
    s = node.split
    if s.kind == "continuous":
        v = f"{tree.raw_value(s):.6g}"
        return f"{s.name} <= {v}", f"{s.name} > {v}"
    names = _level_names(tree.schema, s.feature - tree.schema.n_continuous, s.left_levels)
    return f"{s.name} in {names}", f"{s.name} not in {names}"


def _dot_escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


def render_dot(tree: SurrogateTree, th: Thresholds | None = None, show_pruned: bool = True) -> str:
    """Graphviz source: one box per node, edges labelled with split conditions."""
    th = tree.thresholds if th is None else th
    lines = ["digraph surrogate {", '  node [shape=box, style="rounded,filled", fontname="Helvetica"];',
             '  edge [fontname="Helvetica"];']

    def label(node: TreeNode) -> str:
        parts = [f"proportion = {100 * node.count / tree.total_count:.2f}%", f"variance = {node.variance:.6g}"]
        inner = node if not node.is_leaf else node.pruned
        if inner is not None and inner.left is not None:
            wv = (inner.left.variance * inner.left.count + inner.right.variance * inner.right.count) / inner.count
            parts.append(f"split variance = {wv:.6g}")
        parts.append(f"estimator = {node.mean:.4f} +/- {node.std:.4f}")
        return "\\n".join(parts)

    def emit(node: TreeNode, shaded: bool) -> None:
        if shaded:
            attrs = f'fillcolor="{_PRUNED_FILL}", fontcolor="#808080", color="#808080", style="rounded,filled,dashed"'
        else:
            attrs = f'fillcolor="{band_color(node.mean, th)}"'
        lines.append(f'  n{node.node_id} [label="{label(node)}", {attrs}];')
        inner, child_shaded = node, shaded
        if node.is_leaf:
            if not (show_pruned and node.pruned is not None):
                return
            inner, child_shaded = node.pruned, True
        left_lab, right_lab = _edge_labels(tree, inner)
        edge_style = ', style=dashed, color="#808080", fontcolor="#808080"' if child_shaded else ""
        for child, lab in ((inner.left, left_lab), (inner.right, right_lab)):
            emit(child, child_shaded)
            lines.append(f'  n{node.node_id} -> n{child.node_id} [label="{_dot_escape(lab)}"{edge_style}];')

    emit(tree.root, False)
    lines.append("}")
    return "\n".join(lines) + "\n"


def _html_lines(r: Report) -> list[str]:
    e = html.escape
    out = [f"<h2>{e(r.summary_text.splitlines()[0])}</h2>", "<pre>" + e(r.summary_text) + "</pre>"]
    if r.kind == PATH:
        return out
    out.append("<h3>** Continuous vector details (1):</h3><ul>")
    if r.predicted_component is not None:
        out.append(f"<li>Predicted Gaussian (class): {r.predicted_component}</li>")
    out.append(f"<li>Continuous anomalous estimator: {r.score.log_continuous:.3f}</li>")
    out.append("<li>Rule-based explanation (1):<ul>")
    for v in r.verdicts:
        if not v.fired:
            continue
        if v.rule_id == ALL_GAUSSIANS_UNLIKELY:
            out.append("<li>Rule 1 fired: every Gaussian log-density is below the cut.</li>")
        else:
            out.append(f"<li>Rule 2 fired: assigned Gaussian {v.evidence['component']} has weight "
                       f"{v.evidence['weight']:.4f}.</li>")
    if not any(v.fired for v in r.verdicts):
        out.append("<li>No rule is fired.</li>")
    if r.component_log_pdfs:
        out.append(f"<li>Per-Gaussian log-density (classes 0 to {len(r.component_log_pdfs) - 1}):<ul>")
        out += [f"<li>pdf(class={k}) = {v:.3f}</li>" for k, v in enumerate(r.component_log_pdfs)]
        out.append("</ul></li>")
    out.append("</ul></li></ul>")
    out.append("<h3>** Categorical vector details (2):</h3><ul>")
    out.append(f"<li>Logistic estimator: {r.score.log_categorical:.3f}</li>")
    if r.mean_categorical_estimator is not None:
        out.append(f"<li>Average categorical estimator: {r.mean_categorical_estimator:.3f}</li>")
    n = len(r.findings)
    out.append(f"<li>Number of categorical estimators detected below anomalous threshold: {n}<ul>")
    for i, f in enumerate(r.findings, start=1):
        tag = f"[{i}/{n}]"
        value = f.level if f.bit == 1 else f"not {f.level}"
        out.append(f'<li>{tag} Categorical feature "{e(f.feature)}": {e(value)}</li>')
        out.append(f"<li>{tag} Categorical estimator value: {f.estimator:.3f}</li>")
        if f.involved_continuous is not None:
            name, val = f.involved_continuous
            out.append(f'<li>{tag} Involved continuous feature "{e(name)}" with value {val:.3f}.</li>')
    out.append("</ul></li></ul>")
    return out


def render_html(reports: list[Report], title: str = "Anomaly explanations") -> str:
    body = []
    for r in reports:
        body.append(f'<section class="report" id="n{r.number}">')
        body += _html_lines(r)
        body.append("</section>")
    return "\n".join([
        "<!DOCTYPE html>", "<html>", "<head>", '<meta charset="utf-8">', f"<title>{html.escape(title)}</title>",
        "</head>", "<body>", f"<h1>{html.escape(title)}</h1>", *body, "</body>", "</html>", "",
    ])
