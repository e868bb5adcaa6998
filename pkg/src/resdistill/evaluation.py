"""Macro one-vs-rest metrics, percentile bootstrap intervals and the
accuracy-versus-compute report bundle."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

METRICS = ("accuracy", "f1", "precision", "recall")
TRADEOFF_COLUMNS = ("model", "magnification", "gflops",
                    "accuracy", "acc_ci_lo", "acc_ci_hi",
                    "f1", "f1_ci_lo", "f1_ci_hi",
                    "precision", "precision_ci_lo", "precision_ci_hi",
                    "recall", "recall_ci_lo", "recall_ci_hi")


class MissingArtifact(FileNotFoundError):
    pass


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape[0] if p.ndim else p} predictions vs {y.shape} labels")
    if p.size == 0:
        raise ValueError("need at least one prediction")
    if p.min() < 0 or y.min() < 0 or p.max() >= num_classes or y.max() >= num_classes:
        raise ValueError(f"class indices must lie in [0, {num_classes})")
    return np.bincount(y * num_classes + p, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)


def _per_class(cm: np.ndarray):
    """Per-class precision/recall/F1 in percent for one or a stack of matrices."""
    tp = np.diagonal(cm, axis1=-2, axis2=-1).astype(np.float64)
    fp = cm.sum(axis=-2) - tp
    fn = cm.sum(axis=-1) - tp
    precision = 100.0 * _ratio(tp, tp + fp)
    recall = 100.0 * _ratio(tp, tp + fn)
    f1 = 100.0 * _ratio(2 * tp, 2 * tp + fp + fn)
    return precision, recall, f1, tp + fp == 0, tp + fn == 0


@dataclass
class ClassMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class_precision: List[float]
    per_class_recall: List[float]
    per_class_f1: List[float]
    undefined: List[str] = field(default_factory=list)


def evaluate_metrics(predictions, labels, num_classes: int) -> ClassMetrics:
    """Accuracy plus macro one-vs-rest precision, recall and F1, in percent.

    A ratio with a zero denominator counts as 0 and is listed in
    ``undefined`` as e.g. ``"precision[2]"``.
    """
    cm = confusion_matrix(predictions, labels, num_classes)
    precision, recall, f1, no_pred, no_true = _per_class(cm)
    flags = [f"precision[{c}]" for c in np.flatnonzero(no_pred)]
    flags += [f"recall[{c}]" for c in np.flatnonzero(no_true)]
    flags += [f"f1[{c}]" for c in np.flatnonzero(no_pred & no_true)]
    return ClassMetrics(
        accuracy=100.0 * np.trace(cm) / cm.sum(),
        precision=float(precision.mean()),
        recall=float(recall.mean()),
        f1=float(f1.mean()),
        per_class_precision=precision.tolist(),
        per_class_recall=recall.tolist(),
        per_class_f1=f1.tolist(),
        undefined=flags,
    )


def _batch_metric(cms: np.ndarray, name: str) -> np.ndarray:
    if name == "accuracy":
        return 100.0 * np.trace(cms, axis1=1, axis2=2) / cms.sum(axis=(1, 2))
    precision, recall, f1, _, _ = _per_class(cms)
    return {"precision": precision, "recall": recall, "f1": f1}[name].mean(axis=1)


def bootstrap_distribution(predictions, labels, metric: Union[str, Callable] = "accuracy", iterations: int = 10000,
                           seed: int = 0, num_classes: Optional[int] = None, chunk: int = 2000) -> np.ndarray:
    """Metric value on each of ``iterations`` resamples drawn with replacement."""
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    n = p.shape[0]
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if n < 1 or y.shape != p.shape:
        raise ValueError("need matching, non-empty predictions and labels")
    k = num_classes if num_classes is not None else int(max(p.max(), y.max())) + 1
    rng = np.random.default_rng(seed)
    out = np.empty(iterations)
    for start in range(0, iterations, chunk):
        m = min(chunk, iterations - start)
        idx = rng.integers(0, n, size=(m, n))
        if callable(metric):
            out[start : start + m] = [metric(p[i], y[i]) for i in idx]
            continue
        codes = y[idx] * k + p[idx] + (np.arange(m) * k * k)[:, None]
        cms = np.bincount(codes.ravel(), minlength=m * k * k).reshape(m, k, k)
        out[start : start + m] = _batch_metric(cms, metric)
    return out


def bootstrap_ci(predictions, labels, metric: Union[str, Callable] = "accuracy", iterations: int = 10000,
                 alpha: float = 0.05, seed: int = 0, num_classes: Optional[int] = None) -> Tuple[float, float]:
    """Percentile interval ``[alpha/2, 1 - alpha/2]`` of the bootstrap distribution.

    Quantiles use the inverted empirical CDF, so both endpoints are values
    the metric actually took on some resample.
    """
    vals = bootstrap_distribution(predictions, labels, metric, iterations, seed, num_classes)
    lo, hi = np.percentile(vals, [50 * alpha, 100 - 50 * alpha], method="inverted_cdf")
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    model: str
    magnification: str
    gflops: float
    n_test: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: Dict[str, List[float]]
    ci: Dict[str, List[float]]
    undefined: List[str]
    bootstrap_iterations: int
    bootstrap_seed: int
    checkpoint: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def make_report(model_tag: str, magnification: str, predictions, labels, num_classes: int, gflops: float,
                iterations: int = 10000, seed: int = 0, alpha: float = 0.05, checkpoint: str = "") -> MetricsReport:
    m = evaluate_metrics(predictions, labels, num_classes)
    ci = {name: list(bootstrap_ci(predictions, labels, name, iterations, alpha, seed, num_classes)) for name in METRICS}
    return MetricsReport(
        model=model_tag, magnification=magnification, gflops=float(gflops), n_test=int(len(labels)),
        accuracy=m.accuracy, precision=m.precision, recall=m.recall, f1=m.f1,
        per_class={"precision": m.per_class_precision, "recall": m.per_class_recall, "f1": m.per_class_f1},
        ci=ci, undefined=m.undefined, bootstrap_iterations=iterations, bootstrap_seed=seed, checkpoint=checkpoint,
    )


def tradeoff_table(reports: Sequence[MetricsReport]) -> List[dict]:
    """One row per report, ascending in GFLOPS (ties broken by model tag)."""
    if not reports:
        raise ValueError("no reports")
    rows = []
    for r in reports:
        rows.append({
            "model": r.model, "magnification": r.magnification, "gflops": r.gflops,
            "accuracy": r.accuracy, "acc_ci_lo": r.ci["accuracy"][0], "acc_ci_hi": r.ci["accuracy"][1],
            "f1": r.f1, "f1_ci_lo": r.ci["f1"][0], "f1_ci_hi": r.ci["f1"][1],
            "precision": r.precision, "precision_ci_lo": r.ci["precision"][0], "precision_ci_hi": r.ci["precision"][1],
            "recall": r.recall, "recall_ci_lo": r.ci["recall"][0], "recall_ci_hi": r.ci["recall"][1],
        })
    rows.sort(key=lambda row: (row["gflops"], row["model"], row["magnification"]))
    return rows


def write_tradeoff_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRADEOFF_COLUMNS)
        for row in rows:
            out = []
            for c in TRADEOFF_COLUMNS:
                v = row[c]
                out.append(f"{v:.6f}" if c == "gflops" else (f"{v:.2f}" if isinstance(v, float) else v))
            w.writerow(out)
    return path


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def tradeoff_svg(rows: Sequence[dict], width: int = 640, height: int = 420) -> str:
    """Accuracy against GFLOPS (log x-axis), one line per model family."""
    ml, mr, mt, mb = 64, 150, 24, 56
    pw, ph = width - ml - mr, height - mt - mb
    g = np.array([max(r["gflops"], 1e-12) for r in rows])
    lo_x, hi_x = math.floor(math.log10(g.min())), math.ceil(math.log10(g.max()))
    if hi_x == lo_x:
        hi_x += 1
    accs = [r["accuracy"] for r in rows] + [r["acc_ci_lo"] for r in rows] + [r["acc_ci_hi"] for r in rows]
    lo_y = max(0.0, 10 * math.floor(min(accs) / 10))
    hi_y = min(100.0, 10 * math.ceil(max(accs) / 10))
    if hi_y <= lo_y:
        hi_y = lo_y + 10

    def sx(v):
        return ml + pw * (math.log10(max(v, 1e-12)) - lo_x) / (hi_x - lo_x)

    def sy(v):
        return mt + ph * (1 - (v - lo_y) / (hi_y - lo_y))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for e in range(lo_x, hi_x + 1):
        x = sx(10.0 ** e)
        out.append(f'<line x1="{x:.1f}" y1="{mt + ph}" x2="{x:.1f}" y2="{mt + ph + 4}" stroke="#444"/>')
        out.append(f'<text x="{x:.1f}" y="{mt + ph + 16}" text-anchor="middle">1e{e}</text>')
    for v in np.linspace(lo_y, hi_y, 6):
        y = sy(v)
        out.append(f'<line x1="{ml - 4}" y1="{y:.1f}" x2="{ml}" y2="{y:.1f}" stroke="#444"/>')
        out.append(f'<text x="{ml - 8}" y="{y + 4:.1f}" text-anchor="end">{v:.0f}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">GFLOPS per forward pass (log scale)</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">Test accuracy (%)</text>')
    families = sorted({r["model"] for r in rows})
    for i, fam in enumerate(families):
        color = _PALETTE[i % len(_PALETTE)]
        pts = [r for r in rows if r["model"] == fam]
        coords = " ".join(f"{sx(r['gflops']):.1f},{sy(r['accuracy']):.1f}" for r in pts)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for r in pts:
            x, y = sx(r["gflops"]), sy(r["accuracy"])
            out.append(f'<line x1="{x:.1f}" y1="{sy(r["acc_ci_lo"]):.1f}" x2="{x:.1f}" y2="{sy(r["acc_ci_hi"]):.1f}" '
                       f'stroke="{color}" stroke-opacity="0.5"/>')
            out.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3.5" fill="{color}"/>')
            out.append(f'<text x="{x:.1f}" y="{mt + ph + 30}" text-anchor="middle" fill="#666">{r["magnification"]}x</text>')
        ly = mt + 14 + 18 * i
        out.append(f'<line x1="{ml + pw + 12}" y1="{ly - 4}" x2="{ml + pw + 32}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 38}" y="{ly}">{_escape(fam)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "reports"],
    "properties": {
        "version": {"const": 1},
        "reports": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["model", "magnification", "gflops", "n_test", "accuracy", "precision", "recall", "f1",
                             "per_class", "ci", "undefined", "bootstrap_iterations", "bootstrap_seed", "checkpoint"],
                "properties": {
                    "model": {"type": "string"},
                    "magnification": {"type": "string"},
                    "gflops": {"type": "number", "minimum": 0},
                    "n_test": {"type": "integer", "minimum": 1},
                    **{m: {"type": "number", "minimum": 0, "maximum": 100} for m in METRICS},
                    "per_class": {
                        "type": "object",
                        "required": ["precision", "recall", "f1"],
                        "additionalProperties": {"type": "array",
                                                 "items": {"type": "number", "minimum": 0, "maximum": 100}},
                    },
                    "ci": {
                        "type": "object",
                        "required": list(METRICS),
                        "additionalProperties": {"type": "array", "minItems": 2, "maxItems": 2,
                                                 "items": {"type": "number", "minimum": 0, "maximum": 100}},
                    },
                    "undefined": {"type": "array", "items": {"type": "string"}},
                    "bootstrap_iterations": {"type": "integer", "minimum": 1},
                    "bootstrap_seed": {"type": "integer"},
                    "checkpoint": {"type": "string"},
                },
            },
        },
    },
}


def load_reports(run_dir) -> List[MetricsReport]:
    run_dir = Path(run_dir)
    reports = []
    for path in sorted(run_dir.rglob("metrics.json")):
        data = json.loads(path.read_text())
        ckpt = data.get("checkpoint", "")
        if ckpt and not (run_dir / ckpt).exists() and not Path(ckpt).exists():
            raise MissingArtifact(f"{path}: checkpoint not found: {ckpt}")
        reports.append(MetricsReport(**data))
    return reports


def emit_report(run_dir) -> Dict[str, Path]:
    """Collect ``**/metrics.json`` and ``**/ablation_rows.csv`` into the report bundle.

    Writes ``report.json``, ``tradeoff.csv``, ``tradeoff.svg`` and
    ``ablation.csv`` at the top of ``run_dir``. Deterministic for the same
    inputs.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise MissingArtifact(f"run directory not found: {run_dir}")
    reports = load_reports(run_dir)
    if not reports:
        raise MissingArtifact(f"no metrics.json files under {run_dir}")
    out = {
        "report.json": run_dir / "report.json",
        "tradeoff.csv": run_dir / "tradeoff.csv",
        "tradeoff.svg": run_dir / "tradeoff.svg",
        "ablation.csv": run_dir / "ablation.csv",
    }
    payload = {"version": 1, "reports": [r.to_dict() for r in reports]}
    out["report.json"].write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    rows = tradeoff_table(reports)
    write_tradeoff_csv(rows, out["tradeoff.csv"])
    out["tradeoff.svg"].write_text(tradeoff_svg(rows))

    header, body = None, []
    for path in sorted(run_dir.rglob("ablation_rows.csv")):
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            h = next(rd, None)
            if h is None:
                continue
            header = header or h
            body.extend(rd)
    from .distill import ABLATION_COLUMNS

    with open(out["ablation.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header or ABLATION_COLUMNS)
        w.writerows(body)
    return out
