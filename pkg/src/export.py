"""
Export module for the CHE toolkit.

Writes metrics reports (JSON at full precision, CSV and Markdown at four
significant figures in the comparison-table layout), per-epoch training
curves, and feature attribution tables.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd

from src.models import METRIC_NAMES, AttributionReport, EpochRecord, MetricsReport

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

REPORT_FORMAT = "che-metrics-report"
REPORT_VERSION = "1.0.0"
SIGNIFICANT_FIGURES = 4

METRIC_LABELS = {
    "ndcg@10": "NDCG@10",
    "ndcg@20": "NDCG@20",
    "acc@10": "ACC@10",
    "acc@20": "ACC@20",
    "average": "Average",
}

CURVE_COLUMNS = ["epoch", "mean_weighted_loss", "mean_hsic", "val_ndcg10", "val_hsic"]


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _normalise_report(report: Union[MetricsReport, Dict[str, Any]]) -> MetricsReport:
    """Accept a MetricsReport or its dict form."""
    if isinstance(report, MetricsReport):
        return report
    return MetricsReport.model_validate(report)


def sig(value: Optional[float], figures: int = SIGNIFICANT_FIGURES) -> str:
    """Format to ``figures`` significant figures; empty for missing values."""
    if value is None:
        return ""
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    return f"{value:.{figures}g}"


def _metrics_of(report: MetricsReport) -> List[str]:
    for summary in report.approaches.values():
        return [m for m in summary.mean]
    return list(METRIC_NAMES)


def _write_text(path: Union[str, Path], text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


# ===================================================================
# 1. JSON Export
# ===================================================================

def export_json(report: Union[MetricsReport, Dict[str, Any]]) -> dict:
    """Full-precision, JSON-serialisable form of a metrics report."""
    data = _normalise_report(report)
    export = {
        "meta": {"format": REPORT_FORMAT, "version": REPORT_VERSION},
        **data.model_dump(mode="json"),
    }
    logger.info("Exported JSON report with %d approaches", len(data.approaches))
    return export


def write_report_json(report: Union[MetricsReport, Dict[str, Any]], path: Union[str, Path]) -> Path:
    return _write_text(path, json.dumps(export_json(report), indent=2, sort_keys=True) + "\n")


# ===================================================================
# 2. CSV Export
# ===================================================================

def report_frame(report: Union[MetricsReport, Dict[str, Any]]) -> pd.DataFrame:
    """One row per approach x metric (plus the Average), values at four significant figures."""
    data = _normalise_report(report)
    rows = []
    for approach, summary in data.approaches.items():
        improv = data.improvements.get(approach, {})
        p_values = data.p_values.get(approach, {})
        for metric in list(summary.mean) + ["average"]:
            mean = summary.average if metric == "average" else summary.mean[metric]
            std = None if metric == "average" else summary.std.get(metric)
            rows.append({
                "approach": approach,
                "metric": METRIC_LABELS.get(metric, metric),
                "mean": sig(mean),
                "std": sig(std),
                "seeds": len(summary.seeds),
                "p_value": sig(p_values.get(metric)),
                "improv_pct": sig(improv.get(metric)),
            })
    return pd.DataFrame(rows, columns=["approach", "metric", "mean", "std", "seeds", "p_value", "improv_pct"])


def write_report_csv(report: Union[MetricsReport, Dict[str, Any]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report_frame(report).to_csv(path, index=False)
    return path


# ===================================================================
# 3. Markdown Export
# ===================================================================

def export_markdown(
    report: Union[MetricsReport, Dict[str, Any]],
    title: Optional[str] = None,
) -> str:
    """
    Render the comparison table: one row per approach with the four metric
    columns and the Average, followed by an Improv row for every approach
    that was compared against a baseline.

    Parameters
    ----------
    report : MetricsReport | dict
        Aggregated report from ``evaluation.build_report``.
    title : str, optional
        Override the heading (defaults to the report label).

    Returns
    -------
    str
        Markdown-formatted table.
    """
    data = _normalise_report(report)
    metrics = _metrics_of(data)
    columns = [METRIC_LABELS.get(m, m) for m in metrics] + ["Average"]
    lines: List[str] = []

    lines.append(f"# {title or data.label or 'CHE comparison'}")
    lines.append("")
    lines.append("| Approach | " + " | ".join(columns) + " |")
    lines.append("|" + "---|" * (len(columns) + 1))
    for approach, summary in data.approaches.items():
        cells = []
        for m in metrics:
            marker = ""
            p = data.p_values.get(approach, {}).get(m)
            if p is not None and p < 0.01:
                marker = "*"
            cells.append(sig(summary.mean[m]) + marker)
        cells.append(sig(summary.average))
        lines.append(f"| {approach} | " + " | ".join(cells) + " |")

    for approach, improv in data.improvements.items():
        cells = [f"{sig(improv.get(m))}%" for m in metrics + ["average"]]
        lines.append(f"| Improv ({approach}) | " + " | ".join(cells) + " |")
    lines.append("")

    if data.p_values:
        lines.append("\\* Welch t-test p < 0.01 against the baseline across seeds.")
        lines.append("")
    if data.warnings:
        lines.append("## Warnings")
        lines.append("")
        for warning in data.warnings:
            lines.append(f"- {warning}")
        lines.append("")
    return "\n".join(lines)


def write_report_markdown(report: Union[MetricsReport, Dict[str, Any]], path: Union[str, Path]) -> Path:
    return _write_text(path, export_markdown(report))


# ===================================================================
# 4. Curves and Attributions
# ===================================================================

def write_curves_csv(curves: Sequence[EpochRecord], path: Union[str, Path]) -> Path:
    """Per-epoch loss, HSIC and validation columns for plotting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([c.model_dump() for c in curves], columns=CURVE_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def write_attributions_json(reports: Sequence[AttributionReport], path: Union[str, Path], summary=None) -> Path:
    payload: Dict[str, Any] = {"attributions": [r.model_dump(mode="json") for r in reports]}
    if summary is not None:
        payload["summary"] = summary.model_dump(mode="json")
    return _write_text(path, json.dumps(payload, indent=2) + "\n")


def attribution_frame(reports: Sequence[AttributionReport]) -> pd.DataFrame:
    """Contribution table: one row per (patient, prefix, target, visit)."""
    rows = [
        {
            "patient_id": r.patient_id,
            "prefix": r.prefix,
            "target": r.target,
            "visit": v.visit,
            "dx_contribution": v.dx,
            "px_contribution": v.px,
        }
        for r in reports
        for v in r.visits
    ]
    return pd.DataFrame(
        rows, columns=["patient_id", "prefix", "target", "visit", "dx_contribution", "px_contribution"],
    )


def write_attribution_csv(reports: Sequence[AttributionReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    attribution_frame(reports).to_csv(path, index=False)
    return path
