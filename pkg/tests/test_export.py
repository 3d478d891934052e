"""
Tests for the export module.
==============================
Validates JSON, CSV and Markdown metrics reports plus the curve and
attribution tables.
"""

import json
import sys
from pathlib import Path

import pandas as pd
import pytest

_PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(_PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(_PROJECT_ROOT))

from src.evaluation import build_report
from src.export import (
    CURVE_COLUMNS,
    REPORT_FORMAT,
    attribution_frame,
    export_json,
    export_markdown,
    report_frame,
    sig,
    write_attributions_json,
    write_curves_csv,
    write_report_csv,
    write_report_json,
    write_report_markdown,
)
from src.models import (
    METRIC_NAMES,
    AttributionReport,
    AttributionSummary,
    EpochRecord,
    VisitContribution,
)


# ═══════════════════════════════════════════════════════════════════════════
# Test Data Fixtures
# ═══════════════════════════════════════════════════════════════════════════


def _seeds(*values):
    return {seed: {m: v for m in METRIC_NAMES} for seed, v in enumerate(values)}


@pytest.fixture
def report():
    """Base vs CHE over two seeds."""
    return build_report(
        {"base": _seeds(0.2451, 0.2451), "che": _seeds(0.2551, 0.2551)},
        label="Medicare -> private",
    )


@pytest.fixture
def attributions():
    return [
        AttributionReport(patient_id="p0", prefix=2, target=3, visits=[
            VisitContribution(visit=1, dx=0.5, px=-0.1),
            VisitContribution(visit=2, dx=0.25, px=0.05),
        ]),
    ]


# ═══════════════════════════════════════════════════════════════════════════
# Formatting
# ═══════════════════════════════════════════════════════════════════════════


class TestSig:

    def test_four_significant_figures(self):
        assert sig(4.07996736) == "4.08"
        assert sig(0.24512345) == "0.2451"

    def test_missing(self):
        assert sig(None) == ""

    def test_nan(self):
        assert sig(float("nan")) == "nan"


# ═══════════════════════════════════════════════════════════════════════════
# JSON Export
# ═══════════════════════════════════════════════════════════════════════════


class TestExportJson:

    def test_meta_section(self, report):
        data = export_json(report)
        assert data["meta"]["format"] == REPORT_FORMAT
        assert data["label"] == "Medicare -> private"

    def test_full_precision(self, report):
        data = export_json(report)
        assert data["approaches"]["che"]["mean"]["ndcg@10"] == 0.2551

    def test_accepts_dict(self, report):
        assert export_json(report.model_dump())["approaches"].keys() == {"base", "che"}

    def test_write_is_deterministic(self, tmp_path, report):
        a = write_report_json(report, tmp_path / "a.json").read_text(encoding="utf-8")
        b = write_report_json(report, tmp_path / "b.json").read_text(encoding="utf-8")
        assert a == b
        assert json.loads(a)["improvements"]["che"]["ndcg@10"] == pytest.approx(4.0799673, rel=1e-6)


# ═══════════════════════════════════════════════════════════════════════════
# CSV Export
# ═══════════════════════════════════════════════════════════════════════════


class TestReportCsv:

    def test_rows(self, report):
        frame = report_frame(report)
        assert len(frame) == 2 * (len(METRIC_NAMES) + 1)
        row = frame[(frame.approach == "che") & (frame.metric == "NDCG@10")].iloc[0]
        assert row["mean"] == "0.2551"
        assert row["improv_pct"] == "4.08"
        assert row["seeds"] == 2

    def test_baseline_has_no_improvement(self, report):
        frame = report_frame(report)
        assert set(frame[frame.approach == "base"]["improv_pct"]) == {""}

    def test_write(self, tmp_path, report):
        path = write_report_csv(report, tmp_path / "out" / "report.csv")
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        assert list(frame.columns) == ["approach", "metric", "mean", "std", "seeds", "p_value", "improv_pct"]


# ═══════════════════════════════════════════════════════════════════════════
# Markdown Export
# ═══════════════════════════════════════════════════════════════════════════


class TestExportMarkdown:

    def test_table_header(self, report):
        md = export_markdown(report)
        assert md.startswith("# Medicare -> private")
        assert "| Approach | NDCG@10 | NDCG@20 | ACC@10 | ACC@20 | Average |" in md

    def test_improv_row(self, report):
        assert "| Improv (che) | 4.08% | 4.08% | 4.08% | 4.08% | 4.08% |" in export_markdown(report)

    def test_significance_marker(self, report):
        # zero-variance seeds with different means give p = 0
        assert "| che | 0.2551* |" in export_markdown(report)

    def test_custom_title(self, report):
        assert export_markdown(report, title="Table").startswith("# Table")

    def test_warnings_section(self):
        single = build_report({"base": _seeds(0.2), "che": _seeds(0.3)})
        md = export_markdown(single)
        assert "## Warnings" in md
        assert "fewer than 2 seeds" in md

    def test_write(self, tmp_path, report):
        path = write_report_markdown(report, tmp_path / "report.md")
        assert path.read_text(encoding="utf-8") == export_markdown(report)


# ═══════════════════════════════════════════════════════════════════════════
# Curves and Attributions
# ═══════════════════════════════════════════════════════════════════════════


class TestCurvesAndAttributions:

    def test_curves_csv(self, tmp_path):
        curves = [
            EpochRecord(epoch=1, mean_weighted_loss=0.5, mean_hsic=0.01, val_ndcg10=0.2, val_hsic=0.02),
            EpochRecord(epoch=2, mean_weighted_loss=0.4, mean_hsic=0.1 / 3, val_ndcg10=0.25, val_hsic=0.02),
        ]
        frame = pd.read_csv(write_curves_csv(curves, tmp_path / "curves.csv"), float_precision="round_trip")
        assert list(frame.columns) == CURVE_COLUMNS
        assert frame["mean_hsic"].iloc[1] == 0.1 / 3

    def test_attribution_frame(self, attributions):
        frame = attribution_frame(attributions)
        assert len(frame) == 2
        assert frame["dx_contribution"].tolist() == [0.5, 0.25]

    def test_attributions_json(self, tmp_path, attributions):
        summary = AttributionSummary(dx_share=0.8, points=1)
        data = json.loads(write_attributions_json(attributions, tmp_path / "a.json", summary).read_text())
        assert data["summary"]["dx_share"] == 0.8
        assert data["attributions"][0]["visits"][1]["px"] == 0.05
