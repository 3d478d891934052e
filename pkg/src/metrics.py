"""
Prometheus metrics for CHE training runs.

Exposes histograms, counters, and gauges for epoch durations, HSIC
evaluation cost, weight-update skips, and run outcomes. Falls back to
lightweight no-op stubs when ``prometheus_client`` is not installed.

Every observation lands in the process-wide ``REGISTRY`` and in each
registry opened with ``run_scope()``, so a run's snapshot holds that run
only while the process registry aggregates a whole sweep. Durations are
wall-clock values: snapshots differ between otherwise identical runs.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from typing import Iterator, List, Optional

logger = logging.getLogger(__name__)

try:
    from prometheus_client import (
        CollectorRegistry,
        Counter,
        Gauge,
        Histogram,
        generate_latest,
    )

    _PROMETHEUS_AVAILABLE = True
except ImportError:
    _PROMETHEUS_AVAILABLE = False

# -----------------------------------------------------------------------
# No-op stubs for environments without prometheus_client
# -----------------------------------------------------------------------

if not _PROMETHEUS_AVAILABLE:
    logger.info(
        "prometheus_client not installed – metrics will be no-ops"
    )

    class _NoOpMetric:
        """Drop-in stub that silently ignores all metric operations."""

        def labels(self, *args, **kwargs):
            return self

        def observe(self, *args, **kwargs):
            pass

        def inc(self, *args, **kwargs):
            pass

        def set(self, *args, **kwargs):
            pass


class MetricSet:
    """The CHE instruments bound to one registry (no-ops without prometheus_client)."""

    def __init__(self, registry=None) -> None:
        self.registry = registry
        if not _PROMETHEUS_AVAILABLE:
            noop = _NoOpMetric()
            self.epoch_duration = self.hsic_local_latency = noop
            self.epochs_total = self.weight_entries_skipped = self.runs_total = noop
            self.mean_hsic = self.val_ndcg10 = noop
            return

        # ---------------------------------------------------------------
        # Histograms
        # ---------------------------------------------------------------

        self.epoch_duration = Histogram(
            "che_epoch_duration_seconds",
            "Wall time of one training phase (loss pass, weight pass, validation)",
            labelnames=["phase"],
            buckets=(0.1, 0.5, 1.0, 2.5, 5.0, 10.0, 30.0, 60.0, 120.0),
            registry=registry,
        )

        self.hsic_local_latency = Histogram(
            "che_hsic_local_seconds",
            "Wall time of a single dimension-wise HSIC evaluation",
            buckets=(1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2),
            registry=registry,
        )

        # ---------------------------------------------------------------
        # Counters
        # ---------------------------------------------------------------

        self.epochs_total = Counter(
            "che_epochs_total",
            "Completed training epochs",
            labelnames=["method"],
            registry=registry,
        )

        self.weight_entries_skipped = Counter(
            "che_weight_entries_skipped_total",
            "Sample-weight entries skipped because of a non-finite HSIC gradient",
            registry=registry,
        )

        self.runs_total = Counter(
            "che_runs_total",
            "Finished training runs",
            labelnames=["method", "status"],
            registry=registry,
        )

        # ---------------------------------------------------------------
        # Gauges
        # ---------------------------------------------------------------

        self.mean_hsic = Gauge(
            "che_mean_hsic",
            "Mean weighted HSIC after the latest weight update",
            registry=registry,
        )

        self.val_ndcg10 = Gauge(
            "che_val_ndcg10",
            "Validation NDCG@10 after the latest epoch",
            registry=registry,
        )

    def text(self) -> str:
        """Prometheus exposition text; empty without prometheus_client."""
        if not _PROMETHEUS_AVAILABLE:
            return ""
        return generate_latest(self.registry).decode("utf-8")


REGISTRY = CollectorRegistry() if _PROMETHEUS_AVAILABLE else None
_PROCESS = MetricSet(REGISTRY)
_SCOPES: List[MetricSet] = []


def _targets() -> List[MetricSet]:
    return [_PROCESS, *_SCOPES]


@contextmanager
def run_scope() -> Iterator[MetricSet]:
    """Collect everything recorded inside the block into a fresh registry as well."""
    scope = MetricSet(CollectorRegistry() if _PROMETHEUS_AVAILABLE else None)
    _SCOPES.append(scope)
    try:
        yield scope
    finally:
        _SCOPES.remove(scope)


# -----------------------------------------------------------------------
# Helper functions
# -----------------------------------------------------------------------

def record_epoch(method: str, phase_durations: dict, mean_hsic: float, val_ndcg10: float) -> None:
    """Record one finished epoch.

    Parameters
    ----------
    method:
        Training approach (base, pw, che).
    phase_durations:
        Mapping of phase name to seconds.
    """
    for target in _targets():
        target.epochs_total.labels(method=method).inc()
        for phase, seconds in phase_durations.items():
            target.epoch_duration.labels(phase=phase).observe(seconds)
        target.mean_hsic.set(mean_hsic)
        target.val_ndcg10.set(val_ndcg10)


def record_hsic_local(latency: float) -> None:
    for target in _targets():
        target.hsic_local_latency.observe(latency)


def record_weight_skip(count: int = 1) -> None:
    """Count weight entries left untouched by a weight-update pass."""
    if count:
        for target in _targets():
            target.weight_entries_skipped.inc(count)


def record_run(method: str, status: str) -> None:
    for target in _targets():
        target.runs_total.labels(method=method, status=status).inc()


def get_metrics_text(scope: Optional[MetricSet] = None) -> str:
    """Return the process-wide (or ``scope``'s) metrics as Prometheus text.

    Returns an empty string if prometheus_client is not available.
    """
    return (scope or _PROCESS).text()
