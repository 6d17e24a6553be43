"""Evaluation metrics (RSE, CORR, RMSE, MAE) plus brute-force oracles.

Inputs are ``(ρ, N)`` arrays, or ``(ρ, N, C)`` with channels evaluated
independently by flattening to ``(ρ, N·C)``.  RMSE/MAE use standard mean
normalization; the literal unnormalized sums are available via
``literal=True`` for auditing.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UndefinedMetricError

Array = np.ndarray


def _as_batch(y_true, y_pred) -> tuple[Array, Array]:
    yt = np.asarray(y_true, dtype=np.float64)
    yp = np.asarray(y_pred, dtype=np.float64)
    if yt.shape != yp.shape:
        raise DimensionError(f"shape mismatch: {yt.shape} vs {yp.shape}")
    if yt.ndim == 3:
        yt = yt.reshape(yt.shape[0], -1)
        yp = yp.reshape(yp.shape[0], -1)
    if yt.ndim != 2:
        raise DimensionError(f"expected (ρ, N) or (ρ, N, C), got {yt.shape}")
    return yt, yp


def rse(y_true, y_pred) -> float:
    """Root relative squared error against the global-mean predictor."""
    yt, yp = _as_batch(y_true, y_pred)
    denom = float(np.sum((yt - yt.mean()) ** 2))
    if denom == 0.0:
        raise UndefinedMetricError("RSE undefined: ground truth is constant")
    return math.sqrt(float(np.sum((yt - yp) ** 2))) / math.sqrt(denom)


def corr(y_true, y_pred) -> float:
    """Mean per-node Pearson correlation; zero-variance nodes are skipped."""
    value, _ = corr_details(y_true, y_pred)
    return value


def corr_details(y_true, y_pred) -> tuple[float, int]:
    """CORR plus the number of zero-variance nodes excluded from the mean."""
    yt, yp = _as_batch(y_true, y_pred)
    if yt.shape[0] < 2:
        raise UndefinedMetricError("CORR needs at least 2 samples")
    dt = yt - yt.mean(axis=0)
    dp = yp - yp.mean(axis=0)
    vt = (dt**2).sum(axis=0)
    vp = (dp**2).sum(axis=0)
    ok = (vt > 0) & (vp > 0)
    excluded = int((~ok).sum())
    if not np.any(ok):
        raise UndefinedMetricError("CORR undefined: every node is zero-variance")
    r = (dt[:, ok] * dp[:, ok]).sum(axis=0) / np.sqrt(vt[ok] * vp[ok])
    return float(r.mean()), excluded


def rmse(y_true, y_pred, literal: bool = False) -> float:
    """Root mean squared error (root of the plain sum when ``literal``)."""
    yt, yp = _as_batch(y_true, y_pred)
    total = float(np.sum((yt - yp) ** 2))
    return math.sqrt(total if literal else total / yt.size)


def mae(y_true, y_pred, literal: bool = False) -> float:
    """Mean absolute error (plain sum when ``literal``)."""
    yt, yp = _as_batch(y_true, y_pred)
    total = float(np.sum(np.abs(yt - yp)))
    return total if literal else total / yt.size


# ---------------------------------------------------------------------------
# Brute-force oracles: naive double loops, kept deliberately independent of
# the vectorized implementations above.

def oracle_rse(y_true, y_pred) -> float:
    yt, yp = _as_batch(y_true, y_pred)
    rho, n = yt.shape
    mean = sum(yt[i, j] for i in range(rho) for j in range(n)) / (rho * n)
    num = 0.0
    den = 0.0
    for i in range(rho):
        for j in range(n):
            num += (yt[i, j] - yp[i, j]) ** 2
            den += (yt[i, j] - mean) ** 2
    if den == 0.0:
        raise UndefinedMetricError("RSE undefined: ground truth is constant")
    return math.sqrt(num) / math.sqrt(den)


def oracle_corr(y_true, y_pred) -> float:
    yt, yp = _as_batch(y_true, y_pred)
    rho, n = yt.shape
    node_rs = []
    for j in range(n):
        mt = sum(yt[i, j] for i in range(rho)) / rho
        mp = sum(yp[i, j] for i in range(rho)) / rho
        num = sum((yt[i, j] - mt) * (yp[i, j] - mp) for i in range(rho))
        vt = sum((yt[i, j] - mt) ** 2 for i in range(rho))
        vp = sum((yp[i, j] - mp) ** 2 for i in range(rho))
        if vt > 0 and vp > 0:
            node_rs.append(num / math.sqrt(vt * vp))
    if not node_rs:
        raise UndefinedMetricError("CORR undefined: every node is zero-variance")
    return sum(node_rs) / len(node_rs)


def oracle_rmse(y_true, y_pred) -> float:
    yt, yp = _as_batch(y_true, y_pred)
    rho, n = yt.shape
    total = 0.0
    for i in range(rho):
        for j in range(n):
            total += (yt[i, j] - yp[i, j]) ** 2
    return math.sqrt(total / (rho * n))


def oracle_mae(y_true, y_pred) -> float:
    yt, yp = _as_batch(y_true, y_pred)
    rho, n = yt.shape
    total = 0.0
    for i in range(rho):
        for j in range(n):
            total += abs(yt[i, j] - yp[i, j])
    return total / (rho * n)


# ---------------------------------------------------------------------------
# Reports

METRIC_NAMES = ("rse", "corr", "rmse", "mae")


@dataclass
class MetricReport:
    """Metric values keyed by horizon label ('3', '6', '12', 'All', or '1')."""

    rows: dict[str, dict[str, float]] = field(default_factory=dict)

    def add(self, label: str, values: dict[str, float]) -> None:
        self.rows[label] = dict(values)

    def to_json(self) -> str:
        return json.dumps(self.rows, indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(rows=json.loads(text))

    def write_csv(self, path) -> None:
        columns = sorted({k for row in self.rows.values() for k in row})
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["horizon", *columns])
            for label, row in self.rows.items():
                writer.writerow([label, *[repr(row.get(c, float("nan"))) for c in columns]])


def _all_metrics(yt: Array, yp: Array) -> dict[str, float]:
    out: dict[str, float] = {}
    try:
        out["rse"] = rse(yt, yp)
    except UndefinedMetricError:
        out["rse"] = float("nan")
    try:
        out["corr"] = corr(yt, yp)
    except UndefinedMetricError:
        out["corr"] = float("nan")
    out["rmse"] = rmse(yt, yp)
    out["mae"] = mae(yt, yp)
    return out


def horizon_report(
    y_true: Array,
    y_pred: Array,
    task: str = "single",
    horizon: int | None = None,
    horizons: tuple[int, ...] = (3, 6, 12),
) -> MetricReport:
    """Per-horizon metrics plus an 'All' row pooling every horizon.

    Single-step inputs are ``(ρ, N[, C])`` and yield one row labelled with
    the trained horizon; multi-step inputs are ``(ρ, Q, N[, C])``.
    """
    yt = np.asarray(y_true, dtype=np.float64)
    yp = np.asarray(y_pred, dtype=np.float64)
    if yt.shape != yp.shape:
        raise DimensionError(f"shape mismatch: {yt.shape} vs {yp.shape}")
    report = MetricReport()
    if task == "single":
        report.add(str(horizon) if horizon else "1", _all_metrics(yt, yp))
        return report
    if task != "multi":
        raise DimensionError(f"task must be 'single' or 'multi', got {task!r}")
    q = yt.shape[1]
    for h in horizons:
        if 1 <= h <= q:
            report.add(str(h), _all_metrics(yt[:, h - 1], yp[:, h - 1]))
    pooled_t = yt.reshape(yt.shape[0] * q, *yt.shape[2:])
    pooled_p = yp.reshape(yp.shape[0] * q, *yp.shape[2:])
    report.add("All", _all_metrics(pooled_t, pooled_p))
    return report
