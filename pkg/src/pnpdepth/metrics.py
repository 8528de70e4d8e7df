"""Standard depth evaluation metrics and paired before/after records."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError

DELTA_BASE = 1.25
RATIO_FLOOR = 1e-6


@dataclass(frozen=True)
class MetricRecord:
    rmse_m: float
    mae_m: float
    mre: float
    delta1: float   # fractions in [0, 1]; tables print them * 100
    delta2: float
    delta3: float
    n_pixels: int


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def evaluate(pred, gt, valid=None) -> MetricRecord:
    """Metrics over valid pixels; gt must be positive there.

    Predictions are clamped to >= 1e-6 before the ratio metrics (mre and
    the delta thresholds) so a zero prediction cannot divide by zero.
    """
    p = _arr(pred)
    d = _arr(gt)
    if p.shape != d.shape:
        raise ConfigError(f"evaluate shape mismatch: pred {p.shape} vs gt {d.shape}")
    if valid is None:
        sel = np.ones(p.shape, dtype=bool)
    else:
        sel = _arr(valid) > 0
    if not sel.any():
        raise ConfigError("empty evaluation set")
    p = p[sel]
    d = d[sel]
    if np.any(d <= 0):
        raise ConfigError("ground truth must be positive on valid pixels")

    err = p - d
    rmse = float(np.sqrt(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    mre = float(np.mean(np.abs(err) / d))
    pc = np.maximum(p, RATIO_FLOOR)
    ratio = np.maximum(pc / d, d / pc)
    deltas = [float(np.mean(ratio < DELTA_BASE ** k)) for k in (1, 2, 3)]
    return MetricRecord(rmse, mae, mre, *deltas, n_pixels=int(sel.sum()))


def mean_record(records: list[MetricRecord]) -> MetricRecord:
    """Unweighted mean across per-scene records."""
    if not records:
        raise ConfigError("no records to aggregate")
    return MetricRecord(
        rmse_m=float(np.mean([r.rmse_m for r in records])),
        mae_m=float(np.mean([r.mae_m for r in records])),
        mre=float(np.mean([r.mre for r in records])),
        delta1=float(np.mean([r.delta1 for r in records])),
        delta2=float(np.mean([r.delta2 for r in records])),
        delta3=float(np.mean([r.delta3 for r in records])),
        n_pixels=int(sum(r.n_pixels for r in records)),
    )


def improvement_pct(before: float, after: float) -> float | None:
    """Relative improvement 100*(before-after)/before; None when undefined."""
    if before == 0:
        return None
    return 100.0 * (before - after) / before


def format_improvement(before: float, after: float) -> str:
    """Table-style annotation, e.g. '+43.8%'; 'n/a' when before is zero."""
    pct = improvement_pct(before, after)
    if pct is None:
        return "n/a"
    return f"{pct:+.1f}%"


def improvement(before: MetricRecord, after: MetricRecord) -> dict[str, str]:
    """Formatted relative improvements for the error metrics."""
    return {
        "rmse": format_improvement(before.rmse_m, after.rmse_m),
        "mae": format_improvement(before.mae_m, after.mae_m),
        "mre": format_improvement(before.mre, after.mre),
    }


CSV_HEADER = "method,n_samples,pct_samples,rmse,mae,mre,d1,d2,d3"


def csv_row(method: str, n_samples: int, n_pixels_total: int,
            record: MetricRecord) -> str:
    """One table row; deltas printed as percentages."""
    pct = 100.0 * n_samples / n_pixels_total if n_pixels_total else 0.0
    return (f"{method},{n_samples},{pct:.3f},"
            f"{record.rmse_m:.4f},{record.mae_m:.4f},{record.mre:.4f},"
            f"{record.delta1 * 100:.1f},{record.delta2 * 100:.1f},"
            f"{record.delta3 * 100:.1f}")
