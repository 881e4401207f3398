"""Forecast evaluation: error metrics, extent/overlap scores, bias maps.

All error metrics are computed over ocean pixels only (land is excluded via
the mask) and reported as percentages. Extent uses the standard 15%
concentration threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _masked(yhat, y, mask):
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch {yhat.shape} vs {y.shape}")
    if mask is None:
        return yhat.reshape(-1), y.reshape(-1)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != yhat.shape[-mask.ndim:]:
        raise ValueError(f"mask shape {mask.shape} does not broadcast over {yhat.shape}")
    if not mask.any():
        raise ValueError("empty ocean mask")
    full = np.broadcast_to(mask, yhat.shape)
    return yhat[full], y[full]


def rmse(yhat, y, mask=None) -> float:
    """Root mean square error over ocean pixels, in percent."""
    a, b = _masked(yhat, y, mask)
    return float(np.sqrt(np.mean((a - b) ** 2)) * 100.0)


def mae(yhat, y, mask=None) -> float:
    """Mean absolute error over ocean pixels, in percent."""
    a, b = _masked(yhat, y, mask)
    return float(np.mean(np.abs(a - b)) * 100.0)


def nse(yhat, y, mask=None) -> float:
    """Nash-Sutcliffe efficiency in percent: 100 is perfect, 0 matches the
    masked-mean predictor."""
    a, b = _masked(yhat, y, mask)
    denom = float(np.sum((b - b.mean()) ** 2))
    if denom == 0.0:
        raise ValueError("NSE undefined: target has zero variance over the mask")
    return float((1.0 - np.sum((a - b) ** 2) / denom) * 100.0)


def sie(frame, threshold: float = 0.15, cell_area: float = 1.0) -> float:
    """Total area of cells whose concentration is at least ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    frame = np.asarray(frame, dtype=np.float64)
    return float((frame >= threshold).sum() * cell_area)


def iou(yhat, y, threshold: float = 0.15) -> float:
    """Intersection over union of the extent masks; 1 when both are empty."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    a = np.asarray(yhat, dtype=np.float64) >= threshold
    b = np.asarray(y, dtype=np.float64) >= threshold
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def bias_map(yhat, y) -> np.ndarray:
    """Signed per-pixel error (prediction minus truth)."""
    yhat = np.asarray(yhat, dtype=np.float32)
    y = np.asarray(y, dtype=np.float32)
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch {yhat.shape} vs {y.shape}")
    return yhat - y


def write_bias_ppm(bias: np.ndarray, path, scale: float | None = None) -> None:
    """Render a signed error image to binary PPM: positive errors in the red
    channel, negative in the blue."""
    bias = np.asarray(bias, dtype=np.float32)
    if bias.ndim != 2:
        raise ValueError(f"bias map must be 2D, got {bias.shape}")
    if scale is None:
        scale = float(np.abs(bias).max()) or 1.0
    h, w = bias.shape
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[:, :, 0] = np.clip(np.maximum(bias, 0.0) / scale * 255.0, 0, 255).astype(np.uint8)
    img[:, :, 2] = np.clip(np.maximum(-bias, 0.0) / scale * 255.0, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    nse: float
    iou: float
    sie: float          # predicted extent area (last frame)
    sie_true: float
    per_lead_day: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "overall": {
                "rmse": self.rmse,
                "mae": self.mae,
                "nse": self.nse,
                "iou": self.iou,
                "sie": self.sie,
                "sie_true": self.sie_true,
            },
            "per_lead_day": self.per_lead_day,
        }


def evaluate(yhat, y, ocean_mask=None, threshold: float = 0.15,
             cell_area: float = 1.0) -> MetricsReport:
    """Score a [L, 1, H, W] (or [L, H, W]) forecast against ground truth."""
    yhat = np.asarray(yhat, dtype=np.float32)
    y = np.asarray(y, dtype=np.float32)
    if yhat.ndim == 4:
        yhat, y = yhat[:, 0], y[:, 0]
    per_day = []
    for lead in range(yhat.shape[0]):
        row = {
            "lead": lead + 1,
            "rmse": rmse(yhat[lead], y[lead], ocean_mask),
            "mae": mae(yhat[lead], y[lead], ocean_mask),
            "iou": iou(yhat[lead], y[lead], threshold),
        }
        try:
            row["nse"] = nse(yhat[lead], y[lead], ocean_mask)
        except ValueError:
            row["nse"] = None
        per_day.append(row)
    return MetricsReport(
        rmse=rmse(yhat, y, ocean_mask),
        mae=mae(yhat, y, ocean_mask),
        nse=nse(yhat, y, ocean_mask),
        iou=iou(yhat, y, threshold),
        sie=sie(yhat[-1], threshold, cell_area),
        sie_true=sie(y[-1], threshold, cell_area),
        per_lead_day=per_day,
    )
