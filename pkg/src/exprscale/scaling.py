"""Additive-offset power-law fitting: loss = a * x^(-alpha) + c.

The floor c is found by grid search: for each candidate the model is
linearized as ln(loss - c) = ln a - alpha ln x and fitted by ordinary
least squares; the candidate with the highest R^2 wins, with one local
refinement pass around the winner. The fitter is generic over x, so the
same code serves parameter-count, data-size or compute studies.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_GRID = 1000


class DegenerateFitError(ValueError):
    """No informative fit exists (e.g. all losses identical)."""


@dataclass
class ScalingPoint:
    x: float
    loss: float
    tag: str = ""

    def __post_init__(self):
        if not (self.x > 0 and math.isfinite(self.x)):
            raise ValueError(f"x must be a positive finite real, got {self.x}")
        if not (self.loss > 0 and math.isfinite(self.loss)):
            raise ValueError(f"loss must be a positive finite real, got {self.loss}")


@dataclass
class FitResult:
    alpha: float
    a: float
    c: float
    r2: float
    n: int
    c_grid_points: int

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "a": self.a, "c": self.c, "r2": self.r2,
                "n": self.n, "c_grid_points": self.c_grid_points}

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(alpha=d["alpha"], a=d["a"], c=d["c"], r2=d["r2"],
                   n=d["n"], c_grid_points=d["c_grid_points"])


def _regress(t: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """OLS of y on t: (slope, intercept, r2); r2 = 0 when y has no variance."""
    t_mean = t.mean()
    y_mean = y.mean()
    t_c = t - t_mean
    y_c = y - y_mean
    ss_t = float(t_c @ t_c)
    slope = float(t_c @ y_c) / ss_t
    intercept = y_mean - slope * t_mean
    ss_tot = float(y_c @ y_c)
    if ss_tot == 0.0:
        return slope, intercept, 0.0
    resid = y_c - slope * t_c
    return slope, intercept, 1.0 - float(resid @ resid) / ss_tot


def ols_loglog(points: list[ScalingPoint], c: float) -> tuple[float, float, float]:
    """Fit ln(loss - c) = ln a - alpha ln x; returns (alpha, a, r2)."""
    if len(points) < 2:
        raise ValueError("need at least 2 points")
    x = np.array([p.x for p in points], dtype=np.float64)
    loss = np.array([p.loss for p in points], dtype=np.float64)
    if np.any(loss <= c):
        raise ValueError(f"candidate floor {c} is not below every loss")
    if len(np.unique(x)) < 2:
        raise ValueError("need at least two distinct x values")
    slope, intercept, r2 = _regress(np.log(x), np.log(loss - c))
    return -slope, math.exp(intercept), r2


def _grid_best(t: np.ndarray, loss: np.ndarray,
               candidates: np.ndarray) -> tuple[int, float]:
    """Index and R^2 of the best floor candidate; ties go to the lowest c."""
    best_idx, best_r2 = 0, -math.inf
    t_c = t - t.mean()
    ss_t = float(t_c @ t_c)
    for i, c in enumerate(candidates):
        y = np.log(loss - c)
        y_c = y - y.mean()
        ss_tot = float(y_c @ y_c)
        if ss_tot == 0.0:
            r2 = 0.0
        else:
            cov = float(t_c @ y_c)
            r2 = (cov * cov) / (ss_t * ss_tot)
        if r2 > best_r2:
            best_idx, best_r2 = i, r2
    return best_idx, best_r2


def fit_power_law(points: list[ScalingPoint],
                  grid_size: int = DEFAULT_GRID) -> FitResult:
    """Grid search over c in [0, 0.99 * min loss], then one refinement pass
    on the interval bracketing the winner. Deterministic."""
    if len(points) < 3:
        raise ValueError(f"need at least 3 points, got {len(points)}")
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    x = np.array([p.x for p in points], dtype=np.float64)
    loss = np.array([p.loss for p in points], dtype=np.float64)
    if np.all(loss == loss[0]):
        raise DegenerateFitError("all losses identical; no fit possible")
    if len(np.unique(x)) < 2:
        raise DegenerateFitError("need at least two distinct x values")

    t = np.log(x)
    coarse = np.linspace(0.0, 0.99 * float(loss.min()), grid_size)
    idx, _ = _grid_best(t, loss, coarse)
    lo = coarse[max(idx - 1, 0)]
    hi = coarse[min(idx + 1, grid_size - 1)]
    fine = np.linspace(lo, hi, grid_size)
    fine_idx, _ = _grid_best(t, loss, fine)
    c = float(fine[fine_idx])

    alpha, a, r2 = ols_loglog(points, c)
    return FitResult(alpha=alpha, a=a, c=c, r2=r2, n=len(points),
                     c_grid_points=grid_size)


def predict(fit: FitResult, x: float) -> float:
    """Fitted loss at x: a * x^(-alpha) + c."""
    if x <= 0:
        raise ValueError("x must be positive")
    return fit.a * x ** (-fit.alpha) + fit.c


# ------------------------------------------------------------------ point IO

def load_points_csv(path) -> list[ScalingPoint]:
    """Read points from a CSV with an 'x' and 'loss' header (tag optional)."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"x", "loss"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must name 'x' and 'loss' columns")
        points = []
        for row in reader:
            points.append(ScalingPoint(x=float(row["x"]), loss=float(row["loss"]),
                                       tag=row.get("tag", "") or ""))
    return points


def save_points_csv(points: list[ScalingPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tag", "x", "loss"])
        for p in points:
            writer.writerow([p.tag, repr(p.x), repr(p.loss)])


def collect_run_points(run_dirs: list) -> list[ScalingPoint]:
    """(param_count, best_val_mse) pairs from run metadata files."""
    points = []
    for run_dir in run_dirs:
        meta_path = Path(run_dir) / "metadata.json"
        meta = json.loads(meta_path.read_text())
        tag = f"{meta['model'].get('preset', 'custom')}-seed{meta['seed']}"
        points.append(ScalingPoint(x=float(meta["param_count"]),
                                   loss=float(meta["best_val_mse"]), tag=tag))
    return points
