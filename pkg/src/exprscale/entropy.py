"""Loss floors to information-theoretic units.

An MSE floor, read as the variance of Gaussian residuals, converts to a
differential entropy in bits per masked position; an NLL floor (nats)
converts by dividing by ln 2. Per-run NLL values are always derived
from MSE here, never independently measured, so they carry an explicit
provenance label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

DERIVED_PROVENANCE = "derived_from_best_mse"


@dataclass
class DerivedNll:
    value: float  # nats per masked position
    provenance: str = DERIVED_PROVENANCE


@dataclass
class EntropyEstimate:
    source: str  # "mse_floor" | "nll_floor"
    floor_value: float
    bits_per_position: float


def nll_from_mse(mse: float) -> float:
    """Gaussian NLL in nats for residual variance equal to the MSE:
    0.5 * ln(2 pi mse) + 0.5."""
    if not mse > 0:
        raise ValueError(f"mse must be positive, got {mse}")
    return 0.5 * math.log(2.0 * math.pi * mse) + 0.5


def bits_from_mse_floor(c_mse: float) -> float:
    """Differential entropy 0.5 * log2(2 pi e c) in bits per masked position."""
    if not c_mse > 0:
        raise ValueError(f"floor must be positive, got {c_mse}")
    return 0.5 * math.log2(2.0 * math.pi * math.e * c_mse)


def bits_from_nll_floor(c_nll: float) -> float:
    """Convert an NLL floor in nats to bits: c / ln 2."""
    if not c_nll > 0:
        raise ValueError(f"floor must be positive, got {c_nll}")
    return c_nll / math.log(2.0)


def nll_transform_runs(losses: list[float]) -> list[DerivedNll]:
    """Per-run MSE values to derived NLL values, provenance-tagged."""
    for loss in losses:
        if not loss > 0:
            raise ValueError(f"losses must be positive, got {loss}")
    return [DerivedNll(value=nll_from_mse(loss)) for loss in losses]


def estimate_from_mse_floor(c_mse: float) -> EntropyEstimate:
    return EntropyEstimate(source="mse_floor", floor_value=c_mse,
                           bits_per_position=bits_from_mse_floor(c_mse))


def estimate_from_nll_floor(c_nll: float) -> EntropyEstimate:
    return EntropyEstimate(source="nll_floor", floor_value=c_nll,
                           bits_per_position=bits_from_nll_floor(c_nll))


def entropy_report(mse_fit: dict, nll_fit: dict | None = None) -> dict:
    """Report dict consumed by the CLI: both floors when available, the
    bit estimates, their gap, and the NLL provenance label."""
    mse_est = estimate_from_mse_floor(mse_fit["c"])
    report = {
        "mse_floor": {
            "fit": mse_fit,
            "floor_value": mse_est.floor_value,
            "bits_per_position": mse_est.bits_per_position,
        },
        "nll_floor": None,
        "bits_gap": None,
        "nll_provenance": None,
    }
    if nll_fit is not None:
        nll_est = estimate_from_nll_floor(nll_fit["c"])
        report["nll_floor"] = {
            "fit": nll_fit,
            "floor_value": nll_est.floor_value,
            "bits_per_position": nll_est.bits_per_position,
        }
        report["bits_gap"] = abs(mse_est.bits_per_position
                                 - nll_est.bits_per_position)
        report["nll_provenance"] = DERIVED_PROVENANCE
    return report
