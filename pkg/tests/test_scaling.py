import json
import math

import numpy as np
import pytest

from exprscale.scaling import (
    DegenerateFitError,
    FitResult,
    ScalingPoint,
    collect_run_points,
    fit_power_law,
    load_points_csv,
    ols_loglog,
    predict,
    save_points_csv,
)


def _exact_points(a=2.0, alpha=0.5, c=1.0, xs=None):
    xs = xs if xs is not None else [10.0 ** e for e in range(2, 8)]
    return [ScalingPoint(x=x, loss=a * x ** (-alpha) + c) for x in xs]


def _fit_range_points(a=2.0, alpha=0.5, c=1.0):
    # x capped so the true floor stays below the 0.99 * min-loss grid
    # ceiling; with x up to 1e7 the largest point sits within 0.07% of
    # the floor and no grid over [0, 0.99 min] can reach c
    xs = np.logspace(1.0, 4.0, 6)
    return [ScalingPoint(x=float(x), loss=a * float(x) ** (-alpha) + c) for x in xs]


# ---------------------------------------------------------------- ols_loglog

def test_ols_exact_recovery_at_true_floor():
    alpha, a, r2 = ols_loglog(_exact_points(), c=1.0)
    assert abs(alpha - 0.5) < 1e-10
    assert abs(a - 2.0) < 1e-10
    assert abs(r2 - 1.0) < 1e-10


def test_ols_constant_losses_r2_zero_by_convention():
    points = [ScalingPoint(x=float(x), loss=2.0) for x in (10, 100, 1000)]
    alpha, a, r2 = ols_loglog(points, c=0.0)
    assert alpha == 0.0
    assert a == 2.0
    assert r2 == 0.0


def test_ols_two_points_is_perfect_line():
    points = [ScalingPoint(x=10.0, loss=3.0), ScalingPoint(x=1000.0, loss=2.0)]
    _, _, r2 = ols_loglog(points, c=0.5)
    assert abs(r2 - 1.0) < 1e-12


def test_ols_rejects_floor_at_or_above_loss():
    points = _exact_points()
    with pytest.raises(ValueError):
        ols_loglog(points, c=points[-1].loss)


def test_ols_rejects_single_distinct_x():
    points = [ScalingPoint(x=10.0, loss=3.0), ScalingPoint(x=10.0, loss=2.0)]
    with pytest.raises(ValueError):
        ols_loglog(points, c=0.0)


# ------------------------------------------------------------- fit_power_law

def test_fit_recovers_exact_triple():
    fit = fit_power_law(_fit_range_points())
    assert abs(fit.alpha - 0.5) / 0.5 < 1e-3
    assert abs(fit.a - 2.0) / 2.0 < 1e-3
    assert abs(fit.c - 1.0) / 1.0 < 1e-3
    assert fit.r2 >= 1.0 - 1e-8
    assert fit.n == 6


def test_fit_floor_strictly_below_min_loss():
    for points in (_fit_range_points(), _exact_points()):
        fit = fit_power_law(points)
        assert fit.c < min(p.loss for p in points)


def test_fit_rejects_too_few_or_degenerate():
    with pytest.raises(ValueError):
        fit_power_law(_exact_points()[:2])
    flat = [ScalingPoint(x=float(10 ** i), loss=1.5) for i in range(5)]
    with pytest.raises(DegenerateFitError):
        fit_power_law(flat)


def test_fit_noisy_recovery_around_published_triple():
    # lighter version of the acceptance Monte-Carlo: 20 noise seeds
    a, alpha, c = 1.75, 0.234, 1.437
    xs = np.logspace(2.8, 8.5, 21)
    hits = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        noise = np.exp(rng.normal(0.0, 0.02, size=len(xs)))
        points = [ScalingPoint(x=float(x), loss=float(c + a * x ** (-alpha) * z))
                  for x, z in zip(xs, noise)]
        fit = fit_power_law(points)
        if abs(fit.alpha - alpha) <= 0.05 and abs(fit.c - c) <= 0.05:
            hits += 1
    assert hits >= 19


def test_fit_flat_data_reports_no_scaling():
    rng = np.random.default_rng(5)
    xs = np.logspace(3, 8.5, 27)
    losses = 1.2 * np.exp(rng.normal(0.0, 0.001, size=len(xs)))
    points = [ScalingPoint(x=float(x), loss=float(l)) for x, l in zip(xs, losses)]
    fit = fit_power_law(points)
    assert abs(fit.alpha) < 0.02
    assert fit.r2 < 0.1


def test_fit_scale_equivariance_in_x():
    base = fit_power_law(_fit_range_points())
    k = 100.0
    scaled_points = [ScalingPoint(x=p.x * k, loss=p.loss)
                     for p in _fit_range_points()]
    scaled = fit_power_law(scaled_points)
    assert abs(scaled.alpha - base.alpha) / base.alpha < 1e-6
    assert abs(scaled.c - base.c) / base.c < 1e-6
    assert abs(scaled.a - base.a * k ** base.alpha) / (base.a * k ** base.alpha) < 1e-5


def test_fit_loss_shift_equivariance():
    base = fit_power_law(_fit_range_points())
    s = 0.7
    shifted_points = [ScalingPoint(x=p.x, loss=p.loss + s)
                      for p in _fit_range_points()]
    shifted = fit_power_law(shifted_points)
    assert abs(shifted.c - (base.c + s)) / (base.c + s) < 1e-3
    assert abs(shifted.alpha - base.alpha) / base.alpha < 1e-3
    assert abs(shifted.a - base.a) / base.a < 1e-3


def test_fit_deterministic():
    points = _fit_range_points(a=3.0, alpha=0.3, c=0.8)
    assert fit_power_law(points) == fit_power_law(points)


# ------------------------------------------------------------------- predict

def test_predict_values_and_limit():
    fit = FitResult(alpha=0.5, a=2.0, c=1.0, r2=1.0, n=6, c_grid_points=1000)
    assert predict(fit, 4.0) == pytest.approx(2.0, abs=1e-12)
    assert predict(fit, 1e18) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        predict(fit, 0.0)


def test_predict_monotone_decreasing():
    fit = FitResult(alpha=0.3, a=1.5, c=0.5, r2=1.0, n=5, c_grid_points=1000)
    xs = np.logspace(1, 9, 30)
    vals = [predict(fit, float(x)) for x in xs]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_predict_self_consistent_with_observations():
    points = _fit_range_points(a=4.0, alpha=0.4, c=0.9)
    fit = fit_power_law(points)
    for p in points:
        assert predict(fit, p.x) == pytest.approx(p.loss, rel=1e-3)


# ----------------------------------------------------------------------- I/O

def test_point_validation():
    with pytest.raises(ValueError):
        ScalingPoint(x=-1.0, loss=1.0)
    with pytest.raises(ValueError):
        ScalingPoint(x=1.0, loss=0.0)


def test_csv_round_trip(tmp_path):
    points = _exact_points()
    points[0].tag = "XS-seed7"
    path = tmp_path / "points.csv"
    save_points_csv(points, path)
    back = load_points_csv(path)
    assert [(p.x, p.loss, p.tag) for p in back] == \
        [(p.x, p.loss, p.tag) for p in points]


def test_csv_requires_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,2\n3,4\n")
    with pytest.raises(ValueError):
        load_points_csv(path)


def test_collect_run_points(tmp_path):
    for i, (count, loss) in enumerate([(533, 2.1), (9953, 1.6)]):
        run = tmp_path / f"run{i}"
        run.mkdir()
        (run / "metadata.json").write_text(json.dumps({
            "model": {"preset": "XXS" if i == 0 else "TINY"},
            "seed": 7, "param_count": count, "best_val_mse": loss,
        }))
    points = collect_run_points([tmp_path / "run0", tmp_path / "run1"])
    assert [(p.x, p.loss) for p in points] == [(533.0, 2.1), (9953.0, 1.6)]
    assert points[0].tag == "XXS-seed7"
