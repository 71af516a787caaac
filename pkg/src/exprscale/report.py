"""Figures and markdown tables for sweep results.

Plots are SVG with fixed hash salt and no date metadata, so repeated
invocations produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .entropy import entropy_report  # noqa: E402
from .scaling import FitResult, ScalingPoint, predict  # noqa: E402

plt.rcParams["svg.hashsalt"] = "exprscale"


def render_scaling_plot(points: list[ScalingPoint], fit: FitResult | None,
                        path, ylabel: str = "best validation MSE (L*)",
                        title: str | None = None) -> None:
    """Log-log scatter of (x, loss) runs with the fitted curve overlaid."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    xs = np.array([p.x for p in points])
    losses = np.array([p.loss for p in points])
    ax.scatter(xs, losses, s=22, color="#1f77b4", zorder=3, label="runs")
    if fit is not None:
        grid = np.geomspace(xs.min() / 1.3, xs.max() * 1.3, 200)
        curve = [predict(fit, float(x)) for x in grid]
        ax.plot(grid, curve, color="#d62728", lw=1.4, zorder=2,
                label=(f"fit: a={fit.a:.3g}, alpha={fit.alpha:.3f}, "
                       f"c={fit.c:.3f} (R2={fit.r2:.3f})"))
        if fit.c > 0:
            ax.axhline(fit.c, color="#999999", lw=0.8, ls="--", zorder=1)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("parameter count P")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7, loc="best")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def format_range(lo: float, hi: float) -> str:
    if f"{lo:.2f}" == f"{hi:.2f}":
        return f"{lo:.2f}"
    return f"{lo:.2f}–{hi:.2f}"


def size_table(points: list[ScalingPoint]) -> list[dict]:
    """One row per distinct x (ascending): tag, params, min-max loss, runs."""
    by_x: dict[float, list[ScalingPoint]] = {}
    for p in points:
        by_x.setdefault(p.x, []).append(p)
    rows = []
    for x in sorted(by_x):
        group = by_x[x]
        losses = [p.loss for p in group]
        tags = {p.tag.split("-seed")[0] for p in group if p.tag}
        rows.append({
            "preset": tags.pop() if len(tags) == 1 else "mixed",
            "params": int(x),
            "range": format_range(min(losses), max(losses)),
            "n_runs": len(group),
        })
    return rows


def build_markdown(points: list[ScalingPoint], mse_fit: FitResult,
                   nll_fit: FitResult | None, entropy: dict,
                   plot_files: list[str]) -> str:
    lines = ["# Scaling report", ""]

    lines += ["## Best validation MSE per model size", "",
              "| size | params | best val MSE (min–max) | runs |",
              "|------|--------|--------------------------|------|"]
    for row in size_table(points):
        lines.append(f"| {row['preset']} | {row['params']:,} "
                     f"| {row['range']} | {row['n_runs']} |")

    lines += ["", "## Power-law fits (L = a·P^-alpha + c)", "",
              "| metric | n | alpha | a | c | R^2 |",
              "|--------|---|-------|---|---|-----|"]

    def fit_row(label, fit):
        return (f"| {label} | {fit.n} | {fit.alpha:.3f} | {fit.a:.3f} "
                f"| {fit.c:.3f} | {fit.r2:.3f} |")

    lines.append(fit_row("MSE", mse_fit))
    if nll_fit is not None:
        lines.append(fit_row("derived Gaussian NLL", nll_fit))

    lines += ["", "## Entropy floor estimates", ""]
    mse_part = entropy["mse_floor"]
    lines.append(f"- From the MSE floor c = {mse_part['floor_value']:.4f}: "
                 f"**{mse_part['bits_per_position']:.3f} bits per masked position**")
    if entropy["nll_floor"] is not None:
        nll_part = entropy["nll_floor"]
        lines.append(
            f"- From the NLL floor c = {nll_part['floor_value']:.4f} nats "
            f"(provenance: `{entropy['nll_provenance']}`): "
            f"**{nll_part['bits_per_position']:.3f} bits per masked position**")
        lines.append(f"- Gap between the two derivations: "
                     f"{entropy['bits_gap']:.4f} bits")

    if plot_files:
        lines += ["", "## Figures", ""]
        for name in plot_files:
            lines.append(f"![{name}]({name})")
    lines.append("")
    return "\n".join(lines)


def write_report(points: list[ScalingPoint], out_dir, mse_fit: FitResult,
                 nll_fit: FitResult | None) -> dict:
    """Render plots, entropy JSON and report.md into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    plots = ["scaling_mse.svg"]
    render_scaling_plot(points, mse_fit, out_dir / "scaling_mse.svg")

    entropy = entropy_report(mse_fit.to_dict(),
                             nll_fit.to_dict() if nll_fit else None)
    if nll_fit is not None:
        from .entropy import nll_transform_runs

        nll_points = [ScalingPoint(x=p.x, loss=d.value, tag=p.tag)
                      for p, d in zip(points,
                                      nll_transform_runs([p.loss for p in points]))]
        render_scaling_plot(nll_points, nll_fit, out_dir / "scaling_nll.svg",
                            ylabel="derived Gaussian NLL (nats)")
        plots.append("scaling_nll.svg")

    (out_dir / "entropy.json").write_text(
        json.dumps(entropy, sort_keys=True, indent=2) + "\n")
    (out_dir / "fit_mse.json").write_text(
        json.dumps(mse_fit.to_dict(), sort_keys=True, indent=2) + "\n")
    if nll_fit is not None:
        (out_dir / "fit_nll.json").write_text(
            json.dumps(nll_fit.to_dict(), sort_keys=True, indent=2) + "\n")

    md = build_markdown(points, mse_fit, nll_fit, entropy, plots)
    (out_dir / "report.md").write_text(md)
    return entropy
