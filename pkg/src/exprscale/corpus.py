"""Expression-matrix corpus: preprocessing, splits, and a synthetic generator.

The preprocessing chain is filter -> hvg -> normalize -> split. The
synthetic generator produces already-normalized matrices with a known
irreducible noise floor, which the end-to-end scaling experiment uses as
its oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng

RAW = "raw_counts"
NORMALIZED = "normalized_log1p"

SPLIT_FRACTIONS = {"train": 0.90, "val": 0.05, "test": 0.05}
RARE_LABEL_MIN = 20  # strata smaller than this are pooled before splitting


class CorpusError(ValueError):
    """Invalid corpus content or an operation applied at the wrong stage."""


@dataclass
class SplitAssignment:
    """Per-cell train/val/test tags plus the seed that produced them."""

    tags: list[str]
    seed: int

    def __post_init__(self):
        bad = set(self.tags) - set(SPLIT_FRACTIONS)
        if bad:
            raise CorpusError(f"unknown split tags: {sorted(bad)}")

    def indices(self, tag: str) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.tags) if t == tag],
                        dtype=np.int64)

    def counts(self) -> dict[str, int]:
        return {t: self.tags.count(t) for t in SPLIT_FRACTIONS}

    def to_dict(self) -> dict:
        return {"seed": self.seed, "tags": self.tags}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitAssignment":
        return cls(tags=list(d["tags"]), seed=int(d["seed"]))


@dataclass
class ExpressionMatrix:
    """Dense cells x genes matrix with metadata.

    ``stage`` tracks whether values are raw counts or normalized
    log1p-transformed expression; operations check it so the pipeline
    cannot be run out of order.
    """

    values: np.ndarray
    gene_names: list[str]
    cell_labels: list[str] | None = None
    stage: str = RAW
    split: SplitAssignment | None = None
    provenance: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise CorpusError(f"values must be 2-D, got shape {self.values.shape}")
        if self.stage not in (RAW, NORMALIZED):
            raise CorpusError(f"unknown stage {self.stage!r}")
        if not np.all(np.isfinite(self.values)):
            raise CorpusError("matrix contains non-finite values")
        if np.any(self.values < 0):
            raise CorpusError(f"{self.stage} values must be non-negative")
        if len(self.gene_names) != self.n_genes:
            raise CorpusError(
                f"{len(self.gene_names)} gene names for {self.n_genes} genes")
        if self.cell_labels is not None and len(self.cell_labels) != self.n_cells:
            raise CorpusError(
                f"{len(self.cell_labels)} cell labels for {self.n_cells} cells")
        if self.split is not None and len(self.split.tags) != self.n_cells:
            raise CorpusError("split assignment length does not match cells")

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_genes(self) -> int:
        return self.values.shape[1]


@dataclass
class SyntheticSpec:
    """Latent-factor generator with additive truncated-Gaussian noise."""

    n_cells: int
    n_genes: int
    latent_rank: int
    noise_sigma: float
    seed: int

    def __post_init__(self):
        if self.latent_rank >= self.n_genes:
            raise CorpusError("latent_rank must be < n_genes")
        if self.noise_sigma < 0:
            raise CorpusError("noise_sigma must be >= 0")
        if min(self.n_cells, self.n_genes, self.latent_rank) < 1:
            raise CorpusError("counts must be >= 1")


def filter_zero_library(m: ExpressionMatrix) -> ExpressionMatrix:
    """Drop cells whose library (row sum) is zero, preserving order."""
    if m.stage != RAW:
        raise CorpusError("zero-library filtering applies to raw counts")
    keep = m.values.sum(axis=1) > 0
    if not keep.any():
        raise CorpusError("all cells have empty libraries")
    labels = None
    if m.cell_labels is not None:
        labels = [lb for lb, k in zip(m.cell_labels, keep) if k]
    return ExpressionMatrix(values=m.values[keep], gene_names=list(m.gene_names),
                            cell_labels=labels, stage=RAW,
                            provenance=m.provenance)


def _local_poly_at(x: np.ndarray, y: np.ndarray, w: np.ndarray,
                   x0: float) -> float:
    """Weighted polynomial fit evaluated at x0, centered and rescaled so
    clustered abscissae cannot blow up the Vandermonde system."""
    span = float(np.ptp(x))
    if span < 1e-8:
        return float(np.average(y, weights=w))
    u = (x - x0) / span
    deg = 2 if len(np.unique(x)) >= 3 else 1
    coeffs = np.polyfit(u, y, deg, w=np.sqrt(w))
    return float(coeffs[-1])  # value at u = 0


def _variance_trend(log_mean: np.ndarray, log_var: np.ndarray,
                    n_genes_total: int) -> np.ndarray:
    """Fitted log10-variance at each gene's log10-mean.

    Local quadratic regression with tricube weights over a 0.3 span
    (floor of 10 neighbours); small gene panels fall back to one global
    quadratic.
    """
    n = len(log_mean)
    if n_genes_total < 30 or n < 10:
        return np.array([
            _local_poly_at(log_mean, log_var, np.ones(n), log_mean[i])
            for i in range(n)
        ]) if n > 1 else np.full(n, log_var.mean() if n else 0.0)

    k = min(max(int(math.ceil(0.3 * n)), 10), n)
    fitted = np.empty(n)
    for i in range(n):
        dist = np.abs(log_mean - log_mean[i])
        nbr = np.argsort(dist, kind="stable")[:k]
        h = dist[nbr].max()
        if h == 0:
            w = np.ones(k)
        else:
            w = np.clip((1.0 - (dist[nbr] / h) ** 3) ** 3, 0.0, None)
            if w.sum() <= 0:
                w = np.ones(k)
        fitted[i] = _local_poly_at(log_mean[nbr], log_var[nbr], w, log_mean[i])
    return fitted


def select_hvg(m: ExpressionMatrix, n_top: int) -> np.ndarray:
    """Indices of the n_top genes by standardized variance (Seurat v3 style).

    Counts are standardized by a trend-predicted standard deviation,
    clipped at sqrt(n_cells), and ranked by the variance of the clipped
    values; ties break toward the lower gene index.
    """
    if m.stage != RAW:
        raise CorpusError("HVG selection runs on raw counts")
    if n_top > m.n_genes:
        raise CorpusError(f"n_top={n_top} exceeds {m.n_genes} genes")
    if m.n_cells < 2:
        raise CorpusError("need at least 2 cells to rank variance")

    x = m.values.astype(np.float64)
    n = m.n_cells
    mean = x.mean(axis=0)
    var = x.var(axis=0, ddof=1)
    usable = (mean > 0) & (var > 0)

    std_var = np.zeros(m.n_genes)
    if usable.any():
        log_mean = np.log10(mean[usable])
        log_var = np.log10(var[usable])
        fitted = _variance_trend(log_mean, log_var, m.n_genes)
        sd_pred = np.sqrt(np.power(10.0, fitted))
        z = (x[:, usable] - mean[usable]) / sd_pred
        z = np.minimum(z, math.sqrt(n))
        std_var[usable] = z.var(axis=0, ddof=1)

    order = np.lexsort((np.arange(m.n_genes), -std_var))
    return order[:n_top]


def normalize_log1p(m: ExpressionMatrix, target_sum: float = 1e4) -> ExpressionMatrix:
    """Scale each cell to ``target_sum`` total counts, then log(1 + x)."""
    if m.stage != RAW:
        raise CorpusError("normalization applies to raw counts")
    if target_sum <= 0:
        raise CorpusError("target_sum must be positive")
    sums = m.values.sum(axis=1, dtype=np.float64)
    if np.any(sums <= 0):
        raise CorpusError("zero-library cell encountered; filter first")
    scaled = m.values * (target_sum / sums)[:, None].astype(np.float32)
    values = np.log1p(scaled)
    return ExpressionMatrix(values=values, gene_names=list(m.gene_names),
                            cell_labels=m.cell_labels, stage=NORMALIZED,
                            split=m.split, provenance=m.provenance)


def split(m: ExpressionMatrix, seed: int) -> SplitAssignment:
    """90/5/5 assignment, stratified by cell label when labels exist.

    Labels with fewer than RARE_LABEL_MIN cells are pooled into one
    stratum so small groups still split sensibly.
    """
    rng = Rng(seed, "split")
    tags = [""] * m.n_cells

    if m.cell_labels is None:
        strata = {"": list(range(m.n_cells))}
    else:
        strata = {}
        for i, label in enumerate(m.cell_labels):
            strata.setdefault(label, []).append(i)
        pooled = []
        for label in sorted(strata):
            if len(strata[label]) < RARE_LABEL_MIN:
                pooled.extend(strata.pop(label))
        if pooled:
            strata["__rare__"] = sorted(pooled)

    for label in sorted(strata):
        idx = np.array(strata[label], dtype=np.int64)
        rng.shuffle(idx)
        n = len(idx)
        n_val = round(SPLIT_FRACTIONS["val"] * n)
        n_test = round(SPLIT_FRACTIONS["test"] * n)
        for i in idx[:n_val]:
            tags[i] = "val"
        for i in idx[n_val:n_val + n_test]:
            tags[i] = "test"
        for i in idx[n_val + n_test:]:
            tags[i] = "train"

    return SplitAssignment(tags=tags, seed=seed)


def _softplus(t: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, t)


def synthesize(spec: SyntheticSpec, with_clean: bool = False):
    """Generate a normalized-stage matrix from a latent-factor model.

    observed = max(softplus(Z W) + noise, 0). Given the other genes the
    latent structure is recoverable, so the irreducible per-position
    reconstruction MSE approaches noise_sigma^2.
    """
    z = Rng(spec.seed, "synth-z").normals((spec.n_cells, spec.latent_rank))
    w = Rng(spec.seed, "synth-w").normals((spec.latent_rank, spec.n_genes))
    w /= math.sqrt(spec.latent_rank)
    clean = _softplus(z @ w)
    if spec.noise_sigma > 0:
        eps = Rng(spec.seed, "synth-noise").normals(clean.shape) * spec.noise_sigma
        observed = np.maximum(clean + eps, 0.0)
    else:
        observed = clean
    matrix = ExpressionMatrix(
        values=observed.astype(np.float32),
        gene_names=[f"g{i:04d}" for i in range(spec.n_genes)],
        stage=NORMALIZED,
        provenance=(f"synthetic latent_rank={spec.latent_rank} "
                    f"noise_sigma={spec.noise_sigma} seed={spec.seed}"),
    )
    if with_clean:
        return matrix, clean.astype(np.float32)
    return matrix
