"""Export a cell subset from the CELLxGENE Census as an XMAT file.

The exporter writes raw counts only; all preprocessing (filtering, HVG
selection, normalization, splitting) belongs to the consumer so real and
synthetic corpora follow one code path. A narrow provider interface
separates the query logic from the network client, which also makes the
exporter testable offline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .xmat_writer import STAGE_RAW, write_xmat

# expression layers in preference order; raw counts first
LAYER_PREFERENCE = ("raw", "counts", "X", "normalized")


class ExportError(RuntimeError):
    """Census unreachable, empty selection, or no usable expression layer."""


@dataclass
class ExportSpec:
    organism: str
    obs_filter: str | None
    max_cells: int
    output: str

    def __post_init__(self):
        if self.max_cells <= 0:
            raise ValueError("max_cells must be positive")


@dataclass
class CensusSlice:
    """One queried slab of expression data; what a provider must return."""

    layers: dict[str, np.ndarray]  # layer name -> dense cells x genes
    gene_names: list[str]
    cell_labels: list[str] | None
    census_version: str


class CellxgeneCensusProvider:
    """Live client backed by the cellxgene_census package (network access)."""

    def fetch(self, spec: ExportSpec) -> CensusSlice:
        try:
            import cellxgene_census
        except ImportError as err:
            raise ExportError(
                "cellxgene-census is not installed; install the 'census' "
                "extra or pass an offline provider") from err
        try:
            with cellxgene_census.open_soma() as census:
                version = census["census_info"]["summary"].read().concat() \
                    .to_pandas().set_index("label").loc["census_schema_version", "value"]
                adata = cellxgene_census.get_anndata(
                    census, organism=spec.organism,
                    obs_value_filter=spec.obs_filter,
                    obs_coords=slice(0, spec.max_cells - 1))
        except ExportError:
            raise
        except Exception as err:  # network / SOMA errors
            raise ExportError(f"census query failed: {err}") from err

        layers: dict[str, np.ndarray] = {}
        x = adata.X
        layers["raw"] = np.asarray(x.todense() if hasattr(x, "todense") else x,
                                   dtype=np.float32)
        for name, layer in getattr(adata, "layers", {}).items():
            layers[name] = np.asarray(
                layer.todense() if hasattr(layer, "todense") else layer,
                dtype=np.float32)
        labels = None
        if "cell_type" in adata.obs:
            labels = [str(v) for v in adata.obs["cell_type"]]
        return CensusSlice(layers=layers,
                           gene_names=[str(v) for v in adata.var["feature_name"]],
                           cell_labels=labels,
                           census_version=str(version))


def _choose_layer(layers: dict[str, np.ndarray]) -> str:
    """First preferred layer with a usable library: non-negative values
    and a positive total."""
    for name in LAYER_PREFERENCE:
        values = layers.get(name)
        if values is None:
            continue
        if np.any(values < 0) or not np.isfinite(values).all():
            continue
        if values.sum() <= 0:
            continue
        return name
    raise ExportError(
        f"no usable expression layer among {sorted(layers)} "
        f"(preference order {LAYER_PREFERENCE})")


def export(spec: ExportSpec, provider=None) -> str:
    """Query the Census and write <output> + <output>.json; returns the
    output path. Raw counts are preferred, with the chosen layer and the
    Census version recorded in the provenance string."""
    provider = provider or CellxgeneCensusProvider()
    data = provider.fetch(spec)
    if not data.layers or next(iter(data.layers.values())).shape[0] == 0:
        raise ExportError("selection matched no cells")

    layer = _choose_layer(data.layers)
    values = data.layers[layer][:spec.max_cells]
    labels = data.cell_labels[:spec.max_cells] if data.cell_labels else None
    if values.shape[0] == 0:
        raise ExportError("selection matched no cells")

    provenance = (f"cellxgene-census version={data.census_version} "
                  f"layer={layer} organism={spec.organism} "
                  f"filter={spec.obs_filter!r}")
    write_xmat(spec.output, values, data.gene_names, labels,
               stage_code=STAGE_RAW, provenance=provenance)
    return spec.output
