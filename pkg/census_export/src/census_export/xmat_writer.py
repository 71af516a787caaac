"""XMAT writer, implementing the documented container format.

Layout (little-endian): magic "XMAT", version u16 = 1, n_cells u64,
n_genes u64, dtype u8 (1 = float32), stage u8 (1 = raw_counts,
2 = normalized_log1p), row-major float32 values, CRC32 of the payload.
A JSON sidecar at <path>.json carries gene names, cell labels, split
assignment (null here) and a provenance string.

Kept independent of the consumer package on purpose: the byte format is
the interface between the two.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"XMAT"
VERSION = 1
DTYPE_F32 = 1
STAGE_RAW = 1
STAGE_NORMALIZED = 2

_HEADER = struct.Struct("<4sHQQBB")


def write_xmat(path, values: np.ndarray, gene_names: list[str],
               cell_labels: list[str] | None, stage_code: int,
               provenance: str) -> None:
    path = Path(path)
    values = np.ascontiguousarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise ValueError(f"values must be 2-D, got shape {values.shape}")
    n_cells, n_genes = values.shape
    if len(gene_names) != n_genes:
        raise ValueError(f"{len(gene_names)} gene names for {n_genes} genes")
    if cell_labels is not None and len(cell_labels) != n_cells:
        raise ValueError(f"{len(cell_labels)} cell labels for {n_cells} cells")

    payload = values.tobytes()
    header = _HEADER.pack(MAGIC, VERSION, n_cells, n_genes, DTYPE_F32, stage_code)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    path.write_bytes(header + payload + struct.pack("<I", crc))

    sidecar = {
        "gene_names": list(gene_names),
        "cell_labels": list(cell_labels) if cell_labels is not None else None,
        "split": None,
        "provenance": provenance,
    }
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar) + "\n")
