"""XMAT container: dense expression matrices on disk, bit-exact.

Layout (little-endian):

    magic   4 bytes  b"XMAT"
    version u16      1
    n_cells u64
    n_genes u64
    dtype   u8       1 = float32
    stage   u8       1 = raw_counts, 2 = normalized_log1p
    values  n_cells * n_genes * 4 bytes, row-major
    crc32   u32      CRC of the values payload

A JSON sidecar at ``<path>.json`` carries gene names, optional cell
labels, the split assignment, and a provenance string.
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
_STAGE_CODES = {"raw_counts": 1, "normalized_log1p": 2}
_STAGE_NAMES = {v: k for k, v in _STAGE_CODES.items()}

_HEADER = struct.Struct("<4sHQQBB")

HEADER_BYTES = _HEADER.size  # 24
CRC_BYTES = 4


class XmatFormatError(ValueError):
    """Malformed header, truncated payload, or checksum mismatch."""


def save_matrix(matrix, path) -> None:
    """Write an ExpressionMatrix as XMAT + JSON sidecar (round-trip exact)."""
    path = Path(path)
    values = np.ascontiguousarray(matrix.values, dtype=np.float32)
    payload = values.tobytes()
    header = _HEADER.pack(MAGIC, VERSION, matrix.n_cells, matrix.n_genes,
                          DTYPE_F32, _STAGE_CODES[matrix.stage])
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    path.write_bytes(header + payload + struct.pack("<I", crc))

    sidecar = {
        "gene_names": list(matrix.gene_names),
        "cell_labels": list(matrix.cell_labels) if matrix.cell_labels is not None else None,
        "split": matrix.split.to_dict() if matrix.split is not None else None,
        "provenance": matrix.provenance,
    }
    sidecar_path(path).write_text(json.dumps(sidecar) + "\n")


def load_matrix(path):
    """Read an XMAT file back into an ExpressionMatrix."""
    from .corpus import ExpressionMatrix, SplitAssignment

    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < HEADER_BYTES + CRC_BYTES:
        raise XmatFormatError(f"{path}: truncated file ({len(blob)} bytes)")
    magic, version, n_cells, n_genes, dtype_code, stage_code = _HEADER.unpack(
        blob[:HEADER_BYTES])
    if magic != MAGIC:
        raise XmatFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise XmatFormatError(f"{path}: unsupported version {version}")
    if dtype_code != DTYPE_F32:
        raise XmatFormatError(f"{path}: unknown dtype code {dtype_code}")
    if stage_code not in _STAGE_NAMES:
        raise XmatFormatError(f"{path}: unknown stage code {stage_code}")

    n_values = n_cells * n_genes
    expected = HEADER_BYTES + 4 * n_values + CRC_BYTES
    if len(blob) != expected:
        raise XmatFormatError(
            f"{path}: expected {expected} bytes for {n_cells}x{n_genes}, got {len(blob)}")
    payload = blob[HEADER_BYTES:HEADER_BYTES + 4 * n_values]
    (crc_stored,) = struct.unpack("<I", blob[-CRC_BYTES:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise XmatFormatError(f"{path}: checksum mismatch")
    values = np.frombuffer(payload, dtype="<f4").reshape(n_cells, n_genes).copy()

    side = sidecar_path(path)
    gene_names = None
    cell_labels = None
    split = None
    provenance = ""
    if side.exists():
        meta = json.loads(side.read_text())
        gene_names = meta.get("gene_names")
        cell_labels = meta.get("cell_labels")
        provenance = meta.get("provenance", "")
        if meta.get("split") is not None:
            split = SplitAssignment.from_dict(meta["split"])
    if gene_names is None:
        gene_names = [f"g{i:04d}" for i in range(n_genes)]
    if len(gene_names) != n_genes:
        raise XmatFormatError(
            f"{side}: {len(gene_names)} gene names for {n_genes} genes")

    return ExpressionMatrix(values=values, gene_names=gene_names,
                            cell_labels=cell_labels,
                            stage=_STAGE_NAMES[stage_code],
                            split=split, provenance=provenance)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")
