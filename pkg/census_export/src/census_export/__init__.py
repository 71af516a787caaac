"""Pull a cell subset from the CELLxGENE Census and write XMAT files."""

__version__ = "0.1.0"

from .export import CensusSlice, ExportError, ExportSpec, export  # noqa: F401
