"""census-export command line: flags mirror ExportSpec."""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, ExportSpec, export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="census-export",
        description="Export a CELLxGENE Census cell subset as an XMAT file")
    parser.add_argument("--organism", default="homo_sapiens")
    parser.add_argument("--filter", dest="obs_filter", default=None,
                        help="obs value filter, e.g. \"tissue == 'lung'\"")
    parser.add_argument("--max-cells", dest="max_cells", type=int, default=1000)
    parser.add_argument("-o", "--output", required=True)
    args = parser.parse_args(argv)

    spec = ExportSpec(organism=args.organism, obs_filter=args.obs_filter,
                      max_cells=args.max_cells, output=args.output)
    try:
        path = export(spec)
    except ExportError as err:
        print(f"export failed: {err}", file=sys.stderr)
        return 1
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
