"""Command-line figure rendering:

    ftc-plot --kind innovations --in run.csv --out innovations.png
    ftc-plot --kind filter_compare --in a.csv,b.csv,c.csv --out cmp.png

Exit codes: 0 success, 1 usage error, 2 input/schema or output error.
"""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, PlotSpec, SchemaError, render


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _build_parser() -> _Parser:
    parser = _Parser(prog="ftc-plot", description=__doc__)
    parser.add_argument("--kind", required=True, help=f"one of {', '.join(KINDS)}")
    parser.add_argument(
        "--in", dest="inputs", required=True, help="input CSV file(s), comma separated"
    )
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--title")
    parser.add_argument("--circle-radius", type=float, default=50.0)
    parser.add_argument("--circle-center", default="0,0", help="cx,cy")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        cx, cy = (float(v) for v in args.circle_center.split(","))
        spec = PlotSpec(
            kind=args.kind,
            inputs=tuple(p.strip() for p in args.inputs.split(",") if p.strip()),
            output=args.out,
            title=args.title,
            circle_radius=args.circle_radius,
            circle_center=(cx, cy),
        )
    except (_UsageError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        out = render(spec)
    except (SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
