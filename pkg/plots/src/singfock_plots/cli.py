"""Figure regeneration command.

    singfock-plots all --run DIR            render every figure the run's
                                            artifacts support
    singfock-plots KIND --run DIR           render one figure kind

`all` skips kinds whose input artifacts the run never wrote (a trajectory
run has no geodesic table) and fails on anything else: parse errors, digest
mismatches, missing columns.  Exit status 0 when everything rendered, 1 on
any failure, 2 for usage errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .artifacts import ArtifactError, read_run_digest
from .figures import FIGURE_KINDS, FigureSpec, render


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="singfock-plots",
        description="Render diagnostic figures from a singfock run directory.")
    ap.add_argument("kind", choices=("all",) + tuple(sorted(FIGURE_KINDS)))
    ap.add_argument("--run", required=True, help="run directory to read")
    ap.add_argument("--out", help="directory for images "
                                  "(default: RUN/figures)")
    ap.add_argument("--fmt", choices=("png", "svg"), default="png")
    ap.add_argument("--dpi", type=int, default=110)
    return ap


def _spec_for(kind: str, run_dir: Path, out_dir: Path, fmt: str,
              dpi: int, expected) -> FigureSpec:
    inputs = tuple(str(run_dir / name) for name in FIGURE_KINDS[kind])
    return FigureSpec(kind=kind, inputs=inputs,
                      output=str(out_dir / f"{kind}.{fmt}"),
                      options={"dpi": dpi}, expected_digest=expected)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        print(f"error: {run_dir} is not a directory", file=sys.stderr)
        return 2
    out_dir = Path(args.out) if args.out else run_dir / "figures"

    try:
        expected = read_run_digest(run_dir)
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    if args.kind == "all":
        kinds = [k for k in sorted(FIGURE_KINDS)
                 if all((run_dir / name).exists()
                        for name in FIGURE_KINDS[k])]
        if not kinds:
            print(f"error: {run_dir} has no plottable artifacts",
                  file=sys.stderr)
            return 1
    else:
        kinds = [args.kind]

    failures = 0
    for kind in kinds:
        spec = _spec_for(kind, run_dir, out_dir, args.fmt, args.dpi, expected)
        try:
            path = render(spec)
            print(f"rendered {kind} -> {path}")
        except ArtifactError as exc:
            failures += 1
            print(f"error: {kind}: {exc}", file=sys.stderr)
    return 1 if failures else 0


if __name__ == "__main__":
    raise SystemExit(main())
