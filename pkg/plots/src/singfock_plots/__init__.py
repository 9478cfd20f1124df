"""Post-processing for singfock run directories.

Reads the CSV/JSON artifacts a run wrote, verifies every input carries the
same config digest, and renders the diagnostic figure set.  Never recomputes
physics: everything drawn comes straight out of the artifact files.
"""

from .artifacts import ArtifactError, DigestMismatch, Table, read_table
from .figures import FIGURE_KINDS, FigureSpec, fit_log_slope, render

__all__ = [
    "ArtifactError",
    "DigestMismatch",
    "Table",
    "read_table",
    "FIGURE_KINDS",
    "FigureSpec",
    "fit_log_slope",
    "render",
]
