"""Readers for the primary component's artifact files.

CSV tables start with `# key=value` comment lines (notably `# digest=`),
then a header row naming columns, then data rows.  Blank cells mean "not
present" (a one-particle snapshot row has no second-particle columns) and
parse to NaN.  JSON artifacts are plain dicts with a `digest` key.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np


class ArtifactError(RuntimeError):
    """Missing, malformed, or incomplete artifact."""


class DigestMismatch(ArtifactError):
    """Inputs come from different runs; refusing to mix them."""


@dataclass
class Table:
    path: str
    columns: List[str]
    rows: List[List[str]]
    digest: Optional[str]

    def column(self, name: str) -> np.ndarray:
        """Numeric column; blank cells become NaN."""
        idx = self._index(name)
        out = np.empty(len(self.rows))
        for i, row in enumerate(self.rows):
            cell = row[idx]
            out[i] = float(cell) if cell else np.nan
        return out

    def column_str(self, name: str) -> List[str]:
        idx = self._index(name)
        return [row[idx] for row in self.rows]

    def _index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise ArtifactError(
                f"{self.path}: no column {name!r} "
                f"(has {', '.join(self.columns)})") from None


def read_table(path) -> Table:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"{path}: no such artifact")
    meta: Dict[str, str] = {}
    columns: Optional[List[str]] = None
    rows: List[List[str]] = []
    for line in path.read_text().splitlines():
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                meta[key.strip()] = value.strip()
            continue
        cells = line.split(",")
        if columns is None:
            columns = cells
        else:
            if len(cells) != len(columns):
                raise ArtifactError(
                    f"{path}: row has {len(cells)} cells, "
                    f"header has {len(columns)}")
            rows.append(cells)
    if columns is None:
        raise ArtifactError(f"{path}: no header row")
    return Table(path=str(path), columns=columns, rows=rows,
                 digest=meta.get("digest"))


def read_run_digest(run_dir) -> Optional[str]:
    """Digest recorded by the run's invocation metadata, if present."""
    meta_path = Path(run_dir) / "run_meta.json"
    if not meta_path.exists():
        return None
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{meta_path}: {exc}") from None
    return meta.get("digest")


def check_digests(tables, reference: Optional[str] = None) -> str:
    """All inputs must carry one digest; returns it.

    `reference` (typically from run_meta.json) joins the comparison when
    given.  An input with no digest line cannot be verified and aborts.
    """
    seen = {}
    if reference is not None:
        seen["run_meta.json"] = reference
    for table in tables:
        if table.digest is None:
            raise DigestMismatch(f"{table.path}: no digest line")
        seen[table.path] = table.digest
    values = set(seen.values())
    if len(values) > 1:
        detail = ", ".join(f"{Path(k).name}={v}" for k, v in seen.items())
        raise DigestMismatch(f"inputs from different runs: {detail}")
    if not values:
        raise ArtifactError("no inputs")
    return values.pop()
