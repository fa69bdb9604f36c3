"""FitTrace (CSV and JSON) and SplitReport (JSON) files."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping

from ..control import SplitReport
from ..train.trace import FitTrace


def save_trace(trace: FitTrace, path) -> None:
    """Writes JSON or CSV by extension."""
    p = Path(path)
    if p.suffix.lower() == ".csv":
        p.write_text(trace.to_csv())
    else:
        p.write_text(trace.to_json())


def load_trace(path) -> FitTrace:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"trace not found: {path}")
    return FitTrace.from_dict(json.loads(p.read_text()))


def split_reports_to_json(reports: Iterable[SplitReport], extra: Mapping = ()) -> str:
    return json.dumps({**dict(extra), "reports": [r.to_dict() for r in reports]}, indent=1, sort_keys=True)


def load_split_reports(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"split report not found: {path}")
    data = json.loads(p.read_text())
    return [SplitReport.from_dict(r) for r in data["reports"]], data
