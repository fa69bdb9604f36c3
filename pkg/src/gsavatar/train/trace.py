"""Per-iteration fit history."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

TERMS = ("rgb", "sil", "offset", "lmk", "lap", "mesh", "eik", "perc")


@dataclass
class TraceRow:
    iteration: int
    total: float
    terms: Dict[str, float]
    n_gaussians: int
    splits: int = 0
    psnr: Optional[float] = None
    wall: float = 0.0  # seconds since fit start; excluded from equality


@dataclass
class FitTrace:
    stage: str
    rows: List[TraceRow] = field(default_factory=list)
    split_events: List[dict] = field(default_factory=list)
    info: Dict[str, float] = field(default_factory=dict)  # one-off scalars such as the ICP residual

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def losses(self) -> List[float]:
        return [r.total for r in self.rows]

    @property
    def gaussian_counts(self) -> List[int]:
        return [r.n_gaussians for r in self.rows]

    def deterministic_view(self) -> dict:
        d = self.to_dict()
        for r in d["rows"]:
            r.pop("wall")
        return d

    def fingerprint(self) -> str:
        """Hash of everything except wall-clock time (floats via repr, so bitwise)."""
        return hashlib.sha256(json.dumps(self.deterministic_view(), sort_keys=True).encode()).hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, FitTrace):
            return NotImplemented
        return self.deterministic_view() == other.deterministic_view()

    def to_dict(self) -> dict:
        return {"stage": self.stage, "rows": [asdict(r) for r in self.rows],
                "split_events": list(self.split_events), "info": dict(self.info)}

    @classmethod
    def from_dict(cls, d: dict) -> "FitTrace":
        rows = [TraceRow(**r) for r in d.get("rows", [])]
        return cls(d["stage"], rows, list(d.get("split_events", [])), dict(d.get("info", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "total", *TERMS, "n_gaussians", "splits", "psnr", "wall"])
        for r in self.rows:
            w.writerow([r.iteration, repr(r.total), *(repr(r.terms[t]) if t in r.terms else "" for t in TERMS),
                        r.n_gaussians, r.splits, "" if r.psnr is None else repr(r.psnr), f"{r.wall:.4f}"])
        return buf.getvalue()


__all__ = ["FitTrace", "TraceRow"]
