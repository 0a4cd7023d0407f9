"""Flat result tables and their CSV form."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from ..errors import CorruptFileError, EmptyReportError

HEADER = ("method", "pivots", "known", "rep", "metric", "value", "wall_ms")


@dataclass(frozen=True, order=True)
class Row:
    method: str
    pivots: str  # pivot layers joined by "+", empty for the baseline
    known: int
    rep: int
    metric: str
    value: float
    wall_ms: float = 0.0


def pivot_label(pivots: Iterable[str]) -> str:
    return "+".join(pivots)


class Report:
    """An ordered collection of :class:`Row` with a few query helpers."""

    def __init__(self, rows: Iterable[Row] = ()):
        self.rows: list[Row] = list(rows)

    def add(self, *args, **kwargs) -> Row:
        row = Row(*args, **kwargs)
        self.rows.append(row)
        return row

    def extend(self, other: "Report") -> None:
        self.rows.extend(other.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[Row]:
        return iter(self.rows)

    def select(self, **match) -> list[Row]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def values(self, **match) -> np.ndarray:
        return np.array([r.value for r in self.select(**match)])

    def mean_by_known(self, method: str, pivots: str, metric: str = "map") -> dict[int, float]:
        """Mean value over repetitions for each known amount, in increasing amount order."""
        groups: dict[int, list[float]] = defaultdict(list)
        for r in self.select(method=method, pivots=pivots, metric=metric):
            groups[r.known].append(r.value)
        return {k: float(np.mean(groups[k])) for k in sorted(groups)}

    def sorted_rows(self) -> list[Row]:
        # wall_ms is left out of the key so row order never depends on timing
        return sorted(self.rows, key=lambda r: astuple(r)[:-1])

    def without_timing(self) -> list[tuple]:
        return [astuple(r)[:-1] for r in self.sorted_rows()]


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_report(report: Report, path) -> Path:
    """Write ``report`` as CSV with deterministic row order; refuses an empty report."""
    if len(report) == 0:
        raise EmptyReportError("refusing to write an empty report")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(HEADER)
        for r in report.sorted_rows():
            out.writerow([r.method, r.pivots, r.known, r.rep, r.metric, _fmt(r.value), _fmt(r.wall_ms)])
    return path


def load_report(path) -> Report:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != HEADER:
            raise CorruptFileError(f"{path}: unexpected header {header}")
        rows = []
        for n, rec in enumerate(reader, start=2):
            try:
                method, pivots, known, rep, metric, value, wall = rec
                rows.append(Row(method, pivots, int(known), int(rep), metric, float(value), float(wall)))
            except ValueError as exc:
                raise CorruptFileError(f"{path}:{n}: bad row {rec} ({exc})") from None
    return Report(rows)
