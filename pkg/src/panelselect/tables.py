"""Plain tables written as CSV plus an optional aligned-text or TSV copy.

The CSV copy always exists and carries full precision; the aligned text
rounds floats to ``digits`` decimals, so every printed number can be traced
back to a CSV cell.
"""

from __future__ import annotations

import csv
import io
import math
import numbers
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Table:
    title: str
    columns: list[str]
    rows: list[list] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def add(self, *row):
        if len(row) != len(self.columns):
            raise ValueError(f"row has {len(row)} cells, table {self.title!r} has {len(self.columns)} columns")
        self.rows.append(list(row))


def _plain(v):
    # numpy scalars print as np.float64(...) under numpy 2
    if isinstance(v, (bool, str)) or v is None:
        return v
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, numbers.Integral):
        return int(v)
    if isinstance(v, numbers.Real):
        return float(v)
    return v


def _csv_cell(v) -> str:
    v = _plain(v)
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _pretty_cell(v, digits: int) -> str:
    v = _plain(v)
    if v is None:
        return ""
    if isinstance(v, bool):
        return "*" if v else ""
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.{digits}f}"
    return str(v)


def to_delimited(table: Table, delimiter: str = ",") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(table.columns)
    for row in table.rows:
        w.writerow([_csv_cell(v) for v in row])
    return buf.getvalue()


def to_pretty(table: Table, digits: int = 4) -> str:
    cells = [table.columns] + [[_pretty_cell(v, digits) for v in row] for row in table.rows]
    widths = [max(len(r[j]) for r in cells) for j in range(len(table.columns))]
    numeric = [all(isinstance(_plain(row[j]), (int, float)) or row[j] is None for row in table.rows)
               for j in range(len(table.columns))]

    def line(r):
        parts = [c.rjust(wd) if num else c.ljust(wd) for c, wd, num in zip(r, widths, numeric)]
        return "  ".join(parts).rstrip()

    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    out = [table.title, rule, line(cells[0]), rule]
    out += [line(r) for r in cells[1:]]
    out.append(rule)
    out += table.notes
    return "\n".join(out) + "\n"


def write_table(table: Table, out_dir, stem: str, fmt: str = "pretty") -> list[Path]:
    """Write ``stem.csv`` and, for ``fmt`` pretty/tsv, ``stem.txt``/``stem.tsv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / f"{stem}.csv"]
    written[0].write_text(to_delimited(table), encoding="utf-8")
    if fmt == "pretty":
        written.append(out_dir / f"{stem}.txt")
        written[-1].write_text(to_pretty(table), encoding="utf-8")
    elif fmt == "tsv":
        written.append(out_dir / f"{stem}.tsv")
        written[-1].write_text(to_delimited(table, "\t"), encoding="utf-8")
    return written
