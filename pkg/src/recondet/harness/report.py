"""Evaluation reports: AUC tables with bit-stable CSV/JSON and plots.

Cells are rounded to four decimals when stored, so the JSON form round-trips
to an equal report and repeated emission is byte-identical. Missing cells are
``None`` in memory and ``NA`` on disk. Wall-clock durations are kept out of
the report and written to a separate timings file.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

DECIMALS = 4
NA = "NA"


def _cell(v):
    if v is None:
        return None
    v = float(v)
    if not math.isfinite(v):
        return None
    return round(v, DECIMALS)


@dataclass
class Table:
    row_label: str
    columns: list[str]
    rows: dict[str, dict[str, float | None]] = field(default_factory=dict)
    check_unit: bool = True

    def set(self, row: str, column: str, value) -> None:
        if column not in self.columns:
            raise KeyError(f"unknown column {column!r}")
        v = _cell(value)
        if self.check_unit and v is not None and not 0.0 <= v <= 1.0:
            raise ValueError(f"cell {row}/{column} = {v} outside [0, 1]")
        self.rows.setdefault(row, {c: None for c in self.columns})[column] = v

    def get(self, row: str, column: str):
        return self.rows.get(row, {}).get(column)

    def average(self, row: str) -> float | None:
        """Mean of the present cells (AUC tables only)."""
        if not self.check_unit:
            return None
        present = [v for v in self.rows[row].values() if v is not None]
        return round(sum(present) / len(present), DECIMALS) if present else None

    def missing(self) -> list[tuple[str, str]]:
        return [(r, c) for r, cells in self.rows.items() for c, v in cells.items() if v is None]

    def to_dict(self) -> dict:
        return {
            "row_label": self.row_label,
            "columns": list(self.columns),
            "rows": [{"name": r, "cells": dict(cells), "average": self.average(r)} for r, cells in self.rows.items()],
            "check_unit": self.check_unit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Table":
        t = cls(d["row_label"], list(d["columns"]), check_unit=d.get("check_unit", True))
        for row in d["rows"]:
            t.rows[row["name"]] = {c: row["cells"].get(c) for c in t.columns}
        return t

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        avg = ["Avg"] if self.check_unit else []
        w.writerow([self.row_label, *self.columns, *avg])
        fmt = lambda v: NA if v is None else f"{v:.{DECIMALS}f}"
        for r, cells in self.rows.items():
            tail = [fmt(self.average(r))] if self.check_unit else []
            w.writerow([r, *(fmt(cells[c]) for c in self.columns), *tail])
        return buf.getvalue()


@dataclass
class EvaluationReport:
    kind: str
    tables: dict[str, Table] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failures) or any(t.missing() for t in self.tables.values() if t.check_unit)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "metadata": self.metadata,
            "failures": list(self.failures),
            "partial": self.partial,
            "tables": {k: t.to_dict() for k, t in self.tables.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(
            d["kind"],
            {k: Table.from_dict(t) for k, t in d["tables"].items()},
            dict(d.get("metadata", {})),
            list(d.get("failures", [])),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        return cls.from_dict(json.loads(text))


def emit_report(report: EvaluationReport, out_dir, formats=("csv", "json", "plots")) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = out / f"{report.kind}.json"
        p.write_text(report.to_json())
        written.append(p)
    if "csv" in formats:
        header = f"# report={report.kind} config_hash={report.metadata.get('config_hash', NA)}"
        if "composition" in report.metadata:
            header += f" composition={report.metadata['composition']}"
        for name, table in sorted(report.tables.items()):
            p = out / f"{report.kind}_{_slug(name)}.csv"
            p.write_text(header + "\n" + table.to_csv())
            written.append(p)
    if "plots" in formats:
        written += _plots(report, out)
    return written


def load_report(path) -> EvaluationReport:
    return EvaluationReport.from_json(Path(path).read_text())


def write_timings(path, timings: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({k: round(v, 2) for k, v in timings.items()}, sort_keys=True, indent=2) + "\n")
    return path


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name).strip("_")


def _plots(report: EvaluationReport, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for name, table in sorted(report.tables.items()):
        if not table.rows:
            continue
        fig, ax = plt.subplots(figsize=(6, 3.5))
        if report.kind == "layers":
            # one bar group per layer set
            rows = list(table.rows)
            width = 0.8 / len(table.columns)
            for j, col in enumerate(table.columns):
                vals = [table.get(r, col) for r in rows]
                xs = [i + j * width for i in range(len(rows))]
                ax.bar(xs, [math.nan if v is None else v for v in vals], width, label=col)
            ax.set_xticks([i + 0.4 - width / 2 for i in range(len(rows))], rows, rotation=20, fontsize=7)
        else:
            # degradation lines from white-box across the black-box settings
            for r, cells in table.rows.items():
                ax.plot(table.columns, [math.nan if cells[c] is None else cells[c] for c in table.columns], marker="o", label=r)
        ax.set_ylabel("AUC")
        ax.set_ylim(0.0, 1.0)
        ax.set_title(f"{report.kind}: {name}", fontsize=9)
        ax.legend(fontsize=7)
        fig.tight_layout()
        p = out / f"{report.kind}_{_slug(name)}.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        written.append(p)
    return written
