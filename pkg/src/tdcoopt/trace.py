"""Per-iteration trace records and their CSV serialization.

One record per iteration (plus the initial state).  The CSV layout is
fixed and versioned in a leading comment line so downstream plot scripts
and diffs stay stable; fields that do not apply (for example step norms on
the initial record) are written as an explicit ``NA`` marker, never
omitted.  Floats are written with ``repr`` (shortest round-trip form), so
identical runs produce byte-identical files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TRACE_FORMAT",
    "NA",
    "TraceRecord",
    "Trace",
    "trace_columns",
    "write_trace",
    "read_trace",
]

TRACE_FORMAT = "tdcoopt-trace v1"
NA = "NA"


@dataclass(frozen=True)
class TraceRecord:
    """Diagnostics for one solver iteration.

    Per-feeder tuples are ordered like the feeders of the coupled system;
    ``alpha_probe``/``beta_probe`` sample the incentive signals at one
    probe node per feeder.  ``step_primal``/``step_dual`` are the
    infinity-norm state changes divided by the stepsize; ``None`` on the
    initial record.
    """

    iteration: int
    lam: float
    P_M: tuple[float, ...]
    P_L: tuple[float, ...]
    v_min: tuple[float, ...]
    v_max: tuple[float, ...]
    slack_residual: float
    total_cost: float
    alpha_probe: tuple[float, ...]
    beta_probe: tuple[float, ...]
    step_primal: float | None
    step_dual: float | None


def trace_columns(
    gen_labels: tuple[str, ...], feeder_labels: tuple[str, ...]
) -> list[str]:
    """Fixed column order for the given system shape."""
    cols = ["iteration", "lambda"]
    cols += [f"P_M_{g}" for g in gen_labels]
    for f in feeder_labels:
        cols += [f"P_L_{f}", f"v_min_{f}", f"v_max_{f}", f"alpha_{f}", f"beta_{f}"]
    cols += ["slack_residual", "total_cost", "step_primal", "step_dual"]
    return cols


def _cell(value: float | None) -> str:
    return NA if value is None else repr(float(value))


def write_trace(
    path,
    records: list[TraceRecord],
    gen_labels: tuple[str, ...],
    feeder_labels: tuple[str, ...],
) -> None:
    columns = trace_columns(gen_labels, feeder_labels)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {TRACE_FORMAT}; columns: {','.join(columns)}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for rec in records:
            row = [str(rec.iteration), _cell(rec.lam)]
            row += [_cell(v) for v in rec.P_M]
            for k in range(len(feeder_labels)):
                row += [
                    _cell(rec.P_L[k]),
                    _cell(rec.v_min[k]),
                    _cell(rec.v_max[k]),
                    _cell(rec.alpha_probe[k]),
                    _cell(rec.beta_probe[k]),
                ]
            row += [
                _cell(rec.slack_residual),
                _cell(rec.total_cost),
                _cell(rec.step_primal),
                _cell(rec.step_dual),
            ]
            writer.writerow(row)


@dataclass(frozen=True)
class Trace:
    """A parsed trace file: versioned format tag, columns, and row data."""

    format: str
    columns: tuple[str, ...]
    rows: tuple[tuple[float | None, ...], ...]

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        """One column as a float array; NA cells become NaN."""
        idx = self.columns.index(name)
        return np.array(
            [np.nan if row[idx] is None else row[idx] for row in self.rows]
        )

    @property
    def iterations(self) -> np.ndarray:
        return self.column("iteration")


def read_trace(path) -> Trace:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ValueError(f"{path}: missing trace format header")
        fmt = first[2:].split(";")[0].strip()
        if fmt != TRACE_FORMAT:
            raise ValueError(f"{path}: unsupported trace format {fmt!r}")
        reader = csv.reader(fh)
        columns = tuple(next(reader))
        rows = []
        for raw in reader:
            if len(raw) != len(columns):
                raise ValueError(
                    f"{path}: row {len(rows) + 2} has {len(raw)} cells, "
                    f"expected {len(columns)}"
                )
            rows.append(
                tuple(None if cell == NA else float(cell) for cell in raw)
            )
    return Trace(format=fmt, columns=columns, rows=tuple(rows))
