"""Patient-by-feature tables and their on-disk form.

A table is stored as a CSV whose first column is ``patient_id`` followed by
one column per feature (header row mandatory), with a companion JSON file
describing each column's kind (continuous or categorical) and provenance
(computed or external).  Floats are written with 17 significant digits so a
write/read cycle is value-exact.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .features import CATEGORICAL_COLUMNS, EXTERNAL_COLUMNS, FeatureVector

FLOAT_FMT = "%.17g"


@dataclass
class FeatureTable:
    patient_ids: list[str]
    names: list[str]
    values: np.ndarray  # (N, P) float64
    kinds: dict[str, str] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n, p = len(self.patient_ids), len(self.names)
        if self.values.shape != (n, p):
            raise FormatError(
                f"value matrix shape {self.values.shape} does not match "
                f"{n} patients x {p} features"
            )
        if len(set(self.patient_ids)) != n:
            seen: set[str] = set()
            for pid in self.patient_ids:
                if pid in seen:
                    raise ValidationError(f"duplicate patient_id {pid!r}")
                seen.add(pid)
        if len(set(self.names)) != p:
            raise ValidationError("duplicate feature names")
        if not np.isfinite(self.values).all():
            raise ValidationError("table contains non-finite values")
        for name in self.names:
            self.kinds.setdefault(
                name, "categorical" if name in CATEGORICAL_COLUMNS else "continuous"
            )
            self.provenance.setdefault(
                name, "external" if name in EXTERNAL_COLUMNS else "computed"
            )

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    @property
    def n_features(self) -> int:
        return len(self.names)

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.names.index(name)
        except ValueError:
            raise KeyError(name) from None
        return self.values[:, j]

    def continuous_names(self) -> list[str]:
        return [n for n in self.names if self.kinds[n] == "continuous"]

    def select(self, names) -> "FeatureTable":
        names = list(names)
        idx = [self.names.index(n) for n in names]
        return FeatureTable(
            patient_ids=list(self.patient_ids),
            names=names,
            values=self.values[:, idx].copy(),
            kinds={n: self.kinds[n] for n in names},
            provenance={n: self.provenance[n] for n in names},
        )

    def constant_columns(self) -> list[str]:
        out = []
        for j, name in enumerate(self.names):
            col = self.values[:, j]
            if np.all(col == col[0]):
                out.append(name)
        return out


def from_vectors(vectors: list[FeatureVector]) -> FeatureTable:
    """Stack per-patient vectors into a table, in patient-id order."""
    if not vectors:
        raise ValidationError("no feature vectors supplied")
    vectors = sorted(vectors, key=lambda v: v.patient_id)
    names = list(vectors[0].values.keys())
    rows = []
    for v in vectors:
        if list(v.values.keys()) != names:
            raise ValidationError(
                f"feature names for patient {v.patient_id!r} do not match the roster"
            )
        rows.append([v.values[n] for n in names])
    return FeatureTable(
        patient_ids=[v.patient_id for v in vectors],
        names=names,
        values=np.array(rows, dtype=np.float64),
    )


def _format_value(x: float) -> str:
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return FLOAT_FMT % x


def write_table(table: FeatureTable, csv_path, metadata_path=None) -> None:
    csv_path = Path(csv_path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["patient_id", *table.names])
    for i, pid in enumerate(table.patient_ids):
        writer.writerow([pid, *(_format_value(v) for v in table.values[i])])
    csv_path.write_text(buf.getvalue())
    if metadata_path is not None:
        meta = {
            "columns": {
                name: {
                    "kind": table.kinds[name],
                    "provenance": table.provenance[name],
                }
                for name in table.names
            }
        }
        Path(metadata_path).write_text(json.dumps(meta, indent=2) + "\n")


def read_table(csv_path, metadata_path=None) -> FeatureTable:
    csv_path = Path(csv_path)
    with csv_path.open(newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{csv_path}: empty CSV") from None
        if not header or header[0] != "patient_id":
            raise FormatError(f"{csv_path}: first column must be patient_id")
        names = header[1:]
        patient_ids: list[str] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(
                    f"{csv_path}:{lineno}: expected {len(header)} cells, got {len(row)}"
                )
            patient_ids.append(row[0])
            try:
                rows.append([float(c) for c in row[1:]])
            except ValueError as exc:
                raise FormatError(f"{csv_path}:{lineno}: non-numeric cell ({exc})") from None

    kinds: dict[str, str] = {}
    provenance: dict[str, str] = {}
    if metadata_path is not None:
        meta = json.loads(Path(metadata_path).read_text())
        columns = meta.get("columns")
        if not isinstance(columns, dict):
            raise FormatError(f"{metadata_path}: missing 'columns' object")
        for name in names:
            if name not in columns:
                raise ValidationError(f"column {name!r} absent from metadata")
            entry = columns[name]
            kinds[name] = entry.get("kind", "continuous")
            provenance[name] = entry.get("provenance", "computed")

    values = (
        np.array(rows, dtype=np.float64)
        if rows
        else np.empty((0, len(names)), dtype=np.float64)
    )
    return FeatureTable(
        patient_ids=patient_ids,
        names=names,
        values=values,
        kinds=kinds,
        provenance=provenance,
    )
