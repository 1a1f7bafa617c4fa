"""Categorical datasets: ingestion, coding and pairwise association."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed or degenerate categorical input."""


def _label_order(labels):
    # integer-looking labels sort numerically so "10" follows "9"
    try:
        return sorted(labels, key=lambda s: (int(s), s))
    except ValueError:
        return sorted(labels)


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable n x d table of categorical codes.

    ``codes`` holds 1-based modality indices, ``codes[i, j]`` in
    ``1..modality_counts[j]``.
    """

    codes: np.ndarray
    modality_counts: tuple
    variable_names: tuple = ()
    modality_labels: tuple = ()

    def __post_init__(self):
        codes = np.array(self.codes, dtype=np.int64, copy=True)
        if codes.ndim != 2:
            raise DataError("codes must be a 2-d array")
        n, d = codes.shape
        if n < 1 or d < 1:
            raise DataError("a dataset needs at least one row and one column")
        m = tuple(int(v) for v in self.modality_counts)
        if len(m) != d:
            raise DataError("modality_counts length does not match the number of columns")
        for j, mj in enumerate(m):
            if mj < 2:
                raise DataError(f"degenerate variable {j + 1}: fewer than two modalities")
        if (codes < 1).any() or (codes > np.asarray(m)).any():
            raise DataError("code out of range")
        codes.setflags(write=False)
        names = tuple(self.variable_names) or tuple(f"V{j + 1}" for j in range(d))
        if len(names) != d:
            raise DataError("variable_names length does not match the number of columns")
        labels = tuple(tuple(str(s) for s in lab) for lab in self.modality_labels)
        if not labels:
            labels = tuple(tuple(str(h + 1) for h in range(mj)) for mj in m)
        if len(labels) != d or any(len(lab) != mj for lab, mj in zip(labels, m)):
            raise DataError("modality_labels do not match modality_counts")
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "modality_counts", m)
        object.__setattr__(self, "variable_names", names)
        object.__setattr__(self, "modality_labels", labels)

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    @property
    def d(self) -> int:
        return self.codes.shape[1]

    @property
    def m(self) -> np.ndarray:
        return np.asarray(self.modality_counts, dtype=np.int64)

    @cached_property
    def x0(self) -> np.ndarray:
        """Zero-based codes, the layout used by all numerical routines."""
        x = self.codes - 1
        x.setflags(write=False)
        return x

    @cached_property
    def patterns(self) -> "Patterns":
        return Patterns.from_codes(self.x0)

    def decode(self) -> list:
        return [[self.modality_labels[j][c - 1] for j, c in enumerate(row)] for row in self.codes]

    def schema(self) -> list:
        return [{"name": nm, "modalities": list(lab)}
                for nm, lab in zip(self.variable_names, self.modality_labels)]

    @classmethod
    def from_labels(cls, rows: Sequence[Sequence[str]], schema: Optional[list] = None,
                    names: Optional[Sequence[str]] = None) -> "Dataset":
        rows = [[str(v).strip() for v in row] for row in rows]
        if not rows:
            raise DataError("no data rows")
        d = len(rows[0])
        for i, row in enumerate(rows):
            if len(row) != d:
                raise DataError(f"ragged row {i + 1}: expected {d} fields, got {len(row)}")
            if any(v == "" for v in row):
                raise DataError(f"missing value in row {i + 1}")
        columns = list(zip(*rows))
        if schema is not None:
            if len(schema) != d:
                raise DataError("schema does not describe every column")
            labels = [[str(s) for s in entry["modalities"]] for entry in schema]
            names = names or [entry.get("name", f"V{j + 1}") for j, entry in enumerate(schema)]
        else:
            labels = [_label_order(set(col)) for col in columns]
        codes = np.empty((len(rows), d), dtype=np.int64)
        for j, col in enumerate(columns):
            observed = set(col)
            if schema is not None and len(labels[j]) < len(observed):
                raise DataError(f"variable {j + 1}: declared {len(labels[j])} modalities "
                                f"but {len(observed)} distinct values observed")
            index = {lab: h + 1 for h, lab in enumerate(labels[j])}
            unknown = observed - index.keys()
            if unknown:
                raise DataError(f"variable {j + 1}: undeclared values {sorted(unknown)}")
            if len(labels[j]) < 2:
                raise DataError(f"degenerate variable {j + 1}: a single modality")
            codes[:, j] = [index[v] for v in col]
        return cls(codes, tuple(len(lab) for lab in labels),
                   tuple(names) if names else (), tuple(tuple(lab) for lab in labels))


class Patterns:
    """Distinct rows of a zero-based code matrix with their multiplicities.

    Every estimation routine works on these weighted patterns; categorical
    tables usually have far fewer distinct rows than individuals.
    """

    def __init__(self, x: np.ndarray, counts: np.ndarray, inverse: np.ndarray):
        self.x = x
        self.counts = counts
        self.inverse = inverse
        self._blocks = {}

    @classmethod
    def from_codes(cls, x0: np.ndarray) -> "Patterns":
        x, inverse, counts = np.unique(x0, axis=0, return_inverse=True, return_counts=True)
        return cls(x, counts.astype(float), inverse.reshape(-1))

    @property
    def n(self) -> float:
        return float(self.counts.sum())

    def block(self, variables: tuple):
        """Distinct sub-patterns on ``variables`` and the map from patterns to them."""
        hit = self._blocks.get(variables)
        if hit is None:
            xb, inv = np.unique(self.x[:, list(variables)], axis=0, return_inverse=True)
            hit = (xb, inv.reshape(-1))
            self._blocks[variables] = hit
        return hit


def load_csv(path, schema=None, header: bool = True) -> Dataset:
    """Read a comma-separated categorical table.

    ``schema`` is either a list of ``{"name", "modalities"}`` entries or a
    path to a JSON file holding one.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if schema is not None and not isinstance(schema, list):
        schema = json.loads(Path(schema).read_text(encoding="utf-8"))
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if row]
    names = None
    if header:
        if not rows:
            raise DataError("empty file")
        names = [s.strip() for s in rows[0]]
        rows = rows[1:]
        if rows and len(names) != len(rows[0]):
            raise DataError("header and data rows disagree on the number of fields")
    return Dataset.from_labels(rows, schema=schema, names=names)


def write_csv(path, data: Dataset, header: bool = True) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header:
            writer.writerow(data.variable_names)
        writer.writerows(data.decode())


def contingency_table(data: Dataset, j: int, j2: int, weights=None) -> np.ndarray:
    """Weighted m_j x m_j2 co-occurrence table for variables ``j`` and ``j2`` (0-based)."""
    m = data.modality_counts
    w = np.ones(data.n) if weights is None else np.asarray(weights, dtype=float)
    flat = data.x0[:, j] * m[j2] + data.x0[:, j2]
    return np.bincount(flat, weights=w, minlength=m[j] * m[j2]).reshape(m[j], m[j2])


def cramers_v_table(table: np.ndarray) -> float:
    table = np.asarray(table, dtype=float)
    total = table.sum()
    if total <= 0:
        raise DataError("all weights are zero")
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / total
    nz = expected > 0
    chi2 = (((table - expected) ** 2)[nz] / expected[nz]).sum()
    k = min(table.shape) - 1
    return float(np.clip(np.sqrt(chi2 / (total * k)), 0.0, 1.0))


def cramers_v(data: Dataset, j: int, j2: int, weights=None) -> float:
    """Uncorrected Cramer's V between two variables (0-based indices)."""
    if j == j2:
        raise DataError("Cramer's V needs two distinct variables")
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if (weights < 0).any():
            raise DataError("weights must be nonnegative")
        if not (weights > 0).any():
            raise DataError("all weights are zero")
    return cramers_v_table(contingency_table(data, j, j2, weights))


def pairwise_v_matrix(data: Dataset, weights=None) -> np.ndarray:
    if data.d < 2:
        raise DataError("need at least two variables")
    v = np.eye(data.d)
    for j in range(data.d):
        for j2 in range(j + 1, data.d):
            v[j, j2] = v[j2, j] = cramers_v(data, j, j2, weights)
    return v
