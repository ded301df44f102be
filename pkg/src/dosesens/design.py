"""Matched-design data model, CSV ingestion, and the stratum-table lattice.

A matched design is a collection of matched sets, each holding the exposure
doses and binary outcomes of its units.  Within a set, randomization inference
treats the multiset of doses as fixed and permutes their assignment to units.
For binary outcomes the permutation only matters through which doses land on
the outcome-1 units, which is captured by the stratum table (the sorted doses
of the outcome-0 units and of the outcome-1 units).  Stratum tables, ordered
by elementwise comparison of the outcome-1 dose vectors, form a distributive
lattice; the join/meet operations implemented here are the elementwise
max/min on those vectors.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

#: Largest matched-set size for which full permutation enumeration is allowed
#: by default (10! is about 3.6 million permutations).
DEFAULT_ENUMERATION_CAP = 10

_REQUIRED_COLUMNS = ("set_id", "dose", "outcome")


class DesignParseError(ValueError):
    """Raised when a design CSV cannot be parsed into a valid design."""


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype).copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MatchedSet:
    """One matched set: unit doses and binary outcomes, in unit order."""

    id: str
    doses: np.ndarray
    outcomes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "doses", _frozen_array(self.doses, float))
        object.__setattr__(self, "outcomes", _frozen_array(self.outcomes, np.int64))
        if self.doses.ndim != 1 or self.outcomes.ndim != 1:
            raise ValueError(f"set {self.id!r}: doses and outcomes must be 1-d")
        if len(self.doses) != len(self.outcomes):
            raise ValueError(f"set {self.id!r}: doses/outcomes length mismatch")
        if len(self.doses) < 2:
            raise ValueError(f"set {self.id!r}: set size < 2")
        if not np.all(np.isfinite(self.doses)):
            raise ValueError(f"set {self.id!r}: non-finite dose")
        if not np.all((self.outcomes == 0) | (self.outcomes == 1)):
            raise ValueError(f"set {self.id!r}: outcomes must be 0 or 1")

    @property
    def n(self) -> int:
        """Number of units in the set."""
        return len(self.doses)

    @property
    def m(self) -> int:
        """Number of units with outcome 1."""
        return int(self.outcomes.sum())

    @property
    def is_concordant(self) -> bool:
        """True when every outcome in the set is equal."""
        return self.m in (0, self.n)

    @property
    def has_tied_doses(self) -> bool:
        return len(np.unique(self.doses)) < self.n


@dataclass(frozen=True)
class MatchedDesign:
    """A full matched design: the sets plus an optional covariate table.

    Covariates, when present, are stored as one array per covariate name,
    aligned with the design's unit order (sets concatenated in order, units
    in within-set order).  Missing covariate values are NaN.
    """

    sets: tuple[MatchedSet, ...]
    covariates: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "sets", tuple(self.sets))
        if not self.sets:
            raise ValueError("design must contain at least one matched set")
        ids = [s.id for s in self.sets]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate set ids")
        if self.covariates is not None:
            n = self.num_units
            frozen = {}
            for name, col in self.covariates.items():
                col = _frozen_array(col, float)
                if len(col) != n:
                    raise ValueError(f"covariate {name!r}: expected {n} rows")
                frozen[name] = col
            object.__setattr__(self, "covariates", frozen)

    @property
    def num_sets(self) -> int:
        return len(self.sets)

    @property
    def num_units(self) -> int:
        return sum(s.n for s in self.sets)

    @property
    def set_offsets(self) -> list[int]:
        """Starting index of each set within the concatenated unit order."""
        offs, pos = [], 0
        for s in self.sets:
            offs.append(pos)
            pos += s.n
        return offs

    @property
    def doses(self) -> np.ndarray:
        return np.concatenate([s.doses for s in self.sets])

    @property
    def outcomes(self) -> np.ndarray:
        return np.concatenate([s.outcomes for s in self.sets])

    def unit_slices(self) -> list[slice]:
        return [slice(o, o + s.n) for o, s in zip(self.set_offsets, self.sets)]


@dataclass(frozen=True, order=False)
class StratumTable:
    """Sorted doses of the outcome-0 units (s0) and outcome-1 units (s1)."""

    s0: tuple[float, ...]
    s1: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "s0", tuple(float(v) for v in self.s0))
        object.__setattr__(self, "s1", tuple(float(v) for v in self.s1))
        if any(a > b for a, b in zip(self.s0, self.s0[1:])):
            raise ValueError("s0 must be sorted ascending")
        if any(a > b for a, b in zip(self.s1, self.s1[1:])):
            raise ValueError("s1 must be sorted ascending")

    @property
    def n(self) -> int:
        return len(self.s0) + len(self.s1)

    @property
    def m(self) -> int:
        return len(self.s1)

    def all_doses(self) -> tuple[float, ...]:
        return tuple(sorted(self.s0 + self.s1))

    def sum_s1(self) -> float:
        return float(sum(self.s1))


def stratum_table(mset: MatchedSet) -> StratumTable:
    """Build the stratum table of a matched set from its observed assignment."""
    s0 = np.sort(mset.doses[mset.outcomes == 0])
    s1 = np.sort(mset.doses[mset.outcomes == 1])
    return StratumTable(tuple(s0), tuple(s1))


@dataclass(frozen=True)
class LatticeElement:
    """A vector of stratum tables, one per matched set."""

    tables: tuple[StratumTable, ...]

    def __post_init__(self):
        object.__setattr__(self, "tables", tuple(self.tables))

    def sum_s1(self) -> float:
        return float(sum(t.sum_s1() for t in self.tables))


def design_element(design: MatchedDesign) -> LatticeElement:
    """The lattice element realized by the design's observed assignment."""
    return LatticeElement(tuple(stratum_table(s) for s in design.sets))


def _check_compatible(a: LatticeElement, b: LatticeElement) -> None:
    if len(a.tables) != len(b.tables):
        raise ValueError("mismatched stratum shapes: different number of strata")
    for i, (ta, tb) in enumerate(zip(a.tables, b.tables)):
        if ta.n != tb.n or ta.m != tb.m:
            raise ValueError(f"mismatched stratum shapes in stratum {i}")
        if ta.all_doses() != tb.all_doses():
            raise ValueError(f"stratum {i}: elements live on different dose multisets")


def _complement(all_doses: tuple[float, ...], s1: tuple[float, ...]) -> tuple[float, ...]:
    remaining = Counter(all_doses)
    remaining.subtract(Counter(s1))
    if any(c < 0 for c in remaining.values()):
        raise ValueError("s1 is not a sub-multiset of the stratum doses")
    return tuple(sorted(remaining.elements()))


def _combine(a: LatticeElement, b: LatticeElement, op) -> LatticeElement:
    _check_compatible(a, b)
    tables = []
    for ta, tb in zip(a.tables, b.tables):
        s1 = tuple(op(x, y) for x, y in zip(ta.s1, tb.s1))
        s0 = _complement(ta.all_doses(), s1)
        tables.append(StratumTable(s0, s1))
    return LatticeElement(tuple(tables))


def lattice_join(a: LatticeElement, b: LatticeElement) -> LatticeElement:
    """Elementwise max of the outcome-1 dose vectors (s0 by complement)."""
    return _combine(a, b, max)


def lattice_meet(a: LatticeElement, b: LatticeElement) -> LatticeElement:
    """Elementwise min of the outcome-1 dose vectors (s0 by complement)."""
    return _combine(a, b, min)


def lattice_leq(a: LatticeElement, b: LatticeElement) -> bool:
    """Partial order: a <= b iff every s1 entry of a is <= that of b."""
    _check_compatible(a, b)
    return all(
        x <= y for ta, tb in zip(a.tables, b.tables) for x, y in zip(ta.s1, tb.s1)
    )


@dataclass(frozen=True)
class SetDiagnostics:
    id: str
    n: int
    m: int
    concordant: bool
    tied_doses: bool
    enumerable: bool


@dataclass(frozen=True)
class DesignDiagnostics:
    sets: tuple[SetDiagnostics, ...]
    num_sets: int
    num_units: int
    num_concordant: int
    num_tied: int
    num_enumeration_infeasible: int
    enumeration_cap: int

    def to_dict(self) -> dict:
        return {
            "num_sets": self.num_sets,
            "num_units": self.num_units,
            "num_concordant": self.num_concordant,
            "num_discordant": self.num_sets - self.num_concordant,
            "num_tied": self.num_tied,
            "num_enumeration_infeasible": self.num_enumeration_infeasible,
            "enumeration_cap": self.enumeration_cap,
            "sets": [
                {
                    "id": s.id,
                    "n": s.n,
                    "m": s.m,
                    "concordant": s.concordant,
                    "tied_doses": s.tied_doses,
                    "enumerable": s.enumerable,
                }
                for s in self.sets
            ],
        }


def validate(design: MatchedDesign, enumeration_cap: int = DEFAULT_ENUMERATION_CAP) -> DesignDiagnostics:
    """Diagnostic pass over a parsed design; never raises.

    Flags concordant sets (constant outcomes), tied doses within a set, and
    sets too large for full permutation enumeration under the given cap.
    Tied doses are legal: permutation enumeration weights every index
    permutation equally, which averages over tie-breaking orders.
    """
    rows = []
    for s in design.sets:
        rows.append(
            SetDiagnostics(
                id=s.id,
                n=s.n,
                m=s.m,
                concordant=s.is_concordant,
                tied_doses=s.has_tied_doses,
                enumerable=s.n <= enumeration_cap,
            )
        )
    return DesignDiagnostics(
        sets=tuple(rows),
        num_sets=len(rows),
        num_units=sum(r.n for r in rows),
        num_concordant=sum(r.concordant for r in rows),
        num_tied=sum(r.tied_doses for r in rows),
        num_enumeration_infeasible=sum(not r.enumerable for r in rows),
        enumeration_cap=enumeration_cap,
    )


def parse_design(source, strict_ties: bool = False) -> MatchedDesign:
    """Parse design CSV from a text stream (or a string of CSV content).

    Expected header: ``set_id,dose,outcome`` plus optional covariate columns.
    Doses parse as decimals, outcomes must be the integers 0 or 1 (anything
    else is an error, never coerced), covariates parse as decimals with blank
    cells meaning missing.  Units are grouped by set_id preserving file
    order; a set_id reappearing after a different set is a collision error.

    Tied doses within a set are allowed by default (enumeration weights all
    index permutations equally, which averages over tie-breaking orders);
    ``strict_ties`` turns them into a parse error instead.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise DesignParseError("empty input") from None
    header = [h.strip() for h in header]
    for col in _REQUIRED_COLUMNS:
        if col not in header:
            raise DesignParseError(f"missing required column {col!r}")
    idx = {name: header.index(name) for name in _REQUIRED_COLUMNS}
    cov_names = [h for h in header if h not in _REQUIRED_COLUMNS]
    cov_idx = [header.index(h) for h in cov_names]

    order: list[str] = []
    doses: dict[str, list[float]] = {}
    outcomes: dict[str, list[int]] = {}
    covs: dict[str, list[float]] = {name: [] for name in cov_names}
    closed: set[str] = set()
    current: str | None = None
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DesignParseError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        sid = row[idx["set_id"]].strip()
        if not sid:
            raise DesignParseError(f"line {lineno}: empty set_id")
        if sid != current:
            if sid in closed:
                raise DesignParseError(
                    f"line {lineno}: set_id {sid!r} collides with an earlier block"
                )
            if current is not None:
                closed.add(current)
            current = sid
        if sid not in doses:
            order.append(sid)
            doses[sid] = []
            outcomes[sid] = []
        try:
            dose = float(row[idx["dose"]])
        except ValueError:
            raise DesignParseError(f"line {lineno}: malformed dose {row[idx['dose']]!r}") from None
        if not math.isfinite(dose):
            raise DesignParseError(f"line {lineno}: non-finite dose")
        out_raw = row[idx["outcome"]].strip()
        if out_raw not in ("0", "1"):
            raise DesignParseError(f"line {lineno}: outcome must be 0 or 1, got {out_raw!r}")
        doses[sid].append(dose)
        outcomes[sid].append(int(out_raw))
        for name, j in zip(cov_names, cov_idx):
            cell = row[j].strip()
            if cell == "":
                covs[name].append(float("nan"))
            else:
                try:
                    covs[name].append(float(cell))
                except ValueError:
                    raise DesignParseError(
                        f"line {lineno}: malformed covariate {name!r} value {cell!r}"
                    ) from None

    if not order:
        raise DesignParseError("no data rows")
    sets = []
    for sid in order:
        if len(doses[sid]) < 2:
            raise DesignParseError(f"set {sid!r}: set size < 2")
        mset = MatchedSet(id=sid, doses=doses[sid], outcomes=outcomes[sid])
        if strict_ties and mset.has_tied_doses:
            raise DesignParseError(f"set {sid!r}: tied doses (strict mode)")
        sets.append(mset)
    covariates = {name: np.array(vals) for name, vals in covs.items()} or None
    return MatchedDesign(sets=tuple(sets), covariates=covariates)


def load_design(path, strict_ties: bool = False) -> MatchedDesign:
    """Parse a design CSV file from disk."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return parse_design(fh, strict_ties=strict_ties)


def write_design(design: MatchedDesign) -> str:
    """Serialize a design back to CSV text (inverse of parse_design)."""
    cov_names = sorted(design.covariates) if design.covariates else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(_REQUIRED_COLUMNS) + cov_names)
    pos = 0
    for s in design.sets:
        for j in range(s.n):
            row = [s.id, repr(float(s.doses[j])), str(int(s.outcomes[j]))]
            for name in cov_names:
                v = design.covariates[name][pos]
                row.append("" if math.isnan(v) else repr(float(v)))
            writer.writerow(row)
            pos += 1
    return buf.getvalue()
