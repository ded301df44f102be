"""Stratum-wise test statistics of the form sum_i sum_j m(Z_ij) * R_ij.

Each statistic is defined by a bounded nondecreasing dose transform ``m``:
the identity (permutational t), a threshold indicator, within- or
across-stratum ranks, a power, or a user-supplied piecewise-linear table.
All of these are isotonic in the stratum table for fixed outcomes, which is
what the worst-case machinery requires.  A ``negate`` flag flips the sign of
``m`` to express lower-tailed alternatives.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .design import MatchedDesign, MatchedSet

_KINDS = ("t", "threshold", "rank_within", "rank_across", "power", "custom")


@dataclass(frozen=True)
class StatisticSpec:
    """Specification of one stratum-wise statistic.

    ``threshold`` is required for kind "threshold", ``exponent`` for kind
    "power", and ``table`` (a tuple of (x, y) knots, y nondecreasing) for
    kind "custom"; outside the knot range the table extends flat.
    """

    kind: str
    threshold: float | None = None
    exponent: float | None = None
    table: tuple[tuple[float, float], ...] | None = None
    negate: bool = False

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown statistic kind {self.kind!r}")
        if self.kind == "threshold" and self.threshold is None:
            raise ValueError("threshold statistic needs a cutoff")
        if self.kind == "power":
            if self.exponent is None or self.exponent <= 0:
                raise ValueError("power statistic needs a positive exponent")
        if self.kind == "custom":
            if not self.table or len(self.table) < 2:
                raise ValueError("custom transform needs at least two knots")
            xs = [x for x, _ in self.table]
            ys = [y for _, y in self.table]
            if any(a >= b for a, b in zip(xs, xs[1:])):
                raise ValueError("custom transform knots must have increasing x")
            if any(a > b for a, b in zip(ys, ys[1:])):
                raise ValueError("custom transform must be nondecreasing")

    def label(self) -> str:
        if self.kind == "threshold":
            base = f"threshold:{self.threshold:g}"
        elif self.kind == "power":
            base = f"power:{self.exponent:g}"
        else:
            base = self.kind
        return f"-{base}" if self.negate else base


@dataclass(frozen=True)
class AdaptiveSpec:
    """Bonferroni combination of two or more component statistics."""

    components: tuple[StatisticSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if len(self.components) < 2:
            raise ValueError("adaptive statistic needs at least two components")

    def label(self) -> str:
        return "adaptive:" + ",".join(c.label() for c in self.components)


def parse_statistic(text: str) -> StatisticSpec | AdaptiveSpec:
    """Parse a CLI statistic spec, e.g. "t", "threshold:0.5", "adaptive:t,threshold:0.1"."""
    text = text.strip()
    if text.startswith("adaptive:"):
        parts = [p for p in text[len("adaptive:"):].split(",") if p]
        comps = []
        for p in parts:
            spec = parse_statistic(p)
            if isinstance(spec, AdaptiveSpec):
                raise ValueError("adaptive components cannot be adaptive")
            comps.append(spec)
        return AdaptiveSpec(tuple(comps))
    negate = text.startswith("-")
    if negate:
        text = text[1:]
    if text in ("t", "perm_t"):
        return StatisticSpec("t", negate=negate)
    if text in ("rank", "rank_within", "rank-within"):
        return StatisticSpec("rank_within", negate=negate)
    if text in ("rank_across", "rank-across"):
        return StatisticSpec("rank_across", negate=negate)
    if text.startswith("threshold:"):
        return StatisticSpec("threshold", threshold=float(text.split(":", 1)[1]), negate=negate)
    if text.startswith("power:"):
        return StatisticSpec("power", exponent=float(text.split(":", 1)[1]), negate=negate)
    raise ValueError(f"cannot parse statistic spec {text!r}")


def _transform(spec: StatisticSpec, doses: np.ndarray) -> np.ndarray:
    if spec.kind == "t":
        out = doses.astype(float)
    elif spec.kind == "threshold":
        out = (doses > spec.threshold).astype(float)
    elif spec.kind == "power":
        if np.any(doses < 0):
            raise ValueError("power transform requires nonnegative doses")
        out = np.power(doses.astype(float), spec.exponent)
    elif spec.kind == "custom":
        xs = np.array([x for x, _ in spec.table])
        ys = np.array([y for _, y in spec.table])
        out = np.interp(doses, xs, ys)
    else:
        raise ValueError(f"transform undefined for kind {spec.kind!r}")
    return -out if spec.negate else out


def dose_scores(spec: StatisticSpec, design: MatchedDesign) -> list[np.ndarray]:
    """Per-stratum transformed dose vectors m(z), in unit order.

    Rank statistics use average ranks for ties; "rank_across" pools all
    doses in the design before ranking, so its scores depend on the whole
    design, not just one stratum.
    """
    if spec.kind == "rank_across":
        pooled = rankdata(design.doses, method="average")
        scores = [pooled[sl] for sl in design.unit_slices()]
        return [-s for s in scores] if spec.negate else scores
    if spec.kind == "rank_within":
        scores = [rankdata(s.doses, method="average") for s in design.sets]
        return [-s for s in scores] if spec.negate else scores
    if spec.kind == "threshold":
        lo, hi = design.doses.min(), design.doses.max()
        if not (lo <= spec.threshold < hi):
            warnings.warn(
                f"threshold {spec.threshold:g} outside the dose range [{lo:g}, {hi:g});"
                " statistic is degenerate",
                stacklevel=2,
            )
    return [_transform(spec, s.doses) for s in design.sets]


def per_stratum(spec: StatisticSpec, mset: MatchedSet, design: MatchedDesign | None = None) -> float:
    """Observed contribution of one matched set: sum_j m(z_j) * R_j."""
    if spec.kind == "rank_across":
        if design is None:
            raise ValueError("rank_across scores need the full design")
        i = [s.id for s in design.sets].index(mset.id)
        scores = dose_scores(spec, design)[i]
    elif spec.kind == "rank_within":
        scores = rankdata(mset.doses, method="average")
        if spec.negate:
            scores = -scores
    else:
        scores = _transform(spec, mset.doses)
    return float(scores @ mset.outcomes)


def evaluate(spec: StatisticSpec, design: MatchedDesign) -> float:
    """Observed statistic value over the whole design."""
    scores = dose_scores(spec, design)
    return float(sum(sc @ s.outcomes for sc, s in zip(scores, design.sets)))


def adaptive_p(component_p) -> float:
    """Bonferroni-combined p-value: min(1, k * min(p))."""
    ps = np.asarray(component_p, dtype=float)
    if ps.size == 0:
        raise ValueError("no component p-values")
    return float(min(1.0, ps.size * ps.min()))
