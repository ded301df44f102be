"""Biased dose-assignment probabilities within a matched set.

Under the worst-case confounding model, the probability that a matched set
realizes the dose permutation ``pi`` is proportional to
``exp(gamma * sum_j phi(z[pi(j)]) * u[j])`` where ``gamma >= 0`` is the
sensitivity parameter, ``phi`` an optional monotone dose transform, and
``u`` the per-unit confounder allocation in [0, 1].  At ``gamma = 0`` every
permutation has probability ``1/n!``.

Two representations are offered.  Full mode enumerates all ``n!`` index
permutations.  Aggregated mode groups units sharing the same (outcome, u)
pair: permuting doses inside such a group changes neither the exponent nor
the stratum table, so one atom per assignment of doses to groups suffices,
with the within-group arrangement count folded into its weight.  With
``u`` constant inside each outcome class this reduces to one atom per
stratum table with multiplicity ``m! (n - m)!``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .design import MatchedSet, StratumTable

#: Default ceiling on enumerated atoms in aggregated mode.
DEFAULT_ATOM_CAP = 1_000_000


@dataclass(frozen=True)
class SensitivityParameter:
    """Sensitivity parameter gamma >= 0, optionally with a dose transform.

    ``gamma`` bounds the log-odds shift of receiving a higher dose per unit
    of (transformed) dose difference; ``Gamma = exp(gamma)``.
    """

    gamma: float
    dose_transform: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if not (self.gamma >= 0.0 and math.isfinite(self.gamma)):
            raise ValueError("gamma must be a finite nonnegative real")

    @classmethod
    def from_big_gamma(cls, big_gamma: float, dose_transform=None) -> "SensitivityParameter":
        if big_gamma < 1.0:
            raise ValueError("Gamma must be >= 1")
        return cls(gamma=math.log(big_gamma), dose_transform=dose_transform)

    @property
    def big_gamma(self) -> float:
        return math.exp(self.gamma)

    def transform(self, doses: np.ndarray) -> np.ndarray:
        """Apply the dose transform (identity when absent), checking monotonicity."""
        doses = np.asarray(doses, dtype=float)
        if self.dose_transform is None:
            return doses
        out = np.asarray(self.dose_transform(doses), dtype=float)
        if out.shape != doses.shape:
            raise ValueError("dose_transform must map doses elementwise")
        order = np.argsort(doses, kind="stable")
        if np.any(np.diff(out[order]) < 0):
            raise ValueError("dose_transform must be nondecreasing on the observed doses")
        return out


@dataclass(frozen=True)
class ConfounderAllocation:
    """Per-unit confounder values in [0, 1], in design unit order."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=float).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        if arr.ndim != 1:
            raise ValueError("allocation must be a 1-d vector")
        if np.any(arr < 0) or np.any(arr > 1):
            raise ValueError("allocation values must lie in [0, 1]")

    @classmethod
    def adversarial(cls, design) -> "ConfounderAllocation":
        """The allocation equal to the outcome vector (worst case for upper tails)."""
        return cls(design.outcomes.astype(float))

    def for_set(self, design, set_index: int) -> np.ndarray:
        return self.values[design.unit_slices()[set_index]]


def _softmax(logits: np.ndarray) -> np.ndarray:
    # shift by the max before exponentiating so large gamma*dose scales cannot overflow
    w = np.exp(logits - logits.max())
    return w / w.sum()


@lru_cache(maxsize=16)
def _permutation_array(n: int) -> np.ndarray:
    """All n! permutations of range(n), one per row."""
    return np.array(list(itertools.permutations(range(n))), dtype=np.int8)


def _block_partitions(n: int, sizes: tuple[int, ...]):
    """Ordered partitions of range(n) into blocks of the given sizes."""
    def rec(remaining: tuple[int, ...], sizes: tuple[int, ...]):
        if not sizes:
            yield ()
            return
        k = sizes[0]
        for block in itertools.combinations(remaining, k):
            rest = tuple(x for x in remaining if x not in block)
            for tail in rec(rest, sizes[1:]):
                yield (block,) + tail

    yield from rec(tuple(range(n)), sizes)


def _multinomial(n: int, sizes: tuple[int, ...]) -> int:
    total = math.factorial(n)
    for g in sizes:
        total //= math.factorial(g)
    return total


@dataclass(frozen=True)
class AssignmentDistribution:
    """Dose-assignment distribution for one matched set.

    ``mode`` is "full" or "aggregated".  In full mode ``perms`` holds one
    dose-index permutation per atom (``perms[k, j]`` is the dose index
    assigned to unit ``j``).  In aggregated mode ``blocks[k]`` holds, per
    group, the tuple of dose indices assigned to that group's units, and
    ``group_units`` the unit indices of each group; the per-atom
    ``multiplicity`` counts the underlying permutations.
    """

    mode: str
    doses: np.ndarray
    outcomes: np.ndarray
    probs: np.ndarray
    perms: np.ndarray | None = None
    blocks: tuple | None = None
    group_units: tuple | None = None
    multiplicity: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.doses)

    @property
    def num_atoms(self) -> int:
        return len(self.probs)

    def contribution_values(self, dose_scores, unit_scores) -> np.ndarray:
        """Per-atom value of ``sum_j dose_scores[pi(j)] * unit_scores[j]``.

        In aggregated mode ``unit_scores`` must be constant within each
        group (otherwise the aggregation would be lossy, and this raises).
        """
        a = np.asarray(dose_scores, dtype=float)
        b = np.asarray(unit_scores, dtype=float)
        if self.mode == "full":
            return a[self.perms] @ b
        vals = np.zeros(self.num_atoms)
        for g, units in enumerate(self.group_units):
            bg = b[units]
            if np.ptp(bg) > 0:
                raise ValueError("unit scores vary within an aggregation group")
            if bg[0] == 0.0:
                continue
            vals += bg[0] * np.array([a[list(atom[g])].sum() for atom in self.blocks])
        return vals

    def table_probabilities(self) -> dict[StratumTable, float]:
        """Probability of each stratum table (atoms merged by table)."""
        out: dict[StratumTable, float] = {}
        if self.mode == "full":
            for perm, p in zip(self.perms, self.probs):
                assigned = self.doses[perm]
                s0 = tuple(sorted(assigned[self.outcomes == 0]))
                s1 = tuple(sorted(assigned[self.outcomes == 1]))
                key = StratumTable(s0, s1)
                out[key] = out.get(key, 0.0) + float(p)
            return out
        for atom, p in zip(self.blocks, self.probs):
            ones: list[float] = []
            zeros: list[float] = []
            for g, units in enumerate(self.group_units):
                target = ones if self.outcomes[units[0]] == 1 else zeros
                target.extend(self.doses[list(atom[g])])
            key = StratumTable(tuple(sorted(zeros)), tuple(sorted(ones)))
            out[key] = out.get(key, 0.0) + float(p)
        return out


def assignment_probabilities(
    mset: MatchedSet,
    u,
    gp: SensitivityParameter,
    mode: str = "full",
    cap: int = DEFAULT_ATOM_CAP,
) -> AssignmentDistribution:
    """Dose-assignment distribution of one matched set at allocation ``u``."""
    u = np.asarray(u, dtype=float)
    if u.shape != (mset.n,):
        raise ValueError("allocation length must match the set size")
    if np.any(u < 0) or np.any(u > 1):
        raise ValueError("allocation values must lie in [0, 1]")
    phi_z = gp.transform(mset.doses)

    if mode == "full":
        if math.factorial(mset.n) > cap:
            raise ValueError(f"set {mset.id!r}: n={mset.n} exceeds the full-enumeration cap")
        perms = _permutation_array(mset.n)
        logits = gp.gamma * (phi_z[perms] @ u)
        return AssignmentDistribution(
            mode="full",
            doses=mset.doses,
            outcomes=mset.outcomes,
            probs=_softmax(logits),
            perms=perms,
        )
    if mode != "aggregated":
        raise ValueError(f"unknown mode {mode!r}")

    keys = list(zip(mset.outcomes.tolist(), u.tolist()))
    uniq = sorted(set(keys))
    group_units = tuple(
        np.array([j for j, k in enumerate(keys) if k == key]) for key in uniq
    )
    sizes = tuple(len(g) for g in group_units)
    if _multinomial(mset.n, sizes) > cap:
        raise ValueError(f"set {mset.id!r}: aggregated atom count exceeds cap")
    u_group = np.array([uniq[g][1] for g in range(len(uniq))])
    blocks = tuple(_block_partitions(mset.n, sizes))
    logits = np.array(
        [
            gp.gamma * sum(ug * phi_z[list(block)].sum() for ug, block in zip(u_group, atom))
            for atom in blocks
        ]
    )
    mult = np.array([math.prod(math.factorial(s) for s in sizes)] * len(blocks), dtype=float)
    w = mult * np.exp(logits - logits.max())
    return AssignmentDistribution(
        mode="aggregated",
        doses=mset.doses,
        outcomes=mset.outcomes,
        probs=w / w.sum(),
        blocks=blocks,
        group_units=group_units,
        multiplicity=mult,
    )


def tv_from_uniform(mset: MatchedSet, gp: SensitivityParameter, u) -> float:
    """Total variation distance between the biased and uniform assignment laws."""
    dist = assignment_probabilities(mset, u, gp, mode="full")
    return float(0.5 * np.abs(dist.probs - 1.0 / dist.num_atoms).sum())


def regularity_l(mset: MatchedSet, gp: SensitivityParameter) -> float:
    """Lower bound on the extreme stratum-table probabilities of a discordant set.

    Undefined (raises) for concordant sets, whose table is degenerate.
    """
    n, m = mset.n, mset.m
    if m in (0, n):
        raise ValueError(f"set {mset.id!r} is concordant; regularity bound undefined")
    z = np.sort(gp.transform(mset.doses))
    top = z[math.ceil(n / 2):].sum()
    bottom = z[: math.floor(n / 2)].sum()
    spread = math.comb(n, m) - 1
    return 1.0 / (1.0 + spread * math.exp(gp.gamma * (top - bottom)))


def logit_bound_margin(z_low: float, z_high: float, gp: SensitivityParameter) -> tuple[float, float]:
    """Bounds on the logit of receiving the higher of two doses.

    For two matched units holding doses ``z_low < z_high``, the logit of the
    probability that a given unit receives the higher dose lies within
    ``gamma * (phi(z_high) - phi(z_low))`` of zero, whatever the pair of
    confounder values in [0, 1].
    """
    if not z_low < z_high:
        raise ValueError("requires z_low < z_high")
    lo, hi = gp.transform(np.array([z_low, z_high]))
    margin = gp.gamma * (hi - lo)
    return (-margin, margin)
