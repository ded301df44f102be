"""Covariate balance assessment for matched designs.

Balance is summarized per covariate by standardized mean differences and
two-sample Kolmogorov-Smirnov tests between low- and high-dose groups,
before matching (split at the pooled median dose) and after matching
(split at each set's own median).  Both SMDs share the whole-sample
standard deviation as denominator so they are directly comparable.  A
randomization test of the uniform-assignment assumption cross-fits linear
dose predictions on a random half-split of the sets and compares the
observed alignment statistic with its within-set permutation distribution.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import kstwobign

from .design import MatchedDesign


def smd(values, group, sd_whole: float) -> float:
    """Standardized mean difference (high minus low) over a shared denominator."""
    values = np.asarray(values, dtype=float)
    group = np.asarray(group)
    if not (group == 1).any() or not (group == 0).any():
        raise ValueError("both groups must be nonempty")
    if not sd_whole > 0:
        raise ValueError("whole-sample standard deviation must be positive")
    return float((values[group == 1].mean() - values[group == 0].mean()) / sd_whole)


def median_split_groups(design: MatchedDesign) -> np.ndarray:
    """Within-set split: 1 where the dose strictly exceeds the set median."""
    labels = np.zeros(design.num_units, dtype=np.int64)
    for mset, sl in zip(design.sets, design.unit_slices()):
        labels[sl] = (mset.doses > np.median(mset.doses)).astype(np.int64)
    return labels


def ks_two_sample(x, y) -> tuple[float, float]:
    """Two-sample KS statistic with the asymptotic Kolmogorov p-value.

    D is the sup-distance between the empirical CDFs; the p-value evaluates
    the Kolmogorov limit law at sqrt(n*m/(n+m)) * D.
    """
    x = np.sort(np.asarray(x, dtype=float))
    y = np.sort(np.asarray(y, dtype=float))
    if len(x) == 0 or len(y) == 0:
        raise ValueError("both samples must be nonempty")
    pooled = np.concatenate([x, y])
    cdf_x = np.searchsorted(x, pooled, side="right") / len(x)
    cdf_y = np.searchsorted(y, pooled, side="right") / len(y)
    d = float(np.abs(cdf_x - cdf_y).max())
    en = len(x) * len(y) / (len(x) + len(y))
    p = float(np.clip(kstwobign.sf(math.sqrt(en) * d), 0.0, 1.0))
    return d, p


def _complete_covariates(design: MatchedDesign) -> dict[str, np.ndarray]:
    if not design.covariates:
        raise ValueError("design carries no covariates")
    usable = {}
    for name, col in design.covariates.items():
        if np.isnan(col).any():
            warnings.warn(f"covariate {name!r} has missing values and is dropped", stacklevel=3)
            continue
        usable[name] = col
    if not usable:
        raise ValueError("no complete covariates available")
    return usable


def _linear_fit(X: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, bool]:
    """Least-squares coefficients; singular designs fall back to a fixed ridge."""
    ridged = False
    gram = X.T @ X
    if np.linalg.matrix_rank(X) < X.shape[1]:
        gram = gram + 1e-8 * np.eye(X.shape[1])
        ridged = True
    beta = np.linalg.solve(gram, X.T @ z)
    return beta, ridged


@dataclass(frozen=True)
class BalanceTestResult:
    p_1to2: float
    p_2to1: float
    alpha: float
    reject: bool
    permutation_reps: int
    seed: int
    ridged: bool
    degenerate: bool

    def to_dict(self) -> dict:
        return {
            "p_1to2": self.p_1to2,
            "p_2to1": self.p_2to1,
            "alpha": self.alpha,
            "reject": self.reject,
            "permutation_reps": self.permutation_reps,
            "seed": self.seed,
            "ridged": self.ridged,
            "degenerate": self.degenerate,
        }


def balance_randomization_test(
    design: MatchedDesign,
    alpha: float = 0.1,
    permutation_reps: int = 2000,
    seed: int = 0,
) -> BalanceTestResult:
    """Randomization test of uniform within-set dose assignment.

    The sets are split in half at random (larger half first), a linear dose
    model is fit on each half, and each fit is scored on the other half by
    the alignment statistic sum_ij Z_ij * ghat(x_ij), whose null
    distribution comes from uniform within-set dose permutations.  Add-one
    permutation p-values; rejection when the smaller p is below alpha/2.
    """
    covs = _complete_covariates(design)
    X = np.column_stack([np.ones(design.num_units)] + [covs[k] for k in sorted(covs)])
    z = design.doses
    slices = design.unit_slices()

    children = np.random.SeedSequence(seed).spawn(3)
    split_rng = np.random.Generator(np.random.PCG64(children[0]))
    order = split_rng.permutation(design.num_sets)
    half = (design.num_sets + 1) // 2
    part1, part2 = sorted(order[:half]), sorted(order[half:])
    if not part2:
        raise ValueError("need at least two matched sets to split")

    def rows(part):
        return np.concatenate([np.arange(slices[i].start, slices[i].stop) for i in part])

    ridged = False
    degenerate = False
    ps = []
    halves = [(part1, part2), (part2, part1)]
    for (train, test), child in zip(halves, children[1:]):
        tr, te = rows(train), rows(test)
        beta, r = _linear_fit(X[tr], z[tr])
        ridged = ridged or r
        ghat = X[te] @ beta
        # observed alignment and its permutation law, set by set
        rng = np.random.Generator(np.random.PCG64(child))
        t_obs = 0.0
        t_perm = np.zeros(permutation_reps)
        for i in test:
            sl = slices[i]
            g_i = X[np.arange(sl.start, sl.stop)] @ beta
            z_i = z[sl.start : sl.stop]
            t_obs += float(z_i @ g_i)
            zmat = rng.permuted(np.tile(z_i, (permutation_reps, 1)), axis=1)
            t_perm += zmat @ g_i
        if np.ptp(t_perm) == 0.0 and t_perm[0] == t_obs:
            degenerate = True
        exceed = int(np.sum(t_perm >= t_obs - 1e-9 * (1.0 + abs(t_obs))))
        ps.append((1.0 + exceed) / (permutation_reps + 1.0))
    p12, p21 = ps
    return BalanceTestResult(
        p_1to2=p12,
        p_2to1=p21,
        alpha=alpha,
        reject=min(p12, p21) < alpha / 2.0,
        permutation_reps=permutation_reps,
        seed=seed,
        ridged=ridged,
        degenerate=degenerate,
    )


@dataclass(frozen=True)
class CovariateBalanceRow:
    name: str
    mean_below: float
    mean_above: float
    smd_before: float
    ks_p_before: float
    mean_low: float
    mean_high: float
    smd_after: float
    ks_p_after: float


@dataclass(frozen=True)
class BalanceReport:
    rows: tuple[CovariateBalanceRow, ...]
    randomization: BalanceTestResult | None
    degenerate_sets: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "covariates": [
                {
                    "confounder": r.name,
                    "below": r.mean_below,
                    "above": r.mean_above,
                    "smd_before": r.smd_before,
                    "ks_p_before": r.ks_p_before,
                    "low": r.mean_low,
                    "high": r.mean_high,
                    "smd_after": r.smd_after,
                    "ks_p_after": r.ks_p_after,
                }
                for r in self.rows
            ],
            "randomization_test": None if self.randomization is None else self.randomization.to_dict(),
            "degenerate_sets": list(self.degenerate_sets),
        }


def balance_report(
    design: MatchedDesign,
    alpha: float = 0.1,
    permutation_reps: int = 2000,
    seed: int = 0,
    randomization: bool = True,
) -> BalanceReport:
    """Full balance table plus (optionally) the randomization test."""
    covs = _complete_covariates(design)
    doses = design.doses
    before = (doses > np.median(doses)).astype(np.int64)
    after = median_split_groups(design)
    degenerate = tuple(
        s.id for s in design.sets if len(np.unique(s.doses)) == 1
    )
    rows = []
    for name in sorted(covs):
        col = covs[name]
        sd_whole = float(col.std(ddof=1))
        if sd_whole == 0.0:
            warnings.warn(f"covariate {name!r} has zero variance; SMD undefined, skipped",
                          stacklevel=2)
            continue
        rows.append(
            CovariateBalanceRow(
                name=name,
                mean_below=float(col[before == 0].mean()),
                mean_above=float(col[before == 1].mean()),
                smd_before=smd(col, before, sd_whole),
                ks_p_before=ks_two_sample(col[before == 0], col[before == 1])[1],
                mean_low=float(col[after == 0].mean()),
                mean_high=float(col[after == 1].mean()),
                smd_after=smd(col, after, sd_whole),
                ks_p_after=ks_two_sample(col[after == 0], col[after == 1])[1],
            )
        )
    rand = (
        balance_randomization_test(design, alpha=alpha, permutation_reps=permutation_reps, seed=seed)
        if randomization
        else None
    )
    return BalanceReport(rows=tuple(rows), randomization=rand, degenerate_sets=degenerate)
