"""Worst-case p-values under the sharp null of no dose effect.

For binary outcomes and an isotonic stratum-wise statistic, the allocation
of unmeasured confounders that maximizes pr(T >= t) over the unit cube is
the outcome vector itself.  The two production routes both evaluate the
tail at that adversarial allocation: ``worst_case_p_exact_mc`` samples dose
assignments stratum by stratum, ``worst_case_p_normal`` uses the normal
approximation with the exact mean and variance of T.

``brute_force_worst_p`` is the desk-scale oracle for the general problem
(arbitrary real unit scores): it maximizes the exact enumeration tail over
the whole cube by multi-start coordinate ascent.  It exists to validate the
adversarial-corner shortcut and to exhibit where that shortcut fails for
continuous outcome scores.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import norm

from .assignment import ConfounderAllocation, SensitivityParameter, _permutation_array, _softmax
from .design import MatchedDesign
from .statistics import StatisticSpec, dose_scores

_TIE_TOL = 1e-9


@dataclass(frozen=True)
class SharpNullResult:
    gamma: float
    t_obs: float
    p_worst: float
    method: str
    statistic: str = ""
    mc_se: float | None = None
    moments: tuple[float, float] | None = None
    reps: int | None = None
    seed: int | None = None
    degenerate: bool = False

    @property
    def big_gamma(self) -> float:
        return math.exp(self.gamma)

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "Gamma": self.big_gamma,
            "statistic": self.statistic,
            "t_obs": self.t_obs,
            "p_worst": self.p_worst,
            "method": self.method,
            "mc_se": self.mc_se,
            "mean": None if self.moments is None else self.moments[0],
            "variance": None if self.moments is None else self.moments[1],
            "reps": self.reps,
            "seed": self.seed,
            "degenerate": self.degenerate,
        }


#: Per-stratum ceiling on enumerated outcome-1 dose subsets.
COMBINATION_CAP = 4_000_000


@lru_cache(maxsize=4096)
def _combination_indices(n: int, m: int) -> np.ndarray:
    """All C(n, m) index subsets of range(n), one per row, shape (C, m)."""
    if math.comb(n, m) > COMBINATION_CAP:
        raise ValueError(f"stratum enumeration infeasible: C({n},{m}) subsets exceed the cap")
    if m == 0:
        return np.zeros((1, 0), dtype=np.int64)
    return np.array(list(itertools.combinations(range(n), m)), dtype=np.int64)


def _worst_case_atoms(doses, outcomes, scores, gp: SensitivityParameter, negate: bool = False):
    """Tail atoms of one stratum at the adversarial allocation.

    Atoms are the C(n, m) choices of which dose indices land on the
    outcome-1 units.  Returns (probs, contributions).  For a negated
    (lower-tailed) statistic the adversarial allocation is one minus the
    outcomes, which flips the sign of the exponent.
    """
    n = len(doses)
    m = int(np.sum(outcomes))
    combs = _combination_indices(n, m)
    phi_z = gp.transform(np.asarray(doses, dtype=float))
    e = phi_z[combs].sum(axis=1)
    q = np.asarray(scores, dtype=float)[combs].sum(axis=1)
    sign = -1.0 if negate else 1.0
    probs = _softmax(sign * gp.gamma * e)
    return probs, q


def _stratum_moments(probs: np.ndarray, q: np.ndarray) -> tuple[float, float]:
    mean = float(probs @ q)
    var = float(probs @ (q * q) - mean * mean)
    return mean, max(var, 0.0)


def worst_case_p_normal(
    design: MatchedDesign, spec: StatisticSpec, gp: SensitivityParameter
) -> SharpNullResult:
    """Normal-approximation worst-case p-value at the adversarial allocation."""
    scores = dose_scores(spec, design)
    t_obs = float(sum(sc @ s.outcomes for sc, s in zip(scores, design.sets)))
    mean = 0.0
    var = 0.0
    for mset, sc in zip(design.sets, scores):
        probs, q = _worst_case_atoms(mset.doses, mset.outcomes, sc, gp, spec.negate)
        mu, v = _stratum_moments(probs, q)
        mean += mu
        var += v
    if var <= 0.0:
        p = 1.0 if t_obs <= mean + _TIE_TOL else 0.0
        return SharpNullResult(
            gamma=gp.gamma,
            t_obs=t_obs,
            p_worst=p,
            method="normal",
            statistic=spec.label(),
            moments=(mean, var),
            degenerate=True,
        )
    p = float(norm.sf((t_obs - mean) / math.sqrt(var)))
    return SharpNullResult(
        gamma=gp.gamma,
        t_obs=t_obs,
        p_worst=p,
        method="normal",
        statistic=spec.label(),
        moments=(mean, var),
        degenerate=design.num_sets < 10,
    )


def worst_case_p_exact_mc(
    design: MatchedDesign,
    spec: StatisticSpec,
    gp: SensitivityParameter,
    reps: int,
    seed: int,
) -> SharpNullResult:
    """Monte-Carlo worst-case p-value with the add-one estimator.

    Each stratum draws its dose assignment from the biased law at the
    adversarial allocation using its own seeded substream, so results are
    bit-reproducible and independent of any parallel scheduling of strata.
    Exact ties with the observed statistic count as exceedances.
    """
    if reps <= 0:
        raise ValueError("reps must be positive")
    scores = dose_scores(spec, design)
    t_obs = float(sum(sc @ s.outcomes for sc, s in zip(scores, design.sets)))
    children = np.random.SeedSequence(seed).spawn(design.num_sets)
    totals = np.zeros(reps)
    for mset, sc, child in zip(design.sets, scores, children):
        probs, q = _worst_case_atoms(mset.doses, mset.outcomes, sc, gp, spec.negate)
        if len(q) == 1 or np.ptp(q) == 0.0:
            totals += q[0]
            continue
        rng = np.random.Generator(np.random.PCG64(child))
        idx = rng.choice(len(q), size=reps, p=probs)
        totals += q[idx]
    exceed = int(np.sum(totals >= t_obs - _TIE_TOL * (1.0 + abs(t_obs))))
    p = (1.0 + exceed) / (reps + 1.0)
    mc_se = math.sqrt(p * (1.0 - p) / reps)
    return SharpNullResult(
        gamma=gp.gamma,
        t_obs=t_obs,
        p_worst=p,
        method="exact_mc",
        statistic=spec.label(),
        mc_se=mc_se,
        reps=reps,
        seed=seed,
        degenerate=bool(np.ptp(totals) == 0.0),
    )


def _resolve_score_vectors(design: MatchedDesign, statistic, gp: SensitivityParameter):
    """Per-stratum (dose_scores, unit_scores) for a spec or raw unit scores."""
    if isinstance(statistic, StatisticSpec):
        a = dose_scores(statistic, design)
        b = [s.outcomes.astype(float) for s in design.sets]
    else:
        q = np.asarray(statistic, dtype=float)
        if q.shape != (design.num_units,):
            raise ValueError("unit scores must have one entry per unit")
        a = [s.doses.astype(float) for s in design.sets]
        b = [q[sl] for sl in design.unit_slices()]
    return a, b


def moments_at_u(design: MatchedDesign, statistic, gp: SensitivityParameter, u) -> tuple[float, float]:
    """Exact mean and variance of the statistic at an arbitrary allocation.

    ``statistic`` is either a StatisticSpec (unit scores are the outcomes)
    or a vector of raw per-unit scores q, in which case the statistic is
    ``sum_ij Z_ij q_ij``.  Enumerates every stratum's permutations, grouped
    whenever the unit scores are constant on (outcome, u) classes.
    """
    if isinstance(u, ConfounderAllocation):
        u = u.values
    u = np.asarray(u, dtype=float)
    if u.shape != (design.num_units,):
        raise ValueError("allocation must have one entry per unit")
    a_list, b_list = _resolve_score_vectors(design, statistic, gp)
    mean = 0.0
    var = 0.0
    for mset, sl, a, b in zip(design.sets, design.unit_slices(), a_list, b_list):
        ui = u[sl]
        probs, vals = _enumerated_stratum(mset.doses, a, b, ui, gp)
        mu, v = _stratum_moments(probs, vals)
        mean += mu
        var += v
    return mean, var


def _enumerated_stratum(doses, dose_scores_i, unit_scores_i, u, gp: SensitivityParameter):
    """Exact per-atom (probs, values) of one stratum at allocation u.

    Groups permutations when unit scores are constant within (u, score)
    classes; falls back to full enumeration otherwise.
    """
    n = len(doses)
    phi_z = gp.transform(np.asarray(doses, dtype=float))
    a = np.asarray(dose_scores_i, dtype=float)
    b = np.asarray(unit_scores_i, dtype=float)
    keys = list(zip(u.tolist(), b.tolist()))
    uniq = sorted(set(keys))
    if len(uniq) == n and math.factorial(n) > COMBINATION_CAP:
        raise ValueError(f"stratum enumeration infeasible: {n}! permutations exceed the cap")
    if len(uniq) < n:
        group_units = [np.array([j for j, k in enumerate(keys) if k == key]) for key in uniq]
        u_group = np.array([key[0] for key in uniq])
        b_group = np.array([key[1] for key in uniq])
        sizes = tuple(len(g) for g in group_units)
        from .assignment import _block_partitions, _multinomial

        if _multinomial(n, sizes) > COMBINATION_CAP:
            raise ValueError("stratum enumeration infeasible: grouped atoms exceed the cap")

        logits = []
        vals = []
        for atom in _block_partitions(n, sizes):
            e = sum(ug * phi_z[list(block)].sum() for ug, block in zip(u_group, atom))
            v = sum(bg * a[list(block)].sum() for bg, block in zip(b_group, atom))
            logits.append(gp.gamma * e)
            vals.append(v)
        return _softmax(np.array(logits)), np.array(vals)
    perms = _permutation_array(n)
    logits = gp.gamma * (phi_z[perms] @ u)
    vals = a[perms] @ b
    return _softmax(logits), vals


@dataclass
class CubeMaximizerResult:
    u_star: ConfounderAllocation
    p_at_u_star: float
    trace: list = field(default_factory=list)
    corner_best: float | None = None
    corner_count: int = 0
    n_evals: int = 0


def brute_force_worst_p(
    design: MatchedDesign,
    unit_scores,
    gp: SensitivityParameter,
    t_obs: float,
    grid: float = 0.05,
    restarts: int = 20,
    seed: int = 0,
    atom_cap: int = 1_000_000,
    xtol: float = 1e-6,
    corner_cap: int = 4096,
) -> CubeMaximizerResult:
    """Maximize the exact tail pr(sum_ij Z_ij q_ij >= t_obs) over u in [0,1]^N.

    Multi-start coordinate ascent, each 1-d step scanning a coarse grid and
    then refining the best cell to ``xtol``.  Starting points are the
    all-zero and all-one corners plus rounded Latin-hypercube corners (or
    every corner when there are at most ``corner_cap``).  Intended for desk
    scale: the full cross-stratum assignment space is enumerated once.
    """
    q = np.asarray(unit_scores, dtype=float)
    if q.shape != (design.num_units,):
        raise ValueError("unit scores must have one entry per unit")
    sizes = [math.factorial(s.n) for s in design.sets]
    if math.prod(sizes) > atom_cap:
        raise ValueError("cross-stratum enumeration exceeds the atom cap")
    slices = design.unit_slices()
    perm_mats = []  # per stratum: (n_i!, n_i) matrix of transformed doses by unit slot
    stat_vals = []  # per stratum: statistic contribution of each permutation
    for mset, sl in zip(design.sets, slices):
        perms = _permutation_array(mset.n)
        phi_z = gp.transform(mset.doses)
        perm_mats.append(phi_z[perms])
        stat_vals.append(mset.doses[perms] @ q[sl])
    total = stat_vals[0]
    for v in stat_vals[1:]:
        total = (total[:, None] + v[None, :]).ravel()
    tol = _TIE_TOL * (1.0 + abs(t_obs))
    mask = (total >= t_obs - tol).astype(float).reshape(sizes)

    evals = 0

    def tail(u_flat: np.ndarray) -> float:
        nonlocal evals
        evals += 1
        num = mask
        den = 1.0
        for i, (pm, sl) in enumerate(zip(perm_mats, slices)):
            logits = gp.gamma * (pm @ u_flat[sl])
            w = np.exp(logits - logits.max())
            num = np.tensordot(num, w, axes=([0], [0]))
            den *= w.sum()
        return float(num) / den

    rng = np.random.default_rng(seed)
    N = design.num_units
    starts = [np.zeros(N), np.ones(N)]
    corner_count = 0
    corner_best = None
    if 2 ** N <= corner_cap:
        corners = [np.array(c, dtype=float) for c in itertools.product((0.0, 1.0), repeat=N)]
        corner_vals = [tail(c) for c in corners]
        corner_best = max(corner_vals)
        corner_count = len(corners)
        starts.append(corners[int(np.argmax(corner_vals))])
    else:
        # rounded Latin-hypercube corners: balanced random corner sample
        k = max(restarts - 2, 0)
        if k:
            lhs = (rng.permuted(np.tile(np.arange(k), (N, 1)), axis=1).T + rng.random((k, N))) / k
            sampled = np.round(lhs)
            vals = [tail(c) for c in sampled]
            corner_best = max(vals) if vals else None
            corner_count = len(sampled)
            starts.extend(list(sampled))

    grid_pts = np.arange(0.0, 1.0 + grid / 2, grid)
    grid_pts[-1] = 1.0

    def ascend(u0: np.ndarray):
        u = u0.copy()
        best = tail(u)
        for _ in range(200):
            improved = False
            for j in range(N):
                saved = u[j]

                def f(x):
                    u[j] = x
                    return tail(u)

                g_vals = [f(x) for x in grid_pts]
                g_best = int(np.argmax(g_vals))
                lo = max(0.0, grid_pts[g_best] - grid)
                hi = min(1.0, grid_pts[g_best] + grid)
                res = minimize_scalar(lambda x: -f(x), bounds=(lo, hi), method="bounded",
                                      options={"xatol": xtol})
                cand_x, cand_v = float(res.x), float(-res.fun)
                if g_vals[g_best] > cand_v:
                    cand_x, cand_v = float(grid_pts[g_best]), g_vals[g_best]
                if cand_v > best:
                    if cand_v > best + 1e-12:
                        improved = True
                    u[j] = cand_x
                    best = cand_v
                else:
                    u[j] = saved
            if not improved:
                break
        return u, best

    trace = []
    best_u, best_p = None, -1.0
    for r, u0 in enumerate(starts[: max(restarts, len(starts))]):
        u_r, p_r = ascend(np.asarray(u0, dtype=float))
        trace.append({"restart": r, "p": p_r, "u": u_r.tolist()})
        if p_r > best_p:
            best_u, best_p = u_r, p_r
    return CubeMaximizerResult(
        u_star=ConfounderAllocation(best_u),
        p_at_u_star=best_p,
        trace=trace,
        corner_best=corner_best,
        corner_count=corner_count,
        n_evals=evals,
    )


def p_value_curve(
    design: MatchedDesign,
    spec: StatisticSpec,
    gammas,
    method: str = "normal",
    reps: int = 10_000,
    seed: int = 0,
) -> list[SharpNullResult]:
    """Worst-case p-values along an ascending gamma grid.

    The same seed is reused at every gamma (common random numbers), which
    keeps the Monte-Carlo curve smooth; no monotonicity is assumed or
    enforced when reporting.
    """
    gammas = list(gammas)
    if not gammas:
        raise ValueError("empty gamma grid")
    if any(b < a for a, b in zip(gammas, gammas[1:])):
        raise ValueError("gamma grid must be sorted ascending")
    out = []
    for g in gammas:
        gp = SensitivityParameter(g)
        if method == "normal":
            out.append(worst_case_p_normal(design, spec, gp))
        elif method in ("exact_mc", "exact-mc"):
            out.append(worst_case_p_exact_mc(design, spec, gp, reps=reps, seed=seed))
        else:
            raise ValueError(f"unknown method {method!r}")
    return out


def changepoint(results: list[SharpNullResult], alpha: float) -> float | None:
    """Smallest Gamma on the curve whose worst-case p exceeds alpha.

    Returns the first grid value when every p exceeds alpha, and None when
    none does.
    """
    for r in results:
        if r.p_worst > alpha:
            return r.big_gamma
    return None
