"""Design sensitivity and power of sensitivity analysis under synthetic DGPs.

The design sensitivity of a statistic under a data-generating process is the
gamma at which the expected statistic under the biased adversarial law
crosses its expectation under the truth: below it the power of the analysis
tends to one as the number of sets grows, above it to zero.  The crossing
is located by bisection on a Monte-Carlo estimate that reuses one fixed
sample of strata for every gamma (common random numbers), under which the
estimated curve is exactly monotone and the root is stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import norm, rankdata

from .assignment import SensitivityParameter
from .design import MatchedDesign, MatchedSet
from .sharp_null import _combination_indices
from .statistics import AdaptiveSpec, StatisticSpec, _transform, adaptive_p

GAMMA_MAX = math.log(1000.0)


@dataclass(frozen=True)
class DgpSpec:
    """Favorable-situation generator: a dose effect and no hidden bias.

    Outcomes are Bernoulli(expit(A_i + f(z) * beta)) with a per-set random
    effect A_i ~ N(effect_mean, 1).  ``f`` is z**a ("power", exponent a) or
    the indicator of a positive dose ("positive").  Doses draw from
    Unif[0,1] or Beta(a,b), optionally mixed with a point mass at zero.
    Set sizes are 2 plus a Poisson(0.5) excess with probability 0.1.
    """

    f_kind: str = "power"
    f_exponent: float | None = 1.0
    beta: float = 1.5
    effect_mean: float = 0.0
    dose_law: str = "uniform"
    dose_params: tuple[float, float] = ()
    zero_mass: float = 0.0

    def __post_init__(self):
        if self.f_kind not in ("power", "positive"):
            raise ValueError(f"unknown dose-response kind {self.f_kind!r}")
        if self.f_kind == "power" and (self.f_exponent is None or self.f_exponent <= 0):
            raise ValueError("power dose-response needs a positive exponent")
        if self.dose_law not in ("uniform", "beta"):
            raise ValueError(f"unknown dose law {self.dose_law!r}")
        if self.dose_law == "beta" and len(self.dose_params) != 2:
            raise ValueError("beta dose law needs two shape parameters")
        if not 0.0 <= self.zero_mass <= 1.0:
            raise ValueError("zero-dose mass must lie in [0, 1]")

    def f(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.f_kind == "positive":
            return (z > 0).astype(float)
        return np.power(z, self.f_exponent)

    @classmethod
    def from_dict(cls, block: dict) -> "DgpSpec":
        """Build from a CLI config block, e.g. {"f": "power:0.25", "beta": 1.5,
        "dose_law": "mixture:0.2,beta:2,8", "effect_mean": 0.0}."""
        f_raw = str(block.get("f", "power:1"))
        if f_raw == "positive":
            f_kind, f_exp = "positive", None
        elif f_raw.startswith("power:"):
            f_kind, f_exp = "power", float(f_raw.split(":", 1)[1])
        else:
            raise ValueError(f"cannot parse dose-response {f_raw!r}")
        law_raw = str(block.get("dose_law", "uniform"))
        zero_mass = 0.0
        if law_raw.startswith("mixture:"):
            head, law_raw = law_raw[len("mixture:"):].split(",", 1)
            zero_mass = float(head)
        if law_raw == "uniform":
            law, params = "uniform", ()
        elif law_raw.startswith("beta:"):
            a, b = law_raw.split(":", 1)[1].split(",")
            law, params = "beta", (float(a), float(b))
        else:
            raise ValueError(f"cannot parse dose law {law_raw!r}")
        return cls(
            f_kind=f_kind,
            f_exponent=f_exp,
            beta=float(block.get("beta", 1.5)),
            effect_mean=float(block.get("effect_mean", 0.0)),
            dose_law=law,
            dose_params=params,
            zero_mass=zero_mass,
        )

    def to_dict(self) -> dict:
        f = "positive" if self.f_kind == "positive" else f"power:{self.f_exponent:g}"
        law = self.dose_law if not self.dose_params else (
            f"{self.dose_law}:" + ",".join(f"{p:g}" for p in self.dose_params)
        )
        if self.zero_mass:
            law = f"mixture:{self.zero_mass:g},{law}"
        return {"f": f, "beta": self.beta, "dose_law": law, "effect_mean": self.effect_mean}


def _draw_stratum(rng: np.random.Generator, dgp: DgpSpec) -> tuple[np.ndarray, np.ndarray]:
    # fixed draw order per stratum keeps substreams reproducible
    u_size = rng.random()
    excess = rng.poisson(0.5)
    n = 2 + (excess if u_size < 0.1 else 0)
    effect = dgp.effect_mean + rng.standard_normal()
    if dgp.dose_law == "uniform":
        z = rng.random(n)
    else:
        z = rng.beta(dgp.dose_params[0], dgp.dose_params[1], size=n)
    if dgp.zero_mass > 0.0:
        z = np.where(rng.random(n) < dgp.zero_mass, 0.0, z)
    p = expit(effect + dgp.f(z) * dgp.beta)
    outcomes = (rng.random(n) < p).astype(np.int64)
    return z, outcomes


def _sample_design(dgp: DgpSpec, num_sets: int, ss: np.random.SeedSequence) -> MatchedDesign:
    sets = []
    for i, child in enumerate(ss.spawn(num_sets)):
        rng = np.random.Generator(np.random.PCG64(child))
        z, r = _draw_stratum(rng, dgp)
        sets.append(MatchedSet(id=f"s{i:06d}", doses=z, outcomes=r))
    return MatchedDesign(sets=tuple(sets))


def sample_dgp(dgp: DgpSpec, num_sets: int, seed: int) -> MatchedDesign:
    """Simulate a favorable-situation design with one substream per stratum."""
    return _sample_design(dgp, num_sets, np.random.SeedSequence(seed))


def _stratum_scores(spec: StatisticSpec, doses_mat: np.ndarray) -> np.ndarray:
    """Rowwise transformed doses for stratum-local statistics."""
    if spec.kind == "rank_across":
        raise ValueError("pooled-rank statistics are not stratum-local")
    if spec.kind == "rank_within":
        out = rankdata(doses_mat, method="average", axis=1)
        return -out if spec.negate else out
    return _transform(spec, doses_mat)


class _GroupedStrata:
    """Sampled strata grouped by (n, m) with precomputed assignment atoms.

    For each group: ``E`` (strata x atoms) holds the summed transformed
    doses landing on outcome-1 units per atom, ``Q`` the corresponding
    statistic contributions, and ``q_obs`` the observed contributions.
    Reweighting by any gamma is then a row softmax over ``gamma * E``.
    """

    def __init__(self, strata: list[tuple[np.ndarray, np.ndarray]], spec: StatisticSpec,
                 gp: SensitivityParameter):
        by_shape: dict[tuple[int, int], list[int]] = {}
        for idx, (z, r) in enumerate(strata):
            by_shape.setdefault((len(z), int(r.sum())), []).append(idx)
        self.groups = []
        self.num_strata = len(strata)
        q_obs_all = np.empty(len(strata))
        for (n, m), idxs in sorted(by_shape.items()):
            doses = np.stack([strata[i][0] for i in idxs])
            phi = gp.transform(doses.ravel()).reshape(doses.shape)
            scores = _stratum_scores(spec, doses)
            combs = _combination_indices(n, m)
            E = phi[:, combs].sum(axis=2)
            Q = scores[:, combs].sum(axis=2)
            for row, i in enumerate(idxs):
                q_obs_all[i] = scores[row] @ strata[i][1]
            self.groups.append({"E": E, "Q": Q, "idx": np.array(idxs)})
        self.q_obs = q_obs_all

    def conditional_means(self, gamma: float) -> np.ndarray:
        """Per-stratum expected contribution under the adversarial law."""
        out = np.empty(self.num_strata)
        for g in self.groups:
            logits = gamma * g["E"]
            w = np.exp(logits - logits.max(axis=1, keepdims=True))
            p = w / w.sum(axis=1, keepdims=True)
            out[g["idx"]] = (p * g["Q"]).sum(axis=1)
        return out

    def conditional_moments(self, gamma: float) -> tuple[np.ndarray, np.ndarray]:
        means = np.empty(self.num_strata)
        variances = np.empty(self.num_strata)
        for g in self.groups:
            logits = gamma * g["E"]
            w = np.exp(logits - logits.max(axis=1, keepdims=True))
            p = w / w.sum(axis=1, keepdims=True)
            mu = (p * g["Q"]).sum(axis=1)
            means[g["idx"]] = mu
            variances[g["idx"]] = np.maximum((p * g["Q"] ** 2).sum(axis=1) - mu**2, 0.0)
        return means, variances


def _sample_raw(dgp: DgpSpec, count: int, ss: np.random.SeedSequence) -> list:
    strata = []
    for child in ss.spawn(count):
        rng = np.random.Generator(np.random.PCG64(child))
        strata.append(_draw_stratum(rng, dgp))
    return strata


def _unit_correlation(strata: list, spec: StatisticSpec) -> float:
    """Pearson correlation between per-unit dose scores and outcomes."""
    if spec.kind in ("rank_within", "rank_across"):
        x = np.concatenate([_stratum_scores(spec, z.reshape(1, -1)).ravel() for z, _ in strata])
    else:
        x = _transform(spec, np.concatenate([z for z, _ in strata]))
    y = np.concatenate([r for _, r in strata]).astype(float)
    if x.std() == 0.0 or y.std() == 0.0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


def phi_hat(dgp: DgpSpec, spec: StatisticSpec, gamma: float, mc_draws: int,
            seed: int) -> tuple[float, float]:
    """Monte-Carlo estimate of the expected adversarial-law contribution.

    Averages, over ``mc_draws`` sampled strata, the exact permutation
    expectation of the stratum contribution reweighted at the outcome
    allocation.  Returns (estimate, standard error).
    """
    strata = _sample_raw(dgp, mc_draws, np.random.SeedSequence(seed))
    sample = _GroupedStrata(strata, spec, SensitivityParameter(gamma))
    vals = sample.conditional_means(gamma)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals)))


@dataclass(frozen=True)
class DesignSensitivityResult:
    gamma_tilde: float
    mc_draws: int
    bracket: tuple[float, float]
    phi_samples: tuple[tuple[float, float, float], ...]
    target_mean: float
    target_se: float
    correlation: float
    statistic: str

    @property
    def big_gamma_tilde(self) -> float:
        return math.exp(self.gamma_tilde)

    def to_dict(self) -> dict:
        return {
            "gamma_tilde": self.gamma_tilde,
            "Gamma_tilde": self.big_gamma_tilde,
            "mc_draws": self.mc_draws,
            "bracket": list(self.bracket),
            "target_mean": self.target_mean,
            "target_se": self.target_se,
            "correlation": self.correlation,
            "statistic": self.statistic,
            "phi_curve": [
                {"gamma": g, "phi_hat": v, "se": s} for g, v, s in self.phi_samples
            ],
        }


def solve_design_sensitivity(
    dgp: DgpSpec,
    spec: StatisticSpec,
    mc_draws: int = 100_000,
    tol: float = 1e-2,
    seed: int = 0,
    gamma_max: float = GAMMA_MAX,
) -> DesignSensitivityResult:
    """Bisect for the gamma at which the adversarial expectation meets the truth.

    One stratum sample is drawn up front and reused at every bisection
    gamma, and the target expectation is estimated on the same sample, so
    the bracketing function is monotone and the run is deterministic given
    the seed.  Requires the dose-score/outcome correlation to lie strictly
    in (0, 1) on the sample.
    """
    strata = _sample_raw(dgp, mc_draws, np.random.SeedSequence(seed))
    corr = _unit_correlation(strata, spec)
    if not (0.0 < corr < 1.0):
        raise ValueError(
            f"dose-score/outcome correlation {corr:.4f} is not strictly inside (0, 1)"
        )
    sample = _GroupedStrata(strata, spec, SensitivityParameter(0.0))
    target = float(sample.q_obs.mean())
    target_se = float(sample.q_obs.std(ddof=1) / math.sqrt(len(sample.q_obs)))
    curve: list[tuple[float, float, float]] = []

    def g(gamma: float) -> float:
        vals = sample.conditional_means(gamma)
        curve.append((gamma, float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals)))))
        return float(vals.mean()) - target

    if g(0.0) >= 0.0:
        raise ValueError("no sign change: adversarial expectation already exceeds the target at gamma=0")
    lo, hi = 0.0, 0.5
    while g(hi) < 0.0:
        lo = hi
        hi *= 2.0
        if hi > gamma_max:
            raise ValueError(f"no sign change within gamma <= {gamma_max:g}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    gamma_tilde = 0.5 * (lo + hi)
    curve.sort()
    return DesignSensitivityResult(
        gamma_tilde=gamma_tilde,
        mc_draws=mc_draws,
        bracket=(lo, hi),
        phi_samples=tuple(curve),
        target_mean=target,
        target_se=target_se,
        correlation=corr,
        statistic=spec.label(),
    )


@dataclass(frozen=True)
class PowerResult:
    power: float
    se: float
    rejections: tuple[bool, ...]
    gamma: float
    num_sets: int
    reps: int
    alpha: float
    statistic: str

    def to_dict(self) -> dict:
        return {
            "power": self.power,
            "se": self.se,
            "gamma": self.gamma,
            "Gamma": math.exp(self.gamma),
            "num_sets": self.num_sets,
            "reps": self.reps,
            "alpha": self.alpha,
            "statistic": self.statistic,
        }


def simulate_power(
    dgp: DgpSpec,
    statistic: StatisticSpec | AdaptiveSpec,
    gamma: float,
    num_sets: int,
    alpha: float,
    sim_reps: int,
    seed: int,
) -> PowerResult:
    """Fraction of simulated designs whose worst-case normal p falls below alpha.

    Each replicate simulates a fresh design from its own substream and runs
    the normal-approximation analysis at the given gamma; adaptive specs
    combine their components with the Bonferroni rule.
    """
    specs = statistic.components if isinstance(statistic, AdaptiveSpec) else (statistic,)
    gp = SensitivityParameter(gamma)
    rejections = []
    for child in np.random.SeedSequence(seed).spawn(sim_reps):
        strata = []
        for sub in child.spawn(num_sets):
            rng = np.random.Generator(np.random.PCG64(sub))
            strata.append(_draw_stratum(rng, dgp))
        ps = []
        for spec in specs:
            grouped = _GroupedStrata(strata, spec, gp)
            t_obs = float(grouped.q_obs.sum())
            means, variances = grouped.conditional_moments(gamma)
            mean, var = float(means.sum()), float(variances.sum())
            if var <= 0.0:
                ps.append(1.0 if t_obs <= mean else 0.0)
            else:
                ps.append(float(norm.sf((t_obs - mean) / math.sqrt(var))))
        rejections.append(adaptive_p(ps) <= alpha if len(ps) > 1 else ps[0] <= alpha)
    power = float(np.mean(rejections))
    se = math.sqrt(power * (1.0 - power) / sim_reps)
    return PowerResult(
        power=power,
        se=se,
        rejections=tuple(bool(r) for r in rejections),
        gamma=gamma,
        num_sets=num_sets,
        reps=sim_reps,
        alpha=alpha,
        statistic=statistic.label(),
    )
