"""Figure rendering for CLI reports.

Every curve the CLI writes as CSV gets a companion PNG next to it.  All
figures go through one save helper so styling stays uniform and the Agg
backend is forced before pyplot loads (the CLI runs headless).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg", force=True)

import matplotlib.pyplot as plt  # noqa: E402

_RC = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path) -> str:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def pvalue_curve_figure(gammas, pvalues, alpha, path) -> str:
    """Worst-case p against Gamma with the significance level marked."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.plot(gammas, pvalues, marker="o", ms=3)
        ax.axhline(alpha, color="firebrick", ls="--", lw=1, label=f"alpha = {alpha:g}")
        ax.set_xlabel(r"$\Gamma$")
        ax.set_ylabel("worst-case p-value")
        ax.legend(loc="best")
        return _save(fig, path)


def phi_curve_figure(phi_samples, target, gamma_tilde, path) -> str:
    """Adversarial-expectation curve with the target level and the root."""
    gs = [g for g, _, _ in phi_samples]
    vs = [v for _, v, _ in phi_samples]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.plot(gs, vs, marker="o", ms=3, label="biased expectation")
        ax.axhline(target, color="gray", ls="--", lw=1, label="target expectation")
        ax.axvline(gamma_tilde, color="firebrick", ls=":", lw=1,
                   label=rf"$\tilde\gamma$ = {gamma_tilde:.3f}")
        ax.set_xlabel(r"$\gamma$")
        ax.set_ylabel("expected stratum contribution")
        ax.legend(loc="best")
        return _save(fig, path)


def power_curve_figure(gammas, powers, ses, path) -> str:
    """Power of the sensitivity analysis against Gamma with MC error bars."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.errorbar(gammas, powers, yerr=ses, marker="o", ms=3, capsize=2)
        ax.set_xlabel(r"$\Gamma$")
        ax.set_ylabel("power")
        ax.set_ylim(-0.02, 1.02)
        return _save(fig, path)


def tv_histogram_figure(tvs, path) -> str:
    """Histogram of per-set total-variation departures with the mean marked."""
    import numpy as np

    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.hist(tvs, bins=min(30, max(5, len(tvs) // 3 + 1)), color="steelblue", alpha=0.8)
        ax.axvline(float(np.mean(tvs)), color="firebrick", ls=":", lw=1.2, label="mean")
        ax.set_xlabel("total variation from uniform assignment")
        ax.set_ylabel("matched sets")
        ax.legend(loc="best")
        return _save(fig, path)


def balance_figure(rows, path) -> str:
    """Dot chart of SMDs before and after matching, one row per covariate."""
    names = [r.name for r in rows]
    y = range(len(rows))
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.0, 0.4 * len(rows) + 1.4))
        ax.scatter([r.smd_before for r in rows], y, label="before", color="gray")
        ax.scatter([r.smd_after for r in rows], y, label="after", color="firebrick", marker="D")
        ax.axvline(0.0, color="black", lw=0.8)
        ax.set_yticks(list(y), names)
        ax.set_xlabel("standardized mean difference")
        ax.legend(loc="best")
        return _save(fig, path)
