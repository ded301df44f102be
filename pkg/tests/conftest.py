"""Shared generators for randomized designs used across the suite."""

import numpy as np
import pytest

from dosesens.design import MatchedDesign, MatchedSet


def random_design(rng, max_sets=3, max_size=4, force_discordant=False, dose_scale=1.0):
    """Small random design with binary outcomes and distinct doses."""
    num_sets = int(rng.integers(1, max_sets + 1))
    sets = []
    for i in range(num_sets):
        n = int(rng.integers(2, max_size + 1))
        doses = np.round(rng.permutation(rng.uniform(0.01, dose_scale, size=n * 3)[:n]), 6)
        while len(np.unique(doses)) < n:
            doses = np.round(rng.uniform(0.01, dose_scale, size=n), 6)
        if force_discordant:
            m = int(rng.integers(1, n))
            outcomes = np.zeros(n, dtype=int)
            outcomes[rng.choice(n, size=m, replace=False)] = 1
        else:
            outcomes = rng.integers(0, 2, size=n)
        sets.append(MatchedSet(id=f"s{i}", doses=doses, outcomes=outcomes))
    return MatchedDesign(sets=tuple(sets))


@pytest.fixture
def rng():
    return np.random.default_rng(20240901)
