import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oope.env_model import build_random_mixture_mdp, mdp_from_kernels  # noqa: E402


@pytest.fixture
def small_mdp():
    return build_random_mixture_mdp(7, 3, 2, 3, 4)


def random_policy(rng, H, S, A):
    pi = rng.random((H, S, A)) + 1e-3
    return pi / pi.sum(axis=-1, keepdims=True)


def point_mass_mdp(S, A, H, nxt):
    """Deterministic single-kernel MDP with ``nxt[s, a]`` as the successor."""
    ker = np.zeros((1, S, A, S))
    for s in range(S):
        for a in range(A):
            ker[0, s, a, nxt[s, a]] = 1.0
    return mdp_from_kernels(ker, np.ones((H, 1)), p_floor=0.0)
