from __future__ import annotations

import numpy as np

from gvi.mdp import TabularMdp
from gvi.tabular import ErrorModel


def random_mdp(num_states: int, num_actions: int, gamma: float = 0.9,
               seed: int = 0, concentration: float = 1.0) -> TabularMdp:
    """Dirichlet transitions and unif(0, 1) rewards, uniform start."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(num_states, concentration), size=(num_states, num_actions))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(num_states, num_actions))
    d0 = np.full(num_states, 1.0 / num_states)
    return TabularMdp(P, R, gamma, d0)


def two_state_mdp(big_k: int, gamma: float = 0.99) -> tuple[TabularMdp, ErrorModel]:
    """Loop/escape chain paired with its periodic error model.

    State 0 loops onto itself with probability (K-1)/K at zero cost and moves
    to state 1 with probability 1/K; state 1 returns to state 0. The escape
    cost unif(0, K) enters twice: its mean K/2 as a negative expected reward
    on state 0, and its fluctuation as the periodic error model with period K.
    """
    if big_k < 2:
        raise ValueError("big_k must be >= 2")
    P = np.zeros((2, 1, 2))
    P[0, 0, 0] = (big_k - 1) / big_k
    P[0, 0, 1] = 1.0 / big_k
    P[1, 0, 0] = 1.0
    R = np.array([[-(1.0 / big_k) * (big_k / 2.0)], [0.0]])
    mdp = TabularMdp(P, R, gamma, np.array([1.0, 0.0]))
    return mdp, ErrorModel.periodic(period=big_k)
