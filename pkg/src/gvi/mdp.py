"""Finite MDPs and the KL/entropy-regularized operators built on them.

Q-functions are plain ``(S, A)`` float arrays and per-state quantities are
``(S,)`` arrays. Policies carry both probabilities and log-probabilities so
the log-space computations never have to take ``log(0)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from gvi.exceptions import (
    AbsoluteContinuityViolation,
    DegenerateTemperature,
    InvalidMdp,
    InvalidPolicy,
    NonConvergence,
)

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(1e-300)

_STOCH_TOL = 1e-12
_POLICY_TOL = 1e-10


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class TabularMdp:
    transition: np.ndarray  # (S, A, S')
    reward: np.ndarray  # (S, A)
    gamma: float
    initial_dist: np.ndarray  # (S,)
    r_max: float | None = None

    def __post_init__(self):
        P = _frozen(self.transition)
        r = _frozen(self.reward)
        d0 = _frozen(self.initial_dist)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise InvalidMdp(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if S < 1 or A < 1:
            raise InvalidMdp("need at least one state and one action")
        if r.shape != (S, A):
            raise InvalidMdp(f"reward must have shape {(S, A)}, got {r.shape}")
        if d0.shape != (S,):
            raise InvalidMdp(f"initial_dist must have shape {(S,)}, got {d0.shape}")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidMdp(f"gamma must lie in (0, 1), got {self.gamma}")
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(r))):
            raise InvalidMdp("transition and reward must be finite")
        if np.any(P < 0.0) or np.any(np.abs(P.sum(axis=2) - 1.0) > _STOCH_TOL):
            raise InvalidMdp("every transition row must be a probability vector")
        if np.any(d0 < 0.0) or abs(d0.sum() - 1.0) > _STOCH_TOL:
            raise InvalidMdp("initial_dist must be a probability vector")
        r_max = float(np.max(np.abs(r))) if self.r_max is None else float(self.r_max)
        if np.any(np.abs(r) > r_max):
            raise InvalidMdp(f"|reward| exceeds r_max={r_max}")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", d0)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", r_max)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def expect_next(self, v: np.ndarray) -> np.ndarray:
        """(P v)(s, a) = sum_s' P(s'|s,a) v(s')."""
        return self.transition @ v

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "gamma": self.gamma,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMdp":
        mdp = cls(
            transition=np.asarray(d["transition"], dtype=float),
            reward=np.asarray(d["reward"], dtype=float),
            gamma=float(d["gamma"]),
            initial_dist=np.asarray(d["initial_dist"], dtype=float),
        )
        if (mdp.num_states, mdp.num_actions) != (d["num_states"], d["num_actions"]):
            raise InvalidMdp("declared num_states/num_actions disagree with the tables")
        return mdp

    def to_json(self) -> str:
        # json emits shortest round-trip float reprs, so values survive exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        return cls.from_dict(json.loads(text))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _logsumexp(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1)
    return m + np.log(np.exp(logits - m[..., None]).sum(axis=-1))


@dataclass(frozen=True, eq=False)
class Policy:
    """Stochastic policy table with consistent probabilities and log-probabilities.

    Build it with :meth:`from_logits` (exact log-softmax, never clamped) or
    :meth:`from_probs` (log clamped at ``LOG_FLOOR`` for zero entries).
    """

    probs: np.ndarray
    log_probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = _frozen(self.probs)
        lp = _frozen(self.log_probs)
        if p.ndim != 2 or p.shape != lp.shape:
            raise InvalidPolicy(f"probs/log_probs must be matching (S, A) tables, got {p.shape}, {lp.shape}")
        if np.any(p < 0.0) or np.any(np.abs(p.sum(axis=1) - 1.0) > _POLICY_TOL):
            raise InvalidPolicy("every policy row must be a probability vector")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "log_probs", lp)

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "Policy":
        lp = _log_softmax(np.asarray(logits, dtype=float))
        p = np.exp(lp)
        p /= p.sum(axis=1, keepdims=True)
        return cls(p, lp)

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "Policy":
        p = np.asarray(probs, dtype=float)
        lp = np.log(np.maximum(p, 1e-300))
        return cls(p, np.maximum(lp, LOG_FLOOR))

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "Policy":
        return cls.from_logits(np.zeros((num_states, num_actions)))

    @classmethod
    def deterministic(cls, actions, num_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        p = np.zeros((actions.size, num_actions))
        p[np.arange(actions.size), actions] = 1.0
        return cls.from_probs(p)

    def dot(self, q: np.ndarray) -> np.ndarray:
        """<pi, q> as a per-state vector."""
        return np.einsum("sa,sa->s", self.probs, q)

    def total_variation(self, other: "Policy") -> np.ndarray:
        return 0.5 * np.abs(self.probs - other.probs).sum(axis=1)


def _masked_plogp_terms(p: np.ndarray, logs: np.ndarray) -> np.ndarray:
    return np.where(p > 0.0, p * logs, 0.0)


def kl_divergence(p1: Policy, p2: Policy) -> np.ndarray:
    if p1.shape != p2.shape:
        raise InvalidPolicy(f"shape mismatch {p1.shape} vs {p2.shape}")
    # p2 lacks support only where its log-prob sits at the clamp, i.e. a true zero;
    # tiny-but-exact log-space probabilities are fine
    bad = (p1.probs > PROB_FLOOR) & (p2.log_probs <= LOG_FLOOR)
    if np.any(bad):
        s, a = np.argwhere(bad)[0]
        raise AbsoluteContinuityViolation(
            f"p1({a}|{s})={p1.probs[s, a]:.3g} but p2({a}|{s})={p2.probs[s, a]:.3g}"
        )
    kl = _masked_plogp_terms(p1.probs, p1.log_probs - p2.log_probs).sum(axis=1)
    return np.maximum(kl, 0.0)


def entropy(p: Policy) -> np.ndarray:
    h = -_masked_plogp_terms(p.probs, p.log_probs).sum(axis=1)
    return np.clip(h, 0.0, math.log(p.shape[1]))


def _check_temperature(lambda_kl: float, tau_entropy: float) -> float:
    if lambda_kl < 0 or tau_entropy < 0:
        raise DegenerateTemperature(f"coefficients must be nonnegative, got {lambda_kl}, {tau_entropy}")
    total = lambda_kl + tau_entropy
    if total <= 0:
        raise DegenerateTemperature("lambda_kl + tau_entropy must be positive; use greedy_policy for argmax")
    return total


def _greedy_logits(q, baseline: Policy, lambda_kl, tau_entropy) -> np.ndarray:
    total = _check_temperature(lambda_kl, tau_entropy)
    logits = np.asarray(q, dtype=float) / total
    if lambda_kl > 0:
        logits = logits + (lambda_kl / total) * baseline.log_probs
    return logits


def regularized_greedy(q: np.ndarray, baseline: Policy, lambda_kl: float, tau_entropy: float) -> Policy:
    """argmax_pi <pi, q> - lambda KL(pi||baseline) + tau H(pi), per state.

    Closed form: pi ∝ baseline^(lambda/(lambda+tau)) * exp(q / (lambda+tau)).
    """
    return Policy.from_logits(_greedy_logits(q, baseline, lambda_kl, tau_entropy))


def regularized_maximum(q: np.ndarray, baseline: Policy, lambda_kl: float, tau_entropy: float) -> np.ndarray:
    """Value of the maximization solved by :func:`regularized_greedy`."""
    total = lambda_kl + tau_entropy
    return total * _logsumexp(_greedy_logits(q, baseline, lambda_kl, tau_entropy))


def regularized_objective(q, pi: Policy, baseline: Policy, lambda_kl: float, tau_entropy: float) -> np.ndarray:
    """<pi, q> - lambda KL(pi||baseline) + tau H(pi), per state."""
    out = pi.dot(q)
    if lambda_kl > 0:
        out = out - lambda_kl * kl_divergence(pi, baseline)
    if tau_entropy > 0:
        out = out + tau_entropy * entropy(pi)
    return out


def regularized_bellman(q, pi: Policy, baseline: Policy, lambda_kl: float, tau_entropy: float,
                        mdp: TabularMdp) -> np.ndarray:
    """One application of r + gamma P(<pi, q> - lambda KL(pi||mu) + tau H(pi))."""
    v = regularized_objective(q, pi, baseline, lambda_kl, tau_entropy)
    return mdp.reward + mdp.gamma * mdp.expect_next(v)


def bellman_evaluation(q, pi: Policy, mdp: TabularMdp) -> np.ndarray:
    return mdp.reward + mdp.gamma * mdp.expect_next(pi.dot(q))


def bellman_optimality(q, mdp: TabularMdp) -> np.ndarray:
    return mdp.reward + mdp.gamma * mdp.expect_next(np.max(q, axis=1))


def greedy_policy(q: np.ndarray) -> Policy:
    """Deterministic argmax policy; ties go to the lowest action index."""
    q = np.asarray(q)
    return Policy.deterministic(np.argmax(q, axis=1), q.shape[1])


def evaluate_policy_exact(pi: Policy, mdp: TabularMdp, method: str = "solve",
                          tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """q_pi, the fixed point of T_pi q = r + gamma P <pi, q>."""
    if pi.shape != (mdp.num_states, mdp.num_actions):
        raise InvalidPolicy(f"policy shape {pi.shape} does not match MDP")
    if method == "solve":
        # state-value system v = r_pi + gamma P_pi v, then q = r + gamma P v
        r_pi = pi.dot(mdp.reward)
        P_pi = np.einsum("sa,sat->st", pi.probs, mdp.transition)
        M = np.eye(mdp.num_states) - mdp.gamma * P_pi
        v = np.linalg.solve(M, r_pi)
        v = v + np.linalg.solve(M, r_pi - M @ v)  # one refinement step
        return mdp.reward + mdp.gamma * mdp.expect_next(v)
    if method == "iterate":
        q = np.zeros((mdp.num_states, mdp.num_actions))
        for _ in range(max_iter):
            q_next = bellman_evaluation(q, pi, mdp)
            if np.max(np.abs(q_next - q)) <= tol:
                return q_next
            q = q_next
        raise NonConvergence(f"policy evaluation residual above {tol} after {max_iter} iterations")
    raise ValueError(f"unknown method {method!r}")


def solve_optimal(mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 1_000_000,
                  max_polish: int = 1000) -> tuple[np.ndarray, Policy]:
    """Value iteration to ``||T q - q|| <= tol``, then polished by exact policy
    iteration so the returned q* is the exact value of its greedy policy."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    q = np.zeros((mdp.num_states, mdp.num_actions))
    for _ in range(max_iter):
        q_next = bellman_optimality(q, mdp)
        done = np.max(np.abs(q_next - q)) <= tol
        q = q_next
        if done:
            break
    else:
        raise NonConvergence(f"value iteration residual above {tol} after {max_iter} iterations")

    actions = np.argmax(q, axis=1)
    for _ in range(max_polish):
        q_pi = evaluate_policy_exact(Policy.deterministic(actions, mdp.num_actions), mdp)
        improved = np.argmax(q_pi, axis=1)
        # switch only on strict improvement so ties cannot cycle
        keep = q_pi[np.arange(mdp.num_states), actions] >= q_pi[np.arange(mdp.num_states), improved] - 1e-13
        improved = np.where(keep, actions, improved)
        if np.array_equal(improved, actions):
            break
        actions = improved
    if np.max(np.abs(bellman_optimality(q_pi, mdp) - q_pi)) <= tol:
        q = q_pi
    return q, greedy_policy(q)
