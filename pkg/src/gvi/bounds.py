"""Right-hand sides of the l-infinity error-propagation bounds, evaluated on traces.

Both bounds control ||q* - q_{pi_{k+1}}|| for every recorded step k. The
constant-coefficient bound normalizes by k (undefined at k = 0); the
dynamic one normalizes by Z_k = sum_{j=0..k} eta_j, which has k + 1 terms.
With a constant coefficient the two therefore differ by exactly k / (k + 1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from gvi.exceptions import MismatchedSchedule
from gvi.tabular import CoefficientSchedule, IterationTrace

SLACK = 1e-9


def running_q_max(trace: IterationTrace) -> np.ndarray:
    """q_max for step k: max_{j <= k+1} ||q_j||."""
    return np.maximum.accumulate(np.asarray(trace.q_norms))[1:]


@dataclass
class BoundReport:
    iteration: np.ndarray
    weighted_error_norm: np.ndarray
    variation_term: np.ndarray
    eta0: float
    eta_next: np.ndarray
    entropy_term: float
    horizon_factor: float
    q_max: np.ndarray
    bound: np.ndarray
    gap: np.ndarray

    @property
    def satisfied(self) -> np.ndarray:
        return self.gap <= self.bound + SLACK

    @property
    def violations(self) -> int:
        return int(np.count_nonzero(~self.satisfied))

    COLUMNS = ("iter", "weighted_error_norm", "variation_term", "eta0", "eta_next", "entropy_term",
               "horizon_factor", "q_max", "bound", "gap", "satisfied")

    def rows(self):
        for i in range(len(self.bound)):
            yield (int(self.iteration[i]), self.weighted_error_norm[i], self.variation_term[i], self.eta0,
                   self.eta_next[i], self.entropy_term, self.horizon_factor, self.q_max[i],
                   self.bound[i], self.gap[i], bool(self.satisfied[i]))


def _resolve_q_max(trace, q_max):
    if q_max is None:
        return running_q_max(trace)
    return np.full(trace.iterations, float(q_max))


def theorem2_bound(trace: IterationTrace, schedule: CoefficientSchedule | None = None,
                   q_max: float | None = None, gamma: float | None = None,
                   num_actions: int | None = None) -> BoundReport:
    """2/(1-gamma) / Z_k * (||sum eta_j eps_j|| + (eta_{k+1} + eta_0 + sum|eta_{j+1}-eta_j|) q_max + gamma ln|A|)."""
    gamma = trace.gamma if gamma is None else gamma
    num_actions = trace.num_actions if num_actions is None else num_actions
    n = trace.iterations
    lambdas = trace.lambdas if schedule is None else schedule.known
    if len(lambdas) < n:
        raise MismatchedSchedule(f"schedule has {len(lambdas)} coefficients for {n} iterations")
    if schedule is not None and any(a != b for a, b in zip(lambdas, trace.lambdas)):
        raise MismatchedSchedule("schedule does not match the coefficients recorded in the trace")
    eta = 1.0 / np.asarray(lambdas[: n + 1], dtype=float)
    if eta.size == n:
        # one index past the trace end: reuse the last coefficient
        eta = np.append(eta, eta[-1])
    z = np.cumsum(eta[:n])
    variation = np.cumsum(np.abs(np.diff(eta)))
    eta_next = eta[1 : n + 1]
    weighted = np.asarray(trace.weighted_err_sums[:n])
    qm = _resolve_q_max(trace, q_max)
    horizon = 2.0 / (1.0 - gamma)
    entropy_term = gamma * math.log(num_actions)
    bound = horizon / z * (weighted + (eta_next + eta[0] + variation) * qm + entropy_term)
    return BoundReport(
        iteration=np.arange(1, n + 1),
        weighted_error_norm=weighted / z,
        variation_term=variation,
        eta0=float(eta[0]),
        eta_next=eta_next,
        entropy_term=entropy_term,
        horizon_factor=horizon,
        q_max=qm,
        bound=bound,
        gap=np.asarray(trace.gaps, dtype=float),
    )


def theorem1_bound(trace: IterationTrace, lambda_const: float | None = None, q_max: float | None = None,
                   gamma: float | None = None, num_actions: int | None = None) -> np.ndarray:
    """2/(1-gamma) / k * (||sum_{j=1..k} eps_j|| + 2 q_max + lambda gamma ln|A|); NaN at k = 0."""
    if not trace.constant_lambda:
        raise MismatchedSchedule("the constant-coefficient bound needs a constant-coefficient trace")
    lam = trace.lambdas[0]
    if lambda_const is not None and lambda_const != lam:
        raise MismatchedSchedule(f"trace ran with lambda={lam}, not {lambda_const}")
    gamma = trace.gamma if gamma is None else gamma
    num_actions = trace.num_actions if num_actions is None else num_actions
    n = trace.iterations
    k = np.arange(n, dtype=float)
    usum = np.asarray(trace.uniform_err_sums[:n])
    qm = _resolve_q_max(trace, q_max)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 2.0 / (1.0 - gamma) / k * (usum + 2.0 * qm + lam * gamma * math.log(num_actions))
    out[0] = np.nan
    return out


def weighted_vs_uniform_error(trace: IterationTrace,
                              schedule: CoefficientSchedule | None = None) -> tuple[float, float]:
    """(||sum eta_j eps_j|| / sum eta_j, ||sum eps_j|| / k) over all k recorded errors."""
    k = trace.iterations
    if k == 0:
        raise ValueError("empty trace")
    lambdas = trace.lambdas if schedule is None else schedule.known
    eta = 1.0 / np.asarray(lambdas[1 : k + 1], dtype=float)
    return trace.weighted_err_sums[k] / eta.sum(), trace.uniform_err_sums[k] / k
