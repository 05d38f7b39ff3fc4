"""KL-regularized value iteration with constant or error-aware coefficients.

Three equivalent ways of running the dynamic-coefficient scheme live here:

* :func:`gvi_explicit_run` iterates q_k and pi_k with an explicit
  KL(pi || pi_k) penalty (:func:`mdvi_run` is the constant-coefficient case);
* :func:`gvi_stable_run` iterates the rescaled, log-policy-augmented values
  that never need pi_k, see :func:`gvi_stable_step`;
* :func:`averaged_iteration_run` keeps the eta-weighted average h_k of all
  past q-functions and acts entropy-greedily on it.

Each run injects errors from an :class:`ErrorModel`, measures the exact
optimality gap of every new policy and returns an :class:`IterationTrace`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from gvi.exceptions import AbsoluteContinuityViolation, MismatchedSchedule
from gvi.mdp import (
    LOG_FLOOR,
    Policy,
    TabularMdp,
    evaluate_policy_exact,
    regularized_bellman,
    regularized_greedy,
    solve_optimal,
)

ERROR_KINDS = ("none", "periodic_uniform", "gaussian", "custom_table")
APPLICATION_MODES = ("scalar_broadcast", "per_entry")
DEFAULT_LOG_FLOOR = -50.0


@dataclass(frozen=True)
class ErrorModel:
    """Additive evaluation-step errors eps_k.

    ``periodic_uniform`` draws unif(0, scale) at every multiple of ``period``
    (scale defaults to the period itself) and is zero otherwise. ``gaussian``
    draws N(0, scale^2) at every multiple of ``period``. ``custom_table``
    replays ``table[k - 1]`` (a scalar or an (S, A) table), zero past its end.
    """

    kind: str = "none"
    period: int = 100
    scale: float | None = None
    application_mode: str = "scalar_broadcast"
    table: tuple | None = None

    def __post_init__(self):
        if self.kind not in ERROR_KINDS:
            raise ValueError(f"unknown error kind {self.kind!r}; expected one of {ERROR_KINDS}")
        if self.application_mode not in APPLICATION_MODES:
            raise ValueError(f"unknown application_mode {self.application_mode!r}")
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if self.kind == "custom_table" and self.table is None:
            raise ValueError("custom_table errors need a table")

    @property
    def magnitude(self) -> float:
        if self.scale is not None:
            return float(self.scale)
        return float(self.period) if self.kind == "periodic_uniform" else 1.0

    @classmethod
    def periodic(cls, period: int = 100, application_mode: str = "scalar_broadcast") -> "ErrorModel":
        return cls("periodic_uniform", period=period, application_mode=application_mode)


def inject_error(model: ErrorModel, k: int, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Error table eps_k for iteration ``k >= 1``; draws only when one is due."""
    if k < 1:
        raise ValueError("errors are indexed from k = 1")
    if model.kind == "none":
        return np.zeros(shape)
    if model.kind == "custom_table":
        if k > len(model.table):
            return np.zeros(shape)
        return np.broadcast_to(np.asarray(model.table[k - 1], dtype=float), shape).copy()
    if k % model.period != 0:
        return np.zeros(shape)
    draw_shape = () if model.application_mode == "scalar_broadcast" else shape
    if model.kind == "periodic_uniform":
        draw = rng.uniform(0.0, model.magnitude, size=draw_shape)
    else:
        draw = rng.normal(0.0, model.magnitude, size=draw_shape)
    return np.broadcast_to(draw, shape).copy()


def update_lambda_tabular(err_norm: float, lambda_prev: float, alpha1: float, alpha2: float) -> float:
    """lambda_k = max(alpha1 ||eps_k||, alpha2 lambda_{k-1})."""
    if lambda_prev <= 0:
        raise ValueError("lambda_prev must be positive")
    return max(alpha1 * err_norm, alpha2 * lambda_prev)


@dataclass
class CoefficientSchedule:
    """Coefficient sequence lambda_0, lambda_1, ... built online from error norms.

    With ``alpha1 = 0, alpha2 = 1`` the schedule is constant. A ``preset``
    sequence overrides the rule and is replayed verbatim (lambda_1 onwards).
    """

    alpha1: float = 2.0
    alpha2: float = 0.9
    lambda_init: float = 10.0
    preset: tuple[float, ...] | None = None
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.lambda_init <= 0:
            raise ValueError("lambda_init must be positive")
        if self.alpha1 < 0:
            raise ValueError("alpha1 must be nonnegative")
        if not 0 < self.alpha2 <= 1:
            raise ValueError("alpha2 must lie in (0, 1]")
        if not self.history:
            self.history = [float(self.lambda_init)]

    @classmethod
    def constant(cls, lam: float) -> "CoefficientSchedule":
        return cls(alpha1=0.0, alpha2=1.0, lambda_init=lam)

    @classmethod
    def from_sequence(cls, lambdas: Sequence[float]) -> "CoefficientSchedule":
        lambdas = [float(x) for x in lambdas]
        if any(x <= 0 for x in lambdas):
            raise ValueError("all coefficients must be positive")
        return cls(alpha1=0.0, alpha2=1.0, lambda_init=lambdas[0], preset=tuple(lambdas[1:]))

    def fresh(self) -> "CoefficientSchedule":
        return CoefficientSchedule(self.alpha1, self.alpha2, self.lambda_init, self.preset)

    @property
    def current(self) -> float:
        return self.history[-1]

    def advance(self, err_norm: float) -> float:
        k = len(self.history)
        if self.preset is not None:
            if k - 1 >= len(self.preset):
                raise MismatchedSchedule(f"preset schedule exhausted at k={k}")
            lam = self.preset[k - 1]
        else:
            lam = update_lambda_tabular(err_norm, self.history[-1], self.alpha1, self.alpha2)
        self.history.append(lam)
        return lam

    @property
    def known(self) -> list[float]:
        """Every coefficient determined so far: the history, or a preset in full."""
        if self.preset is None:
            return list(self.history)
        return [float(self.lambda_init), *self.preset]

    @property
    def is_constant(self) -> bool:
        return all(x == self.history[0] for x in self.history)

    @property
    def eta(self) -> np.ndarray:
        return 1.0 / np.asarray(self.history)

    @property
    def z_partial(self) -> np.ndarray:
        return np.cumsum(self.eta)


@dataclass
class IterationTrace:
    """Per-iteration record of a run.

    Index ``k`` (0-based) describes the step that produced pi_{k+1} and
    q_{k+1}: ``lambdas[k]`` is lambda_k, ``err_norms[k]`` is ||eps_{k+1}||,
    ``gaps[k]`` is ||q* - q_{pi_{k+1}}||. ``lambdas`` has one extra trailing
    entry (lambda_{iters}) and ``q_norms`` holds ||q_0|| .. ||q_iters||.
    ``weighted_err_sums[k]`` is ||sum_{j=1..k} eta_j eps_j|| for
    k = 0..iters; ``uniform_err_sums`` is the unweighted analogue.
    """

    scheme: str
    gamma: float
    num_actions: int
    lambdas: list[float] = field(default_factory=list)
    err_norms: list[float] = field(default_factory=list)
    gaps: list[float] = field(default_factory=list)
    q_norms: list[float] = field(default_factory=list)
    weighted_err_sums: list[float] = field(default_factory=list)
    uniform_err_sums: list[float] = field(default_factory=list)
    qs: list[np.ndarray] | None = None
    policies: list[Policy] | None = None
    averages: list[np.ndarray] | None = None

    @property
    def iterations(self) -> int:
        return len(self.gaps)

    @property
    def constant_lambda(self) -> bool:
        return all(x == self.lambdas[0] for x in self.lambdas)

    def schedule(self) -> CoefficientSchedule:
        return CoefficientSchedule.from_sequence(self.lambdas)


class _Recorder:
    """Shared bookkeeping for the three run flavours."""

    def __init__(self, scheme, mdp: TabularMdp, q_star, store: bool):
        self.mdp = mdp
        self.q_star = solve_optimal(mdp)[0] if q_star is None else q_star
        self.trace = IterationTrace(scheme=scheme, gamma=mdp.gamma, num_actions=mdp.num_actions)
        if store:
            self.trace.qs, self.trace.policies = [], []
        shape = (mdp.num_states, mdp.num_actions)
        self.wsum = np.zeros(shape)
        self.usum = np.zeros(shape)

    def start(self, q0, pi0, lam0):
        t = self.trace
        t.q_norms.append(float(np.max(np.abs(q0))))
        t.lambdas.append(lam0)
        t.weighted_err_sums.append(0.0)
        t.uniform_err_sums.append(0.0)
        if t.qs is not None:
            t.qs.append(q0.copy())
            t.policies.append(pi0)

    def step(self, q_next, pi_next, eps, lam_next):
        t = self.trace
        self.wsum += eps / lam_next
        self.usum += eps
        t.weighted_err_sums.append(float(np.max(np.abs(self.wsum))))
        t.uniform_err_sums.append(float(np.max(np.abs(self.usum))))
        t.err_norms.append(float(np.max(np.abs(eps))))
        t.gaps.append(float(np.max(np.abs(self.q_star - evaluate_policy_exact(pi_next, self.mdp)))))
        t.q_norms.append(float(np.max(np.abs(q_next))))
        t.lambdas.append(lam_next)
        if t.qs is not None:
            t.qs.append(q_next.copy())
            t.policies.append(pi_next)


def _check_run_args(iters: int):
    if iters < 1:
        raise ValueError("iters must be >= 1")


def gvi_explicit_run(mdp: TabularMdp, schedule: CoefficientSchedule, error_model: ErrorModel,
                     iters: int, seed: int = 0, *, q_star=None, store: bool = False,
                     scheme: str = "gvi_explicit") -> IterationTrace:
    """pi_{k+1} = G^{lambda_k}_{pi_k}(q_k); q_{k+1} = T^{lambda_k}_{pi_{k+1}|pi_k} q_k + eps_{k+1};
    lambda_{k+1} from the schedule rule using ||eps_{k+1}||."""
    _check_run_args(iters)
    schedule = schedule.fresh()
    rng = np.random.default_rng(seed)
    S, A = mdp.num_states, mdp.num_actions
    rec = _Recorder(scheme, mdp, q_star, store)
    q = np.zeros((S, A))
    pi = Policy.uniform(S, A)
    rec.start(q, pi, schedule.current)
    for k in range(iters):
        lam = schedule.current
        pi_next = regularized_greedy(q, pi, lam, 0.0)
        q_next = regularized_bellman(q, pi_next, pi, lam, 0.0, mdp)
        eps = inject_error(error_model, k + 1, (S, A), rng)
        q_next = q_next + eps
        lam_next = schedule.advance(float(np.max(np.abs(eps))))
        rec.step(q_next, pi_next, eps, lam_next)
        q, pi = q_next, pi_next
    return rec.trace


def mdvi_run(mdp: TabularMdp, lambda_const: float, error_model: ErrorModel, iters: int,
             seed: int = 0, **kwargs) -> IterationTrace:
    """Constant-coefficient mirror descent value iteration, started from a uniform policy."""
    if lambda_const <= 0:
        raise ValueError("lambda_const must be positive")
    kwargs.setdefault("scheme", "mdvi")
    return gvi_explicit_run(mdp, CoefficientSchedule.constant(lambda_const), error_model, iters, seed, **kwargs)


def _clipped_log(pi: Policy, log_floor: float | None) -> np.ndarray:
    return pi.log_probs if log_floor is None else np.maximum(pi.log_probs, log_floor)


def munchausen_step(q: np.ndarray, lambda_const: float, mdp: TabularMdp,
                    log_floor: float | None = DEFAULT_LOG_FLOOR) -> tuple[Policy, np.ndarray]:
    """Implicit-KL step: pi = softmax(q / lambda), then
    q' = lambda ln pi + r + gamma P <pi, q - lambda ln pi>."""
    if lambda_const <= 0:
        raise ValueError("lambda must be positive")
    pi = Policy.from_logits(np.asarray(q) / lambda_const)
    lp = _clipped_log(pi, log_floor)
    bonus = lambda_const * lp
    q_next = bonus + mdp.reward + mdp.gamma * mdp.expect_next(pi.dot(q - bonus))
    return pi, q_next


def gvi_stable_step(q: np.ndarray, lambda_k: float, lambda_k1: float, mdp: TabularMdp,
                    log_floor: float | None = DEFAULT_LOG_FLOOR) -> tuple[Policy, np.ndarray]:
    """pi = softmax(q); q' = ln pi + r / lambda_{k+1} + (lambda_k / lambda_{k+1}) gamma P <pi, q - ln pi>."""
    if lambda_k <= 0 or lambda_k1 <= 0:
        raise ValueError("coefficients must be positive")
    pi = Policy.from_logits(q)
    lp = _clipped_log(pi, log_floor)
    boot = mdp.expect_next(pi.dot(q - lp))
    return pi, lp + mdp.reward / lambda_k1 + (lambda_k / lambda_k1) * mdp.gamma * boot


def gvi_stable_run(mdp: TabularMdp, schedule: CoefficientSchedule, error_model: ErrorModel,
                   iters: int, seed: int = 0, *, q_star=None, store: bool = False,
                   log_floor: float | None = DEFAULT_LOG_FLOOR) -> IterationTrace:
    """Rescaled form of :func:`gvi_explicit_run`.

    The stored q-functions are the rescaled ones; ``lambda_k (q_k - ln pi_k)``
    recovers the explicit iterate (see :func:`stable_to_explicit`). Errors are
    injected in explicit units, i.e. divided by lambda_{k+1} here.
    ``q_norms`` are reported in explicit units so bounds stay comparable.
    """
    _check_run_args(iters)
    schedule = schedule.fresh()
    rng = np.random.default_rng(seed)
    S, A = mdp.num_states, mdp.num_actions
    rec = _Recorder("gvi_stable", mdp, q_star, store)
    pi = Policy.uniform(S, A)
    q = np.zeros((S, A)) / schedule.current + pi.log_probs
    rec.start(q, pi, schedule.current)
    rec.trace.q_norms[0] = 0.0
    for k in range(iters):
        lam = schedule.current
        eps = inject_error(error_model, k + 1, (S, A), rng)
        lam_next = schedule.advance(float(np.max(np.abs(eps))))
        pi_next, q_next = gvi_stable_step(q, lam, lam_next, mdp, log_floor)
        q_next = q_next + eps / lam_next
        rec.step(q_next, pi_next, eps, lam_next)
        rec.trace.q_norms[-1] = float(np.max(np.abs(lam_next * (q_next - pi_next.log_probs))))
        q, pi = q_next, pi_next
    return rec.trace


def stable_to_explicit(trace: IterationTrace) -> list[np.ndarray]:
    """Map stored stable iterates back: Q_k = lambda_k (q_k - ln pi_k)."""
    if trace.qs is None:
        raise ValueError("trace was recorded without store=True")
    return [lam * (q - pi.log_probs) for lam, q, pi in zip(trace.lambdas, trace.qs, trace.policies)]


def averaged_iteration_run(mdp: TabularMdp, schedule: CoefficientSchedule, error_model: ErrorModel,
                           iters: int, seed: int = 0, *, q_star=None, store: bool = False) -> IterationTrace:
    """Dual-averaging form: pi_{k+1} = G^{0, 1/Z_k}(h_k) with
    h_{k+1} = (Z_k h_k + eta_{k+1} q_{k+1}) / Z_{k+1} and h_0 = q_0."""
    _check_run_args(iters)
    schedule = schedule.fresh()
    rng = np.random.default_rng(seed)
    S, A = mdp.num_states, mdp.num_actions
    rec = _Recorder("averaged", mdp, q_star, store)
    uniform = Policy.uniform(S, A)
    q = np.zeros((S, A))
    h = q.copy()
    pi = uniform
    z = 1.0 / schedule.current
    rec.start(q, pi, schedule.current)
    if store:
        rec.trace.averages = [h.copy()]
    for k in range(iters):
        lam = schedule.current
        pi_next = regularized_greedy(h, uniform, 0.0, 1.0 / z)
        q_next = regularized_bellman(q, pi_next, pi, lam, 0.0, mdp)
        eps = inject_error(error_model, k + 1, (S, A), rng)
        q_next = q_next + eps
        lam_next = schedule.advance(float(np.max(np.abs(eps))))
        eta_next = 1.0 / lam_next
        z_next = z + eta_next
        h = (z / z_next) * h + (eta_next / z_next) * q_next
        rec.step(q_next, pi_next, eps, lam_next)
        if store:
            rec.trace.averages.append(h.copy())
        q, pi, z = q_next, pi_next, z_next
    return rec.trace


def geometric_interpolation(prev: Policy, target: Policy, zeta: float) -> Policy:
    """Row-wise weighted geometric mean prev^(1-zeta) * target^zeta, renormalized."""
    if not 0 < zeta <= 1:
        raise ValueError("zeta must lie in (0, 1]")
    if prev.shape != target.shape:
        raise AbsoluteContinuityViolation("policy shapes differ")
    no_support = prev.log_probs <= LOG_FLOOR
    if np.any(no_support & (target.probs > 0)):
        raise AbsoluteContinuityViolation("target puts mass where the previous policy has none")
    return Policy.from_logits((1.0 - zeta) * prev.log_probs + zeta * target.log_probs)


SCHEMES: dict[str, Callable[..., IterationTrace]] = {
    "gvi_explicit": gvi_explicit_run,
    "gvi_stable": gvi_stable_run,
    "averaged": averaged_iteration_run,
}
