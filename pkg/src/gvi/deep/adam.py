from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from gvi.deep.mlp import MlpParams
from gvi.exceptions import ShapeMismatch

# first moments of dead units decay geometrically into the subnormal range,
# where float32 arithmetic is two orders of magnitude slower; flushing every
# FLUSH_EVERY steps zeroes them long before they get there (0.9^64 > 1e-3)
FLUSH_BELOW = 1e-30
FLUSH_EVERY = 64


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    # reused temporaries; large fresh allocations cost page faults every step
    scratch: list[np.ndarray] | None = field(default=None, repr=False, compare=False)

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 1e-4, **kwargs) -> "AdamState":
        arrays = params.arrays()
        return cls(lr=lr, m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays], **kwargs)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         [a.copy() for a in self.m], [a.copy() for a in self.v])


def adam_update(params: MlpParams, grads: MlpParams, state: AdamState) -> None:
    """One bias-corrected Adam step, applied to ``params`` and ``state`` in place."""
    ps, gs = params.arrays(), grads.arrays()
    if len(ps) != len(gs) or len(ps) != len(state.m):
        raise ShapeMismatch("parameters, gradients and moments disagree in layout")
    if state.scratch is None:
        state.scratch = [np.empty_like(m) for m in state.m]
    state.step += 1
    t = state.step
    step_size = state.lr / (1.0 - state.beta1**t)
    v_corr = math.sqrt(1.0 - state.beta2**t)
    flush = t % FLUSH_EVERY == 0
    for p, g, m, v, tmp in zip(ps, gs, state.m, state.v, state.scratch):
        if p.shape != g.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m *= state.beta1
        np.multiply(g, 1.0 - state.beta1, out=tmp)
        m += tmp
        if flush:
            np.abs(m, out=tmp)
            m[tmp < FLUSH_BELOW] = 0.0
        v *= state.beta2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - state.beta2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp /= v_corr
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step_size
        p -= tmp
