"""Local update rules: plain SGD and the max-tracked Adam variant.

The Adam recursion differs from textbook Adam/AMSGrad in three ways, all on
purpose: the second moment is updated from the running maximum ``v_hat``
rather than from ``v``; there is no bias correction; and ``epsilon`` sits
inside the square root of the normaliser.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from ._validation import check_model_vector, check_positive
from .objectives import ObjectiveSpec, StochasticGradientSample

GradientLike = Union[StochasticGradientSample, np.ndarray]


def _as_gradient(g: GradientLike, d: int) -> np.ndarray:
    if isinstance(g, StochasticGradientSample):
        g = g.gradient
    return check_model_vector(g, d, name="gradient")


@dataclass(frozen=True)
class SgdState:
    x: np.ndarray
    eta: float

    def __post_init__(self):
        object.__setattr__(self, "x", check_model_vector(self.x))
        check_positive(self.eta, "eta")

    @classmethod
    def for_objective(cls, x, eta: float, spec: ObjectiveSpec) -> "SgdState":
        """Construct a state enforcing ``0 < eta <= 1/L`` for ``spec``."""
        if eta > 1.0 / spec.lipschitz * (1 + 1e-12):
            raise ValueError(f"eta={eta} exceeds 1/L={1.0 / spec.lipschitz}")
        return cls(x, eta)

    def with_x(self, x) -> "SgdState":
        return replace(self, x=x)


@dataclass(frozen=True)
class AdamState:
    x: np.ndarray
    h: np.ndarray
    v: np.ndarray
    v_hat: np.ndarray
    eta: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-3

    def __post_init__(self):
        x = check_model_vector(self.x)
        d = x.shape[0]
        object.__setattr__(self, "x", x)
        for name in ("h", "v", "v_hat"):
            object.__setattr__(self, name, check_model_vector(getattr(self, name), d, name=name))
        if np.any(self.v < 0) or np.any(self.v_hat < 0):
            raise ValueError("second-moment estimates must be non-negative")
        check_positive(self.eta, "eta")
        check_positive(self.epsilon, "epsilon")
        if not 0.0 <= self.beta1 < 1.0:
            raise ValueError(f"beta1 must lie in [0, 1), got {self.beta1}")
        if not 0.0 < self.beta2 < 1.0:
            raise ValueError(f"beta2 must lie in (0, 1), got {self.beta2}")
        if self.beta1**2 >= self.beta2:
            raise ValueError("Adam hyperparameters require beta1**2 < beta2")

    @classmethod
    def fresh(cls, x, eta=0.1, beta1=0.9, beta2=0.999, epsilon=1e-3) -> "AdamState":
        """State with all moment estimates at zero."""
        x = check_model_vector(x)
        z = np.zeros_like(x)
        return cls(x, z, z, z, eta, beta1, beta2, epsilon)

    @property
    def d(self) -> int:
        return self.x.shape[0]

    def with_x(self, x) -> "AdamState":
        return replace(self, x=x)

    def reset_moments(self) -> "AdamState":
        z = np.zeros_like(self.x)
        return replace(self, h=z, v=z, v_hat=z)


def sgd_step(state: SgdState, g: GradientLike) -> SgdState:
    g = _as_gradient(g, state.x.shape[0])
    return replace(state, x=state.x - state.eta * g)


def adam_step(state: AdamState, g: GradientLike) -> AdamState:
    g = _as_gradient(g, state.d)
    h = state.beta1 * state.h + (1.0 - state.beta1) * g
    v = state.beta2 * state.v_hat + (1.0 - state.beta2) * g * g
    v_hat = np.maximum(v, state.v_hat)
    x = state.x - state.eta * h / np.sqrt(state.epsilon + v_hat)
    return replace(state, x=x, h=h, v=v, v_hat=v_hat)


def adam_step_bound(state: Optional[AdamState] = None, *, eta=None, beta1=None, beta2=None, d=None) -> float:
    """Upper bound on ``||x' - x||^2`` for one Adam step.

    ``eta^2 d / ((1 - beta2) (1 - beta1^2 / beta2))``. Hyperparameters may be
    passed directly instead of through a state.
    """
    if state is not None:
        eta, beta1, beta2, d = state.eta, state.beta1, state.beta2, state.d
    if beta1**2 >= beta2:
        raise ValueError("adam_step_bound requires beta1**2 < beta2")
    return eta**2 * d / ((1.0 - beta2) * (1.0 - beta1**2 / beta2))


def step(state, g: GradientLike):
    """Dispatch to the update rule matching ``state``."""
    if isinstance(state, AdamState):
        return adam_step(state, g)
    return sgd_step(state, g)
