"""Stability radii for local SGD and local Adam, and Monte Carlo checks.

Closed forms
------------
SGD (step size ``eta <= 1/L``, stochastic-gradient variance ``sigma^2``)::

    R = r + sqrt(max(3, kappa)) * sqrt(2 r^2 + sigma^2 / L^2)

Adam (stochastic-gradient norm bounded by ``sigma``)::

    R = C5 r + sqrt((1 + 3 kappa C1) / (1 - kappa C1)^2 r^2
                    + 2 (C2 + C3 + C1 C4) / (mu - L C1))

The empirical checks estimate conditional expectations by freezing the
optimizer state and resampling only the gradient noise of the next step.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, fields
from typing import Optional, Union

import numpy as np

from ._validation import check_model_vector, check_nonnegative, check_positive
from .objectives import (
    ObjectiveSpec,
    clip_gradient,
    gradient,
    loss,
    loss_many,
    sample_gradients,
)
from .optimizers import AdamState, SgdState, adam_step, sgd_step

FAIL_C1_RANGE = "C1 not in (0, 1)"
FAIL_KAPPA_C1 = "1 − κC1 ≤ 0"
FAIL_MU_LC1 = "μ − L·C1 ≤ 0"
FAIL_RADICAND = "negative radicand"


class InvalidRegimeError(ValueError):
    """The closed-form radius is not certified for these constants."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


# --------------------------------------------------------------------------
# SGD
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SgdRadiusReport:
    r: float
    mu: float
    lipschitz: float
    sigma: float
    kappa_effective: float
    radius: float


def sgd_radius(r: float, mu: float, lipschitz: float, sigma: float) -> SgdRadiusReport:
    """Second-moment stability radius of SGD with ``eta in (0, 1/L]``.

    Condition numbers below 3 are floored at 3: a ``mu``-strongly convex
    function is also ``mu'``-strongly convex for any ``mu' < mu``.
    """
    check_positive(mu, "mu")
    check_nonnegative(r, "r")
    check_nonnegative(sigma, "sigma")
    if lipschitz < mu:
        raise ValueError(f"lipschitz ({lipschitz}) must be >= mu ({mu})")
    kappa_eff = max(3.0, lipschitz / mu)
    radius = r + math.sqrt(kappa_eff * (2.0 * r * r + sigma**2 / lipschitz**2))
    return SgdRadiusReport(float(r), float(mu), float(lipschitz), float(sigma), kappa_eff, radius)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamConstants:
    c1: float
    c2: float
    c3: float
    c4: float
    c5: float
    b: float
    c: float
    kappa: float
    valid: bool
    failure_reason: Optional[str] = None


def adam_constants(eta, beta1, beta2, epsilon, sigma, mu, lipschitz, d) -> AdamConstants:
    """Contraction constants C1..C5 and Lyapunov weights ``b``, ``c``.

    Invalid regimes are reported through ``valid`` / ``failure_reason``.
    Only ``beta1**2 >= beta2`` raises, since C2 is undefined there.
    """
    if beta1**2 >= beta2:
        raise ValueError("adam_constants requires beta1**2 < beta2")
    check_positive(eta, "eta")
    check_positive(epsilon, "epsilon")
    check_nonnegative(sigma, "sigma")
    check_positive(mu, "mu")
    if lipschitz < mu:
        raise ValueError(f"lipschitz ({lipschitz}) must be >= mu ({mu})")
    if int(d) < 1:
        raise ValueError("d must be >= 1")
    kappa = lipschitz / mu
    s2 = sigma**2
    inv_eps_s2 = (epsilon + s2) ** -0.5
    inv_eps = epsilon**-0.5
    momentum = beta1 / (1.0 - beta1)
    step_bound = eta**2 * d / ((1.0 - beta2) * (1.0 - beta1**2 / beta2))

    c1 = 1.0 - 2.0 * mu * eta * inv_eps_s2
    c2 = (
        2.0 * mu * eta**2 * inv_eps_s2 * s2 * d * inv_eps * (1.0 + beta1) / (1.0 - beta1)
        + (lipschitz / 2.0 + lipschitz * momentum) * step_bound
    )
    c3 = eta * momentum * s2 * inv_eps - eta * s2 / (1.0 - beta1) * d * inv_eps_s2
    c4 = eta * momentum * s2 * inv_eps + eta * s2 / (1.0 - beta1) * d * inv_eps
    denom = 1.0 - kappa * c1
    c5 = (1.0 + kappa * c1) / denom if denom != 0.0 else math.inf

    reason = None
    if not 0.0 < c1 < 1.0:
        reason = FAIL_C1_RANGE
    elif denom <= 0.0:
        reason = FAIL_KAPPA_C1
    elif mu - lipschitz * c1 <= 0.0:
        reason = FAIL_MU_LC1
    elif c2 + c3 + c1 * c4 < 0.0:
        reason = FAIL_RADICAND
    return AdamConstants(
        c1=c1, c2=c2, c3=c3, c4=c4, c5=c5,
        b=eta * s2 / (1.0 - beta1), c=eta * momentum,
        kappa=kappa, valid=reason is None, failure_reason=reason,
    )


def adam_radius(constants: AdamConstants, r: float, mu: float, lipschitz: float) -> float:
    if not constants.valid:
        raise InvalidRegimeError(constants.failure_reason or "invalid constants")
    check_nonnegative(r, "r")
    kappa = lipschitz / mu
    c1 = constants.c1
    radicand = (1.0 + 3.0 * kappa * c1) / (1.0 - kappa * c1) ** 2 * r * r + 2.0 * (
        constants.c2 + constants.c3 + c1 * constants.c4
    ) / (mu - lipschitz * c1)
    if radicand < 0.0:
        raise InvalidRegimeError(FAIL_RADICAND)
    radius = constants.c5 * r + math.sqrt(radicand)
    if not math.isfinite(radius):
        raise InvalidRegimeError("non-finite radius")
    return radius


# --------------------------------------------------------------------------
# Lyapunov function
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LyapunovRecord:
    k: int
    value: float
    suboptimality: float
    vhat_sum_term: float
    cross_term: float

    @property
    def components(self) -> tuple[float, float, float]:
        return (self.suboptimality, self.vhat_sum_term, self.cross_term)


def lyapunov_value(spec: ObjectiveSpec, x_k, x_kminus1, adam: AdamState, b: float, c: float,
                   f_star: Optional[float] = None, k: int = 0) -> LyapunovRecord:
    """``f(x_k) - f* + b sum (eps + v_hat)^-1/2 - c <grad f(x_{k-1}), (eps + v_hat)^-1/2 h>``.

    ``adam`` supplies ``h``, ``v_hat`` and ``epsilon`` at step ``k``; ``cross_term``
    is reported with its sign, so ``value`` is the plain sum of components.
    """
    x_k = check_model_vector(x_k, spec.d)
    x_kminus1 = check_model_vector(x_kminus1, spec.d, name="x_kminus1")
    if f_star is None:
        f_star = spec.f_star
    inv_root = (adam.epsilon + adam.v_hat) ** -0.5
    sub = loss(spec, x_k) - f_star
    vterm = b * float(np.sum(inv_root))
    cross = -c * float(gradient(spec, x_kminus1) @ (inv_root * adam.h))
    return LyapunovRecord(k, sub + vterm + cross, sub, vterm, cross)


@dataclass
class LyapunovCheckReport:
    """Per-step record of ``E[L^(k+1) | state^(k)]`` against ``C1 L^(k) + C2``."""

    constants: AdamConstants
    sigma: float
    n_steps: int
    n_mc: int
    max_violation: float
    passed: bool
    clip_rate: float
    clean: bool
    lyapunov: np.ndarray = field(repr=False)
    expected_next: np.ndarray = field(repr=False)
    stderr: np.ndarray = field(repr=False)
    bound: np.ndarray = field(repr=False)

    @property
    def pass_(self) -> bool:
        return self.passed


def _lyapunov_batch(spec, xs, grad_prev, h, v_hat, eps, b, c, f_star):
    inv_root = (eps + v_hat) ** -0.5
    return (
        loss_many(spec, xs) - f_star
        + b * inv_root.sum(axis=1)
        - c * np.einsum("j,ij->i", grad_prev, inv_root * h)
    )


def lyapunov_contraction_check(
    spec: ObjectiveSpec,
    initial: AdamState,
    n_steps: int,
    n_mc: int,
    rng: np.random.Generator,
    *,
    sigma: float,
    batch_size: int = 0,
    constants: Optional[AdamConstants] = None,
    n_se: float = 3.0,
) -> LyapunovCheckReport:
    """Monte Carlo check of ``E[L^(k+1) | state^(k)] <= C1 L^(k) + C2``.

    Stochastic gradients are norm-clipped to ``sigma`` so they satisfy the
    bounded-gradient assumption behind the constants; ``sigma=0`` means
    deterministic gradients and no clipping. Pass ``constants`` to
    override the certified ones (negative controls). The check is labelled
    clean when fewer than 1% of gradient draws were clipped.
    """
    if constants is None:
        constants = adam_constants(initial.eta, initial.beta1, initial.beta2, initial.epsilon,
                                   sigma, spec.mu, spec.lipschitz, spec.d)
    if not constants.valid:
        raise InvalidRegimeError(constants.failure_reason or "invalid constants")
    f_star = spec.f_star if spec.f_star is not None else 0.0
    b, c = constants.b, constants.c
    eps, beta1, beta2, eta = initial.epsilon, initial.beta1, initial.beta2, initial.eta

    state, x_prev = initial, initial.x
    lyap = np.empty(n_steps)
    expected = np.empty(n_steps)
    stderr = np.empty(n_steps)
    n_clipped = n_draws = 0
    for k in range(n_steps):
        lyap[k] = lyapunov_value(spec, state.x, x_prev, state, b, c, f_star, k).value
        grads = sample_gradients(spec, state.x, batch_size, rng, n_mc + 1)
        norms = np.linalg.norm(grads, axis=1)
        over = norms > sigma if sigma > 0 else np.zeros(norms.shape, dtype=bool)
        scale = np.where(over, sigma / np.where(norms > 0, norms, 1.0), 1.0)
        grads = grads * scale[:, None]
        n_clipped += int(over.sum())
        n_draws += grads.shape[0]
        mc, g_next = grads[:n_mc], grads[n_mc]

        h = beta1 * state.h + (1.0 - beta1) * mc
        v = beta2 * state.v_hat + (1.0 - beta2) * mc * mc
        v_hat = np.maximum(v, state.v_hat)
        xs = state.x - eta * h / np.sqrt(eps + v_hat)
        values = _lyapunov_batch(spec, xs, gradient(spec, state.x), h, v_hat, eps, b, c, f_star)
        expected[k] = values.mean()
        stderr[k] = values.std(ddof=1) / math.sqrt(n_mc) if n_mc > 1 else 0.0

        x_prev = state.x
        state = adam_step(state, g_next)

    bound = constants.c1 * lyap + constants.c2
    violation = expected - (bound + n_se * stderr)
    clip_rate = n_clipped / max(n_draws, 1)
    return LyapunovCheckReport(
        constants=constants, sigma=float(sigma), n_steps=n_steps, n_mc=n_mc,
        max_violation=float(violation.max()) if n_steps else -math.inf,
        passed=bool(np.all(violation <= 0.0)),
        clip_rate=clip_rate, clean=clip_rate < 0.01,
        lyapunov=lyap, expected_next=expected, stderr=stderr, bound=bound,
    )


# --------------------------------------------------------------------------
# Empirical second-moment stability
# --------------------------------------------------------------------------


@dataclass
class StabilityCheckReport:
    radius_tested: float
    n_boundary_samples: int
    n_mc_per_sample: int
    max_conditional_second_moment: float
    passed: bool
    confidence_margin: float
    n_on_sphere: int = 0
    n_escaped: int = 0
    sample_norms: np.ndarray = field(default=None, repr=False)
    sample_means: np.ndarray = field(default=None, repr=False)
    sample_stderrs: np.ndarray = field(default=None, repr=False)

    @property
    def pass_(self) -> bool:
        return self.passed


def _ball_points(rng, d, radius, n, on_sphere):
    directions = rng.standard_normal((n, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    if on_sphere:
        return radius * directions
    return radius * rng.random(n)[:, None] ** (1.0 / d) * directions


def _successor_second_moment(stepper, spec, state, batch_size, n_mc, rng, grad_bound):
    grads = sample_gradients(spec, state.x, batch_size, rng, n_mc)
    if grad_bound is not None:
        norms = np.linalg.norm(grads, axis=1)
        scale = np.where(norms > grad_bound, grad_bound / np.where(norms > 0, norms, 1.0), 1.0)
        grads = grads * scale[:, None]
    if isinstance(stepper, AdamState):
        h = stepper.beta1 * state.h + (1.0 - stepper.beta1) * grads
        v = stepper.beta2 * state.v_hat + (1.0 - stepper.beta2) * grads * grads
        v_hat = np.maximum(v, state.v_hat)
        nxt = state.x - stepper.eta * h / np.sqrt(stepper.epsilon + v_hat)
    else:
        nxt = state.x - stepper.eta * grads
    sq = np.einsum("ij,ij->i", nxt, nxt)
    se = sq.std(ddof=1) / math.sqrt(n_mc) if n_mc > 1 else 0.0
    return float(sq.mean()), float(se)


def empirical_stability_check(
    stepper: Union[SgdState, AdamState],
    spec: ObjectiveSpec,
    radius: float,
    n_boundary: int,
    n_mc: int,
    rng: np.random.Generator,
    *,
    k_burn_in: int = 50,
    batch_size: int = 0,
    sphere_fraction: float = 0.5,
    grad_bound: Optional[float] = None,
    n_se: float = 3.0,
) -> StabilityCheckReport:
    """Estimate ``max E[||x'||^2 | x]`` over sampled states with ``||x|| <= radius``.

    ``stepper`` carries the hyperparameters; its ``x`` is ignored. For SGD the
    state is ``x`` alone and ``ceil(sphere_fraction * n_boundary)`` samples sit
    exactly on the sphere. For Adam each start point is run for ``k_burn_in``
    steps and only states reached inside the ball are tested (``n_escaped``
    counts the rest). Each sample owns an independent child generator.
    """
    check_positive(radius, "radius")
    d = spec.d
    children = rng.spawn(n_boundary)
    n_sphere = int(math.ceil(sphere_fraction * n_boundary))
    norms, means, ses = [], [], []
    escaped = 0
    for i, child in enumerate(children):
        x0 = _ball_points(child, d, radius, 1, on_sphere=i < n_sphere)[0]
        if isinstance(stepper, AdamState):
            state = AdamState.fresh(x0, stepper.eta, stepper.beta1, stepper.beta2, stepper.epsilon)
            for _ in range(k_burn_in):
                g = sample_gradients(spec, state.x, batch_size, child, 1)[0]
                if grad_bound is not None:
                    g, _ = clip_gradient(g, grad_bound)
                state = adam_step(state, g)
            if np.linalg.norm(state.x) > radius:
                escaped += 1
                continue
        else:
            state = SgdState(x0, stepper.eta)
        mean, se = _successor_second_moment(stepper, spec, state, batch_size, n_mc, child, grad_bound)
        norms.append(float(np.linalg.norm(state.x)))
        means.append(mean)
        ses.append(se)

    means_a, ses_a = np.asarray(means), np.asarray(ses)
    tested = means_a.size
    max_mean = float(means_a.max()) if tested else math.nan
    margin = n_se * float(ses_a.max()) if tested else 0.0
    on_sphere = int(np.sum(np.isclose(norms, radius, rtol=1e-12))) if tested else 0
    return StabilityCheckReport(
        radius_tested=float(radius),
        n_boundary_samples=tested,
        n_mc_per_sample=n_mc,
        max_conditional_second_moment=max_mean,
        passed=bool(tested > 0 and max_mean <= radius**2 + margin),
        confidence_margin=margin,
        n_on_sphere=on_sphere,
        n_escaped=escaped,
        sample_norms=np.asarray(norms),
        sample_means=means_a,
        sample_stderrs=ses_a,
    )


def learning_rate_convexity_check(x, delta, lipschitz: float, radius: float, n_eta: int = 100) -> bool:
    """Check ``||x - eta delta|| <= R`` on a grid of ``eta in (0, 1/L]``.

    Requires both endpoints ``x`` and ``x - delta / L`` inside the ball; the
    intermediate points are convex combinations, so this always holds.
    """
    x = check_model_vector(x)
    delta = check_model_vector(delta, x.shape[0], name="delta")
    check_positive(lipschitz, "lipschitz")
    tol = 1e-12 * max(radius, 1.0)
    if np.linalg.norm(x) > radius + tol or np.linalg.norm(x - delta / lipschitz) > radius + tol:
        raise ValueError("both x and x - delta/L must lie in the ball of radius R")
    etas = np.arange(1, n_eta + 1) / (n_eta * lipschitz)
    pts = x[None, :] - etas[:, None] * delta[None, :]
    return bool(np.all(np.linalg.norm(pts, axis=1) <= radius + tol))


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def _scalar(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def report_to_text(report, prefix: str = "") -> str:
    """Render a report dataclass as ``key=value`` lines, skipping array fields."""
    lines = []
    for f in fields(report):
        value = getattr(report, f.name)
        if isinstance(value, np.ndarray):
            continue
        if hasattr(value, "__dataclass_fields__"):
            lines.append(report_to_text(value, prefix=f"{prefix}{f.name}."))
            continue
        lines.append(f"{prefix}{f.name}={'' if value is None else _scalar(value)}")
    return "\n".join(lines)


def _write_csv(path, header, rows) -> str:
    path = os.fspath(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path!r}: {exc}") from exc
    return path


def write_samples_csv(report: StabilityCheckReport, path) -> str:
    rows = [[i, repr(float(n)), repr(float(m)), repr(float(s))] for i, (n, m, s) in
            enumerate(zip(report.sample_norms, report.sample_means, report.sample_stderrs))]
    return _write_csv(path, ["sample", "norm", "conditional_second_moment", "stderr"], rows)


def write_lyapunov_csv(report: LyapunovCheckReport, path) -> str:
    cols = (report.lyapunov, report.expected_next, report.stderr, report.bound)
    rows = [[k] + [repr(float(a[k])) for a in cols] for k in range(report.n_steps)]
    return _write_csv(path, ["k", "lyapunov", "expected_next", "stderr", "bound"], rows)
