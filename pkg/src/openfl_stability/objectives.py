"""Local objective functions, synthetic data and certified constants.

Two objective families are supported:

* ``RegularizedLogistic``: ``f(x) = lam/2 ||x||^2 + mean_j log(1 + exp(-y_j <x, xi_j>))``
* ``Quadratic``: ``f(x) = 1/2 sum_j a_j (x_j - x*_j)^2`` with curvatures ``a_j``

Every operation is a pure function of its inputs plus an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional

import numpy as np
from scipy.special import expit

from ._validation import check_model_vector, check_positive, check_nonnegative


class ObjectiveKind(str, enum.Enum):
    REGULARIZED_LOGISTIC = "RegularizedLogistic"
    QUADRATIC = "Quadratic"


class LabeledSample(NamedTuple):
    features: np.ndarray
    label: float


@dataclass(frozen=True)
class Dataset:
    """``m`` labelled samples stored row-wise.

    ``features`` has shape ``(m, d)`` and ``labels`` has shape ``(m,)`` with
    entries in ``{-1, +1}``.
    """

    features: np.ndarray
    labels: np.ndarray
    source_seed: Optional[int] = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"features must be a non-empty (m, d) array, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValueError(f"labels must have shape ({X.shape[0]},), got {y.shape}")
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise ValueError("labels must be exactly -1 or +1")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.m

    def __getitem__(self, j: int) -> LabeledSample:
        return LabeledSample(self.features[j], float(self.labels[j]))

    def __iter__(self) -> Iterator[LabeledSample]:
        for j in range(self.m):
            yield self[j]


@dataclass(frozen=True)
class StochasticGradientSample:
    gradient: np.ndarray
    batch_indices: tuple = ()


@dataclass(frozen=True)
class ObjectiveSpec:
    """A local objective together with its certified constants.

    ``optimum`` is the (measured or given) minimiser and ``f_star`` its value.
    For the logistic family ``optimum_radius_r`` is ``None`` until solved.
    """

    kind: ObjectiveKind
    mu: float
    lipschitz: float
    kappa: float
    lam: float = 0.0
    dataset: Optional[Dataset] = None
    optimum_radius_r: Optional[float] = None
    noise_sigma: float = 0.0
    optimum: Optional[np.ndarray] = None
    f_star: Optional[float] = None
    curvature: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        check_positive(self.mu, "mu")
        if self.lipschitz < self.mu:
            raise ValueError(f"lipschitz ({self.lipschitz}) must be >= mu ({self.mu})")
        if abs(self.kappa - self.lipschitz / self.mu) > 1e-12 * (self.lipschitz / self.mu):
            raise ValueError("kappa must equal lipschitz / mu")
        check_nonnegative(self.noise_sigma, "noise_sigma")
        if self.optimum_radius_r is not None:
            check_nonnegative(self.optimum_radius_r, "optimum_radius_r")
        if self.kind is ObjectiveKind.REGULARIZED_LOGISTIC:
            if self.dataset is None:
                raise ValueError("logistic objective requires a dataset")
            check_positive(self.lam, "lambda")
            if self.mu != self.lam:
                raise ValueError("for the regularized logistic loss mu must equal lambda")
        elif self.curvature is None or self.optimum is None:
            raise ValueError("quadratic objective requires curvature and optimum")

    @property
    def d(self) -> int:
        if self.kind is ObjectiveKind.QUADRATIC:
            return self.optimum.shape[0]
        return self.dataset.d

    @property
    def m(self) -> int:
        return 0 if self.dataset is None else self.dataset.m


def generate_synthetic_dataset(d: int, m: int, sigma_data: float, seed: int) -> Dataset:
    """Two-class Gaussian data with class means in ``{-1, +1}^d``.

    Labels are uniform on ``{-1, +1}``; each class mean is drawn element-wise
    as ``2 * Bernoulli(0.5) - 1`` and features add i.i.d. ``N(0, sigma_data^2)``.
    """
    if int(d) < 1 or int(m) < 1:
        raise ValueError(f"d and m must be >= 1, got d={d}, m={m}")
    check_nonnegative(sigma_data, "sigma_data")
    rng = np.random.default_rng(seed)
    class_means = 2.0 * rng.binomial(1, 0.5, size=(2, d)) - 1.0
    positive = rng.integers(0, 2, size=m).astype(bool)
    labels = np.where(positive, 1.0, -1.0)
    noise = rng.standard_normal((m, d))
    features = class_means[positive.astype(int)] + sigma_data * noise
    return Dataset(features, labels, source_seed=seed)


def class_means_for(seed: int, d: int) -> np.ndarray:
    """Class means used by :func:`generate_synthetic_dataset`; row 0 is label -1."""
    rng = np.random.default_rng(seed)
    return 2.0 * rng.binomial(1, 0.5, size=(2, d)) - 1.0


def _log1pexp(z: np.ndarray) -> np.ndarray:
    # log(1 + e^z) = max(z, 0) + log1p(e^{-|z|})
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def loss(spec: ObjectiveSpec, x) -> float:
    x = check_model_vector(x, spec.d)
    if spec.kind is ObjectiveKind.QUADRATIC:
        diff = x - spec.optimum
        return 0.5 * float(np.dot(spec.curvature * diff, diff))
    X, y = spec.dataset.features, spec.dataset.labels
    margins = y * (X @ x)
    return 0.5 * spec.lam * float(x @ x) + float(np.mean(_log1pexp(-margins)))


def loss_many(spec: ObjectiveSpec, xs) -> np.ndarray:
    """Evaluate the loss at each row of an ``(n, d)`` array."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.shape[1] != spec.d:
        raise ValueError(f"rows have dimension {xs.shape[1]}, expected {spec.d}")
    if spec.kind is ObjectiveKind.QUADRATIC:
        diff = xs - spec.optimum
        return 0.5 * np.einsum("ij,j,ij->i", diff, spec.curvature, diff)
    X, y = spec.dataset.features, spec.dataset.labels
    margins = (xs @ X.T) * y
    return 0.5 * spec.lam * np.einsum("ij,ij->i", xs, xs) + _log1pexp(-margins).mean(axis=1)


def _logistic_grad_rows(spec: ObjectiveSpec, x: np.ndarray, idx) -> np.ndarray:
    X, y = spec.dataset.features[idx], spec.dataset.labels[idx]
    weights = -y * expit(-y * (X @ x))
    return weights @ X / X.shape[0]


def gradient(spec: ObjectiveSpec, x) -> np.ndarray:
    x = check_model_vector(x, spec.d)
    if spec.kind is ObjectiveKind.QUADRATIC:
        return spec.curvature * (x - spec.optimum)
    return spec.lam * x + _logistic_grad_rows(spec, x, slice(None))


def _noise_draws(spec: ObjectiveSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    # per-coordinate std sigma/sqrt(d) so that E||noise||^2 = sigma^2 exactly
    if spec.noise_sigma == 0.0:
        return np.zeros((n, spec.d))
    return rng.standard_normal((n, spec.d)) * (spec.noise_sigma / np.sqrt(spec.d))


def sample_gradients(
    spec: ObjectiveSpec, x, batch_size: int, rng: np.random.Generator, n: int
) -> np.ndarray:
    """Draw ``n`` independent stochastic gradients at ``x`` as an ``(n, d)`` array.

    ``batch_size = 0`` selects synthetic-noise mode (exact gradient plus
    isotropic Gaussian noise of total variance ``noise_sigma^2``); otherwise a
    minibatch of ``batch_size`` distinct samples is drawn uniformly.
    """
    x = check_model_vector(x, spec.d)
    batch_size = int(batch_size)
    if batch_size < 0:
        raise ValueError("batch_size must be >= 0")
    if batch_size == 0:
        return gradient(spec, x)[None, :] + _noise_draws(spec, rng, n)
    if spec.dataset is None:
        raise ValueError("minibatch mode requires a dataset-backed objective")
    if batch_size > spec.m:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {spec.m}")
    X, y = spec.dataset.features, spec.dataset.labels
    weights = -y * expit(-y * (X @ x))  # per-sample loss derivative, shape (m,)
    per_sample = weights[:, None] * X
    if batch_size == spec.m:
        return np.broadcast_to(spec.lam * x + per_sample.mean(axis=0), (n, spec.d)).copy()
    if batch_size == 1:
        idx = rng.integers(0, spec.m, size=(n, 1))
    else:
        idx = np.argsort(rng.random((n, spec.m)), axis=1)[:, :batch_size]
    return spec.lam * x + per_sample[idx].mean(axis=1)


def stochastic_gradient(
    spec: ObjectiveSpec, x, batch_size: int, rng: np.random.Generator
) -> StochasticGradientSample:
    x = check_model_vector(x, spec.d)
    batch_size = int(batch_size)
    if batch_size < 0:
        raise ValueError("batch_size must be >= 0")
    if batch_size == 0:
        g = gradient(spec, x) + _noise_draws(spec, rng, 1)[0]
        return StochasticGradientSample(g, ())
    if spec.dataset is None:
        raise ValueError("minibatch mode requires a dataset-backed objective")
    if batch_size > spec.m:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {spec.m}")
    if batch_size == spec.m:
        idx = np.arange(spec.m)
    elif batch_size == 1:
        idx = rng.integers(0, spec.m, size=1)
    else:
        idx = rng.choice(spec.m, size=batch_size, replace=False)
    g = spec.lam * x + _logistic_grad_rows(spec, x, idx)
    return StochasticGradientSample(g, tuple(int(i) for i in idx))


def clip_gradient(g: np.ndarray, max_norm: float) -> tuple[np.ndarray, bool]:
    """Rescale ``g`` onto the ball of radius ``max_norm``; flag whether it was clipped."""
    norm = float(np.linalg.norm(g))
    if norm <= max_norm:
        return g, False
    if max_norm == 0.0:
        return np.zeros_like(g), True
    return g * (max_norm / norm), True


def logistic_smoothness_bound(dataset: Dataset, lam: float) -> float:
    """``lam + (1/(4m)) sum_j ||xi_j||^2``; each sample's curvature is at most ``||xi||^2 / 4``."""
    return lam + float(np.sum(dataset.features**2)) / (4.0 * dataset.m)


def _solve_logistic_optimum(spec: ObjectiveSpec, tol: float = 1e-10, max_iter: int = 100):
    # damped Newton; converges to the same fixed point as full-batch GD but in
    # a handful of iterations even for kappa ~ 1e4
    X, y = spec.dataset.features, spec.dataset.labels
    m, d = X.shape
    x = np.zeros(d)
    for _ in range(max_iter):
        g = gradient(spec, x)
        if np.linalg.norm(g) <= tol:
            break
        s = expit(y * (X @ x))
        w = s * (1.0 - s)
        H = spec.lam * np.eye(d) + (X.T * w) @ X / m
        step = np.linalg.solve(H, g)
        if np.linalg.norm(g) < 1e-6:
            # loss differences are below float resolution here; pure Newton converges quadratically
            x = x - step
            continue
        t, f0 = 1.0, loss(spec, x)
        while loss(spec, x - t * step) > f0 - 0.25 * t * float(g @ step) and t > 1e-12:
            t *= 0.5
        x = x - t * step
    else:
        raise RuntimeError("logistic optimum did not reach gradient tolerance")
    return x


def certify_constants(
    dataset: Optional[Dataset],
    lam: float,
    kind: ObjectiveKind | str = ObjectiveKind.REGULARIZED_LOGISTIC,
    *,
    noise_sigma: float = 0.0,
    solve_optimum: bool = True,
    optimum=None,
    curvature=None,
) -> ObjectiveSpec:
    """Build an :class:`ObjectiveSpec` with certified ``(mu, L, kappa, r)``.

    For the logistic family ``mu = lam`` and ``L`` is the per-sample curvature
    bound; ``r = ||x*||`` is measured by solving to gradient norm ``1e-10``.
    For the quadratic family ``lam`` is unused and ``optimum`` / ``curvature``
    define the function (scalar curvature ``lam`` if ``curvature`` is omitted).
    """
    kind = ObjectiveKind(kind)
    if kind is ObjectiveKind.QUADRATIC:
        if optimum is None:
            raise ValueError("quadratic objective requires an optimum")
        optimum = np.asarray(optimum, dtype=float)
        if curvature is None:
            curvature = np.full(optimum.shape, float(lam))
        curvature = np.broadcast_to(np.asarray(curvature, dtype=float), optimum.shape).copy()
        if np.any(curvature <= 0):
            raise ValueError("quadratic curvatures must be positive")
        mu, L = float(curvature.min()), float(curvature.max())
        return ObjectiveSpec(
            kind=kind,
            mu=mu,
            lipschitz=L,
            kappa=L / mu,
            lam=0.0,
            dataset=dataset,
            optimum_radius_r=float(np.linalg.norm(optimum)),
            noise_sigma=noise_sigma,
            optimum=optimum,
            f_star=0.0,
            curvature=curvature,
        )
    if dataset is None:
        raise ValueError("logistic objective requires a dataset")
    check_positive(lam, "lambda")
    L = logistic_smoothness_bound(dataset, lam)
    spec = ObjectiveSpec(
        kind=kind, mu=float(lam), lipschitz=L, kappa=L / lam, lam=float(lam),
        dataset=dataset, noise_sigma=noise_sigma,
    )
    if not solve_optimum:
        return spec
    x_star = _solve_logistic_optimum(spec)
    return ObjectiveSpec(
        kind=kind, mu=spec.mu, lipschitz=L, kappa=spec.kappa, lam=spec.lam,
        dataset=dataset, optimum_radius_r=float(np.linalg.norm(x_star)),
        noise_sigma=noise_sigma, optimum=x_star, f_star=loss(spec, x_star),
    )


def quadratic_objective(optimum, mu: float = 1.0, lipschitz: Optional[float] = None,
                        noise_sigma: float = 0.0) -> ObjectiveSpec:
    """Diagonal quadratic with curvatures spread between ``mu`` and ``lipschitz``."""
    optimum = np.asarray(optimum, dtype=float)
    lipschitz = mu if lipschitz is None else lipschitz
    curvature = np.linspace(mu, lipschitz, optimum.shape[0]) if optimum.shape[0] > 1 else np.array([mu])
    if optimum.shape[0] == 1 and lipschitz != mu:
        raise ValueError("a 1-d quadratic has a single curvature; need mu == lipschitz")
    return certify_constants(None, mu, ObjectiveKind.QUADRATIC, noise_sigma=noise_sigma,
                             optimum=optimum, curvature=curvature)


def write_dataset_csv(dataset: Dataset, path) -> str:
    path = os.fspath(path)
    header = [f"f{j}" for j in range(dataset.d)] + ["label"]
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row, label in zip(dataset.features, dataset.labels):
                writer.writerow([repr(float(v)) for v in row] + [int(label)])
    except OSError as exc:
        raise OSError(f"cannot write dataset CSV {path!r}: {exc}") from exc
    return path


def read_dataset_csv(path, source_seed: Optional[int] = None) -> Dataset:
    path = os.fspath(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[-1] != "label":
            raise ValueError(f"{path!r}: missing header row ending in 'label'")
        expected = [f"f{j}" for j in range(len(header) - 1)]
        if header[:-1] != expected:
            raise ValueError(f"{path!r}: feature columns must be named f0..f{len(header) - 2}")
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise ValueError(f"{path!r}: no samples")
    arr = np.asarray(rows)
    return Dataset(arr[:, :-1], arr[:, -1], source_seed=source_seed)
