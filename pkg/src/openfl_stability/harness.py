"""Experiment configuration, Monte Carlo sweeps and CSV emission."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np

from .objectives import Dataset, ObjectiveKind, certify_constants, generate_synthetic_dataset, quadratic_objective
from .opensys import (
    ChurnConfig,
    ChurnTiming,
    LocalConfig,
    RunRecord,
    Schedule,
    SelectionConfig,
    run_experiment,
    write_events_csv,
    write_run_csv,
)

AXES = {"lambda": "lam", "p": "p", "sigma": "sigma_data"}
SUMMARY_HEADER = ["axis", "value", "steady_state_mean", "steady_state_stderr"]
SERIES_HEADER = ["round", "mean_iterate_norm", "stderr_iterate_norm", "mean_global_loss",
                 "stderr_global_loss"]


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """All knobs of one experiment. Defaults are the desk-scale setting."""

    d: int = 20
    m: int = 50
    N: int = 1000
    N0: int = 10
    K: int = 200
    H: int = 5
    lam: float = 0.01
    sigma_data: float = 2.0
    p: float = 1.0
    eta: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-3
    q: float = 1.0
    optimizer: str = "sgd"
    batch_size: int = 1
    n_monte_carlo: int = 20
    master_seed: int = 0
    reset_moments_on_broadcast: bool = False
    churn_timing: str = ChurnTiming.PER_COMMUNICATION_ROUND.value
    steady_state_fraction: float = 0.2
    data_partition: str = "iid"
    # used by the stability-check and lyapunov subcommands
    objective: str = "logistic"
    noise_sigma: float = 0.0
    grad_bound: float = 0.0
    check_n_boundary: int = 200
    check_n_mc: int = 2000
    burn_in: int = 50
    lyapunov_steps: int = 200

    def __post_init__(self):
        errors = []
        for name in ("d", "m", "N", "N0", "H"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        for name in ("K", "batch_size", "burn_in", "lyapunov_steps"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0")
        if self.N0 > self.N:
            errors.append(f"N0 ({self.N0}) must not exceed N ({self.N})")
        if self.batch_size > self.m:
            errors.append(f"batch_size ({self.batch_size}) must not exceed m ({self.m})")
        if self.n_monte_carlo < 1 or self.check_n_boundary < 1 or self.check_n_mc < 2:
            errors.append("Monte Carlo counts must be positive (check_n_mc >= 2)")
        if not self.lam > 0:
            errors.append("lambda must be > 0")
        if self.sigma_data < 0 or self.noise_sigma < 0 or self.grad_bound < 0:
            errors.append("sigma_data, noise_sigma and grad_bound must be >= 0")
        if not 0 <= self.p <= 1:
            errors.append("p must lie in [0, 1]")
        if not 0 < self.q <= 1:
            errors.append("q must lie in (0, 1]")
        if not 0 < self.steady_state_fraction <= 1:
            errors.append("steady_state_fraction must lie in (0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            errors.append("optimizer must be 'sgd' or 'adam'")
        if self.data_partition not in ("iid", "per_client"):
            errors.append("data_partition must be 'iid' or 'per_client'")
        if self.objective not in ("logistic", "quadratic"):
            errors.append("objective must be 'logistic' or 'quadratic'")
        try:
            ChurnTiming(self.churn_timing)
        except ValueError:
            errors.append(f"churn_timing must be one of {[t.value for t in ChurnTiming]}")
        if not errors:
            try:
                self.local_config()
            except ValueError as exc:
                errors.append(str(exc))
        if errors:
            raise ConfigError("; ".join(errors))

    @classmethod
    def paper_scale(cls, **overrides) -> "ExperimentConfig":
        base = dict(d=100, m=100, N=1000, N0=10, n_monte_carlo=100)
        base.update(overrides)
        return cls(**base)

    def local_config(self) -> LocalConfig:
        return LocalConfig(self.optimizer, self.eta, self.beta1, self.beta2, self.epsilon,
                           self.batch_size, self.reset_moments_on_broadcast)

    def schedule(self) -> Schedule:
        return Schedule(self.H, self.K)

    def churn(self) -> ChurnConfig:
        return ChurnConfig.symmetric(self.p, churn_timing=ChurnTiming(self.churn_timing))

    def selection(self) -> SelectionConfig:
        return SelectionConfig(q=self.q)

    def pool_size(self) -> int:
        # shards that can ever be used: initial clients plus one join per churn event
        events = self.K * (self.H + 1 if self.churn_timing == ChurnTiming.PER_ITERATION.value else 1)
        return min(self.N, self.N0 + events)

    def single_objective(self, seed: Optional[int] = None):
        """One client's objective, for the stability and Lyapunov checks."""
        seed = self.master_seed if seed is None else seed
        if self.objective == "quadratic":
            rng = np.random.default_rng(seed)
            x_star = rng.standard_normal(self.d)
            x_star /= np.linalg.norm(x_star)
            return quadratic_objective(x_star, mu=self.lam, noise_sigma=self.noise_sigma)
        data = generate_synthetic_dataset(self.d, self.m, self.sigma_data, seed)
        return certify_constants(data, self.lam, noise_sigma=self.noise_sigma)


_INT_KEYS = {f.name for f in fields(ExperimentConfig) if f.type in ("int", int)}
_FLOAT_KEYS = {f.name for f in fields(ExperimentConfig) if f.type in ("float", float)}
_BOOL_KEYS = {f.name for f in fields(ExperimentConfig) if f.type in ("bool", bool)}
_KEY_ALIASES = {"lambda": "lam", "N₀": "N0", "n_mc": "n_monte_carlo", "seed": "master_seed"}


def _coerce(key: str, raw: str):
    try:
        if key in _INT_KEYS:
            value = float(raw)
            if value != int(value):
                raise ValueError
            return int(value)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _BOOL_KEYS:
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return lowered in ("true", "1", "yes")
    except ValueError:
        raise ConfigError(f"invalid value for {key!r}: {raw!r}") from None
    optimizer_aliases = {"localsgd": "sgd", "localadam": "adam"}
    if key == "optimizer":
        return optimizer_aliases.get(raw.lower(), raw.lower())
    return raw


def parse_config_text(text: str, source: str = "<string>", env=None) -> ExperimentConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment; unknown keys fail."""
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = _KEY_ALIASES.get(key, key)
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    env = os.environ if env is None else env
    if env.get("OPENFL_SEED"):
        values["master_seed"] = _coerce("master_seed", env["OPENFL_SEED"])
    return ExperimentConfig(**values)


def load_config(path, env=None) -> ExperimentConfig:
    path = os.fspath(path)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    return parse_config_text(text, source=path, env=env)


def config_to_text(config: ExperimentConfig) -> str:
    lines = []
    for key, value in asdict(config).items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Seeding and single runs
# --------------------------------------------------------------------------


def derive_seed(master_seed: int, axis_index: int, run_index: int) -> int:
    """64-bit seed from ``(master_seed, axis_index, run_index)`` via SeedSequence hashing."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(axis_index, run_index))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def seed_matrix(master_seed: int, n_values: int, n_runs: int) -> np.ndarray:
    seeds = np.array([[derive_seed(master_seed, a, r) for r in range(n_runs)] for a in range(n_values)],
                     dtype=np.uint64)
    if np.unique(seeds).size != seeds.size:
        raise RuntimeError("derived seed collision in the run matrix")
    return seeds


def build_clients(config: ExperimentConfig, seed: int):
    """Initial objectives, pool objectives and the protocol RNG for one run."""
    ss = np.random.SeedSequence(seed)
    protocol_ss, data_ss = ss.spawn(2)
    n_shards = config.pool_size()
    if config.data_partition == "iid":
        # one population dataset dealt out uniformly, m samples per client
        pooled = generate_synthetic_dataset(config.d, config.m * n_shards, config.sigma_data,
                                            int(data_ss.generate_state(1, dtype=np.uint64)[0]))
        shards = [Dataset(pooled.features[i * config.m:(i + 1) * config.m],
                          pooled.labels[i * config.m:(i + 1) * config.m], pooled.source_seed)
                  for i in range(n_shards)]
    else:
        shards = [generate_synthetic_dataset(config.d, config.m, config.sigma_data, int(s))
                  for s in data_ss.generate_state(n_shards, dtype=np.uint64)]
    objectives = [certify_constants(s, config.lam, ObjectiveKind.REGULARIZED_LOGISTIC, solve_optimum=False)
                  for s in shards]
    return objectives[: config.N0], objectives[config.N0:], np.random.default_rng(protocol_ss)


def simulate(config: ExperimentConfig, seed: Optional[int] = None, run_id: int = 0) -> RunRecord:
    seed = config.master_seed if seed is None else seed
    initial, pool, rng = build_clients(config, seed)
    return run_experiment(initial, pool, config.local_config(), config.schedule(), config.selection(),
                          config.churn(), rng, run_id=run_id)


def _simulate_job(args):
    config, seed, run_id = args
    return simulate(config, seed, run_id)


def worker_count(env=None) -> int:
    env = os.environ if env is None else env
    n = os.cpu_count() or 1
    cap = env.get("OPENFL_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def run_many(jobs: Sequence[tuple], workers: Optional[int] = None) -> list:
    """Run ``(config, seed, run_id)`` jobs; output order matches input order."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [_simulate_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_simulate_job, jobs))


# --------------------------------------------------------------------------
# Sweeps
# --------------------------------------------------------------------------


@dataclass
class SweepPoint:
    value: float
    mean_series: np.ndarray
    stderr_series: np.ndarray
    steady_state_mean: float
    steady_state_stderr: float
    steady_state_per_run: np.ndarray
    loss_mean_series: np.ndarray
    loss_stderr_series: np.ndarray
    runs: list


@dataclass
class SweepResult:
    axis: str
    points: list
    window: int


def _stderr(a: np.ndarray, axis=0) -> np.ndarray:
    n = a.shape[axis]
    if n < 2:
        return np.zeros(a.shape[1 - axis] if a.ndim == 2 else ())
    return a.std(axis=axis, ddof=1) / math.sqrt(n)


def steady_state_window(K: int, fraction: float = 0.2) -> int:
    return max(1, int(math.ceil(fraction * K))) if K else 0


def summarize_runs(value: float, runs: Sequence[RunRecord], window: int) -> SweepPoint:
    norms = np.vstack([r.iterate_norms for r in runs]) if runs[0].rounds else np.zeros((len(runs), 0))
    losses = np.vstack([r.global_losses for r in runs]) if runs[0].rounds else np.zeros((len(runs), 0))
    per_run = norms[:, -window:].mean(axis=1) if window else np.full(len(runs), np.nan)
    return SweepPoint(
        value=float(value),
        mean_series=norms.mean(axis=0),
        stderr_series=_stderr(norms),
        steady_state_mean=float(per_run.mean()),
        steady_state_stderr=float(_stderr(per_run[:, None])[0]) if len(runs) > 1 else 0.0,
        steady_state_per_run=per_run,
        loss_mean_series=losses.mean(axis=0),
        loss_stderr_series=_stderr(losses),
        runs=list(runs),
    )


def run_sweep(config: ExperimentConfig, axis: str, values: Sequence[float], *,
              seeds: Optional[np.ndarray] = None, workers: Optional[int] = None) -> SweepResult:
    """``n_monte_carlo`` runs per axis value; ``seeds[a, r]`` overrides derived seeds."""
    if axis not in AXES:
        raise ConfigError(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    n_runs = config.n_monte_carlo
    if seeds is None:
        seeds = seed_matrix(config.master_seed, len(values), n_runs)
    seeds = np.asarray(seeds)
    if seeds.shape != (len(values), n_runs):
        raise ConfigError(f"seeds must have shape {(len(values), n_runs)}")
    configs = [replace(config, **{AXES[axis]: v}) for v in values]
    jobs = [(configs[a], int(seeds[a, r]), r) for a in range(len(values)) for r in range(n_runs)]
    records = run_many(jobs, workers)
    window = steady_state_window(config.K, config.steady_state_fraction)
    points = [summarize_runs(v, records[a * n_runs:(a + 1) * n_runs], window) for a, v in enumerate(values)]
    return SweepResult(axis=axis, points=points, window=window)


def _fmt(v: float) -> str:
    return repr(float(v))


def _value_tag(value: float) -> str:
    return repr(float(value)).replace("-", "m").replace(".", "p").replace("+", "")


def emit_csv(result: SweepResult, out_dir) -> list:
    """Write per-value series, raw runs and churn events, plus ``summary.csv``."""
    out_dir = os.fspath(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir!r}: {exc}") from exc
    paths = []
    for point in result.points:
        stem = os.path.join(out_dir, f"{result.axis}_{_value_tag(point.value)}")
        path = stem + "_series.csv"
        try:
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(SERIES_HEADER)
                for k in range(point.mean_series.size):
                    writer.writerow([k, _fmt(point.mean_series[k]), _fmt(point.stderr_series[k]),
                                     _fmt(point.loss_mean_series[k]), _fmt(point.loss_stderr_series[k])])
        except OSError as exc:
            raise OSError(f"cannot write {path!r}: {exc}") from exc
        paths.append(path)
        paths.append(write_run_csv(point.runs, stem + "_runs.csv"))
        paths.append(write_events_csv(point.runs, stem + "_events.csv"))
    summary = os.path.join(out_dir, "summary.csv")
    try:
        with open(summary, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SUMMARY_HEADER)
            for point in result.points:
                writer.writerow([result.axis, _fmt(point.value), _fmt(point.steady_state_mean),
                                 _fmt(point.steady_state_stderr)])
    except OSError as exc:
        raise OSError(f"cannot write {summary!r}: {exc}") from exc
    paths.append(summary)
    return paths


def ordering_pvalue(larger: np.ndarray, smaller: np.ndarray) -> float:
    """One-sided Welch t-test p-value for ``mean(larger) > mean(smaller)``."""
    from scipy.stats import ttest_ind

    larger, smaller = np.asarray(larger, float), np.asarray(smaller, float)
    if np.all(larger == larger[0]) and np.all(smaller == smaller[0]):
        return 0.0 if larger[0] > smaller[0] else 1.0
    return float(ttest_ind(larger, smaller, equal_var=False, alternative="greater").pvalue)
