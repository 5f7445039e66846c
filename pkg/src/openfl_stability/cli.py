"""Command-line entry point.

Exit codes: 0 success, 1 validation or usage error, 2 a check ran and failed.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .harness import (
    AXES,
    ConfigError,
    ExperimentConfig,
    derive_seed,
    emit_csv,
    load_config,
    run_many,
    run_sweep,
    steady_state_window,
    summarize_runs,
    SweepResult,
)
from .opensys import write_run_csv
from .optimizers import AdamState, SgdState
from .stability import (
    InvalidRegimeError,
    adam_constants,
    adam_radius,
    empirical_stability_check,
    lyapunov_contraction_check,
    report_to_text,
    sgd_radius,
    write_lyapunov_csv,
    write_samples_csv,
)

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="openfl-stability", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", help="run n_monte_carlo simulations of one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--paper-scale", action="store_true")

    p = sub.add_parser("sweep", help="Monte Carlo sweep over one axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=sorted(AXES))
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--out", required=True)
    p.add_argument("--paper-scale", action="store_true")

    p = sub.add_parser("radius", help="closed-form stability radius")
    p.add_argument("--optimizer", required=True, choices=["sgd", "adam"])
    p.add_argument("--r", type=float, required=True)
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--L", type=float, required=True, dest="lipschitz")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--d", type=int, default=1)

    p = sub.add_parser("stability-check", help="Monte Carlo second-moment stability check")
    p.add_argument("--config", required=True)
    p.add_argument("--radius", type=float, required=True)
    p.add_argument("--out", default=None, help="optional CSV of per-sample estimates")

    p = sub.add_parser("lyapunov", help="Monte Carlo Lyapunov contraction check for Adam")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="optional CSV of per-step estimates")
    return parser


def _with_scale(config: ExperimentConfig, paper_scale: bool) -> ExperimentConfig:
    if not paper_scale:
        return config
    return replace(config, d=100, m=100, N=1000, N0=10, n_monte_carlo=100)


def _cmd_simulate(args) -> int:
    config = _with_scale(load_config(args.config), args.paper_scale)
    jobs = [(config, derive_seed(config.master_seed, 0, r), r) for r in range(config.n_monte_carlo)]
    runs = run_many(jobs)
    window = steady_state_window(config.K, config.steady_state_fraction)
    point = summarize_runs(0.0, runs, window) if config.K else None
    result = SweepResult(axis="simulate", points=[point] if point else [], window=window)
    if point is None:
        os.makedirs(args.out, exist_ok=True)
        paths = [write_run_csv(runs, os.path.join(args.out, "simulate_runs.csv"))]
    else:
        paths = emit_csv(result, args.out)
    for path in paths:
        print(path)
    if point is not None:
        print(f"steady_state_mean={point.steady_state_mean!r}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    config = _with_scale(load_config(args.config), args.paper_scale)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    result = run_sweep(config, args.axis, values)
    for path in emit_csv(result, args.out):
        print(path)
    for point in result.points:
        print(f"{args.axis}={point.value!r} steady_state_mean={point.steady_state_mean!r} "
              f"steady_state_stderr={point.steady_state_stderr!r}")
    return EXIT_OK


def _cmd_radius(args) -> int:
    if args.optimizer == "sgd":
        print(report_to_text(sgd_radius(args.r, args.mu, args.lipschitz, args.sigma)))
        return EXIT_OK
    constants = adam_constants(args.eta, args.beta1, args.beta2, args.epsilon, args.sigma,
                               args.mu, args.lipschitz, args.d)
    print(report_to_text(constants))
    radius = adam_radius(constants, args.r, args.mu, args.lipschitz)
    print(f"radius={radius!r}")
    return EXIT_OK


def _stepper(config: ExperimentConfig, d: int):
    if config.optimizer == "adam":
        return AdamState.fresh(np.zeros(d), config.eta, config.beta1, config.beta2, config.epsilon)
    return SgdState(np.zeros(d), config.eta)


def _cmd_stability_check(args) -> int:
    config = load_config(args.config)
    spec = config.single_objective()
    report = empirical_stability_check(
        _stepper(config, spec.d), spec, args.radius, config.check_n_boundary, config.check_n_mc,
        np.random.default_rng(config.master_seed), k_burn_in=config.burn_in,
        batch_size=config.batch_size, grad_bound=config.grad_bound or None,
    )
    print(report_to_text(report))
    if args.out:
        write_samples_csv(report, args.out)
    return EXIT_OK if report.passed else EXIT_FAILED


def _cmd_lyapunov(args) -> int:
    config = load_config(args.config)
    if config.optimizer != "adam":
        raise ConfigError("lyapunov check requires optimizer = adam")
    if config.grad_bound <= 0:
        raise ConfigError("lyapunov check requires grad_bound > 0")
    spec = config.single_objective()
    rng = np.random.default_rng(config.master_seed)
    direction = rng.standard_normal(spec.d)
    direction /= np.linalg.norm(direction)
    optimum = spec.optimum if spec.optimum is not None else np.zeros(spec.d)
    x0 = optimum + 0.5 * config.grad_bound / spec.lipschitz * direction
    initial = AdamState.fresh(x0, config.eta, config.beta1, config.beta2, config.epsilon)
    report = lyapunov_contraction_check(spec, initial, config.lyapunov_steps, config.check_n_mc, rng,
                                        sigma=config.grad_bound, batch_size=config.batch_size)
    print(report_to_text(report))
    if args.out:
        write_lyapunov_csv(report, args.out)
    return EXIT_OK if report.passed else EXIT_FAILED


_COMMANDS = {
    "simulate": _cmd_simulate,
    "sweep": _cmd_sweep,
    "radius": _cmd_radius,
    "stability-check": _cmd_stability_check,
    "lyapunov": _cmd_lyapunov,
}


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except InvalidRegimeError as exc:
        print(f"error: invalid regime: {exc.reason}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
