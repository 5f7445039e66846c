"""Open federated learning simulator with second-moment stability analysis."""

from .objectives import (
    Dataset,
    ObjectiveKind,
    ObjectiveSpec,
    certify_constants,
    generate_synthetic_dataset,
    gradient,
    loss,
    quadratic_objective,
    stochastic_gradient,
)
from .optimizers import AdamState, SgdState, adam_step, adam_step_bound, sgd_step
from .stability import (
    AdamConstants,
    InvalidRegimeError,
    adam_constants,
    adam_radius,
    empirical_stability_check,
    learning_rate_convexity_check,
    lyapunov_contraction_check,
    lyapunov_value,
    sgd_radius,
)
from .opensys import (
    ChurnConfig,
    LocalConfig,
    Schedule,
    SelectionConfig,
    federated_average,
    run_experiment,
)
from .harness import ExperimentConfig, load_config, run_sweep

__version__ = "0.1.0"
