"""Coupled shortcut flow matching for latent restoration on linear-Gaussian benchmarks."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, parse_config, serialize_config
from .coupling import (
    COUPLING_MODES,
    ConditionalMeanEstimator,
    CoupledPair,
    CouplingSampler,
    DegradationModel,
    GaussianSpec,
    LatentCodec,
    conditional_mean_oracle,
    degrade,
    fit_conditional_mean,
    sample_coupled_pair,
    sample_independent_pair,
)
from .diagnostics import (
    GaussianFlowSpec,
    conditional_velocity_variance,
    expected_displacement,
    gaussian_marginal_velocity,
    jensen_gap,
    kinetic_energy,
    mc_marginal_velocity,
    path_crossing_count,
    sliced_w2,
    sliced_w2_error,
)
from .estimator import ShortcutFlowRestorer
from .exceptions import (
    CheckpointError,
    ConfigParseError,
    ConfigurationError,
    CoupledFlowError,
    InputError,
    InsufficientDataError,
    IntegrationError,
    NumericalError,
    TrainingError,
)
from .inference import NetField, Trajectory, euler_step, integrate, integrate_rk4, one_step_restore
from .numeric_core import AdamState, EmaShadow, VelocityNet, adam_step, ema_update, time_embed
from .runner import diagnose_checkpoint, resume_experiment, run_experiment, verify
from .training import TrainConfig, TrainState, train

__version__ = "0.1.0"
