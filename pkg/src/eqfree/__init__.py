"""Equation-free coarse control of PDEs with random-embedding neural operators."""

from .plant import (
    ActuatorSet,
    DataGenSpec,
    Grid,
    PlantConfig,
    SnapshotDataset,
    analytic_steady_state,
    bratu_rhs,
    controlled_fd_step,
    fd_step,
    fd_timestepper,
    generate_training_pairs,
    initial_perturbation,
)
from .randonet import RandONetModel, init_embeddings, predict, train_bilinear_lsq
from .krylov import arnoldi, gmres, jvp, newton_krylov_fixed_point
from .reduction import ReducedModel, build_reduced_model, project
from .control import ControllerGain, LqrSpec, dlqr_gain, pole_place, solve_dare

__version__ = "0.1.0"
