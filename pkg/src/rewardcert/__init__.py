"""Certified bounds on expected cumulative reward of neural control loops under state perturbations."""
from .core import Box, Episode, NoiseCells, NoiseSpec, noise_box_mass, partition_noise_support, sample_noise
from .env import (EnvModel, GridPolicy, NetworkPolicy, load_policy, make_builtin_env, make_env, perturbed_step,
                  save_policy)
from .net import Layer, MlpNet
from .grid import build_grid, classify_grid, refine_grid
from .verify import (check_boundedness, check_pre_expectation, difference_bound, expectation_analytic,
                     expectation_bound, margin_zeta, validate)
from .learn import Certificate, TrainConfig, certify_loop, martingale_loss
from .certify import concentration_constants, reward_bounds, tail_bound
from .sim import enclosure_report, estimate_stats, rollout

__version__ = "0.1.0"
