"""Momentum Q-learning: tabular and linear learners, FrozenLake tasks, bounds and an experiment harness."""

from .bounds import BoundInputs, bound_thm1, bound_thm2, bound_thm3, compare_bound_vs_run, constants, mixing_time
from .frozenlake import GridSpec, build_frozenlake, evaluate_greedy_return, generate_grid, markovian_stream
from .harness import AggregateRecord, ExperimentConfig, aggregate, emit_plotdata, run_experiment
from .linear import FaSchedule, LinearQState, gbar_and_thetastar, momentumq_fa_step, run_fa
from .mdp import TabularMdp, bellman_empirical, bellman_exact, solve_qstar
from .tabular import TabularConfig, TabularSchedule, momentumq_step, run_tabular, speedyq_step, vanilla_step

__version__ = "0.1.0"
