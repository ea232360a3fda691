"""Masked workflow sampling over typed tool DAGs, trained with a three-phase curriculum."""
from .environment import Environment, QueryInstance, SuiteConfig, generate_suite
from .estimator import SupernetController
from .exceptions import SupernetError
from .harness import RunConfig, ablate, evaluate, load_checkpoint, pareto_sweep, save_checkpoint
from .policy import Controller
from .runtime import emit_trace, estimate_marginal, run_inference, verify_traces
from .supernet import EARLY_EXIT, ENTRY, SupernetGraph, build_graph, legal_actions
from .training import TrainingConfig, run_curriculum

__version__ = "0.1.0"
