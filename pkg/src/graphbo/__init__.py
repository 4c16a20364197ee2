"""Bayesian optimization on compact metric graphs with Whittle-Matern FEM kernels."""
from .bo import BoConfig, RunRecord, acquire_ts, acquire_ucb, maximin_design, mle_update, run, schedule_beta_v
from .experiment import ExperimentConfig, MetricsReport, compute_metrics, emit_artifacts, run_experiment
from .fem import FemOperator, assemble, basis_matrix
from .kernels import (EuclideanMaternKernel, PrecisionKernel, RationalKernel, SpectralOracleKernel,
                      build_spde_kernel, sample_prior_path)
from .metric_graph import GraphError, GraphPoint, MetricGraph, Mesh, build_graph, build_mesh, load_graph
from .objectives import AnchorField, BenchmarkObjective, InverseProblem, eval_anchor, eval_benchmark
from .posterior import PosteriorState

__version__ = "0.1.0"
