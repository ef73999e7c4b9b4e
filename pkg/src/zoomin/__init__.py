"""Multistage adaptive change-point estimation with zoom-in sampling."""
from .cpp import CppParams, CppQuantiles, estimate_quantiles, simulate_argmins
from .design import (RunResult, StagePlan, allocate_counts, equal_plan, fixed_k_plan,
                     run_experiment, window_constant, zeta_from_delta)
from .errors import *  # noqa: F401,F403
from .estimator import SplitFit, Window, classical_estimate, fit_fixed, fit_free
from .harness import McConfig, McReport, run_allocation_study, run_are_study, run_coverage_study
from .intervals import (ConfidenceInterval, conservative_ci, exact_ci, finite_sample_ci,
                        limit_rate)
from .model import (ChangePointModel, ExternalOracle, ModelOracle, NoiseSpec, PoolOracle,
                    stump, test_model)

__version__ = "0.1.0"
