"""Two-time-scale additive Aalen hazard model estimated by backfitting without smoothing."""

from .bootstrap import (BandResult, BootstrapEnsemble, bootstrap_replicate, pointwise_se,
                        predict_survival, run_bootstrap, uniform_band, wild_weights)
from .data import (CovariatePath, CovariateSchema, IncrementMatrix, ParseError, SubjectCohort,
                   SubjectRecord, counting_increments, parse_subjects, write_subjects)
from .grid import StepFunctionVec, ThetaEstimate, TwoScaleGrid, build_grid, increments, step_eval
from .marginal import MarginalEstimate, marginal_estimates, pinv_increment
from .model import TwoScaleFit, fit
from .operator import (BlockOperator, KernelMatrices, SpectralReport, apply_operator,
                       assemble_block_operator, kernel_matrices, spectral_report)
from .simulation import (DEFAULT_SCENARIO, Scenario, StudyResult, bias_study, coverage_study,
                         simulate_cohort, true_cumulatives)
from .solver import (DivergenceError, IdentificationError, SolveReport, project_constraint,
                     solve_backfit, solve_direct)

__version__ = "0.1.0"
