"""Frozen-Gaussian parametrix for degenerate Kolmogorov chain SDEs."""
from .model import (AssumptionReport, ChainModel, TimeScaler, available_presets, build_model,
                    drift_jacobian, load_model, model_from_config, register_preset, scale,
                    validate_assumptions)
from .flow import (BlowUpError, LinearizedSystem, backward_flow, flow_equivalence_constant,
                   forward_flow, linearize, linearized_flow, resolvent)
from .gaussian import (CovarianceOperator, DensityEstimate, SingularCovarianceError, covariance,
                       density_bound_constant, frozen_density, frozen_density_derivatives,
                       g_kernel, gsp_constant)
from .parametrix import (SeriesTerm, beta_tail_bound, convolve_chain, green_remainder,
                         kernel_exponent_profile, kernel_H, semigroup_check,
                         series_partial_sum)
from .simulate import (PathEnsemble, aronson_fit, euler_paths, kde_density, kde_grid, mollify,
                       uniqueness_experiment, xi_epsilon)
from .streams import MCEstimate

__all__ = [name for name in dir() if not name.startswith("_")]
