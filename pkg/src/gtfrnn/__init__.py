"""Shallow piecewise-linear RNNs trained with generalized teacher
forcing, with chaotic benchmark generators and reconstruction metrics."""

from .benchmarks import (IntegratorConfig, OdeSystemSpec, TrajectoryDataset,
                         integrate_rk4, make_dataset, vector_field)
from .errors import (ConditioningError, ConfigError, ContractError,
                     DivergenceError, FormatError, GtfrnnError, NumericError)
from .gtf import (GtfState, alpha_from_geomean, alpha_from_max_data_jacobian,
                  alpha_from_norm_bound, anneal_update, force_state,
                  geometric_mean_norm, jacobian_product_norm_series,
                  spectral_norm)
from .metrics import (DstspConfig, MetricsReport, SpectrumConfig,
                      d_stsp_binning, d_stsp_gmm, d_h, evaluate,
                      lyapunov_max, prediction_error)
from .model import (DendPLRNNParams, FixedPoint, ObservationModel,
                    PeriodicOrbit, ShPLRNNParams, dend_to_shallow,
                    find_cycles, find_fixed_points, free_run, init_observation,
                    init_params, jacobian, jacobians_at, load_checkpoint,
                    region_signature, save_checkpoint, step)
from .trainer import (Gradients, LossReport, RegularizationConfig,
                      TrainingConfig, backward, forward_forced, loss, train)

__version__ = "0.1.0"
