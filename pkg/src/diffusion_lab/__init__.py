"""Adapt-then-combine diffusion over agent networks, with the diagnostics
needed to check agreement, perturbation, descent and short-term-model
behavior empirically, plus robust-regression experiments at desk scale."""

__version__ = "0.1.0"

from .analysis import (DescentStatistics, DisagreementMoments, LipschitzEstimate,
                       Regime, RegimeThresholds, ShortTermRun, ShortTermState,
                       aggregate_gradient, aggregate_hessian, aggregate_risk,
                       classify_point, descent_statistics, disagreement_moments,
                       estimate_lipschitz_constants, find_anchor, limit_constant,
                       limit_constant_limit, short_term_run)
from .costs import (CostOracle, HuberLoss, LinearDataModel, MseLoss, NoiseModel,
                    NoiseMomentEstimate, QuadraticOracle, TukeyLoss,
                    estimate_noise_moments, load_dataset_csv, loss_value,
                    make_loss, make_regressor_cov)
from .diffusion import (DiffusionConfig, NetworkState, NonFiniteIterate,
                        StepRecord, Trajectory, atc_step, centroid,
                        export_trajectory_csv, initial_state, run)
from .experiments import (EnsembleMsd, ExperimentBundle, MsdCurve, ScenarioSpec,
                          msd_curves, mu_sweep, robust_regression_scenario,
                          run_ensemble_msd, saddle_quadratic_oracles)
from .network import (CombinationMatrix, DegenerateMixing, InvalidWeights,
                      NoConvergence, NotStronglyConnected, Topology,
                      build_combination_matrix, burn_in_horizon, load_matrix_csv,
                      load_topology, mixing_rate, perron_vector,
                      random_geometric_topology)
