"""Bias identification and Newton-step bias unlearning for convex classifier heads."""

from .bias import (BiasReport, GroupSpec, cf_bias_dataset, cf_bias_per_pair, cf_bias_sample, dp_bias,
                   eo_bias, grad_cf_bias, grad_dp_bias, grad_eo_bias, identify)
from .dataset import CounterfactualPair, CounterfactualSet, Dataset, Sample
from .exceptions import (ConvergenceError, FactorizationError, InputError, NumericalError,
                         TrainingDivergedError)
from .influence import (InfluenceScore, influence_cf, influence_dp, influence_eo, influence_on_bias,
                        rank, solve_hinv)
from .linalg import HessianOperator, SolveConfig
from .model import (FeatureMap, ModelHead, TrainConfig, accuracy, grad_loss, hessian, hvp, load_head,
                    predict_proba, save_head, train_head)
from .unlearn import (Evaluator, UnlearnConfig, UnlearnOutcome, run_fmd, unlearn_external,
                      unlearn_replace, unlearn_topk)

__version__ = "0.1.0"
