"""Bayesian sum-of-trees regression with soft (gated) splits.

Hard candidate trees are grown from the root by marginal-likelihood-weighted
sampling, smoothed by a per-tree gating bandwidth chosen by grid search, and
kept or discarded by a Metropolis-Hastings step inside a backfitting sweep.
"""

__version__ = "0.1.0"

from .bench import BenchMethod, BenchReport, BenchSpec, rmse, run_bench
from .data import (ColumnSpec, DataError, Dataset, DatasetSchema,
                   ExpandedData, FriedmanData, FriedmanSpec, ModelFormatError,
                   expand_dummies, friedman_function, gen_friedman, load_csv,
                   load_model, save_model)
from .grow import (CutpointGrid, GrowLimits, NodeWorkset, SplitCandidates,
                   SplitPrior, enumerate_split_loglik, grow_from_root,
                   log_tree_prior, sample_split_or_stop, split_prob)
from .likelihood import (LeafPrior, LeafSuffStats, NumericalError, SigmaPrior,
                         SoftPosterior, draw_hard_leaf_values, draw_sigma2,
                         draw_soft_leaf_values, hard_log_marginal,
                         soft_log_marginal)
from .sampler import (BandwidthGrid, BandwidthSearchResult, FitConfig,
                      FitError, FitState, FittedModel, TreeProposal, fit,
                      mh_accept, percent_to_tau, predict, search_bandwidth)
from .trees import (DecisionTree, Forest, GatingSpec, TreeNode,
                    TreeStructureError, forest_predict, gate_left_prob,
                    hard_leaf_index, leaf_prob_cube, leaf_prob_matrix,
                    leaf_probabilities, predict_single, tree_predict)

__all__ = [name for name in dir() if not name.startswith("_")]
