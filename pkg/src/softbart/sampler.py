"""Backfitting sampler: grow candidates, smooth them, accept or keep.

One sweep updates each tree in turn against its partial residual: a hard
candidate is grown from the root, a tree-level gating bandwidth is picked
from a marginal-likelihood-weighted grid (sampled by default, or the grid
argmax), a Metropolis-Hastings step chooses between the smoothed candidate
and the incumbent, and leaf values are redrawn from their conjugate
posterior. The noise variance is redrawn once per sweep and post-burn-in
forests are retained for posterior-mean prediction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .grow import (CutpointGrid, GrowLimits, SplitPrior, grow_from_root,
                   log_tree_prior)
from .likelihood import (LeafPrior, LeafSuffStats, NumericalError, SigmaPrior,
                         SoftPosterior, draw_hard_leaf_values,
                         draw_sigma2, draw_soft_leaf_values, soft_log_marginal)
from .trees import (DecisionTree, Forest, GatingSpec, forest_predict,
                    hard_leaf_index, leaf_prob_cube, leaf_prob_matrix)

DEFAULT_GRID_PERCENTS = tuple(range(21))


class FitError(RuntimeError):
    """A module error raised during fitting, annotated with sweep/tree context."""


@dataclass
class FitConfig:
    """Everything that determines a fit besides the data itself."""

    num_trees: int = 50
    sweeps: int = 40
    burn_in: int = 15
    gate_family: str = "sigmoid"
    grid_percents: tuple = DEFAULT_GRID_PERCENTS
    seed: int = 0
    limits: GrowLimits = field(default_factory=GrowLimits)
    split_prior: SplitPrior = field(default_factory=SplitPrior)
    leaf_prior: LeafPrior | None = None     # None: scaled default for num_trees
    sigma_prior: SigmaPrior | None = None   # None: calibrated from the response
    max_cutpoints: int = 100
    bandwidth_selection: str = "sample"     # "sample" | "argmax" over the grid

    def __post_init__(self):
        if self.num_trees < 1:
            raise ValueError(f"num_trees must be >= 1, got {self.num_trees}")
        if self.sweeps < 1:
            raise ValueError(f"sweeps must be >= 1, got {self.sweeps}")
        if not 0 <= self.burn_in < self.sweeps:
            raise ValueError(
                f"burn_in must satisfy 0 <= burn_in < sweeps, got {self.burn_in}")
        GatingSpec(self.gate_family)  # validates the family name
        if self.gate_family == "hard":
            self.grid_percents = (0.0,)
        self.grid_percents = tuple(float(p) for p in self.grid_percents)
        p = np.asarray(self.grid_percents)
        if p.size == 0 or p[0] != 0.0:
            raise ValueError("bandwidth grid must start at percent 0")
        if np.any(p < 0) or np.any(p > 50):
            raise ValueError("grid percents must lie in [0, 50]")
        if np.any(np.diff(p) <= 0):
            raise ValueError("grid percents must be strictly increasing")
        if self.bandwidth_selection not in ("sample", "argmax"):
            raise ValueError(
                f"bandwidth_selection must be 'sample' or 'argmax', "
                f"got {self.bandwidth_selection!r}")


@dataclass
class BandwidthGrid:
    """Percent grid plus per-feature sorted training values.

    The p% grid point asks for the smallest bandwidth whose window
    [c - tau, c + tau] holds at least 2p% of the training samples of the
    split feature.
    """

    percents: np.ndarray
    sorted_features: list

    def __post_init__(self):
        self.percents = np.asarray(self.percents, dtype=float)

    @classmethod
    def build(cls, X: np.ndarray, percents) -> "BandwidthGrid":
        X = np.asarray(X, dtype=float)
        return cls(percents=np.asarray(percents, dtype=float),
                   sorted_features=[np.sort(X[:, j]) for j in range(X.shape[1])])

    @property
    def num_features(self) -> int:
        return len(self.sorted_features)


def percent_to_tau(p: float, feature: int, cutpoint: float,
                   grid: BandwidthGrid) -> float:
    """Smallest tau with >= 2p% of the feature's training samples in [c-tau, c+tau]."""
    if not 0 <= p <= 50:
        raise ValueError(f"percent must be in [0, 50], got {p}")
    if not 0 <= feature < grid.num_features:
        raise ValueError(f"feature index {feature} out of range")
    vals = grid.sorted_features[feature]
    k = math.ceil(2.0 * p / 100.0 * vals.size)
    if k <= 0:
        return 0.0
    k = min(k, vals.size)
    dist = np.abs(vals - cutpoint)
    return float(np.partition(dist, k - 1)[k - 1])


@dataclass
class BandwidthSearchResult:
    """Outcome of the per-tree bandwidth grid search."""

    tau: float
    log_marginal: float
    posterior: SoftPosterior
    phi: np.ndarray                 # (n, B) leaf probabilities at the chosen tau
    percents: np.ndarray
    taus: np.ndarray
    log_marginals: np.ndarray       # per grid point; NaN where the solve failed
    searched: bool                  # False when the search was skipped


def _tree_taus(tree: DecisionTree, grid: BandwidthGrid) -> np.ndarray:
    """Tree-level bandwidth per grid percent: median over ordinal branches.

    Dummy splits are excluded; they are routed deterministically at any
    bandwidth.
    """
    branches = [tree.nodes[b] for b in tree.branch_ids()
                if tree.nodes[b].split_var not in tree.dummy_vars]
    n = grid.sorted_features[0].size
    ks = np.ceil(2.0 * grid.percents / 100.0 * n).astype(int)
    ks = np.minimum(ks, n)
    per_branch = np.empty((len(branches), grid.percents.size))
    for i, node in enumerate(branches):
        dist_sorted = np.sort(np.abs(grid.sorted_features[node.split_var] - node.cutpoint))
        per_branch[i] = np.where(ks > 0, dist_sorted[np.maximum(ks - 1, 0)], 0.0)
    return np.median(per_branch, axis=0)


def search_bandwidth(tree: DecisionTree, R: np.ndarray, X: np.ndarray,
                     grid: BandwidthGrid, sigma2: float, sigma_mu2: float,
                     selection: str = "argmax",
                     rng: np.random.Generator | None = None) -> BandwidthSearchResult:
    """Evaluate the gated marginal likelihood over the bandwidth grid.

    With ``selection="argmax"`` (default) the best grid point is returned;
    since the grid includes percent 0 the result is then never worse than
    the hard-tree likelihood. ``selection="sample"`` instead draws the grid
    point with probability proportional to its marginal likelihood, which
    averages over bandwidth uncertainty (the likelihood surface over the
    grid is often nearly flat in noisy data) and needs ``rng``.
    Trees with no ordinal split (single leaves, dummy-only trees) skip the
    search and are evaluated at bandwidth 0 only.
    """
    if selection not in ("argmax", "sample"):
        raise ValueError(f"unknown selection {selection!r}")
    if selection == "sample" and rng is None:
        raise ValueError("selection='sample' requires an rng")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    R = np.asarray(R, dtype=float)

    has_ordinal = any(tree.nodes[b].split_var not in tree.dummy_vars
                      for b in tree.branch_ids())
    if not has_ordinal:
        phi = leaf_prob_matrix(tree, X, tau=0.0)
        post = soft_log_marginal(phi, R, sigma2, sigma_mu2)
        return BandwidthSearchResult(
            tau=0.0, log_marginal=post.log_marginal, posterior=post, phi=phi,
            percents=np.array([0.0]), taus=np.array([0.0]),
            log_marginals=np.array([post.log_marginal]), searched=False)

    taus = _tree_taus(tree, grid)
    unique_taus, inverse = np.unique(taus, return_inverse=True)
    cube = leaf_prob_cube(tree, X, unique_taus)

    posts: list[SoftPosterior | None] = []
    logml_unique = np.full(unique_taus.size, np.nan)
    for t in range(unique_taus.size):
        try:
            post = soft_log_marginal(cube[t], R, sigma2, sigma_mu2)
        except NumericalError as exc:
            warnings.warn(f"bandwidth candidate tau={unique_taus[t]:g} skipped: {exc}",
                          RuntimeWarning)
            posts.append(None)
            continue
        posts.append(post)
        logml_unique[t] = post.log_marginal
    if np.isnan(logml_unique).all():
        raise NumericalError("every bandwidth candidate failed to evaluate")

    log_marginals = logml_unique[inverse]
    if selection == "argmax":
        pick = int(np.nanargmax(log_marginals))
    else:
        finite = np.flatnonzero(np.isfinite(log_marginals))
        if finite.size == 1:
            pick = int(finite[0])
        else:
            weights = np.exp(log_marginals[finite] - log_marginals[finite].max())
            pick = int(finite[rng.choice(finite.size, p=weights / weights.sum())])
    pick_u = int(inverse[pick])
    return BandwidthSearchResult(
        tau=float(taus[pick]), log_marginal=float(log_marginals[pick]),
        posterior=posts[pick_u], phi=cube[pick_u],
        percents=grid.percents.copy(), taus=taus,
        log_marginals=log_marginals, searched=True)


@dataclass
class TreeProposal:
    """A tree structure with its bandwidth, marginal likelihood and posterior."""

    tree: DecisionTree
    tau: float
    log_marginal: float
    posterior: SoftPosterior
    phi: np.ndarray


def mh_accept(candidate: TreeProposal, incumbent: TreeProposal,
              prior: SplitPrior, rng: np.random.Generator):
    """Choose candidate or incumbent by a Metropolis-Hastings step.

    Both trees are grown from the root, so the proposal ratio is one and the
    acceptance probability is min{1, exp[(logML* + logPrior*) -
    (logML + logPrior)]} with the depth prior as the only structure prior.
    Both log marginals must be computed against the same residuals and
    noise variance.
    """
    if not np.isfinite(candidate.log_marginal):
        warnings.warn("candidate tree has non-finite log marginal; rejected",
                      RuntimeWarning)
        return incumbent, False
    log_ratio = ((candidate.log_marginal + log_tree_prior(candidate.tree, prior))
                 - (incumbent.log_marginal + log_tree_prior(incumbent.tree, prior)))
    if log_ratio >= 0.0 or math.log(rng.uniform()) < log_ratio:
        return candidate, True
    return incumbent, False


@dataclass
class FitState:
    """Mutable sampler state threaded through the sweeps."""

    forest: Forest
    residual: np.ndarray
    tree_fit: np.ndarray            # (num_trees, n) current per-tree fits
    rng: np.random.Generator
    retained: list = field(default_factory=list)
    sigma2_trace: list = field(default_factory=list)


@dataclass
class FittedModel:
    """Retained posterior draws plus everything needed to predict."""

    config: FitConfig
    num_features: int
    is_dummy: np.ndarray
    feature_names: list
    y_center: float
    y_scale: float
    bandwidth_grid: BandwidthGrid
    retained: list                  # post-burn-in Forest snapshots
    sigma2_trace: np.ndarray        # one value per sweep, model scale
    diagnostics: dict
    schema_doc: dict | None = None  # raw-column schema as a plain dict, set by the CLI


def _draw_leaves_and_fit(tree: DecisionTree, proposal: TreeProposal,
                         r_j: np.ndarray, X: np.ndarray, sigma2: float,
                         sigma_mu2: float, rng: np.random.Generator):
    """Redraw leaf values for the chosen tree and return its fitted vector."""
    if tree.bandwidth_tau > 0.0:
        mu = draw_soft_leaf_values(proposal.posterior, rng)
        tree.set_leaf_values(mu)
        return proposal.phi @ mu
    leaf_idx = hard_leaf_index(tree, X)
    stats = LeafSuffStats.from_membership(leaf_idx, r_j, tree.num_leaves)
    mu = draw_hard_leaf_values(stats, sigma2, sigma_mu2, rng)
    tree.set_leaf_values(mu)
    return mu[leaf_idx]


def fit(X: np.ndarray, y: np.ndarray, config: FitConfig,
        is_dummy=None, feature_names=None) -> FittedModel:
    """Run the full sampler on preprocessed data (dummies already expanded).

    The response is shifted and scaled to have range one before fitting;
    predictions are mapped back to the original scale. Identical data,
    config and seed reproduce the run bit for bit.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if y.shape != (n,):
        raise ValueError(f"y shape {y.shape} does not match n={n}")
    if n < 1:
        raise ValueError("need at least one sample")
    if is_dummy is None:
        is_dummy = np.zeros(p, dtype=bool)
    is_dummy = np.asarray(is_dummy, dtype=bool)
    if feature_names is None:
        feature_names = [f"x{j + 1}" for j in range(p)]

    y_center = 0.5 * (y.min() + y.max())
    y_range = float(y.max() - y.min())
    y_scale = y_range if y_range > 0 else 1.0
    ys = (y - y_center) / y_scale

    leaf_prior = config.leaf_prior or LeafPrior.scaled_default(config.num_trees)
    sigma_prior = config.sigma_prior or SigmaPrior.from_sample_std(float(ys.std()))
    sigma_mu2 = leaf_prior.sigma_mu2

    rng = np.random.default_rng(config.seed)
    gating = GatingSpec(config.gate_family)
    grid = CutpointGrid.build(X, is_dummy, max_cutpoints=config.max_cutpoints)
    bw_grid = BandwidthGrid.build(X, config.grid_percents)
    dummy_vars = grid.dummy_vars

    trees = [DecisionTree.single_leaf(0.0, gating, dummy_vars)
             for _ in range(config.num_trees)]
    state = FitState(
        forest=Forest(trees=trees, sigma2=max(float(ys.var()), 1e-12)),
        residual=ys.copy(),
        tree_fit=np.zeros((config.num_trees, n)),
        rng=rng,
    )
    drift = []
    accepted = 0
    searched = 0

    for k in range(1, config.sweeps + 1):
        sigma2 = state.forest.sigma2
        for j in range(config.num_trees):
            try:
                r_j = state.residual + state.tree_fit[j]

                cand_tree = grow_from_root(X, r_j, grid, config.split_prior,
                                           sigma2, sigma_mu2, config.limits,
                                           rng, gating)
                cand_search = search_bandwidth(cand_tree, r_j, X, bw_grid,
                                               sigma2, sigma_mu2,
                                               selection=config.bandwidth_selection,
                                               rng=rng)
                candidate = TreeProposal(tree=cand_tree, tau=cand_search.tau,
                                         log_marginal=cand_search.log_marginal,
                                         posterior=cand_search.posterior,
                                         phi=cand_search.phi)
                searched += cand_search.searched

                inc_tree = state.forest.trees[j]
                inc_phi = leaf_prob_matrix(inc_tree, X)
                inc_post = soft_log_marginal(inc_phi, r_j, sigma2, sigma_mu2)
                incumbent = TreeProposal(tree=inc_tree, tau=inc_tree.bandwidth_tau,
                                         log_marginal=inc_post.log_marginal,
                                         posterior=inc_post, phi=inc_phi)

                chosen, was_accepted = mh_accept(candidate, incumbent,
                                                 config.split_prior, rng)
                accepted += was_accepted
                tree = chosen.tree
                tree.bandwidth_tau = chosen.tau

                fit_j = _draw_leaves_and_fit(tree, chosen, r_j, X, sigma2,
                                             sigma_mu2, rng)
                state.forest.trees[j] = tree
                state.residual = r_j - fit_j
                state.tree_fit[j] = fit_j
            except Exception as exc:
                raise FitError(f"sweep {k}, tree {j}: {exc}") from exc

        state.forest.sigma2 = draw_sigma2(state.residual, sigma_prior, rng)
        state.sigma2_trace.append(state.forest.sigma2)

        total_fit = state.tree_fit.sum(axis=0)
        drift.append(float(np.abs(ys - total_fit - state.residual).max()))
        state.residual = ys - total_fit

        if k > config.burn_in:
            state.retained.append(state.forest.copy())

    iterations = config.sweeps * config.num_trees
    return FittedModel(
        config=config,
        num_features=p,
        is_dummy=is_dummy,
        feature_names=list(feature_names),
        y_center=float(y_center),
        y_scale=float(y_scale),
        bandwidth_grid=bw_grid,
        retained=state.retained,
        sigma2_trace=np.asarray(state.sigma2_trace),
        diagnostics={
            "residual_drift": drift,
            "mh_accept_rate": accepted / iterations,
            "bandwidth_search_rate": searched / iterations,
        },
    )


def predict(model: FittedModel, X_new: np.ndarray,
            aggregation: str = "posterior_mean") -> np.ndarray:
    """Predict from the retained forests on the original response scale.

    ``posterior_mean`` averages over retained forests; ``per_sweep`` returns
    the full (n_rows, n_retained) matrix whose row means equal the posterior
    mean exactly.
    """
    if not model.retained:
        raise ValueError("model has no retained forests")
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    if X_new.shape[1] != model.num_features:
        raise ValueError(
            f"feature mismatch: model was trained on {model.num_features} "
            f"features, got {X_new.shape[1]}")
    mat = np.empty((X_new.shape[0], len(model.retained)))
    for s, forest in enumerate(model.retained):
        mat[:, s] = forest_predict(forest, X_new)
    mat = model.y_center + model.y_scale * mat
    if aggregation == "per_sweep":
        return mat
    if aggregation == "posterior_mean":
        return mat.mean(axis=1)
    raise ValueError(f"unknown aggregation {aggregation!r}")
