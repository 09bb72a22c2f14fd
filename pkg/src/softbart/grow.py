"""Grow-from-root sampling of hard candidate trees.

Instead of perturbing an existing tree, a candidate is grown fresh from the
root: at each node the exact 2-leaf marginal likelihood of every admissible
(feature, cutpoint) split is computed with one cumulative sweep per feature
over presorted sample orderings, and the next action (split or stop) is
sampled with weights built from those likelihoods and the depth prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .likelihood import LOG_2PI, leaf_loglik_terms
from .trees import DecisionTree, GatingSpec, TreeNode


@dataclass(frozen=True)
class SplitPrior:
    """Depth penalty: a node at depth d splits with probability alpha*(1+d)^-beta."""

    alpha: float = 0.95
    beta: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0,1), got {self.alpha}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


@dataclass(frozen=True)
class GrowLimits:
    """Structural caps applied during growth."""

    max_depth: int = 10
    min_node_size: int = 5

    def __post_init__(self):
        if self.max_depth < 0 or self.min_node_size < 1:
            raise ValueError(f"invalid limits: {self}")


def split_prob(depth: int, prior: SplitPrior) -> float:
    """Prior probability that a node at the given depth splits."""
    if depth < 0:
        raise ValueError(f"depth must be >= 0, got {depth}")
    return prior.alpha * (1.0 + depth) ** (-prior.beta)


def log_tree_prior(tree: DecisionTree, prior: SplitPrior) -> float:
    """Depth-prior log probability of a tree's branch/leaf pattern.

    Split-variable and cutpoint factors are identical across trees grown over
    the same candidate grid and cancel in likelihood ratios, so only the
    split/stop probabilities enter.
    """
    total = 0.0
    for node in tree.nodes:
        p_d = split_prob(node.depth, prior)
        total += math.log(1.0 - p_d) if node.is_leaf else math.log(p_d)
    return total


@dataclass
class CutpointGrid:
    """Per-feature sorted candidate cutpoints, with dummy columns flagged."""

    cutpoints: list
    is_dummy: np.ndarray

    def __post_init__(self):
        self.cutpoints = [np.asarray(c, dtype=float) for c in self.cutpoints]
        self.is_dummy = np.asarray(self.is_dummy, dtype=bool)
        if len(self.cutpoints) != self.is_dummy.size:
            raise ValueError("cutpoints and is_dummy must cover the same features")
        for j, c in enumerate(self.cutpoints):
            if c.size > 1 and np.any(np.diff(c) <= 0):
                raise ValueError(f"cutpoints for feature {j} not strictly increasing")

    @property
    def num_features(self) -> int:
        return len(self.cutpoints)

    @property
    def dummy_vars(self) -> frozenset:
        return frozenset(int(j) for j in np.flatnonzero(self.is_dummy))

    @classmethod
    def build(cls, X: np.ndarray, is_dummy=None, max_cutpoints: int = 100) -> "CutpointGrid":
        """Midpoints between consecutive distinct values, thinned to a cap.

        Dummy columns get the single cutpoint 0.5. Ordinal grids larger than
        ``max_cutpoints`` are thinned by uniform index striding, which keeps
        them approximately quantile-spaced in the training data.
        """
        X = np.asarray(X, dtype=float)
        p = X.shape[1]
        if is_dummy is None:
            is_dummy = np.zeros(p, dtype=bool)
        is_dummy = np.asarray(is_dummy, dtype=bool)
        cutpoints = []
        for j in range(p):
            if is_dummy[j]:
                cutpoints.append(np.array([0.5]))
                continue
            vals = np.unique(X[:, j])
            mids = 0.5 * (vals[1:] + vals[:-1])
            if mids.size > max_cutpoints:
                keep = np.unique(np.linspace(0, mids.size - 1, max_cutpoints).round().astype(int))
                mids = mids[keep]
            cutpoints.append(mids)
        return cls(cutpoints=cutpoints, is_dummy=is_dummy)


@dataclass
class NodeWorkset:
    """Samples owned by one node, with per-feature presorted orderings.

    ``sorted_idx`` has shape (p, n_node); row j orders the node's samples by
    feature j. The rows are permutations of ``indices``. Partitioning a
    workset preserves each row's order (stable sift), so children never need
    to re-sort.
    """

    X: np.ndarray
    indices: np.ndarray
    sorted_idx: np.ndarray
    depth: int

    @property
    def size(self) -> int:
        return self.indices.size

    @classmethod
    def root(cls, X: np.ndarray) -> "NodeWorkset":
        X = np.asarray(X, dtype=float)
        return cls(X=X, indices=np.arange(X.shape[0]),
                   sorted_idx=np.argsort(X, axis=0, kind="stable").T, depth=0)

    def split(self, feature: int, cutpoint: float):
        """Partition into (left, right) worksets on x_feature < cutpoint."""
        go_left = self.X[self.indices, feature] < cutpoint
        n_left = int(go_left.sum())
        mask = self.X[self.sorted_idx, feature] < cutpoint
        left_sorted = self.sorted_idx[mask].reshape(self.sorted_idx.shape[0], n_left)
        right_sorted = self.sorted_idx[~mask].reshape(
            self.sorted_idx.shape[0], self.size - n_left)
        left = NodeWorkset(X=self.X, indices=self.indices[go_left],
                           sorted_idx=left_sorted, depth=self.depth + 1)
        right = NodeWorkset(X=self.X, indices=self.indices[~go_left],
                            sorted_idx=right_sorted, depth=self.depth + 1)
        return left, right


@dataclass
class SplitCandidates:
    """Flattened table of admissible splits with their log marginals."""

    feature: np.ndarray
    cutpoint: np.ndarray
    loglik: np.ndarray
    no_split_loglik: float

    def __len__(self) -> int:
        return self.loglik.size


def enumerate_split_loglik(work: NodeWorkset, grid: CutpointGrid, residuals: np.ndarray,
                           sigma2: float, sigma_mu2: float,
                           min_child: int = 1) -> SplitCandidates:
    """Exact 2-leaf log marginal of every admissible split at this node.

    Splits are admissible when both children hold at least ``min_child``
    samples. The per-cutpoint left statistics come from one cumulative
    (count, sum) sweep per feature over the presorted orderings. The no-split
    value is the 1-leaf log marginal of the node.
    """
    n_node = work.size
    if n_node == 0:
        raise ValueError("cannot enumerate splits of an empty node")

    p = grid.num_features
    cols = np.arange(p)[:, None]
    xs = work.X[work.sorted_idx, cols]            # (p, n_node), sorted per row
    rs = residuals[work.sorted_idx]
    cum = np.cumsum(rs, axis=1)
    s_total = float(cum[0, -1])
    yty = float(rs[0] @ rs[0])
    const = -0.5 * n_node * (LOG_2PI + math.log(sigma2)) - yty / (2.0 * sigma2)

    feats, cuts, n_lefts, s_lefts = [], [], [], []
    for j in range(p):
        cand = grid.cutpoints[j]
        k = np.searchsorted(xs[j], cand, side="left")   # count of x_j < c; ties right
        ok = (k >= min_child) & (k <= n_node - min_child)
        if not ok.any():
            continue
        k = k[ok]
        feats.append(np.full(k.size, j))
        cuts.append(cand[ok])
        n_lefts.append(k)
        s_lefts.append(cum[j, k - 1])

    no_split = const + float(leaf_loglik_terms(n_node, s_total, sigma2, sigma_mu2))
    if not feats:
        empty = np.empty(0)
        return SplitCandidates(feature=np.empty(0, dtype=int), cutpoint=empty,
                               loglik=empty, no_split_loglik=no_split)

    n_left = np.concatenate(n_lefts)
    s_left = np.concatenate(s_lefts)
    loglik = (const
              + leaf_loglik_terms(n_left, s_left, sigma2, sigma_mu2)
              + leaf_loglik_terms(n_node - n_left, s_total - s_left, sigma2, sigma_mu2))
    return SplitCandidates(feature=np.concatenate(feats).astype(int),
                           cutpoint=np.concatenate(cuts),
                           loglik=loglik, no_split_loglik=no_split)


def sample_split_or_stop(cands: SplitCandidates, depth: int, prior: SplitPrior,
                         rng: np.random.Generator):
    """Sample one action: a (feature, cutpoint) split, or None to stop.

    Each split carries weight exp(loglik); stopping carries weight
    |C| * (1 - p_d)/p_d * exp(no_split_loglik), with p_d the depth prior and
    |C| the admissible-candidate count. An empty table always stops.
    """
    n_cand = len(cands)
    if n_cand == 0:
        return None
    p_d = split_prob(depth, prior)
    log_stop = (cands.no_split_loglik + math.log(n_cand)
                + math.log1p(-p_d) - math.log(p_d))
    logits = np.append(cands.loglik, log_stop)
    logits -= logits.max()
    weights = np.exp(logits)
    probs = weights / weights.sum()
    pick = rng.choice(probs.size, p=probs)
    if pick == n_cand:
        return None
    return int(cands.feature[pick]), float(cands.cutpoint[pick])


def grow_from_root(X: np.ndarray, residuals: np.ndarray, grid: CutpointGrid,
                   split_prior: SplitPrior, sigma2: float, sigma_mu2: float,
                   limits: GrowLimits, rng: np.random.Generator,
                   gating: GatingSpec | None = None) -> DecisionTree:
    """Grow one hard candidate tree by recursive likelihood-weighted sampling.

    Leaf values are left unset; the caller draws them from their posterior
    afterwards. The returned tree has bandwidth 0.
    """
    X = np.asarray(X, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    if residuals.shape != (X.shape[0],):
        raise ValueError(f"residuals shape {residuals.shape} does not match n={X.shape[0]}")
    gating = gating if gating is not None else GatingSpec()

    nodes: list[TreeNode] = []

    def recurse(work: NodeWorkset) -> int:
        nid = len(nodes)
        node = TreeNode(node_id=nid, depth=work.depth)
        nodes.append(node)
        action = None
        if work.depth < limits.max_depth and work.size >= 2 * limits.min_node_size:
            cands = enumerate_split_loglik(work, grid, residuals, sigma2, sigma_mu2,
                                           min_child=limits.min_node_size)
            action = sample_split_or_stop(cands, work.depth, split_prior, rng)
        if action is None:
            return nid
        feature, cutpoint = action
        node.split_var = feature
        node.cutpoint = cutpoint
        left, right = work.split(feature, cutpoint)
        node.left = recurse(left)
        node.right = recurse(right)
        return nid

    recurse(NodeWorkset.root(X))
    return DecisionTree(nodes=nodes, root_id=0, bandwidth_tau=0.0,
                        gating=gating, dummy_vars=grid.dummy_vars)
