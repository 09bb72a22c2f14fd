"""Binary regression trees with probabilistic (gated) routing at branches.

A tree routes a sample left at a branch with probability psi((c - x_j) / tau),
where c is the cutpoint, x_j the split feature and tau >= 0 the bandwidth.
tau = 0 (or the "hard" family) recovers the usual deterministic decision tree
with the tie rule "x >= c goes right". Leaves are enumerated depth-first,
left child first, everywhere a leaf-probability or leaf-value vector appears.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

GATE_FAMILIES = ("hard", "sigmoid", "linear")

# Open-interval clamp for the sigmoid family: finite bandwidths must never
# yield exactly deterministic routing, but expit saturates in float64.
_P_LO = np.nextafter(0.0, 1.0)
_P_HI = np.nextafter(1.0, 0.0)


class TreeStructureError(ValueError):
    """Raised when a tree violates its structural invariants."""


@dataclass(frozen=True)
class GatingSpec:
    """Gate family turning signed cutpoint distance into a left-probability.

    All families map u = (c - x) / tau to a value in [0, 1] that is
    non-increasing in x, so smaller x routes left with higher probability.
    """

    family: str = "sigmoid"

    def __post_init__(self):
        if self.family not in GATE_FAMILIES:
            raise ValueError(
                f"unknown gate family {self.family!r}; expected one of {GATE_FAMILIES}"
            )

    def left_prob_array(self, x: np.ndarray, cutpoint: float, tau: float) -> np.ndarray:
        """Vectorized left-routing probability for a column of feature values."""
        x = np.asarray(x, dtype=float)
        if tau < 0.0 or not np.isfinite(tau):
            raise ValueError(f"bandwidth must be finite and >= 0, got {tau}")
        if tau == 0.0 or self.family == "hard":
            return (x < cutpoint).astype(float)
        u = (cutpoint - x) / tau
        if self.family == "sigmoid":
            return np.clip(expit(u), _P_LO, _P_HI)
        return np.clip(0.5 * u + 0.5, 0.0, 1.0)

    def left_prob_grid(self, x: np.ndarray, cutpoint: float, taus: np.ndarray) -> np.ndarray:
        """Left-routing probabilities for one column over a bandwidth grid.

        Returns shape (len(taus), len(x)); rows with tau == 0 fall back to the
        hard indicator.
        """
        x = np.asarray(x, dtype=float)
        taus = np.asarray(taus, dtype=float)
        if np.any(taus < 0) or not np.all(np.isfinite(taus)):
            raise ValueError("bandwidths must be finite and >= 0")
        out = np.empty((taus.size, x.size))
        smooth = (taus > 0) & (self.family != "hard")
        if smooth.any():
            u = (cutpoint - x)[None, :] / taus[smooth, None]
            if self.family == "sigmoid":
                out[smooth] = np.clip(expit(u), _P_LO, _P_HI)
            else:
                out[smooth] = np.clip(0.5 * u + 0.5, 0.0, 1.0)
        if not smooth.all():
            out[~smooth] = (x < cutpoint).astype(float)
        return out


def gate_left_prob(x_j: float, cutpoint: float, tau: float, family: str = "sigmoid") -> float:
    """Probability that a sample with feature value ``x_j`` routes left.

    Returns psi((cutpoint - x_j) / tau) for the smooth families, so x_j below
    the cutpoint gives a left-probability above 0.5. With ``tau == 0`` or the
    hard family this is the indicator of ``x_j < cutpoint`` (ties go right).
    """
    if not (np.isfinite(x_j) and np.isfinite(cutpoint)):
        raise ValueError(f"non-finite gate inputs: x={x_j}, cutpoint={cutpoint}")
    spec = GatingSpec(family)
    return float(spec.left_prob_array(np.array([x_j]), cutpoint, tau)[0])


@dataclass
class TreeNode:
    """One node of a binary tree; a branch iff both child ids are set."""

    node_id: int
    depth: int
    split_var: int | None = None
    cutpoint: float | None = None
    left: int | None = None
    right: int | None = None
    leaf_value: float | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class DecisionTree:
    """Binary tree with one bandwidth shared by all of its branches.

    ``nodes`` is indexed by node id with the root at ``root_id``. Splits on
    features listed in ``dummy_vars`` (one-hot indicator columns) are always
    routed deterministically, whatever the tree bandwidth.
    """

    nodes: list[TreeNode]
    root_id: int = 0
    bandwidth_tau: float = 0.0
    gating: GatingSpec = field(default_factory=GatingSpec)
    dummy_vars: frozenset = field(default_factory=frozenset)

    @classmethod
    def single_leaf(cls, value: float | None = 0.0, gating: GatingSpec | None = None,
                    dummy_vars: frozenset = frozenset()) -> "DecisionTree":
        gating = gating if gating is not None else GatingSpec()
        return cls(nodes=[TreeNode(node_id=0, depth=0, leaf_value=value)],
                   gating=gating, dummy_vars=dummy_vars)

    def node(self, node_id: int) -> TreeNode:
        return self.nodes[node_id]

    def _dfs_ids(self) -> list[int]:
        order = []
        stack = [self.root_id]
        while stack:
            nid = stack.pop()
            order.append(nid)
            node = self.nodes[nid]
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)
        return order

    def leaf_ids(self) -> list[int]:
        """Leaf node ids in depth-first left-first order."""
        return [nid for nid in self._dfs_ids() if self.nodes[nid].is_leaf]

    def branch_ids(self) -> list[int]:
        return [nid for nid in self._dfs_ids() if not self.nodes[nid].is_leaf]

    @property
    def num_leaves(self) -> int:
        return len(self.leaf_ids())

    def leaf_values(self) -> np.ndarray:
        """Leaf values as a vector aligned with ``leaf_ids`` order."""
        vals = [self.nodes[nid].leaf_value for nid in self.leaf_ids()]
        if any(v is None for v in vals):
            raise ValueError("tree has unset leaf values")
        return np.asarray(vals, dtype=float)

    def set_leaf_values(self, values) -> None:
        ids = self.leaf_ids()
        values = np.asarray(values, dtype=float)
        if values.shape != (len(ids),):
            raise ValueError(f"expected {len(ids)} leaf values, got shape {values.shape}")
        for nid, v in zip(ids, values):
            self.nodes[nid].leaf_value = float(v)

    def splits_only_on_dummies(self) -> bool:
        branches = self.branch_ids()
        return bool(branches) and all(
            self.nodes[b].split_var in self.dummy_vars for b in branches
        )

    def copy(self) -> "DecisionTree":
        return DecisionTree(
            nodes=[replace(nd) for nd in self.nodes],
            root_id=self.root_id,
            bandwidth_tau=self.bandwidth_tau,
            gating=self.gating,
            dummy_vars=self.dummy_vars,
        )

    def validate(self) -> None:
        """Check structural invariants, raising TreeStructureError on failure."""
        n = len(self.nodes)
        ids = [nd.node_id for nd in self.nodes]
        if ids != list(range(n)):
            raise TreeStructureError("node ids must be dense 0..n-1 in list order")
        if not 0 <= self.root_id < n:
            raise TreeStructureError(f"root id {self.root_id} out of range")
        if self.bandwidth_tau < 0:
            raise TreeStructureError("bandwidth must be >= 0")
        seen = set()
        stack = [(self.root_id, 0)]
        while stack:
            nid, depth = stack.pop()
            if nid in seen:
                raise TreeStructureError(f"node {nid} reached twice (cycle or shared child)")
            seen.add(nid)
            node = self.nodes[nid]
            if node.depth != depth:
                raise TreeStructureError(
                    f"node {nid} depth {node.depth} != path depth {depth}")
            has_l, has_r = node.left is not None, node.right is not None
            if has_l != has_r:
                raise TreeStructureError(f"node {nid} has exactly one child")
            if has_l:
                if node.split_var is None or node.cutpoint is None:
                    raise TreeStructureError(f"branch {nid} missing split_var/cutpoint")
                for child in (node.left, node.right):
                    if not 0 <= child < n:
                        raise TreeStructureError(f"child id {child} out of range")
                stack.append((node.right, depth + 1))
                stack.append((node.left, depth + 1))
        if seen != set(range(n)):
            raise TreeStructureError("tree is not connected: unreachable nodes present")
        if self.nodes[self.root_id].depth != 0:
            raise TreeStructureError("root depth must be 0")


@dataclass
class Forest:
    """An ordered ensemble of trees plus the current noise variance."""

    trees: list[DecisionTree]
    sigma2: float

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be > 0, got {self.sigma2}")

    def copy(self) -> "Forest":
        return Forest(trees=[t.copy() for t in self.trees], sigma2=self.sigma2)


def hard_leaf_index(tree: DecisionTree, X: np.ndarray) -> np.ndarray:
    """Deterministic traversal: leaf slot (DFS-left order) for each row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    slot_of = {nid: k for k, nid in enumerate(tree.leaf_ids())}
    out = np.empty(X.shape[0], dtype=np.intp)
    stack = [(tree.root_id, np.arange(X.shape[0]))]
    while stack:
        nid, rows = stack.pop()
        node = tree.nodes[nid]
        if node.is_leaf:
            out[rows] = slot_of[nid]
            continue
        go_left = X[rows, node.split_var] < node.cutpoint
        stack.append((node.left, rows[go_left]))
        stack.append((node.right, rows[~go_left]))
    return out


def leaf_prob_cube(tree: DecisionTree, X: np.ndarray, taus) -> np.ndarray:
    """Leaf-probability tensor of shape (len(taus), n, B) over the tau grid.

    Each (t, i, :) slice is the probability vector of sample i over the
    tree's leaves when the whole tree uses bandwidth ``taus[t]``. Dummy-split
    branches route deterministically at every bandwidth.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    taus = np.asarray(taus, dtype=float)
    n = X.shape[0]
    leaf_order = tree.leaf_ids()
    slot_of = {nid: k for k, nid in enumerate(leaf_order)}
    out = np.zeros((taus.size, n, len(leaf_order)))

    stack = [(tree.root_id, np.ones((taus.size, n)))]
    while stack:
        nid, prob = stack.pop()
        node = tree.nodes[nid]
        if node.is_leaf:
            out[:, :, slot_of[nid]] = prob
            continue
        col = X[:, node.split_var]
        if node.split_var in tree.dummy_vars:
            hard = (col < node.cutpoint).astype(float)
            left = np.broadcast_to(hard, (taus.size, n))
        else:
            left = tree.gating.left_prob_grid(col, node.cutpoint, taus)
        stack.append((node.left, prob * left))
        stack.append((node.right, prob * (1.0 - left)))
    return out


def leaf_prob_matrix(tree: DecisionTree, X: np.ndarray, tau: float | None = None) -> np.ndarray:
    """Per-sample leaf probabilities, shape (n, B), at the tree's bandwidth.

    Pass ``tau`` to evaluate the same structure at a different bandwidth
    (used by the bandwidth search).
    """
    tau = tree.bandwidth_tau if tau is None else tau
    return leaf_prob_cube(tree, X, [tau])[0]


def leaf_probabilities(tree: DecisionTree, x) -> np.ndarray:
    """Probability of a single sample reaching each leaf (DFS-left order).

    The entries are products of gate probabilities along each root-to-leaf
    path and sum to one; at bandwidth 0 the vector is one-hot and matches
    deterministic traversal.
    """
    tree.validate()
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"expected a single feature vector, got shape {x.shape}")
    for nid in tree.branch_ids():
        if tree.nodes[nid].split_var >= x.size:
            raise ValueError(
                f"tree splits on feature {tree.nodes[nid].split_var} "
                f"but x has only {x.size} features")
    return leaf_prob_matrix(tree, x[None, :])[0]


def tree_predict(tree: DecisionTree, X: np.ndarray) -> np.ndarray:
    """Soft prediction of one tree: phi-weighted sum of its leaf values."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    values = tree.leaf_values()
    if tree.bandwidth_tau == 0.0 or tree.gating.family == "hard" or len(tree.nodes) == 1:
        return values[hard_leaf_index(tree, X)]
    return leaf_prob_matrix(tree, X) @ values


def forest_predict(forest: Forest, X: np.ndarray) -> np.ndarray:
    """Sum of per-tree soft predictions over the ensemble."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.zeros(X.shape[0])
    for tree in forest.trees:
        out += tree_predict(tree, X)
    return out


def predict_single(forest: Forest, x) -> float:
    """Ensemble prediction for one feature vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"expected a single feature vector, got shape {x.shape}")
    for tree in forest.trees:
        for nid in tree.branch_ids():
            if tree.nodes[nid].split_var >= x.size:
                raise ValueError(
                    f"tree splits on feature {tree.nodes[nid].split_var} "
                    f"but x has only {x.size} features")
    return float(forest_predict(forest, x[None, :])[0])
