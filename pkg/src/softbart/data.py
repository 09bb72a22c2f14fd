"""Dataset ingestion, preprocessing, synthetic benchmark data, model files.

CSV files are comma-separated with a mandatory header row, UTF-8, '.' decimal
separator. Categorical columns are expanded to full one-hot dummy blocks (one
column per level) so a single split can isolate any category. Models are
stored as versioned JSON documents; loading a saved model reproduces its
predictions bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .grow import GrowLimits, SplitPrior
from .likelihood import LeafPrior, SigmaPrior
from .sampler import BandwidthGrid, FitConfig, FittedModel
from .trees import DecisionTree, Forest, GatingSpec, TreeNode

MODEL_FORMAT_VERSION = 1

COLUMN_KINDS = ("ordinal", "categorical")


class DataError(ValueError):
    """Malformed input data or schema."""


class ModelFormatError(ValueError):
    """Model document missing, corrupted, or of an incompatible version."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = "ordinal"
    levels: tuple = ()

    def __post_init__(self):
        if self.kind not in COLUMN_KINDS:
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.levels:
                raise DataError(f"categorical column {self.name!r} needs levels")
            if len(set(self.levels)) != len(self.levels):
                raise DataError(f"column {self.name!r} has duplicate levels")


@dataclass(frozen=True)
class DatasetSchema:
    """Feature columns plus the single target column name."""

    columns: tuple
    target: str

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DataError("duplicate column names in schema")
        if not self.target:
            raise DataError("schema needs a target column name")
        if self.target in names:
            raise DataError(f"target {self.target!r} also listed as a feature column")

    @classmethod
    def all_ordinal(cls, names, target: str) -> "DatasetSchema":
        return cls(columns=tuple(ColumnSpec(n) for n in names), target=target)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        try:
            cols = tuple(
                ColumnSpec(name=c["name"], kind=c.get("kind", "ordinal"),
                           levels=tuple(c.get("levels", ())))
                for c in d["columns"])
            return cls(columns=cols, target=d["target"])
        except KeyError as exc:
            raise DataError(f"schema document missing field {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "columns": [
                {"name": c.name, "kind": c.kind,
                 **({"levels": list(c.levels)} if c.kind == "categorical" else {})}
                for c in self.columns
            ],
        }

    @classmethod
    def from_json_file(cls, path) -> "DatasetSchema":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise DataError(f"schema file {path} is not valid JSON: {exc}") from exc


@dataclass
class Dataset:
    """Raw columns per the schema; categorical cells stored as level codes."""

    X: np.ndarray
    y: np.ndarray | None
    schema: DatasetSchema


@dataclass
class ExpandedData:
    """Model-ready matrix after one-hot expansion of categorical columns."""

    X: np.ndarray
    y: np.ndarray | None
    feature_names: list
    is_dummy: np.ndarray


def load_csv(path, schema: DatasetSchema, require_target: bool = True) -> Dataset:
    """Read a CSV against a schema, reporting the row and column of bad cells.

    Rows are numbered from 1, excluding the header. Extra columns not named
    by the schema are ignored with a warning; missing schema columns are an
    error. The target may be absent when ``require_target`` is false.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        rows = list(reader)

    header = [h.strip() for h in header]
    col_pos = {name: i for i, name in enumerate(header)}
    wanted = [c.name for c in schema.columns] + [schema.target]
    extra = [h for h in header if h not in wanted]
    if extra:
        warnings.warn(f"{path}: ignoring unknown column(s) {extra}")

    missing = [c.name for c in schema.columns if c.name not in col_pos]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    has_target = schema.target in col_pos
    if require_target and not has_target:
        raise DataError(f"{path}: missing target column {schema.target!r}")
    if not rows:
        raise DataError(f"{path}: no data rows")

    n, p = len(rows), len(schema.columns)
    X = np.empty((n, p))
    y = np.empty(n) if has_target else None
    for i, row in enumerate(rows):
        for j, col in enumerate(schema.columns):
            cell = row[col_pos[col.name]].strip()
            if col.kind == "ordinal":
                try:
                    X[i, j] = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: cannot parse {cell!r} as a number "
                        f"(row {i + 1}, column {col.name!r})") from None
            else:
                try:
                    X[i, j] = col.levels.index(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: unknown level {cell!r} for column {col.name!r} "
                        f"(row {i + 1}); expected one of {list(col.levels)}") from None
        if has_target:
            cell = row[col_pos[schema.target]].strip()
            try:
                y[i] = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: cannot parse {cell!r} as a number "
                    f"(row {i + 1}, column {schema.target!r})") from None
    return Dataset(X=X, y=y, schema=schema)


def expand_dummies(dataset: Dataset) -> ExpandedData:
    """One-hot expand categorical columns; ordinal columns pass through.

    Every level gets its own indicator column (full encoding, not L-1), so
    one split can filter out any single category. Dummy columns are named
    ``<column>=<level>``.
    """
    blocks, names, dummy_flags = [], [], []
    for j, col in enumerate(dataset.schema.columns):
        raw = dataset.X[:, j]
        if col.kind == "ordinal":
            blocks.append(raw[:, None])
            names.append(col.name)
            dummy_flags.append(False)
        else:
            codes = raw.astype(int)
            block = np.zeros((raw.size, len(col.levels)))
            block[np.arange(raw.size), codes] = 1.0
            blocks.append(block)
            names.extend(f"{col.name}={lvl}" for lvl in col.levels)
            dummy_flags.extend([True] * len(col.levels))
    X = np.hstack(blocks) if blocks else np.empty((dataset.X.shape[0], 0))
    return ExpandedData(X=X, y=dataset.y, feature_names=names,
                        is_dummy=np.asarray(dummy_flags, dtype=bool))


@dataclass(frozen=True)
class FriedmanSpec:
    """Synthetic regression benchmark: 5 active features out of 20."""

    n: int
    noise: str = "high"
    seed: int = 0
    p: int = 20

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.noise not in ("high", "low"):
            raise ValueError(f"noise must be 'high' or 'low', got {self.noise!r}")
        if self.p < 5:
            raise ValueError("need at least the 5 active features")


@dataclass
class FriedmanData:
    X: np.ndarray
    y: np.ndarray
    f: np.ndarray   # noiseless function values, for RMSE against truth


def friedman_function(X: np.ndarray) -> np.ndarray:
    """10 sin(pi x1 x2) + 20 (x3 - 0.5)^2 + 10 x4 + 5 x5; other features inert."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return (10.0 * np.sin(np.pi * X[:, 0] * X[:, 1])
            + 20.0 * (X[:, 2] - 0.5) ** 2
            + 10.0 * X[:, 3] + 5.0 * X[:, 4])


def gen_friedman(spec: FriedmanSpec) -> FriedmanData:
    """Draw features i.i.d. Uniform(-2, 2) and add Gaussian noise to f(x).

    High noise uses variance equal to the sample variance of the generated
    f values (signal-to-noise ratio one); low noise uses unit variance.
    """
    rng = np.random.default_rng(spec.seed)
    X = rng.uniform(-2.0, 2.0, size=(spec.n, spec.p))
    f = friedman_function(X)
    sd = math.sqrt(float(np.var(f))) if spec.noise == "high" else 1.0
    y = f + rng.normal(0.0, sd, size=spec.n)
    return FriedmanData(X=X, y=y, f=f)


def atomic_write_text(path, text: str) -> None:
    """Write a file via a temp sibling and rename, so readers never see partial output."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _node_to_dict(node: TreeNode) -> dict:
    d = {"id": node.node_id, "depth": node.depth}
    if node.is_leaf:
        d["leaf_value"] = node.leaf_value
    else:
        d.update(split_var=node.split_var, cutpoint=node.cutpoint,
                 left=node.left, right=node.right)
    return d


def _node_from_dict(d: dict) -> TreeNode:
    return TreeNode(node_id=d["id"], depth=d["depth"],
                    split_var=d.get("split_var"), cutpoint=d.get("cutpoint"),
                    left=d.get("left"), right=d.get("right"),
                    leaf_value=d.get("leaf_value"))


def _config_to_dict(config: FitConfig) -> dict:
    return {
        "num_trees": config.num_trees,
        "sweeps": config.sweeps,
        "burn_in": config.burn_in,
        "gate_family": config.gate_family,
        "grid_percents": list(config.grid_percents),
        "seed": config.seed,
        "limits": {"max_depth": config.limits.max_depth,
                   "min_node_size": config.limits.min_node_size},
        "split_prior": {"alpha": config.split_prior.alpha,
                        "beta": config.split_prior.beta},
        "leaf_prior": (None if config.leaf_prior is None
                       else {"sigma_mu2": config.leaf_prior.sigma_mu2,
                             "mu_mu": config.leaf_prior.mu_mu}),
        "sigma_prior": (None if config.sigma_prior is None
                        else {"nu": config.sigma_prior.nu,
                              "lam": config.sigma_prior.lam}),
        "max_cutpoints": config.max_cutpoints,
        "bandwidth_selection": config.bandwidth_selection,
    }


def _config_from_dict(d: dict) -> FitConfig:
    return FitConfig(
        num_trees=d["num_trees"],
        sweeps=d["sweeps"],
        burn_in=d["burn_in"],
        gate_family=d["gate_family"],
        grid_percents=tuple(d["grid_percents"]),
        seed=d["seed"],
        limits=GrowLimits(**d["limits"]),
        split_prior=SplitPrior(**d["split_prior"]),
        leaf_prior=None if d["leaf_prior"] is None else LeafPrior(**d["leaf_prior"]),
        sigma_prior=None if d["sigma_prior"] is None else SigmaPrior(**d["sigma_prior"]),
        max_cutpoints=d["max_cutpoints"],
        bandwidth_selection=d["bandwidth_selection"],
    )


def model_to_dict(model: FittedModel) -> dict:
    """JSON-ready document for a fitted model."""
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "schema": model.schema_doc,
        "config": _config_to_dict(model.config),
        "num_features": model.num_features,
        "feature_names": list(model.feature_names),
        "is_dummy": [bool(b) for b in model.is_dummy],
        "y_center": model.y_center,
        "y_scale": model.y_scale,
        "bandwidth_grid": {
            "percents": model.bandwidth_grid.percents.tolist(),
            "sorted_features": [v.tolist() for v in model.bandwidth_grid.sorted_features],
        },
        "sigma2_trace": np.asarray(model.sigma2_trace).tolist(),
        "retained": [
            {
                "sigma2": forest.sigma2,
                "trees": [
                    {
                        "bandwidth_tau": tree.bandwidth_tau,
                        "nodes": [_node_to_dict(nd) for nd in tree.nodes],
                    }
                    for tree in forest.trees
                ],
            }
            for forest in model.retained
        ],
        "diagnostics": model.diagnostics,
    }


class _DocReader:
    """Dict access that reports the full path of a missing field."""

    def __init__(self, doc):
        self.doc = doc

    def get(self, *path):
        node = self.doc
        for i, key in enumerate(path):
            try:
                node = node[key]
            except (KeyError, IndexError, TypeError):
                dotted = ".".join(str(k) for k in path[: i + 1])
                raise ModelFormatError(f"model document missing field {dotted!r}") from None
        return node


def model_from_dict(doc: dict) -> FittedModel:
    reader = _DocReader(doc)
    version = reader.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"incompatible model format version {version!r}; "
            f"this build reads version {MODEL_FORMAT_VERSION}")

    config = _config_from_dict(reader.get("config"))
    is_dummy = np.asarray(reader.get("is_dummy"), dtype=bool)
    dummy_vars = frozenset(int(j) for j in np.flatnonzero(is_dummy))
    gating = GatingSpec(config.gate_family)

    forests = []
    for fi, fdoc in enumerate(reader.get("retained")):
        freader = _DocReader(fdoc)
        trees = []
        for ti, tdoc in enumerate(freader.get("trees")):
            treader = _DocReader(tdoc)
            tree = DecisionTree(
                nodes=[_node_from_dict(nd) for nd in treader.get("nodes")],
                root_id=0,
                bandwidth_tau=treader.get("bandwidth_tau"),
                gating=gating,
                dummy_vars=dummy_vars,
            )
            try:
                tree.validate()
            except ValueError as exc:
                raise ModelFormatError(
                    f"retained[{fi}].trees[{ti}] is malformed: {exc}") from exc
            trees.append(tree)
        forests.append(Forest(trees=trees, sigma2=freader.get("sigma2")))

    bw = reader.get("bandwidth_grid")
    grid = BandwidthGrid(
        percents=np.asarray(_DocReader(bw).get("percents"), dtype=float),
        sorted_features=[np.asarray(v, dtype=float)
                         for v in _DocReader(bw).get("sorted_features")],
    )
    return FittedModel(
        config=config,
        num_features=reader.get("num_features"),
        is_dummy=is_dummy,
        feature_names=list(reader.get("feature_names")),
        y_center=reader.get("y_center"),
        y_scale=reader.get("y_scale"),
        bandwidth_grid=grid,
        retained=forests,
        sigma2_trace=np.asarray(reader.get("sigma2_trace"), dtype=float),
        diagnostics=reader.get("diagnostics"),
        schema_doc=reader.get("schema"),
    )


def save_model(model: FittedModel, path) -> None:
    """Serialize a fitted model to a versioned JSON document (atomic write)."""
    atomic_write_text(path, json.dumps(model_to_dict(model)))


def load_model(path) -> FittedModel:
    """Load a model document, rejecting incompatible versions outright."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ModelFormatError(f"model file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file {path} is not valid JSON: {exc}") from None
    return model_from_dict(doc)
