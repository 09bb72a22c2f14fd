"""Synthetic benchmark harness: accuracy and fit-time comparison of methods.

Each replication draws fresh train/test pairs from the 5-of-20 test
function, fits every requested method on the same training data, and scores
root-mean-square error against the noiseless truth on the test set. Timing
wraps the fit call only. Replication data and fit seeds derive
deterministically from (seed, rep, method), so results are reproducible on
one machine; wall-clock columns naturally vary run to run.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import FriedmanData, FriedmanSpec, gen_friedman
from .sampler import FitConfig, FittedModel, fit, predict

WORKERS_ENV = "SOFTBART_WORKERS"

_GATE_OF = {"hard": "hard", "soft-linear": "linear", "soft-sigmoid": "sigmoid"}
BASE_METHODS = ("truth", "mean") + tuple(_GATE_OF)

DEFAULT_METHODS = ("hard:40", "soft-linear:40", "soft-sigmoid:40",
                   "hard:80", "soft-linear:80", "soft-sigmoid:80")


@dataclass(frozen=True)
class BenchMethod:
    """One benchmark entrant: a label plus how to fit and predict it."""

    label: str
    base: str
    sweeps: int = 40
    burn_in: int = 15

    @classmethod
    def parse(cls, token: str) -> "BenchMethod":
        """Parse 'NAME' or 'NAME:SWEEPS', e.g. 'soft-linear:80'."""
        name, _, sweeps_part = token.partition(":")
        if name not in BASE_METHODS:
            raise ValueError(
                f"unknown method label {name!r}; expected one of {sorted(BASE_METHODS)}")
        sweeps = 40
        if sweeps_part:
            try:
                sweeps = int(sweeps_part)
            except ValueError:
                raise ValueError(f"bad sweep count in method token {token!r}") from None
            if sweeps < 1:
                raise ValueError(f"sweep count must be >= 1 in {token!r}")
        return cls(label=token, base=name, sweeps=sweeps,
                   burn_in=min(15, sweeps - 1))


@dataclass
class BenchSpec:
    """Full description of one benchmark run."""

    noise: str = "high"
    reps: int = 20
    n: int = 1000
    seed: int = 0
    methods: tuple = DEFAULT_METHODS
    num_trees: int = 50

    def __post_init__(self):
        self.methods = tuple(self.methods)
        if self.reps < 1 or self.n < 1:
            raise ValueError("reps and n must be >= 1")
        for token in self.methods:
            BenchMethod.parse(token)


@dataclass
class BenchRow:
    rep: int
    method: str
    rmse: float
    seconds: float


@dataclass
class BenchReport:
    """Per-replication rows plus the spec of the run that produced them."""

    spec: BenchSpec
    rows: list

    def rmse_matrix(self) -> dict:
        """Method label -> rmse array ordered by replication."""
        out = {}
        for label in self.spec.methods:
            vals = [r.rmse for r in self.rows if r.method == label]
            out[label] = np.asarray(vals)
        return out

    def mean_seconds(self) -> dict:
        return {label: float(np.mean([r.seconds for r in self.rows if r.method == label]))
                for label in self.spec.methods}

    def to_csv_text(self) -> str:
        lines = ["rep,method,rmse,seconds"]
        for r in self.rows:
            lines.append(f"{r.rep},{r.method},{r.rmse!r},{r.seconds!r}")
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        """Human-readable table: mean RMSE, mean seconds, time ratio vs first method."""
        means = self.rmse_matrix()
        secs = self.mean_seconds()
        base_label = self.spec.methods[0]
        base_time = secs[base_label]
        lines = [
            f"benchmark: noise={self.spec.noise} n={self.spec.n} "
            f"reps={self.spec.reps} trees={self.spec.num_trees} seed={self.spec.seed}",
            f"{'method':<18}{'mean RMSE':>12}{'mean sec':>12}{'time ratio':>12}",
        ]
        for label in self.spec.methods:
            ratio = secs[label] / base_time if base_time > 0 else math.nan
            lines.append(f"{label:<18}{means[label].mean():>12.4f}"
                         f"{secs[label]:>12.2f}{ratio:>12.2f}")
        return "\n".join(lines) + "\n"


def _derived_seed(*keys) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def rep_data(spec: BenchSpec, rep: int):
    """Deterministic train/test pair for one replication."""
    train = gen_friedman(FriedmanSpec(n=spec.n, noise=spec.noise,
                                      seed=_derived_seed(spec.seed, rep, 0)))
    test = gen_friedman(FriedmanSpec(n=spec.n, noise=spec.noise,
                                     seed=_derived_seed(spec.seed, rep, 1)))
    return train, test


def rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def run_method(method: BenchMethod, train: FriedmanData, test: FriedmanData,
               fit_seed: int, num_trees: int):
    """Fit one entrant; returns (test predictions, fit seconds)."""
    if method.base == "truth":
        start = time.perf_counter()
        preds = test.f.copy()
        return preds, time.perf_counter() - start
    if method.base == "mean":
        start = time.perf_counter()
        center = float(train.y.mean())
        seconds = time.perf_counter() - start
        return np.full(test.f.size, center), seconds
    config = FitConfig(num_trees=num_trees, sweeps=method.sweeps,
                       burn_in=method.burn_in, gate_family=_GATE_OF[method.base],
                       seed=fit_seed)
    start = time.perf_counter()
    model = fit(train.X, train.y, config)
    seconds = time.perf_counter() - start
    return predict(model, test.X), seconds


def _run_task(spec: BenchSpec, rep: int, method_index: int) -> BenchRow:
    method = BenchMethod.parse(spec.methods[method_index])
    train, test = rep_data(spec, rep)
    fit_seed = _derived_seed(spec.seed, rep, 2, method_index)
    preds, seconds = run_method(method, train, test, fit_seed, spec.num_trees)
    return BenchRow(rep=rep, method=method.label,
                    rmse=rmse(preds, test.f), seconds=seconds)


def run_bench(spec: BenchSpec, workers: int | None = None) -> BenchReport:
    """Run every (replication, method) cell and collect a report.

    ``workers`` defaults to the SOFTBART_WORKERS environment variable (or 1).
    Rows are ordered by (rep, method position) regardless of completion
    order. Note that concurrent fits share the CPU, which inflates measured
    wall-clock; keep workers at 1 when the timing columns matter.
    """
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    tasks = [(rep, mi) for rep in range(spec.reps)
             for mi in range(len(spec.methods))]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_task, [spec] * len(tasks),
                                 [t[0] for t in tasks], [t[1] for t in tasks]))
    else:
        rows = [_run_task(spec, rep, mi) for rep, mi in tasks]
    return BenchReport(spec=spec, rows=rows)
