"""Shared domain types: datasets, cross-fitting plans, and effect estimates."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ArmTooSmall,
    ConfigInvalid,
    EmptyDataset,
    NonFinite,
    RaggedCovariates,
    SchemaError,
    SingleArm,
)

DATASET_FIXED_COLUMNS = ("id", "a", "y")


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Unit:
    """One observation: opaque id, binary treatment, real outcome, covariates."""

    id: str
    a: int
    y: float
    x: tuple[float, ...] = ()


@dataclass(frozen=True)
class EtaPair:
    """Two-dimensional outcome representation (prediction under each arm)."""

    q0: float
    q1: float

    def __post_init__(self):
        if not (math.isfinite(self.q0) and math.isfinite(self.q1)):
            raise NonFinite(f"eta pair must be finite, got ({self.q0}, {self.q1})")

    def as_array(self) -> np.ndarray:
        return np.array([self.q0, self.q1], dtype=float)


@dataclass(frozen=True)
class Dataset:
    """Immutable column-oriented sample of (id, a, y, x) rows.

    ``x`` has shape (n, d) with d >= 0; d may be zero when outcome
    predictions are supplied externally.
    """

    ids: tuple[str, ...]
    a: np.ndarray
    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        a = _frozen_array(self.a, np.int8)
        y = _frozen_array(self.y, np.float64)
        x = np.array(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(len(a), -1)
        if x.ndim != 2:
            raise SchemaError(f"covariates must be 2-dimensional, got ndim={x.ndim}")
        x.setflags(write=False)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        if not (len(self.ids) == len(a) == len(y) == x.shape[0]):
            raise SchemaError(
                "misaligned columns: "
                f"{len(self.ids)} ids, {len(a)} treatments, {len(y)} outcomes, "
                f"{x.shape[0]} covariate rows"
            )

    @classmethod
    def from_units(cls, units: Sequence[Unit]) -> "Dataset":
        units = list(units)
        if units:
            d = len(units[0].x)
            for u in units:
                if len(u.x) != d:
                    raise RaggedCovariates(
                        f"unit {u.id!r} has {len(u.x)} covariates, expected {d}"
                    )
        x = np.array([u.x for u in units], dtype=float).reshape(len(units), -1)
        return cls(
            ids=tuple(u.id for u in units),
            a=np.array([u.a for u in units]),
            y=np.array([u.y for u in units]),
            x=x,
        )

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def n1(self) -> int:
        return int(np.sum(self.a == 1))

    @property
    def n0(self) -> int:
        return int(np.sum(self.a == 0))

    @property
    def units(self) -> list[Unit]:
        return [
            Unit(id=i, a=int(a), y=float(y), x=tuple(row))
            for i, a, y, row in zip(self.ids, self.a, self.y, self.x)
        ]

    def treated_indices(self) -> np.ndarray:
        return np.flatnonzero(self.a == 1)

    def control_indices(self) -> np.ndarray:
        return np.flatnonzero(self.a == 0)


def validate_dataset(dataset: Dataset) -> None:
    """Raise the first violated dataset invariant, or return None.

    Checks, in order: non-emptiness, presence of both arms, finiteness of
    outcomes and covariates, and the binary treatment domain.
    """
    if dataset.n == 0:
        raise EmptyDataset("dataset has no units")
    n1 = dataset.n1
    bad = np.flatnonzero((dataset.a != 0) & (dataset.a != 1))
    if bad.size:
        raise SchemaError(
            f"unit {dataset.ids[bad[0]]!r} has treatment {dataset.a[bad[0]]}, must be 0 or 1"
        )
    if n1 == 0 or n1 == dataset.n:
        raise SingleArm(
            f"both arms required, got {n1} treated of {dataset.n} units"
        )
    if not np.all(np.isfinite(dataset.y)):
        i = int(np.flatnonzero(~np.isfinite(dataset.y))[0])
        raise NonFinite(f"outcome for unit {dataset.ids[i]!r} is not finite")
    if dataset.d and not np.all(np.isfinite(dataset.x)):
        i = int(np.flatnonzero(~np.isfinite(dataset.x).all(axis=1))[0])
        raise NonFinite(f"covariates for unit {dataset.ids[i]!r} are not finite")


@dataclass(frozen=True)
class CrossFitPlan:
    """Assignment of every unit to exactly one of k folds."""

    k: int
    assignment: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "assignment", _frozen_array(self.assignment, np.int32)
        )

    @property
    def n(self) -> int:
        return len(self.assignment)

    def fold_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)


def make_folds(dataset: Dataset, k: int, seed: int) -> CrossFitPlan:
    """Build a treatment-stratified k-fold plan, deterministic in ``seed``.

    Each arm is shuffled and dealt round-robin (treated ascending over the
    folds, controls descending, which balances fold sizes), so every fold
    holds both arms and the per-fold treated count is within one unit of
    exact proportionality.
    """
    if k < 2:
        raise ConfigInvalid(f"fold count must be >= 2, got {k}")
    if dataset.n == 0:
        raise EmptyDataset("dataset has no units")
    # Arm sizes are checked before full validation so an absent arm is
    # reported as the more specific ArmTooSmall here.
    treated = dataset.treated_indices()
    control = dataset.control_indices()
    if len(treated) < k:
        raise ArmTooSmall(f"treated arm has {len(treated)} units, need >= {k}")
    if len(control) < k:
        raise ArmTooSmall(f"control arm has {len(control)} units, need >= {k}")
    validate_dataset(dataset)
    rng = np.random.default_rng(seed)
    assignment = np.empty(dataset.n, dtype=np.int32)
    tperm = rng.permutation(treated)
    cperm = rng.permutation(control)
    assignment[tperm] = np.arange(len(tperm)) % k
    assignment[cperm] = (k - 1) - (np.arange(len(cperm)) % k)
    return CrossFitPlan(k=k, assignment=assignment)


def validate_plan(plan: CrossFitPlan, dataset: Dataset) -> None:
    """Check that the plan partitions the dataset into usable folds."""
    if plan.n != dataset.n:
        raise SchemaError(
            f"plan covers {plan.n} units, dataset has {dataset.n}"
        )
    if plan.assignment.min(initial=0) < 0 or plan.assignment.max(initial=0) >= plan.k:
        raise SchemaError("fold indices out of range")
    for j in range(plan.k):
        if plan.fold_indices(j).size == 0:
            raise SchemaError(f"fold {j} is empty")


class EstimatorKind(str, Enum):
    UNADJUSTED = "unadjusted"
    OUTCOME_ONLY = "outcome_only"
    TI_AIPW_ATT = "ti_aipw_att"
    ATE_AIPW = "ate_aipw"
    ATE_IPTW = "ate_iptw"


@dataclass(frozen=True)
class EffectEstimate:
    """Point estimate with normal confidence interval and per-unit scores.

    ``influence`` is empty for estimators without an influence-style score
    (unadjusted and outcome-only).
    """

    kind: EstimatorKind
    tau: float
    se: float
    ci_low: float
    ci_high: float
    alpha: float
    p_hat: float
    n: int
    n1: int
    influence: np.ndarray = field(default_factory=lambda: np.empty(0))
    clipped_fraction: float | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "influence", _frozen_array(self.influence, np.float64)
        )

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind.value,
            "tau": self.tau,
            "se": self.se,
            "ci": [self.ci_low, self.ci_high],
            "alpha": self.alpha,
            "n": self.n,
            "n1": self.n1,
            "p_hat": self.p_hat,
            "clipped_fraction": self.clipped_fraction,
        }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


# ---------------------------------------------------------------------------
# Dataset CSV schema: header id,a,y,x0,...,x{d-1}
# ---------------------------------------------------------------------------

def dataset_header(d: int) -> list[str]:
    return list(DATASET_FIXED_COLUMNS) + [f"x{j}" for j in range(d)]


def write_dataset_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(dataset_header(dataset.d))
        for i in range(dataset.n):
            row = [dataset.ids[i], int(dataset.a[i]), repr(float(dataset.y[i]))]
            row.extend(repr(float(v)) for v in dataset.x[i])
            writer.writerow(row)


def read_dataset_csv(path) -> Dataset:
    """Parse the dataset CSV schema; rejects malformed headers and rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        d = len(header) - len(DATASET_FIXED_COLUMNS)
        if d < 0 or header != dataset_header(d):
            raise SchemaError(
                f"{path}: bad header {header!r}, expected id,a,y,x0,...,x{{d-1}}"
            )
        ids: list[str] = []
        a: list[int] = []
        y: list[float] = []
        x: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SchemaError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            if any(f == "" for f in row):
                raise SchemaError(f"{path}:{lineno}: missing field")
            ids.append(row[0])
            if row[1] not in ("0", "1"):
                raise SchemaError(
                    f"{path}:{lineno}: treatment must be 0 or 1, got {row[1]!r}"
                )
            a.append(int(row[1]))
            try:
                y.append(float(row[2]))
                x.append([float(v) for v in row[3:]])
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    return Dataset(
        ids=tuple(ids),
        a=np.array(a),
        y=np.array(y),
        x=np.array(x, dtype=float).reshape(len(ids), d),
    )
