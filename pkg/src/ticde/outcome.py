"""Cross-fitted conditional-outcome estimation with a per-arm model contract.

Outcome models are deliberately two-headed: one regressor per treatment arm,
both over the covariates, so the treatment cannot be ignored even when it is
perfectly recoverable from the covariates.  Externally computed predictions
can be ingested through a small CSV contract instead of fitting in-process.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from sklearn.ensemble import HistGradientBoostingRegressor
from sklearn.linear_model import LinearRegression, Ridge
from sklearn.neighbors import KNeighborsRegressor
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .core import CrossFitPlan, Dataset, EtaPair, validate_dataset, validate_plan
from .errors import (
    ConfigInvalid,
    DegenerateFold,
    DuplicateId,
    FitFailure,
    LengthMismatch,
    MissingId,
    NonFinite,
    SchemaError,
)

QHAT_COLUMNS = ("id", "q0", "q1")
QHAT_FOLD_COLUMN = "fold"

# Callback used by the oracle kind: maps a dataset to the (q0, q1) arrays.
OracleFn = Callable[[Dataset], tuple[np.ndarray, np.ndarray]]


class OutcomeKind(str, Enum):
    PER_ARM_RIDGE = "per_arm_ridge"
    PER_ARM_KNN = "per_arm_knn"
    PER_ARM_GRADIENT_BOOST = "per_arm_gradient_boost"
    ORACLE = "oracle"


@dataclass(frozen=True)
class OutcomeModelSpec:
    """Choice of per-arm outcome model plus its hyperparameters.

    ``replicates`` refits each arm model with shifted seeds and averages the
    predictions; it only matters for stochastic learners.  The ``oracle``
    kind bypasses fitting entirely via a callback, which is how simulation
    truth (optionally corrupted) is plugged into the pipeline.
    """

    kind: OutcomeKind = OutcomeKind.PER_ARM_GRADIENT_BOOST
    ridge_lambda: float = 1.0
    knn_k: int = 5
    gb_trees: int = 200
    gb_depth: int | None = 3
    gb_learning_rate: float = 0.1
    replicates: int = 1
    seed: int = 0
    oracle: OracleFn | None = None
    # Declarative corruption for oracle specs inside grid configs, resolved
    # by the harness (which owns the simulation truth) into a callback.
    oracle_noise_sd: float = 0.0
    oracle_offset_q0: float = 0.0
    oracle_offset_q1: float = 0.0

    def validate(self) -> None:
        if self.kind is OutcomeKind.PER_ARM_RIDGE and self.ridge_lambda < 0:
            raise ConfigInvalid(f"ridge penalty must be >= 0, got {self.ridge_lambda}")
        if self.kind is OutcomeKind.PER_ARM_KNN and self.knn_k < 1:
            raise ConfigInvalid(f"neighbor count must be >= 1, got {self.knn_k}")
        if self.kind is OutcomeKind.PER_ARM_GRADIENT_BOOST:
            if self.gb_trees < 1:
                raise ConfigInvalid(f"tree count must be >= 1, got {self.gb_trees}")
            if self.gb_learning_rate <= 0:
                raise ConfigInvalid(
                    f"learning rate must be > 0, got {self.gb_learning_rate}"
                )
            if self.gb_depth is not None and self.gb_depth < 1:
                raise ConfigInvalid(f"tree depth must be >= 1, got {self.gb_depth}")
        if self.replicates < 1:
            raise ConfigInvalid(f"replicates must be >= 1, got {self.replicates}")
        if self.oracle_noise_sd < 0:
            raise ConfigInvalid("oracle noise sd must be >= 0")

    @classmethod
    def ridge(cls, ridge_lambda: float = 1.0, **kw) -> "OutcomeModelSpec":
        return cls(kind=OutcomeKind.PER_ARM_RIDGE, ridge_lambda=ridge_lambda, **kw)

    @classmethod
    def knn(cls, knn_k: int = 5, **kw) -> "OutcomeModelSpec":
        return cls(kind=OutcomeKind.PER_ARM_KNN, knn_k=knn_k, **kw)

    @classmethod
    def gradient_boost(cls, **kw) -> "OutcomeModelSpec":
        return cls(kind=OutcomeKind.PER_ARM_GRADIENT_BOOST, **kw)

    @classmethod
    def oracle_spec(cls, oracle: OracleFn | None = None, **kw) -> "OutcomeModelSpec":
        return cls(kind=OutcomeKind.ORACLE, oracle=oracle, **kw)


class Provenance(str, Enum):
    CROSS_FITTED = "cross_fitted"
    INGESTED = "ingested"


@dataclass(frozen=True)
class QHatTable:
    """Per-unit (q0, q1) predictions aligned with a dataset's unit order."""

    q0: np.ndarray
    q1: np.ndarray
    provenance: Provenance
    fold_of_origin: np.ndarray | None = None

    def __post_init__(self):
        q0 = np.array(self.q0, dtype=np.float64)
        q1 = np.array(self.q1, dtype=np.float64)
        if q0.shape != q1.shape or q0.ndim != 1:
            raise LengthMismatch(
                f"q0 and q1 must be aligned vectors, got {q0.shape} and {q1.shape}"
            )
        if not (np.all(np.isfinite(q0)) and np.all(np.isfinite(q1))):
            raise NonFinite("outcome predictions must be finite")
        q0.setflags(write=False)
        q1.setflags(write=False)
        object.__setattr__(self, "q0", q0)
        object.__setattr__(self, "q1", q1)
        if self.fold_of_origin is not None:
            fold = np.array(self.fold_of_origin, dtype=np.int32)
            if fold.shape != q0.shape:
                raise LengthMismatch("fold_of_origin misaligned with predictions")
            fold.setflags(write=False)
            object.__setattr__(self, "fold_of_origin", fold)

    @property
    def n(self) -> int:
        return len(self.q0)

    def eta(self, i: int) -> EtaPair:
        return EtaPair(q0=float(self.q0[i]), q1=float(self.q1[i]))

    def eta_matrix(self) -> np.ndarray:
        return np.column_stack([self.q0, self.q1])


class _MeanRegressor:
    """Constant predictor used when there are no covariates (d == 0)."""

    def fit(self, X, y):
        self.mean_ = float(np.mean(y))
        return self

    def predict(self, X):
        return np.full(len(X), self.mean_)


def _make_regressor(spec: OutcomeModelSpec, d: int, seed: int):
    if d == 0:
        return _MeanRegressor()
    if spec.kind is OutcomeKind.PER_ARM_RIDGE:
        # Covariates are standardized on the training split so the penalty
        # is scale-free; lambda == 0 falls back to plain least squares.
        if spec.ridge_lambda == 0:
            model = LinearRegression()
        else:
            model = Ridge(alpha=spec.ridge_lambda, solver="svd")
        return make_pipeline(StandardScaler(), model)
    if spec.kind is OutcomeKind.PER_ARM_KNN:
        return KNeighborsRegressor(n_neighbors=spec.knn_k)
    if spec.kind is OutcomeKind.PER_ARM_GRADIENT_BOOST:
        return HistGradientBoostingRegressor(
            max_iter=spec.gb_trees,
            max_depth=spec.gb_depth,
            learning_rate=spec.gb_learning_rate,
            early_stopping=False,
            random_state=seed,
        )
    raise ConfigInvalid(f"no regressor for kind {spec.kind}")


def _fit_arm(spec: OutcomeModelSpec, x_train: np.ndarray, y_train: np.ndarray):
    """Fit ``replicates`` copies of the arm model; predictions get averaged."""
    models = []
    for r in range(spec.replicates):
        model = _make_regressor(spec, x_train.shape[1], spec.seed + r)
        try:
            model.fit(x_train, y_train)
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise FitFailure(f"{spec.kind.value} fit failed: {exc}") from exc
        models.append(model)
    return models


def _predict_arm(models, x_query: np.ndarray) -> np.ndarray:
    preds = np.zeros(len(x_query))
    for model in models:
        try:
            preds += model.predict(x_query)
        except (ValueError, ArithmeticError) as exc:
            raise FitFailure(f"prediction failed: {exc}") from exc
    return preds / len(models)


def fit_crossfold_models(
    dataset: Dataset, plan: CrossFitPlan, spec: OutcomeModelSpec
) -> list[dict[int, list]]:
    """Fit the per-arm models for every fold; returns fold -> arm -> models."""
    fitted = []
    for j in range(plan.k):
        train = plan.train_indices(j)
        arm_models: dict[int, list] = {}
        for arm in (0, 1):
            sel = train[dataset.a[train] == arm]
            if sel.size == 0:
                raise DegenerateFold(
                    f"training split for fold {j} has no arm-{arm} units"
                )
            arm_models[arm] = _fit_arm(spec, dataset.x[sel], dataset.y[sel])
        fitted.append(arm_models)
    return fitted


def predict_crossfit(
    dataset: Dataset, plan: CrossFitPlan, fitted: list[dict[int, list]]
) -> tuple[np.ndarray, np.ndarray]:
    """Predict every unit from the models of its own fold."""
    q0 = np.empty(dataset.n)
    q1 = np.empty(dataset.n)
    for j in range(plan.k):
        fold = plan.fold_indices(j)
        q0[fold] = _predict_arm(fitted[j][0], dataset.x[fold])
        q1[fold] = _predict_arm(fitted[j][1], dataset.x[fold])
    return q0, q1


def fit_crossfit_q(
    dataset: Dataset, plan: CrossFitPlan, spec: OutcomeModelSpec
) -> QHatTable:
    """Cross-fitted per-unit (q0, q1): fold j is predicted by models trained
    on the other folds only."""
    validate_dataset(dataset)
    validate_plan(plan, dataset)
    spec.validate()
    if spec.kind is OutcomeKind.ORACLE:
        if spec.oracle is None:
            raise ConfigInvalid("oracle outcome spec requires a callback")
        q0, q1 = spec.oracle(dataset)
        q0 = np.asarray(q0, dtype=float)
        q1 = np.asarray(q1, dtype=float)
        if q0.shape != (dataset.n,) or q1.shape != (dataset.n,):
            raise LengthMismatch("oracle callback returned misaligned predictions")
        return QHatTable(
            q0=q0,
            q1=q1,
            provenance=Provenance.CROSS_FITTED,
            fold_of_origin=plan.assignment,
        )
    fitted = fit_crossfold_models(dataset, plan, spec)
    q0, q1 = predict_crossfit(dataset, plan, fitted)
    return QHatTable(
        q0=q0,
        q1=q1,
        provenance=Provenance.CROSS_FITTED,
        fold_of_origin=plan.assignment,
    )


def ingest_qhat(dataset: Dataset, path) -> QHatTable:
    """Load externally computed predictions, joined against dataset ids.

    The file must carry header ``id,q0,q1`` (optionally ``,fold``) and
    exactly one row per dataset id; unknown ids are rejected.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header not in (
            list(QHAT_COLUMNS),
            list(QHAT_COLUMNS) + [QHAT_FOLD_COLUMN],
        ):
            raise SchemaError(
                f"{path}: bad header {header!r}, expected id,q0,q1[,fold]"
            )
        has_fold = len(header) == 4
        rows: dict[str, tuple[float, float, int | None]] = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SchemaError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            if any(f == "" for f in row):
                raise SchemaError(f"{path}:{lineno}: missing field")
            uid = row[0]
            if uid in rows:
                raise DuplicateId(f"{path}:{lineno}: duplicate id {uid!r}")
            try:
                q0 = float(row[1])
                q1 = float(row[2])
                fold = int(row[3]) if has_fold else None
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
            if not (math.isfinite(q0) and math.isfinite(q1)):
                raise NonFinite(
                    f"{path}:{lineno}: prediction for id {uid!r} is not finite"
                )
            rows[uid] = (q0, q1, fold)
    known = set(dataset.ids)
    unknown = [uid for uid in rows if uid not in known]
    if unknown:
        raise SchemaError(f"{path}: id {unknown[0]!r} does not appear in the dataset")
    missing = [uid for uid in dataset.ids if uid not in rows]
    if missing:
        raise MissingId(f"{path}: no prediction row for id {missing[0]!r}")
    q0 = np.array([rows[uid][0] for uid in dataset.ids])
    q1 = np.array([rows[uid][1] for uid in dataset.ids])
    fold = None
    if has_fold:
        fold = np.array([rows[uid][2] for uid in dataset.ids], dtype=np.int32)
    return QHatTable(q0=q0, q1=q1, provenance=Provenance.INGESTED, fold_of_origin=fold)


def write_qhat_csv(
    dataset: Dataset, table: QHatTable, path
) -> None:
    if table.n != dataset.n:
        raise LengthMismatch(
            f"table has {table.n} rows, dataset has {dataset.n} units"
        )
    has_fold = table.fold_of_origin is not None
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(QHAT_COLUMNS) + ([QHAT_FOLD_COLUMN] if has_fold else []))
        for i in range(dataset.n):
            row = [dataset.ids[i], repr(float(table.q0[i])), repr(float(table.q1[i]))]
            if has_fold:
                row.append(int(table.fold_of_origin[i]))
            writer.writerow(row)


def q_loss(table: QHatTable, dataset: Dataset) -> float:
    """Mean squared error of the factual-arm prediction against the outcome."""
    if table.n != dataset.n:
        raise LengthMismatch(
            f"table has {table.n} rows, dataset has {dataset.n} units"
        )
    factual = np.where(dataset.a == 1, table.q1, table.q0)
    return float(np.mean((dataset.y - factual) ** 2))


def oracle_from_truth(
    true_q0: np.ndarray,
    true_q1: np.ndarray,
    noise_sd: float = 0.0,
    offset_q0: float = 0.0,
    offset_q1: float = 0.0,
    seed: int = 0,
) -> OracleFn:
    """Build an oracle callback from known truth, optionally corrupted.

    ``noise_sd`` adds independent per-unit gaussian error to each head,
    which degrades the representation; constant offsets shift a head
    without destroying it.
    """
    true_q0 = np.asarray(true_q0, dtype=float)
    true_q1 = np.asarray(true_q1, dtype=float)

    def callback(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
        if len(true_q0) != dataset.n:
            raise LengthMismatch("oracle truth misaligned with dataset")
        q0 = true_q0 + offset_q0
        q1 = true_q1 + offset_q1
        if noise_sd > 0:
            rng = np.random.default_rng(seed)
            q0 = q0 + noise_sd * rng.standard_normal(dataset.n)
            q1 = q1 + noise_sd * rng.standard_normal(dataset.n)
        return q0, q1

    return callback
