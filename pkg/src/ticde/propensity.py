"""Nonparametric treatment-probability estimation on the 2-D outcome
representation, cross-fitted and clipped away from {0, 1}.

A diagnostic mode fits the same estimators on the raw covariates instead;
when treatment is covariate-determined that mode clips most units, which is
how an apparent overlap violation is made visible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from sklearn.linear_model import LogisticRegression

from .core import CrossFitPlan, Dataset, EtaPair, validate_dataset, validate_plan
from .errors import (
    ConfigInvalid,
    DegenerateFold,
    KTooLarge,
    LengthMismatch,
    SingularFit,
)
from .outcome import QHatTable

_QUERY_CHUNK = 512
_GP_NOISE_GRID = (0.0, 0.02, 0.05, 0.1, 0.2)


class PropensityKind(str, Enum):
    KNN = "knn"
    KERNEL_REGRESSION = "kernel_regression"
    LOGISTIC = "logistic"
    GP_DOT_PRODUCT_WHITE = "gp_dot_product_white"
    ORACLE = "oracle"


@dataclass(frozen=True)
class PropensitySpec:
    """Classifier choice, its hyperparameters, and the overlap clip level.

    Defaults: Gaussian-kernel regression with a Silverman-style bandwidth on
    standardized coordinates, clipping to [0.01, 0.99].  ``logistic_c=None``
    disables regularization, in which case perfectly separable data is
    reported as ``SingularFit`` rather than silently fixed.
    """

    kind: PropensityKind = PropensityKind.KERNEL_REGRESSION
    epsilon_clip: float = 0.01
    knn_k: int | None = None
    bandwidth: float | None = None
    logistic_c: float | None = 1.0
    gp_noise: float | None = None
    oracle: np.ndarray | None = None

    def validate(self) -> None:
        if not (0 < self.epsilon_clip < 0.5):
            raise ConfigInvalid(
                f"epsilon_clip must lie in (0, 0.5), got {self.epsilon_clip}"
            )
        if self.knn_k is not None and self.knn_k < 1:
            raise ConfigInvalid(f"neighbor count must be >= 1, got {self.knn_k}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigInvalid(f"bandwidth must be > 0, got {self.bandwidth}")
        if self.logistic_c is not None and not self.logistic_c > 0:
            raise ConfigInvalid(f"logistic C must be > 0, got {self.logistic_c}")
        if self.gp_noise is not None and not (0 <= self.gp_noise < 0.5):
            raise ConfigInvalid(f"gp noise must lie in [0, 0.5), got {self.gp_noise}")
        if self.kind is PropensityKind.ORACLE and self.oracle is None:
            raise ConfigInvalid("oracle propensity spec requires per-unit values")


@dataclass(frozen=True)
class PropensityTable:
    """Clipped per-unit treatment probabilities plus clipping diagnostics."""

    g: np.ndarray
    spec: PropensitySpec
    pre_clip_min: float
    pre_clip_max: float
    clipped_fraction: float

    def __post_init__(self):
        g = np.array(self.g, dtype=np.float64)
        g.setflags(write=False)
        object.__setattr__(self, "g", g)

    @property
    def n(self) -> int:
        return len(self.g)


def silverman_bandwidth(n_train: int, dim: int) -> float:
    """Rule-of-thumb bandwidth for standardized coordinates (unit scale)."""
    return (4.0 / (dim + 2)) ** (1.0 / (dim + 4)) * n_train ** (-1.0 / (dim + 4))


# ---------------------------------------------------------------------------
# Array-level predictors shared by the public ops and the cross-fit pipeline
# ---------------------------------------------------------------------------

def _nw_predict(
    train_x: np.ndarray, train_a: np.ndarray, query_x: np.ndarray, bandwidth: float
) -> np.ndarray:
    """Gaussian-kernel weighted treated fraction at each query point.

    Queries whose weights all underflow to zero fall back to the training
    mean, keeping the function total.
    """
    out = np.empty(len(query_x))
    denom = 2.0 * bandwidth * bandwidth
    train_mean = float(np.mean(train_a))
    for start in range(0, len(query_x), _QUERY_CHUNK):
        chunk = query_x[start : start + _QUERY_CHUNK]
        d2 = ((chunk[:, None, :] - train_x[None, :, :]) ** 2).sum(axis=2)
        w = np.exp(-d2 / denom)
        wsum = w.sum(axis=1)
        vals = np.divide(
            w @ train_a,
            wsum,
            out=np.full(len(chunk), train_mean),
            where=wsum > 0,
        )
        out[start : start + len(chunk)] = vals
    return out


def _knn_predict(
    train_x: np.ndarray, train_a: np.ndarray, query_x: np.ndarray, k: int
) -> np.ndarray:
    """Treated fraction among the k nearest training points.

    Distance ties are broken by lower training index (stable sort), so the
    prediction is deterministic.
    """
    if k > len(train_x):
        raise KTooLarge(f"k={k} exceeds training size {len(train_x)}")
    if k < 1:
        raise ConfigInvalid(f"neighbor count must be >= 1, got {k}")
    out = np.empty(len(query_x))
    for start in range(0, len(query_x), _QUERY_CHUNK):
        chunk = query_x[start : start + _QUERY_CHUNK]
        d2 = ((chunk[:, None, :] - train_x[None, :, :]) ** 2).sum(axis=2)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out[start : start + len(chunk)] = train_a[order].mean(axis=1)
    return out


def _logistic_predict(
    train_x: np.ndarray,
    train_a: np.ndarray,
    query_x: np.ndarray,
    c: float | None,
) -> np.ndarray:
    if c is None:
        model = LogisticRegression(penalty=None, max_iter=2000, tol=1e-10)
    else:
        model = LogisticRegression(C=c, penalty="l2", max_iter=2000, tol=1e-10)
    model.fit(train_x, train_a)
    if c is None and int(np.max(model.n_iter_)) >= 2000:
        raise SingularFit(
            "unregularized logistic fit did not converge (likely separation)"
        )
    return model.predict_proba(query_x)[:, 1]


def _gp_nll_and_grad(w, z, t, noise, lam):
    u = z @ w
    s = 1.0 / (1.0 + np.exp(-t * u))
    m = (1.0 - noise) * s + 0.5 * noise
    nll = -np.sum(np.log(m)) + 0.5 * lam * np.sum(w[1:] ** 2)
    du = -(1.0 - noise) * s * (1.0 - s) * t / m
    grad = z.T @ du
    grad[1:] += lam * w[1:]
    return nll, grad


def _gp_fit(z: np.ndarray, t: np.ndarray, noise: float, lam: float = 1.0) -> np.ndarray:
    res = minimize(
        _gp_nll_and_grad,
        x0=np.zeros(z.shape[1]),
        args=(z, t, noise, lam),
        jac=True,
        method="L-BFGS-B",
    )
    return res.x


def _gp_linear_logit_predict(
    train_x: np.ndarray,
    train_a: np.ndarray,
    query_x: np.ndarray,
    noise: float | None,
) -> np.ndarray:
    """Regularized linear-logit classifier with a white-noise jitter on the
    labels, an approximation of a dot-product + white-noise GP classifier.

    The jitter level is learned by held-half log loss over a small grid
    when not fixed; predictions are bounded inside [noise/2, 1 - noise/2].
    """
    z_train = np.column_stack([np.ones(len(train_x)), train_x])
    z_query = np.column_stack([np.ones(len(query_x)), query_x])
    t = 2.0 * train_a - 1.0
    if noise is None:
        even = np.arange(len(t)) % 2 == 0
        best, noise = math.inf, _GP_NOISE_GRID[0]
        for cand in _GP_NOISE_GRID:
            w = _gp_fit(z_train[even], t[even], cand)
            u = z_train[~even] @ w
            p = (1.0 - cand) / (1.0 + np.exp(-u)) + 0.5 * cand
            p = np.clip(p, 1e-12, 1 - 1e-12)
            loss = -np.mean(
                train_a[~even] * np.log(p) + (1 - train_a[~even]) * np.log(1 - p)
            )
            if loss < best:
                best, noise = loss, cand
    w = _gp_fit(z_train, t, noise)
    u = z_query @ w
    return (1.0 - noise) / (1.0 + np.exp(-u)) + 0.5 * noise


# ---------------------------------------------------------------------------
# Public single-query ops on the 2-D representation
# ---------------------------------------------------------------------------

def _train_arrays(train: Sequence[tuple[EtaPair, int]]):
    if not train:
        raise ConfigInvalid("training set must be nonempty")
    x = np.array([[p.q0, p.q1] for p, _ in train], dtype=float)
    a = np.array([int(a) for _, a in train], dtype=float)
    return x, a


def kernel_regress_2d(
    train: Sequence[tuple[EtaPair, int]], query: EtaPair, bandwidth: float
) -> float:
    """Nadaraya-Watson treated fraction at ``query`` with a Gaussian kernel:
    weights exp(-||eta_i - query||^2 / (2 bandwidth^2))."""
    if not bandwidth > 0:
        raise ConfigInvalid(f"bandwidth must be > 0, got {bandwidth}")
    x, a = _train_arrays(train)
    return float(_nw_predict(x, a, query.as_array()[None, :], bandwidth)[0])


def knn_classify_2d(
    train: Sequence[tuple[EtaPair, int]], query: EtaPair, k: int
) -> float:
    """Treated fraction among the k nearest training pairs by Euclidean
    distance; distance ties go to the lower training index."""
    x, a = _train_arrays(train)
    return float(_knn_predict(x, a, query.as_array()[None, :], k)[0])


# ---------------------------------------------------------------------------
# Cross-fitted pipeline
# ---------------------------------------------------------------------------

def _standardize(train: np.ndarray, query: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return (train - mu) / sd, (query - mu) / sd


def _predict_fold(
    spec: PropensitySpec,
    train_x: np.ndarray,
    train_a: np.ndarray,
    query_x: np.ndarray,
) -> np.ndarray:
    # Distances are computed on per-coordinate standardized values; the
    # representation is only identified up to invertible coordinate maps.
    zt, zq = _standardize(train_x, query_x)
    if spec.kind is PropensityKind.KERNEL_REGRESSION:
        h = spec.bandwidth
        if h is None:
            h = silverman_bandwidth(len(zt), zt.shape[1])
        return _nw_predict(zt, train_a, zq, h)
    if spec.kind is PropensityKind.KNN:
        k = spec.knn_k
        if k is None:
            k = max(1, int(round(math.sqrt(len(zt)))))
        return _knn_predict(zt, train_a, zq, k)
    if spec.kind is PropensityKind.LOGISTIC:
        return _logistic_predict(zt, train_a, zq, spec.logistic_c)
    if spec.kind is PropensityKind.GP_DOT_PRODUCT_WHITE:
        return _gp_linear_logit_predict(zt, train_a, zq, spec.gp_noise)
    raise ConfigInvalid(f"no classifier for kind {spec.kind}")


def _clip_table(pre: np.ndarray, spec: PropensitySpec) -> PropensityTable:
    pre = np.clip(pre, 0.0, 1.0)  # guards float jitter only
    eps = spec.epsilon_clip
    clipped = float(np.mean((pre < eps) | (pre > 1.0 - eps)))
    return PropensityTable(
        g=np.clip(pre, eps, 1.0 - eps),
        spec=spec,
        pre_clip_min=float(pre.min()),
        pre_clip_max=float(pre.max()),
        clipped_fraction=clipped,
    )


def fit_crossfit_propensity(
    qhat: QHatTable | None,
    dataset: Dataset,
    plan: CrossFitPlan,
    spec: PropensitySpec,
    features: str = "eta",
) -> PropensityTable:
    """Cross-fitted per-unit treatment probability, clipped to
    [epsilon, 1 - epsilon].

    ``features="eta"`` (default) classifies treatment from the 2-D outcome
    representation; ``features="raw_x"`` is the diagnostic mode on the raw
    covariates, useful for witnessing overlap violations via the clipped
    fraction.
    """
    validate_dataset(dataset)
    validate_plan(plan, dataset)
    spec.validate()
    if spec.kind is PropensityKind.ORACLE:
        vals = np.asarray(spec.oracle, dtype=float)
        if vals.shape != (dataset.n,):
            raise LengthMismatch("oracle propensity values misaligned with dataset")
        return _clip_table(vals, spec)
    if features == "eta":
        if qhat is None:
            raise ConfigInvalid("eta features require an outcome table")
        if qhat.n != dataset.n:
            raise LengthMismatch(
                f"table has {qhat.n} rows, dataset has {dataset.n} units"
            )
        feats = qhat.eta_matrix()
    elif features == "raw_x":
        if dataset.d == 0:
            raise ConfigInvalid("raw_x features require covariates")
        feats = dataset.x
    else:
        raise ConfigInvalid(f"unknown feature mode {features!r}")
    pre = np.empty(dataset.n)
    a = dataset.a.astype(float)
    for j in range(plan.k):
        train = plan.train_indices(j)
        fold = plan.fold_indices(j)
        if not (np.any(dataset.a[train] == 1) and np.any(dataset.a[train] == 0)):
            raise DegenerateFold(f"training split for fold {j} lacks an arm")
        pre[fold] = _predict_fold(spec, feats[train], a[train], feats[fold])
    return _clip_table(pre, spec)


def fit_propensity_on_raw_x(
    dataset: Dataset, plan: CrossFitPlan, spec: PropensitySpec
) -> PropensityTable:
    """Diagnostic mode: same cross-fitting, but on the raw covariates."""
    return fit_crossfit_propensity(None, dataset, plan, spec, features="raw_x")
