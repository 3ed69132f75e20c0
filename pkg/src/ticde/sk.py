"""Scikit-learn style wrapper so the pipeline composes with the ecosystem."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_consistent_length, column_or_1d

from .core import Dataset, EstimatorKind, make_folds, validate_dataset
from .errors import ConfigInvalid
from .estimators import (
    estimate_ate_aipw,
    estimate_ate_iptw,
    estimate_tau_q,
    estimate_tau_ti,
    estimate_unadjusted,
)
from .outcome import (
    OutcomeKind,
    OutcomeModelSpec,
    Provenance,
    QHatTable,
    _predict_arm,
    fit_crossfold_models,
    predict_crossfit,
    q_loss,
)
from .propensity import PropensityKind, PropensitySpec, fit_crossfit_propensity

_OUTCOME_NAMES = {
    "gradient_boost": OutcomeModelSpec.gradient_boost,
    "gbm": OutcomeModelSpec.gradient_boost,
    "ridge": OutcomeModelSpec.ridge,
    "knn": OutcomeModelSpec.knn,
}

_PROPENSITY_NAMES = {
    "kernel_regression": PropensityKind.KERNEL_REGRESSION,
    "kernel": PropensityKind.KERNEL_REGRESSION,
    "knn": PropensityKind.KNN,
    "logistic": PropensityKind.LOGISTIC,
    "gp_dot_product_white": PropensityKind.GP_DOT_PRODUCT_WHITE,
    "gp": PropensityKind.GP_DOT_PRODUCT_WHITE,
}


class CdeEstimator(BaseEstimator):
    """Controlled-direct-effect estimator with a fit/inspect interface.

    ``fit(X, a, y)`` runs the two-stage pipeline (cross-fitted per-arm
    outcome models, treatment probability on the learned 2-D representation,
    influence-curve combination) and exposes the result as fitted
    attributes.  ``transform`` maps new covariates to the 2-D representation
    by averaging the per-fold arm models; ``predict`` returns the predicted
    per-unit effect ``q1(x) - q0(x)``.

    Parameters
    ----------
    outcome_model : str or OutcomeModelSpec
        Per-arm regressor ("gradient_boost", "ridge", "knn") or a full spec.
    propensity : str or PropensitySpec
        Treatment-probability model on the representation.
    estimator : str
        One of "ti_aipw_att", "outcome_only", "unadjusted", "ate_aipw",
        "ate_iptw"; controls which estimate lands in ``effect_``.
    """

    def __init__(
        self,
        outcome_model="gradient_boost",
        propensity="kernel_regression",
        estimator="ti_aipw_att",
        n_folds=5,
        alpha=0.05,
        epsilon_clip=0.01,
        random_state=0,
    ):
        self.outcome_model = outcome_model
        self.propensity = propensity
        self.estimator = estimator
        self.n_folds = n_folds
        self.alpha = alpha
        self.epsilon_clip = epsilon_clip
        self.random_state = random_state

    def _outcome_spec(self) -> OutcomeModelSpec:
        if isinstance(self.outcome_model, OutcomeModelSpec):
            return self.outcome_model
        name = str(self.outcome_model)
        if name not in _OUTCOME_NAMES:
            raise ConfigInvalid(
                f"unknown outcome model {name!r}; choose from {sorted(_OUTCOME_NAMES)}"
            )
        return _OUTCOME_NAMES[name](seed=self.random_state)

    def _propensity_spec(self) -> PropensitySpec:
        if isinstance(self.propensity, PropensitySpec):
            return self.propensity
        name = str(self.propensity)
        if name not in _PROPENSITY_NAMES:
            raise ConfigInvalid(
                f"unknown propensity model {name!r}; choose from {sorted(_PROPENSITY_NAMES)}"
            )
        return PropensitySpec(
            kind=_PROPENSITY_NAMES[name], epsilon_clip=self.epsilon_clip
        )

    def fit(self, X, a, y):
        X = check_array(X, ensure_2d=True, ensure_min_features=0, dtype=float)
        a = column_or_1d(a)
        y = column_or_1d(y).astype(float)
        check_consistent_length(X, a, y)
        dataset = Dataset(
            ids=tuple(str(i) for i in range(len(y))), a=np.asarray(a), y=y, x=X
        )
        validate_dataset(dataset)
        spec = self._outcome_spec()
        if spec.kind is OutcomeKind.ORACLE:
            raise ConfigInvalid("oracle outcome specs are not usable here")
        plan = make_folds(dataset, self.n_folds, seed=self.random_state)
        self._fold_models = fit_crossfold_models(dataset, plan, spec)
        q0, q1 = predict_crossfit(dataset, plan, self._fold_models)
        qhat = QHatTable(
            q0=q0,
            q1=q1,
            provenance=Provenance.CROSS_FITTED,
            fold_of_origin=plan.assignment,
        )
        g = fit_crossfit_propensity(qhat, dataset, plan, self._propensity_spec())
        kind = EstimatorKind(self.estimator)
        if kind is EstimatorKind.UNADJUSTED:
            est = estimate_unadjusted(dataset, self.alpha)
        elif kind is EstimatorKind.OUTCOME_ONLY:
            est = estimate_tau_q(dataset, qhat, self.alpha)
        elif kind is EstimatorKind.ATE_AIPW:
            est = estimate_ate_aipw(dataset, qhat, g, self.alpha)
        elif kind is EstimatorKind.ATE_IPTW:
            est = estimate_ate_iptw(dataset, g, self.alpha)
        else:
            est = estimate_tau_ti(dataset, qhat, g, self.alpha)
        self.n_features_in_ = X.shape[1]
        self.estimate_ = est
        self.effect_ = est.tau
        self.se_ = est.se
        self.ci_ = (est.ci_low, est.ci_high)
        self.influence_ = est.influence
        self.p_hat_ = est.p_hat
        self.eta_ = qhat.eta_matrix()
        self.q_loss_ = q_loss(qhat, dataset)
        self.clipped_fraction_ = g.clipped_fraction
        self.propensity_ = g.g
        return self

    def _check_fitted(self):
        if not hasattr(self, "_fold_models"):
            raise ConfigInvalid("call fit before transform/predict")

    def transform(self, X) -> np.ndarray:
        """Map covariates to the 2-D representation (fold-averaged models)."""
        self._check_fitted()
        X = check_array(X, ensure_2d=True, ensure_min_features=0, dtype=float)
        q0 = np.zeros(len(X))
        q1 = np.zeros(len(X))
        for arm_models in self._fold_models:
            q0 += _predict_arm(arm_models[0], X)
            q1 += _predict_arm(arm_models[1], X)
        k = len(self._fold_models)
        return np.column_stack([q0 / k, q1 / k])

    def predict(self, X) -> np.ndarray:
        """Predicted per-unit effect q1(x) - q0(x)."""
        eta = self.transform(X)
        return eta[:, 1] - eta[:, 0]
