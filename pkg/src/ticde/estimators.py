"""Closed-form effect estimators and confidence intervals.

The headline estimator is the ATT-form AIPTW built from the influence
curve of the controlled direct effect; the unadjusted and outcome-only
estimators are baselines, and the ATE AIPTW / IPTW scores are provided
for comparison studies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .core import Dataset, EffectEstimate, EstimatorKind, validate_dataset
from .errors import LengthMismatch, PropensityAtBoundary, SingleArm
from .outcome import QHatTable
from .propensity import PropensityTable


def normal_quantile(p: float) -> float:
    """Standard normal quantile (inverse CDF)."""
    return float(ndtri(p))


def _sd(values: np.ndarray) -> float:
    # n-1 sample standard deviation; a single value has none.
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1))


def _interval(tau: float, se: float, alpha: float) -> tuple[float, float]:
    z = normal_quantile(1.0 - alpha / 2.0)
    return tau - z * se, tau + z * se


def _check_aligned(dataset: Dataset, qhat: QHatTable | None, g: PropensityTable | None):
    if qhat is not None and qhat.n != dataset.n:
        raise LengthMismatch(
            f"outcome table has {qhat.n} rows, dataset has {dataset.n} units"
        )
    if g is not None and g.n != dataset.n:
        raise LengthMismatch(
            f"propensity table has {g.n} rows, dataset has {dataset.n} units"
        )
    if g is not None and (np.any(g.g <= 0.0) or np.any(g.g >= 1.0)):
        raise PropensityAtBoundary("propensity values must lie strictly in (0, 1)")


@dataclass(frozen=True)
class InfluenceValues:
    """Per-unit influence-curve values and the treated fraction they use."""

    phi: np.ndarray
    p_hat: float

    def __post_init__(self):
        phi = np.array(self.phi, dtype=np.float64)
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)


def influence_curve(
    dataset: Dataset, qhat: QHatTable, g: PropensityTable
) -> InfluenceValues:
    """Per-unit influence values for the ATT-form AIPTW.

    phi_i = a_i (y_i - q0_i) / p_hat
            - g_i / (p_hat (1 - g_i)) * (1 - a_i) (y_i - q0_i)

    with p_hat the sample treated fraction.  Only the arm-0 prediction
    enters: the ATT form adjusts the control-arm counterfactual alone.
    """
    validate_dataset(dataset)
    _check_aligned(dataset, qhat, g)
    a = dataset.a.astype(float)
    p_hat = float(np.mean(a))
    resid = dataset.y - qhat.q0
    phi = a * resid / p_hat - g.g / (p_hat * (1.0 - g.g)) * (1.0 - a) * resid
    return InfluenceValues(phi=phi, p_hat=p_hat)


def estimate_unadjusted(dataset: Dataset, alpha: float = 0.05) -> EffectEstimate:
    """Difference of arm means with the two-sample normal interval."""
    validate_dataset(dataset)
    treated = dataset.y[dataset.a == 1]
    control = dataset.y[dataset.a == 0]
    tau = float(np.mean(treated) - np.mean(control))
    se = float(np.sqrt(_sd(treated) ** 2 / len(treated) + _sd(control) ** 2 / len(control)))
    lo, hi = _interval(tau, se, alpha)
    return EffectEstimate(
        kind=EstimatorKind.UNADJUSTED,
        tau=tau,
        se=se,
        ci_low=lo,
        ci_high=hi,
        alpha=alpha,
        p_hat=len(treated) / dataset.n,
        n=dataset.n,
        n1=len(treated),
    )


def estimate_tau_q(
    dataset: Dataset, qhat: QHatTable, alpha: float = 0.05
) -> EffectEstimate:
    """Outcome-only estimator: mean predicted effect over treated units.

    The interval is the naive plug-in one (variance of the predicted
    per-unit effects over treated units, conditional on the fitted model),
    which is only honest when the outcome model converges very fast.
    """
    validate_dataset(dataset)
    _check_aligned(dataset, qhat, None)
    treated = dataset.a == 1
    n1 = int(treated.sum())
    if n1 < 2:
        raise SingleArm(f"need at least 2 treated units, got {n1}")
    diffs = (qhat.q1 - qhat.q0)[treated]
    tau = float(np.mean(diffs))
    se = float(np.sqrt(_sd(diffs) ** 2 / n1))
    lo, hi = _interval(tau, se, alpha)
    return EffectEstimate(
        kind=EstimatorKind.OUTCOME_ONLY,
        tau=tau,
        se=se,
        ci_low=lo,
        ci_high=hi,
        alpha=alpha,
        p_hat=n1 / dataset.n,
        n=dataset.n,
        n1=n1,
    )


def estimate_tau_ti(
    dataset: Dataset,
    qhat: QHatTable,
    g: PropensityTable,
    alpha: float = 0.05,
) -> EffectEstimate:
    """ATT-form AIPTW: the mean influence value, with the interval built
    from sd(phi_i - a_i tau / p_hat) / sqrt(n)."""
    iv = influence_curve(dataset, qhat, g)
    tau = float(np.mean(iv.phi))
    centered = iv.phi - dataset.a * tau / iv.p_hat
    se = _sd(centered) / np.sqrt(dataset.n)
    lo, hi = _interval(tau, se, alpha)
    return EffectEstimate(
        kind=EstimatorKind.TI_AIPW_ATT,
        tau=tau,
        se=se,
        ci_low=lo,
        ci_high=hi,
        alpha=alpha,
        p_hat=iv.p_hat,
        n=dataset.n,
        n1=dataset.n1,
        influence=iv.phi,
        clipped_fraction=g.clipped_fraction,
    )


def estimate_ate_aipw(
    dataset: Dataset,
    qhat: QHatTable,
    g: PropensityTable,
    alpha: float = 0.05,
) -> EffectEstimate:
    """Doubly robust ATE score with its standard normal interval."""
    validate_dataset(dataset)
    _check_aligned(dataset, qhat, g)
    a = dataset.a.astype(float)
    psi = (
        qhat.q1
        - qhat.q0
        + a * (dataset.y - qhat.q1) / g.g
        - (1.0 - a) * (dataset.y - qhat.q0) / (1.0 - g.g)
    )
    tau = float(np.mean(psi))
    se = _sd(psi) / np.sqrt(dataset.n)
    lo, hi = _interval(tau, se, alpha)
    return EffectEstimate(
        kind=EstimatorKind.ATE_AIPW,
        tau=tau,
        se=se,
        ci_low=lo,
        ci_high=hi,
        alpha=alpha,
        p_hat=dataset.n1 / dataset.n,
        n=dataset.n,
        n1=dataset.n1,
        influence=psi,
        clipped_fraction=g.clipped_fraction,
    )


def estimate_ate_iptw(
    dataset: Dataset, g: PropensityTable, alpha: float = 0.05
) -> EffectEstimate:
    """Horvitz-Thompson inverse-probability estimator of the ATE."""
    validate_dataset(dataset)
    _check_aligned(dataset, None, g)
    a = dataset.a.astype(float)
    psi = a * dataset.y / g.g - (1.0 - a) * dataset.y / (1.0 - g.g)
    tau = float(np.mean(psi))
    se = _sd(psi) / np.sqrt(dataset.n)
    lo, hi = _interval(tau, se, alpha)
    return EffectEstimate(
        kind=EstimatorKind.ATE_IPTW,
        tau=tau,
        se=se,
        ci_low=lo,
        ci_high=hi,
        alpha=alpha,
        p_hat=dataset.n1 / dataset.n,
        n=dataset.n,
        n1=dataset.n1,
        influence=psi,
        clipped_fraction=g.clipped_fraction,
    )
