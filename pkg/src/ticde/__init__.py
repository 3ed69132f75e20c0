"""Robust controlled-direct-effect estimation for covariate-determined
treatments, via cross-fitted outcome models, a 2-D outcome representation,
nonparametric treatment probabilities, and an influence-curve AIPTW."""

from .core import (
    CrossFitPlan,
    Dataset,
    EffectEstimate,
    EstimatorKind,
    EtaPair,
    Unit,
    make_folds,
    read_dataset_csv,
    validate_dataset,
    write_dataset_csv,
)
from .estimators import (
    InfluenceValues,
    estimate_ate_aipw,
    estimate_ate_iptw,
    estimate_tau_q,
    estimate_tau_ti,
    estimate_unadjusted,
    influence_curve,
    normal_quantile,
)
from .harness import (
    CellResult,
    DiagnosticTable,
    ExperimentGrid,
    ReplicationRecord,
    diagnose_by_q_loss,
    render_report,
    run_grid,
)
from .outcome import (
    OutcomeKind,
    OutcomeModelSpec,
    Provenance,
    QHatTable,
    fit_crossfit_q,
    ingest_qhat,
    oracle_from_truth,
    q_loss,
    write_qhat_csv,
)
from .propensity import (
    PropensityKind,
    PropensitySpec,
    PropensityTable,
    fit_crossfit_propensity,
    fit_propensity_on_raw_x,
    kernel_regress_2d,
    knn_classify_2d,
)
from .simulation import (
    SimConfig,
    SimSample,
    deterministic_treatment_check,
    simulate,
    truth_to_qhat_csv,
    write_truth_json,
)
from .sk import CdeEstimator

__version__ = "0.1.0"

__all__ = [
    "CdeEstimator",
    "CellResult",
    "CrossFitPlan",
    "Dataset",
    "DiagnosticTable",
    "EffectEstimate",
    "EstimatorKind",
    "EtaPair",
    "ExperimentGrid",
    "InfluenceValues",
    "OutcomeKind",
    "OutcomeModelSpec",
    "Provenance",
    "PropensityKind",
    "PropensitySpec",
    "PropensityTable",
    "QHatTable",
    "ReplicationRecord",
    "SimConfig",
    "SimSample",
    "Unit",
    "deterministic_treatment_check",
    "diagnose_by_q_loss",
    "estimate_ate_aipw",
    "estimate_ate_iptw",
    "estimate_tau_q",
    "estimate_tau_ti",
    "estimate_unadjusted",
    "fit_crossfit_propensity",
    "fit_crossfit_q",
    "fit_propensity_on_raw_x",
    "influence_curve",
    "ingest_qhat",
    "kernel_regress_2d",
    "knn_classify_2d",
    "make_folds",
    "normal_quantile",
    "oracle_from_truth",
    "q_loss",
    "read_dataset_csv",
    "render_report",
    "run_grid",
    "simulate",
    "truth_to_qhat_csv",
    "validate_dataset",
    "write_dataset_csv",
    "write_qhat_csv",
    "write_truth_json",
]
