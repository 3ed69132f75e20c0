"""Command-line front end: simulate, estimate, coverage, diagnose.

Exit codes: 0 on success, 2 on input/schema problems, 3 on numeric
failures.  Errors are written to stderr as a single JSON object so batch
drivers can parse them.  Flags win over the optional JSON config file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .core import EstimatorKind, make_folds, read_dataset_csv, validate_dataset
from .errors import ConfigInvalid, InputError, NumericError, SchemaError, TiCdeError
from .harness import (
    EstimatorKind as _EK,  # noqa: F401  (re-exported for grids)
    ExperimentGrid,
    cells_from_records,
    diagnose_by_q_loss,
    read_records_jsonl,
    render_report,
    run_grid,
    write_records_jsonl,
)
from .harness import compute_estimates
from .outcome import OutcomeModelSpec, fit_crossfit_q, ingest_qhat, q_loss
from .propensity import PropensityKind, PropensitySpec, fit_crossfit_propensity
from .simulation import (
    SimConfig,
    read_truth_json,
    simulate,
    truth_g_for_dataset,
    write_truth_json,
)
from .core import write_dataset_csv

_ESTIMATOR_ALIASES = {
    "unadjusted": EstimatorKind.UNADJUSTED,
    "naive": EstimatorKind.UNADJUSTED,
    "q": EstimatorKind.OUTCOME_ONLY,
    "outcome-only": EstimatorKind.OUTCOME_ONLY,
    "outcome_only": EstimatorKind.OUTCOME_ONLY,
    "ti": EstimatorKind.TI_AIPW_ATT,
    "ti-aipw-att": EstimatorKind.TI_AIPW_ATT,
    "ti_aipw_att": EstimatorKind.TI_AIPW_ATT,
    "ate-aipw": EstimatorKind.ATE_AIPW,
    "ate_aipw": EstimatorKind.ATE_AIPW,
    "ate-iptw": EstimatorKind.ATE_IPTW,
    "ate_iptw": EstimatorKind.ATE_IPTW,
}

DEFAULT_ESTIMATORS = "unadjusted,q,ti"


def _parse_estimators(value: str) -> tuple[EstimatorKind, ...]:
    kinds = []
    for token in value.split(","):
        token = token.strip().lower()
        if not token:
            continue
        if token not in _ESTIMATOR_ALIASES:
            raise ConfigInvalid(
                f"unknown estimator {token!r}; choose from {sorted(set(_ESTIMATOR_ALIASES))}"
            )
        kind = _ESTIMATOR_ALIASES[token]
        if kind not in kinds:
            kinds.append(kind)
    if not kinds:
        raise ConfigInvalid("no estimators requested")
    return tuple(kinds)


def _parse_kv(body: str) -> dict:
    out = {}
    for pair in body.split(","):
        pair = pair.strip()
        if not pair:
            continue
        if "=" not in pair:
            raise ConfigInvalid(f"expected key=value, got {pair!r}")
        key, val = pair.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _parse_outcome_model(value: str) -> OutcomeModelSpec:
    head, _, body = value.partition(":")
    head = head.strip().lower()
    kv = _parse_kv(body) if body else {}
    try:
        if head in ("gbm", "gradient-boost", "gradient_boost"):
            return OutcomeModelSpec.gradient_boost(
                gb_trees=int(kv.pop("trees", 200)),
                gb_depth=None if kv.get("depth", "3") == "none" else int(kv.pop("depth", 3)),
                gb_learning_rate=float(kv.pop("lr", 0.1)),
                replicates=int(kv.pop("replicates", 1)),
            )
        if head == "ridge":
            return OutcomeModelSpec.ridge(
                ridge_lambda=float(kv.pop("lambda", 1.0)),
                replicates=int(kv.pop("replicates", 1)),
            )
        if head == "knn":
            return OutcomeModelSpec.knn(knn_k=int(kv.pop("k", 5)))
        if head == "oracle":
            return OutcomeModelSpec.oracle_spec(
                oracle_noise_sd=float(kv.pop("noise", 0.0)),
                oracle_offset_q0=float(kv.pop("offset0", 0.0)),
                oracle_offset_q1=float(kv.pop("offset1", 0.0)),
            )
    except ValueError as exc:
        raise ConfigInvalid(f"bad outcome-model parameter: {exc}") from None
    raise ConfigInvalid(f"unknown outcome model {head!r}")


def _parse_propensity(value: str) -> tuple[PropensitySpec, str | None]:
    """Returns the spec plus an optional truth-file path for the oracle kind."""
    head, _, body = value.partition(":")
    head = head.strip().lower()
    if head == "oracle":
        # remainder is the truth JSON path (required for `estimate`, empty in
        # grid mode where truth comes from each replication).
        return PropensitySpec(kind=PropensityKind.ORACLE, oracle=None), (body or None)
    kv = _parse_kv(body) if body else {}
    eps = float(kv.pop("eps", 0.01))
    try:
        if head in ("kernel", "kernel-regression", "kernel_regression"):
            bw = kv.pop("bandwidth", None)
            return (
                PropensitySpec(
                    kind=PropensityKind.KERNEL_REGRESSION,
                    epsilon_clip=eps,
                    bandwidth=None if bw is None else float(bw),
                ),
                None,
            )
        if head == "knn":
            k = kv.pop("k", None)
            return (
                PropensitySpec(
                    kind=PropensityKind.KNN,
                    epsilon_clip=eps,
                    knn_k=None if k is None else int(k),
                ),
                None,
            )
        if head == "logistic":
            c = kv.pop("c", "1.0")
            return (
                PropensitySpec(
                    kind=PropensityKind.LOGISTIC,
                    epsilon_clip=eps,
                    logistic_c=None if c.lower() == "none" else float(c),
                ),
                None,
            )
        if head == "gp":
            noise = kv.pop("noise", None)
            return (
                PropensitySpec(
                    kind=PropensityKind.GP_DOT_PRODUCT_WHITE,
                    epsilon_clip=eps,
                    gp_noise=None if noise is None else float(noise),
                ),
                None,
            )
    except ValueError as exc:
        raise ConfigInvalid(f"bad propensity parameter: {exc}") from None
    raise ConfigInvalid(f"unknown propensity model {head!r}")


def _parse_float_list(value: str, flag: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in value.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigInvalid(f"bad {flag} value: {exc}") from None
    if not vals:
        raise ConfigInvalid(f"{flag} must list at least one value")
    return vals


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # emit the machine-parseable contract
        raise SchemaError(f"argument error: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="ticde", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags win")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)

    p_sim = sub.add_parser("simulate", help="write a synthetic dataset + truth sidecar")
    common(p_sim)
    p_sim.add_argument("--beta-a", default=None)
    p_sim.add_argument("--beta-c", default=None)
    p_sim.add_argument("--gamma", default=None)
    p_sim.add_argument("--n", type=int, default=None)

    p_est = sub.add_parser("estimate", help="run the pipeline on a dataset CSV")
    common(p_est)
    p_est.add_argument("--input", default=None)
    p_est.add_argument("--qhat", default=None, help="ingest predictions, skip fitting")
    p_est.add_argument("--alpha", type=float, default=None)
    p_est.add_argument("--folds", type=int, default=None)
    p_est.add_argument("--estimators", default=None)
    p_est.add_argument("--propensity", default=None)
    p_est.add_argument("--outcome-model", dest="outcome_model", default=None)

    p_cov = sub.add_parser("coverage", help="replication grid: bias and coverage")
    common(p_cov)
    p_cov.add_argument("--beta-a", default=None, help="comma-separated values")
    p_cov.add_argument("--beta-c", default=None)
    p_cov.add_argument("--gamma", default=None)
    p_cov.add_argument("--n", type=int, default=None)
    p_cov.add_argument("--replications", type=int, default=None)
    p_cov.add_argument("--jobs", type=int, default=None)
    p_cov.add_argument("--alpha", type=float, default=None)
    p_cov.add_argument("--folds", type=int, default=None)
    p_cov.add_argument("--estimators", default=None)
    p_cov.add_argument("--propensity", default=None)
    p_cov.add_argument("--outcome-model", dest="outcome_model", default=None)

    p_diag = sub.add_parser("diagnose", help="bin a replication log by q-loss")
    common(p_diag)
    p_diag.add_argument("--input", default=None, help="records.jsonl from coverage")
    p_diag.add_argument("--bins", type=int, default=None)
    p_diag.add_argument("--estimators", default=None, help="which estimator to bin")

    return parser


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON config: {exc}") from None
    if not isinstance(payload, dict):
        raise SchemaError(f"{path}: config must be a JSON object")
    return payload


def _pick(args, config: dict, key: str, default):
    val = getattr(args, key, None)
    if val is not None:
        return val
    if key in config:
        return config[key]
    return default


def _sim_config_from(args, config: dict) -> SimConfig:
    base = SimConfig()
    return SimConfig(
        beta_a=float(_pick(args, config, "beta_a", base.beta_a)),
        beta_c=float(_pick(args, config, "beta_c", base.beta_c)),
        gamma=float(_pick(args, config, "gamma", base.gamma)),
        pi0=float(config.get("pi0", base.pi0)),
        pi1=float(config.get("pi1", base.pi1)),
        pc=float(config.get("pc", base.pc)),
        n=int(_pick(args, config, "n", base.n)),
        d_signal=int(config.get("d_signal", base.d_signal)),
        d_noise=int(config.get("d_noise", base.d_noise)),
        jitter=float(config.get("jitter", base.jitter)),
        seed=int(_pick(args, config, "seed", base.seed)),
    )


def cmd_simulate(args) -> int:
    config = _load_config(args.config)
    sim_config = _sim_config_from(args, config)
    out_dir = _pick(args, config, "out", ".")
    if not os.path.isdir(out_dir):
        raise InputError(f"output directory does not exist: {out_dir}")
    sample = simulate(sim_config)
    dataset_path = os.path.join(out_dir, "dataset.csv")
    truth_path = os.path.join(out_dir, "truth.json")
    write_dataset_csv(sample.dataset, dataset_path)
    write_truth_json(sample, truth_path)
    print(
        json.dumps(
            {"dataset": dataset_path, "truth": truth_path, "n": sample.dataset.n}
        )
    )
    return 0


def cmd_estimate(args) -> int:
    config = _load_config(args.config)
    input_path = _pick(args, config, "input", None)
    if not input_path:
        raise InputError("estimate requires --input")
    dataset = read_dataset_csv(input_path)
    validate_dataset(dataset)
    alpha = float(_pick(args, config, "alpha", 0.05))
    folds = int(_pick(args, config, "folds", 5))
    seed = int(_pick(args, config, "seed", 0))
    kinds = _parse_estimators(_pick(args, config, "estimators", DEFAULT_ESTIMATORS))
    pspec, truth_path = _parse_propensity(_pick(args, config, "propensity", "kernel"))
    needs_qhat = any(
        k
        in (
            EstimatorKind.OUTCOME_ONLY,
            EstimatorKind.TI_AIPW_ATT,
            EstimatorKind.ATE_AIPW,
        )
        for k in kinds
    )
    needs_g = any(
        k
        in (
            EstimatorKind.TI_AIPW_ATT,
            EstimatorKind.ATE_AIPW,
            EstimatorKind.ATE_IPTW,
        )
        for k in kinds
    )
    plan = make_folds(dataset, folds, seed=seed) if (needs_qhat or needs_g) else None
    qhat = None
    if needs_qhat or needs_g:
        qhat_path = _pick(args, config, "qhat", None)
        if qhat_path:
            qhat = ingest_qhat(dataset, qhat_path)
        else:
            ospec = _parse_outcome_model(
                _pick(args, config, "outcome_model", "gbm")
            )
            ospec = replace(ospec, seed=seed)
            qhat = fit_crossfit_q(dataset, plan, ospec)
    g = None
    if needs_g:
        if pspec.kind is PropensityKind.ORACLE:
            if not truth_path:
                raise InputError("--propensity oracle:<truth.json> requires a path")
            truth = read_truth_json(truth_path)
            pspec = replace(pspec, oracle=truth_g_for_dataset(dataset, truth))
        g = fit_crossfit_propensity(qhat, dataset, plan, pspec)
    estimates = compute_estimates(dataset, kinds, alpha, qhat=qhat, g=g)
    doc = {
        "n": dataset.n,
        "n1": dataset.n1,
        "alpha": alpha,
        "q_loss": None if qhat is None else q_loss(qhat, dataset),
        "estimates": [est.to_dict() for est in estimates.values()],
    }
    text = json.dumps(doc, indent=2)
    print(text)
    out_path = _pick(args, config, "out", None)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
    return 0


def cmd_coverage(args) -> int:
    config = _load_config(args.config)
    base = ExperimentGrid()
    pspec, _ = _parse_propensity(_pick(args, config, "propensity", "kernel"))
    grid = ExperimentGrid(
        beta_a_values=_parse_float_list(
            str(_pick(args, config, "beta_a", "1.0,0.0")), "--beta-a"
        ),
        beta_c_values=_parse_float_list(
            str(_pick(args, config, "beta_c", "50.0,100.0")), "--beta-c"
        ),
        gamma_values=_parse_float_list(
            str(_pick(args, config, "gamma", "1.0,4.0")), "--gamma"
        ),
        n=int(_pick(args, config, "n", base.n)),
        replications=int(_pick(args, config, "replications", 100)),
        base_seed=int(_pick(args, config, "seed", 0)),
        alpha=float(_pick(args, config, "alpha", 0.05)),
        folds=int(_pick(args, config, "folds", 5)),
        estimators=_parse_estimators(
            _pick(args, config, "estimators", DEFAULT_ESTIMATORS)
        ),
        outcome=_parse_outcome_model(_pick(args, config, "outcome_model", "gbm")),
        propensity=pspec,
        base_config=SimConfig(
            pi0=float(config.get("pi0", 0.8)),
            pi1=float(config.get("pi1", 0.6)),
            pc=float(config.get("pc", 0.5)),
            d_signal=int(config.get("d_signal", 2)),
            d_noise=int(config.get("d_noise", 4)),
            jitter=float(config.get("jitter", 0.5)),
        ),
    )
    jobs = int(_pick(args, config, "jobs", 1))
    out_dir = _pick(args, config, "out", ".")
    if not os.path.isdir(out_dir):
        raise InputError(f"output directory does not exist: {out_dir}")
    results = run_grid(grid, jobs=jobs)
    write_records_jsonl(results, os.path.join(out_dir, "records.jsonl"))
    for fmt, name in (("json", "report.json"), ("text", "report.txt"), ("csv", "report.csv")):
        with open(os.path.join(out_dir, name), "w") as fh:
            fh.write(render_report(results, fmt))
    print(render_report(results, "text"), end="")
    return 0


def cmd_diagnose(args) -> int:
    config = _load_config(args.config)
    input_path = _pick(args, config, "input", None)
    if not input_path:
        raise InputError("diagnose requires --input (a records.jsonl file)")
    records = read_records_jsonl(input_path)
    results = cells_from_records(records)
    bins = int(_pick(args, config, "bins", 4))
    kinds = _parse_estimators(_pick(args, config, "estimators", "ti"))
    table = diagnose_by_q_loss(results, bins, kind=kinds[0])
    print(table.format_text(), end="")
    out_path = _pick(args, config, "out", None)
    if out_path:
        with open(out_path, "w") as fh:
            json.dump(table.to_dict(), fh, indent=2)
            fh.write("\n")
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "coverage": cmd_coverage,
    "diagnose": cmd_diagnose,
}


def _emit_error(exc: Exception) -> None:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload), file=sys.stderr)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        _emit_error(exc)
        return 3
    except InputError as exc:
        _emit_error(exc)
        return 2
    except OSError as exc:
        _emit_error(exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
