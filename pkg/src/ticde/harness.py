"""Replication experiments: bias/coverage grids, loss diagnostics, reports.

Each grid cell is a simulation configuration; each replication draws a
fresh sample, runs the full pipeline, and records every requested
estimator's point estimate and interval.  Per-replication records are kept
(and can be persisted as JSON lines) so every aggregate is auditable.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .core import Dataset, EstimatorKind, make_folds
from .errors import ConfigInvalid, TiCdeError, TooFewReplications
from .estimators import (
    estimate_ate_aipw,
    estimate_ate_iptw,
    estimate_tau_q,
    estimate_tau_ti,
    estimate_unadjusted,
)
from .outcome import OutcomeKind, OutcomeModelSpec, fit_crossfit_q, oracle_from_truth, q_loss
from .propensity import PropensityKind, PropensitySpec, fit_crossfit_propensity
from .simulation import SimConfig, SimSample, simulate

_NEEDS_QHAT = {
    EstimatorKind.OUTCOME_ONLY,
    EstimatorKind.TI_AIPW_ATT,
    EstimatorKind.ATE_AIPW,
}
_NEEDS_G = {
    EstimatorKind.TI_AIPW_ATT,
    EstimatorKind.ATE_AIPW,
    EstimatorKind.ATE_IPTW,
}


@dataclass(frozen=True)
class ExperimentGrid:
    """Cross-product of simulation settings plus the pipeline to run."""

    beta_a_values: tuple[float, ...] = (1.0, 0.0)
    beta_c_values: tuple[float, ...] = (50.0, 100.0)
    gamma_values: tuple[float, ...] = (1.0, 4.0)
    n: int = 10685
    replications: int = 100
    base_seed: int = 0
    alpha: float = 0.05
    folds: int = 5
    estimators: tuple[EstimatorKind, ...] = (
        EstimatorKind.UNADJUSTED,
        EstimatorKind.OUTCOME_ONLY,
        EstimatorKind.TI_AIPW_ATT,
    )
    outcome: OutcomeModelSpec = OutcomeModelSpec.gradient_boost()
    propensity: PropensitySpec = PropensitySpec()
    base_config: SimConfig = SimConfig()

    def validate(self) -> None:
        if self.replications < 1:
            raise ConfigInvalid(f"replications must be >= 1, got {self.replications}")
        if not (self.beta_a_values and self.beta_c_values and self.gamma_values):
            raise ConfigInvalid("grid must be nonempty in every simulation axis")
        if not self.estimators:
            raise ConfigInvalid("at least one estimator is required")
        if not (0.0 < self.alpha < 1.0):
            raise ConfigInvalid(f"alpha must lie in (0, 1), got {self.alpha}")

    def cells(self) -> list[tuple[float, float, float]]:
        return [
            (ba, bc, g)
            for ba in self.beta_a_values
            for bc in self.beta_c_values
            for g in self.gamma_values
        ]


@dataclass(frozen=True)
class EstimateRecord:
    tau: float
    se: float
    ci_low: float
    ci_high: float
    covered: bool


@dataclass(frozen=True)
class ReplicationRecord:
    cell_index: int
    beta_a: float
    beta_c: float
    gamma: float
    replication: int
    q_loss: float | None
    q_loss_true: float | None
    clipped_fraction: float | None
    estimates: dict[EstimatorKind, EstimateRecord]
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "cell_index": self.cell_index,
            "beta_a": self.beta_a,
            "beta_c": self.beta_c,
            "gamma": self.gamma,
            "replication": self.replication,
            "q_loss": self.q_loss,
            "q_loss_true": self.q_loss_true,
            "clipped_fraction": self.clipped_fraction,
            "estimates": {
                kind.value: {
                    "tau": est.tau,
                    "se": est.se,
                    "ci": [est.ci_low, est.ci_high],
                    "covered": est.covered,
                }
                for kind, est in self.estimates.items()
            },
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ReplicationRecord":
        estimates = {
            EstimatorKind(kind): EstimateRecord(
                tau=rec["tau"],
                se=rec["se"],
                ci_low=rec["ci"][0],
                ci_high=rec["ci"][1],
                covered=bool(rec["covered"]),
            )
            for kind, rec in payload.get("estimates", {}).items()
        }
        return cls(
            cell_index=payload["cell_index"],
            beta_a=payload["beta_a"],
            beta_c=payload["beta_c"],
            gamma=payload["gamma"],
            replication=payload["replication"],
            q_loss=payload.get("q_loss"),
            q_loss_true=payload.get("q_loss_true"),
            clipped_fraction=payload.get("clipped_fraction"),
            estimates=estimates,
            error=payload.get("error"),
        )


@dataclass(frozen=True)
class CellAggregate:
    avg_abs_bias: float
    coverage: float
    mean_tau: float
    completed: int


@dataclass
class CellResult:
    """All replication records for one grid cell plus recomputable summaries."""

    beta_a: float
    beta_c: float
    gamma: float
    n: int
    requested: int
    records: list[ReplicationRecord] = field(default_factory=list)

    @property
    def completed_records(self) -> list[ReplicationRecord]:
        return [r for r in self.records if r.error is None]

    @property
    def completed(self) -> int:
        return len(self.completed_records)

    def aggregate(self, kind: EstimatorKind) -> CellAggregate:
        recs = [r.estimates[kind] for r in self.completed_records if kind in r.estimates]
        if not recs:
            return CellAggregate(float("nan"), float("nan"), float("nan"), 0)
        taus = np.array([r.tau for r in recs])
        covered = np.array([r.covered for r in recs])
        return CellAggregate(
            avg_abs_bias=float(np.mean(np.abs(taus - self.beta_a))),
            coverage=float(np.mean(covered)),
            mean_tau=float(np.mean(taus)),
            completed=len(recs),
        )

    @property
    def mean_clipped_fraction(self) -> float | None:
        vals = [
            r.clipped_fraction
            for r in self.completed_records
            if r.clipped_fraction is not None
        ]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_q_loss(self) -> float | None:
        vals = [r.q_loss for r in self.completed_records if r.q_loss is not None]
        return float(np.mean(vals)) if vals else None

    def estimator_kinds(self) -> list[EstimatorKind]:
        kinds: list[EstimatorKind] = []
        for rec in self.records:
            for kind in rec.estimates:
                if kind not in kinds:
                    kinds.append(kind)
        return kinds

    def label(self) -> str:
        return f"ba={self.beta_a!r},bc={self.beta_c!r},g={self.gamma!r}"


def _replication_seeds(base_seed: int, cell_index: int, rep: int) -> tuple[int, int, int]:
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(cell_index, rep))
    sim, fit, corrupt = (int(v) for v in ss.generate_state(3, dtype=np.uint32))
    return sim, fit, corrupt


def _resolve_outcome_spec(
    grid_spec: OutcomeModelSpec, sample: SimSample, fit_seed: int, corrupt_seed: int
) -> OutcomeModelSpec:
    if grid_spec.kind is OutcomeKind.ORACLE and grid_spec.oracle is None:
        callback = oracle_from_truth(
            sample.true_q0,
            sample.true_q1,
            noise_sd=grid_spec.oracle_noise_sd,
            offset_q0=grid_spec.oracle_offset_q0,
            offset_q1=grid_spec.oracle_offset_q1,
            seed=corrupt_seed,
        )
        return replace(grid_spec, oracle=callback)
    if grid_spec.kind is not OutcomeKind.ORACLE:
        return replace(grid_spec, seed=fit_seed)
    return grid_spec


def compute_estimates(
    dataset: Dataset,
    kinds: Sequence[EstimatorKind],
    alpha: float,
    qhat=None,
    g=None,
) -> dict[EstimatorKind, "EstimateRecord"]:
    """Run the requested estimators; coverage is filled in by the caller."""
    out = {}
    for kind in kinds:
        if kind is EstimatorKind.UNADJUSTED:
            est = estimate_unadjusted(dataset, alpha)
        elif kind is EstimatorKind.OUTCOME_ONLY:
            est = estimate_tau_q(dataset, qhat, alpha)
        elif kind is EstimatorKind.TI_AIPW_ATT:
            est = estimate_tau_ti(dataset, qhat, g, alpha)
        elif kind is EstimatorKind.ATE_AIPW:
            est = estimate_ate_aipw(dataset, qhat, g, alpha)
        elif kind is EstimatorKind.ATE_IPTW:
            est = estimate_ate_iptw(dataset, g, alpha)
        else:
            raise ConfigInvalid(f"unknown estimator kind {kind}")
        out[kind] = est
    return out


def _run_replication(args: tuple) -> ReplicationRecord:
    grid, cell_index, cell, rep = args
    beta_a, beta_c, gamma = cell
    sim_seed, fit_seed, corrupt_seed = _replication_seeds(
        grid.base_seed, cell_index, rep
    )
    try:
        config = replace(
            grid.base_config,
            beta_a=beta_a,
            beta_c=beta_c,
            gamma=gamma,
            n=grid.n,
            seed=sim_seed,
        )
        sample = simulate(config)
        dataset = sample.dataset
        plan = make_folds(dataset, grid.folds, seed=fit_seed)
        needs_qhat = any(k in _NEEDS_QHAT for k in grid.estimators)
        needs_g = any(k in _NEEDS_G for k in grid.estimators)
        qhat = None
        loss = None
        loss_true = None
        if needs_qhat or needs_g:
            ospec = _resolve_outcome_spec(grid.outcome, sample, fit_seed, corrupt_seed)
            qhat = fit_crossfit_q(dataset, plan, ospec)
            loss = q_loss(qhat, dataset)
            loss_true = float(
                np.mean(
                    ((qhat.q0 - sample.true_q0) ** 2 + (qhat.q1 - sample.true_q1) ** 2)
                    / 2.0
                )
            )
        g = None
        clipped = None
        if needs_g:
            pspec = grid.propensity
            if pspec.kind is PropensityKind.ORACLE and pspec.oracle is None:
                pspec = replace(pspec, oracle=np.asarray(sample.true_g))
            g = fit_crossfit_propensity(qhat, dataset, plan, pspec)
            clipped = g.clipped_fraction
        raw = compute_estimates(dataset, grid.estimators, grid.alpha, qhat=qhat, g=g)
        estimates = {
            kind: EstimateRecord(
                tau=est.tau,
                se=est.se,
                ci_low=est.ci_low,
                ci_high=est.ci_high,
                covered=est.covers(beta_a),
            )
            for kind, est in raw.items()
        }
        return ReplicationRecord(
            cell_index=cell_index,
            beta_a=beta_a,
            beta_c=beta_c,
            gamma=gamma,
            replication=rep,
            q_loss=loss,
            q_loss_true=loss_true,
            clipped_fraction=clipped,
            estimates=estimates,
        )
    except TiCdeError as exc:
        return ReplicationRecord(
            cell_index=cell_index,
            beta_a=beta_a,
            beta_c=beta_c,
            gamma=gamma,
            replication=rep,
            q_loss=None,
            q_loss_true=None,
            clipped_fraction=None,
            estimates={},
            error=f"{type(exc).__name__}: {exc}",
        )


def run_grid(
    grid: ExperimentGrid, jobs: int = 1, log_path=None
) -> list[CellResult]:
    """Run every (cell, replication) job; deterministic given the base seed.

    Failed replications are recorded with their error and excluded from
    aggregates.  Results are merged in replication-index order so the output
    does not depend on ``jobs``.
    """
    grid.validate()
    cells = grid.cells()
    tasks = [
        (grid, ci, cell, rep)
        for ci, cell in enumerate(cells)
        for rep in range(grid.replications)
    ]
    if jobs > 1 and len(tasks) > 1:
        chunk = max(1, len(tasks) // (jobs * 8))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_replication, tasks, chunksize=chunk))
    else:
        records = [_run_replication(t) for t in tasks]
    records.sort(key=lambda r: (r.cell_index, r.replication))
    results = []
    for ci, (ba, bc, g) in enumerate(cells):
        cell_records = [r for r in records if r.cell_index == ci]
        results.append(
            CellResult(
                beta_a=ba,
                beta_c=bc,
                gamma=g,
                n=grid.n,
                requested=grid.replications,
                records=cell_records,
            )
        )
    if log_path is not None:
        write_records_jsonl(results, log_path)
    return results


# ---------------------------------------------------------------------------
# Per-replication record persistence
# ---------------------------------------------------------------------------

def write_records_jsonl(results: Sequence[CellResult], path) -> None:
    with open(path, "w") as fh:
        for cell in results:
            for rec in cell.records:
                fh.write(json.dumps(rec.to_dict()))
                fh.write("\n")


def read_records_jsonl(path) -> list[ReplicationRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(ReplicationRecord.from_dict(json.loads(line)))
    return records


def cells_from_records(
    records: Sequence[ReplicationRecord], n: int = 0
) -> list[CellResult]:
    """Group loose records (e.g. read back from a log) into cell results."""
    by_cell: dict[int, list[ReplicationRecord]] = {}
    for rec in records:
        by_cell.setdefault(rec.cell_index, []).append(rec)
    results = []
    for ci in sorted(by_cell):
        recs = sorted(by_cell[ci], key=lambda r: r.replication)
        first = recs[0]
        results.append(
            CellResult(
                beta_a=first.beta_a,
                beta_c=first.beta_c,
                gamma=first.gamma,
                n=n,
                requested=len(recs),
                records=recs,
            )
        )
    return results


# ---------------------------------------------------------------------------
# Q-loss diagnostic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiagnosticRow:
    bin_index: int
    count: int
    q_loss_low: float
    q_loss_high: float
    mean_q_loss: float
    mean_abs_bias: float
    tau_variance: float
    coverage: float

    def to_dict(self) -> dict:
        return {
            "bin": self.bin_index,
            "count": self.count,
            "q_loss_low": self.q_loss_low,
            "q_loss_high": self.q_loss_high,
            "mean_q_loss": self.mean_q_loss,
            "mean_abs_bias": self.mean_abs_bias,
            "tau_variance": self.tau_variance,
            "coverage": self.coverage,
        }


@dataclass(frozen=True)
class DiagnosticTable:
    kind: EstimatorKind
    rows: tuple[DiagnosticRow, ...]

    def to_dict(self) -> dict:
        return {"estimator": self.kind.value, "bins": [r.to_dict() for r in self.rows]}

    def format_text(self) -> str:
        header = f"{'bin':>3} {'count':>6} {'q_loss':>12} {'abs_bias':>12} {'variance':>12} {'coverage':>9}"
        lines = [f"q-loss diagnostic for {self.kind.value}", header]
        for r in self.rows:
            lines.append(
                f"{r.bin_index:>3} {r.count:>6} {r.mean_q_loss:>12.5g} "
                f"{r.mean_abs_bias:>12.5g} {r.tau_variance:>12.5g} {r.coverage:>9.3f}"
            )
        return "\n".join(lines) + "\n"


def diagnose_by_q_loss(
    results: Sequence[CellResult],
    bins: int,
    kind: EstimatorKind = EstimatorKind.TI_AIPW_ATT,
) -> DiagnosticTable:
    """Sort completed replications by factual-arm loss into equal-count bins
    and summarize bias, spread, and coverage per bin (ascending loss)."""
    if bins < 1:
        raise ConfigInvalid(f"bins must be >= 1, got {bins}")
    pool = [
        rec
        for cell in results
        for rec in cell.completed_records
        if rec.q_loss is not None and kind in rec.estimates
    ]
    if len(pool) < bins:
        raise TooFewReplications(
            f"{len(pool)} usable replications cannot fill {bins} bins"
        )
    pool.sort(key=lambda r: r.q_loss)
    rows = []
    for b, idx in enumerate(np.array_split(np.arange(len(pool)), bins)):
        chunk = [pool[i] for i in idx]
        losses = np.array([r.q_loss for r in chunk])
        taus = np.array([r.estimates[kind].tau for r in chunk])
        bias = np.abs(taus - np.array([r.beta_a for r in chunk]))
        covered = np.array([r.estimates[kind].covered for r in chunk])
        rows.append(
            DiagnosticRow(
                bin_index=b,
                count=len(chunk),
                q_loss_low=float(losses.min()),
                q_loss_high=float(losses.max()),
                mean_q_loss=float(losses.mean()),
                mean_abs_bias=float(bias.mean()),
                tau_variance=float(np.var(taus, ddof=1)) if len(taus) > 1 else 0.0,
                coverage=float(covered.mean()),
            )
        )
    return DiagnosticTable(kind=kind, rows=tuple(rows))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_SCHEMA = {
    "type": "object",
    "required": ["cells"],
    "properties": {
        "cells": {
            "type": "array",
            "items": {
                "type": "object",
                "required": [
                    "beta_a",
                    "beta_c",
                    "gamma",
                    "n",
                    "requested",
                    "completed",
                    "estimators",
                ],
                "properties": {
                    "beta_a": {"type": "number"},
                    "beta_c": {"type": "number"},
                    "gamma": {"type": "number"},
                    "n": {"type": "integer", "minimum": 0},
                    "requested": {"type": "integer", "minimum": 0},
                    "completed": {"type": "integer", "minimum": 0},
                    "mean_clipped_fraction": {"type": ["number", "null"]},
                    "mean_q_loss": {"type": ["number", "null"]},
                    "estimators": {
                        "type": "object",
                        "additionalProperties": {
                            "type": "object",
                            "required": ["avg_abs_bias", "coverage", "completed"],
                            "properties": {
                                "avg_abs_bias": {"type": "number"},
                                "coverage": {"type": "number", "minimum": 0, "maximum": 1},
                                "mean_tau": {"type": "number"},
                                "completed": {"type": "integer", "minimum": 0},
                            },
                        },
                    },
                },
            },
        }
    },
}


def report_dict(results: Sequence[CellResult]) -> dict:
    cells = []
    for cell in results:
        est = {}
        for kind in cell.estimator_kinds():
            agg = cell.aggregate(kind)
            est[kind.value] = {
                "avg_abs_bias": agg.avg_abs_bias,
                "coverage": agg.coverage,
                "mean_tau": agg.mean_tau,
                "completed": agg.completed,
            }
        cells.append(
            {
                "beta_a": cell.beta_a,
                "beta_c": cell.beta_c,
                "gamma": cell.gamma,
                "n": cell.n,
                "requested": cell.requested,
                "completed": cell.completed,
                "mean_clipped_fraction": cell.mean_clipped_fraction,
                "mean_q_loss": cell.mean_q_loss,
                "estimators": est,
            }
        )
    return {"cells": cells}


def _all_kinds(results: Sequence[CellResult]) -> list[EstimatorKind]:
    kinds: list[EstimatorKind] = []
    for cell in results:
        for kind in cell.estimator_kinds():
            if kind not in kinds:
                kinds.append(kind)
    return kinds


def _matrix_section(
    title: str, results: Sequence[CellResult], metric: str
) -> list[str]:
    kinds = _all_kinds(results)
    labels = [cell.label() for cell in results]
    name_w = max([len("estimator")] + [len(k.value) for k in kinds]) + 2
    col_ws = []
    table = {}
    for cell, label in zip(results, labels):
        col = {}
        for kind in kinds:
            agg = cell.aggregate(kind)
            col[kind] = repr(getattr(agg, metric))
        table[label] = col
        col_ws.append(max([len(label)] + [len(v) for v in col.values()]) + 2)
    lines = [title]
    header = "estimator".ljust(name_w) + "".join(
        lbl.ljust(w) for lbl, w in zip(labels, col_ws)
    )
    lines.append(header.rstrip())
    for kind in kinds:
        row = kind.value.ljust(name_w) + "".join(
            table[lbl][kind].ljust(w) for lbl, w in zip(labels, col_ws)
        )
        lines.append(row.rstrip())
    return lines


def render_report(results: Sequence[CellResult], fmt: str = "text") -> str:
    """Emit the grid summary as aligned text, JSON, or CSV."""
    if fmt == "json":
        return json.dumps(report_dict(results), indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(
            [
                "beta_a",
                "beta_c",
                "gamma",
                "n",
                "requested",
                "completed",
                "estimator",
                "avg_abs_bias",
                "coverage",
                "mean_tau",
                "estimator_completed",
            ]
        )
        for cell in results:
            for kind in cell.estimator_kinds():
                agg = cell.aggregate(kind)
                writer.writerow(
                    [
                        repr(cell.beta_a),
                        repr(cell.beta_c),
                        repr(cell.gamma),
                        cell.n,
                        cell.requested,
                        cell.completed,
                        kind.value,
                        repr(agg.avg_abs_bias),
                        repr(agg.coverage),
                        repr(agg.mean_tau),
                        agg.completed,
                    ]
                )
        return buf.getvalue()
    if fmt != "text":
        raise ConfigInvalid(f"unknown report format {fmt!r}")
    lines = _matrix_section("Average absolute bias", results, "avg_abs_bias")
    lines.append("")
    lines.extend(_matrix_section("Coverage", results, "coverage"))
    lines.append("")
    lines.append("Cell diagnostics")
    lines.append(
        f"{'cell':<34} {'requested':>9} {'completed':>9} {'clipped':>10} {'q_loss':>12}"
    )
    for cell in results:
        clipped = cell.mean_clipped_fraction
        qloss = cell.mean_q_loss
        lines.append(
            f"{cell.label():<34} {cell.requested:>9} {cell.completed:>9} "
            f"{('-' if clipped is None else format(clipped, '.4f')):>10} "
            f"{('-' if qloss is None else format(qloss, '.5g')):>12}"
        )
    return "\n".join(lines) + "\n"


def _parse_label(label: str) -> tuple[float, float, float]:
    parts = dict(p.split("=", 1) for p in label.split(","))
    return float(parts["ba"]), float(parts["bc"]), float(parts["g"])


def parse_text_report(text: str) -> dict:
    """Parse the aligned-text report back into per-cell aggregates.

    Returns {"cells": {(beta_a, beta_c, gamma): {kind: {"avg_abs_bias": ...,
    "coverage": ...}}}}; used to verify that the three report formats agree.
    """
    lines = text.splitlines()
    sections: dict[str, list[str]] = {}
    current = None
    for line in lines:
        if line in ("Average absolute bias", "Coverage", "Cell diagnostics"):
            current = line
            sections[current] = []
        elif current is not None and line.strip():
            sections[current].append(line)
    cells: dict[tuple, dict] = {}
    metric_by_section = {
        "Average absolute bias": "avg_abs_bias",
        "Coverage": "coverage",
    }
    for section, metric in metric_by_section.items():
        body = sections.get(section, [])
        if not body:
            continue
        header = body[0].split()
        labels = header[1:]
        for row in body[1:]:
            tokens = row.split()
            kind = tokens[0]
            for label, value in zip(labels, tokens[1:]):
                key = _parse_label(label)
                cells.setdefault(key, {}).setdefault(kind, {})[metric] = float(value)
    return {"cells": cells}


def parse_csv_report(text: str) -> dict:
    reader = csv.DictReader(io.StringIO(text))
    cells: dict[tuple, dict] = {}
    for row in reader:
        key = (float(row["beta_a"]), float(row["beta_c"]), float(row["gamma"]))
        cells.setdefault(key, {})[row["estimator"]] = {
            "avg_abs_bias": float(row["avg_abs_bias"]),
            "coverage": float(row["coverage"]),
        }
    return {"cells": cells}
