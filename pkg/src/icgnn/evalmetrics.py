"""Evaluation: optimality vs oracle labels, feasibility, timing, ablation grid.

Optimality is the mean EE ratio model/oracle over samples feasible for both;
oracle-infeasible samples are excluded from that mean and counted separately.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .channel import Dataset, SystemConfig
from .model import ModelConfig, ModelParams, forward_batch, icgnn_forward
from .beamforming import LN2

EVAL_SCHEMA = "icgnn-eval-v1"
ABLATION_SCHEMA = "icgnn-ablation-v1"

# Cumulative ablation rows: message passing, residual, subgraphs, enhancement.
ABLATION_ROWS = (
    ("none", dict(use_message_passing=False, use_residual=False, use_sgr=False,
                  use_feature_enhancement=False)),
    ("+MP", dict(use_message_passing=True, use_residual=False, use_sgr=False,
                 use_feature_enhancement=False)),
    ("+MP+RD", dict(use_message_passing=True, use_residual=True, use_sgr=False,
                    use_feature_enhancement=False)),
    ("+MP+RD+SR", dict(use_message_passing=True, use_residual=True, use_sgr=True,
                       use_feature_enhancement=False)),
    ("full", dict(use_message_passing=True, use_residual=True, use_sgr=True,
                  use_feature_enhancement=True)),
)


def model_outputs(ds: Dataset, params: ModelParams, chunk: int = 256):
    """Eval-mode rates (N,K), EE (N,), and QoS margins for a whole dataset."""
    system = ds.config
    frozen = params.detached()
    rates = np.empty((len(ds), system.n_pairs))
    ee = np.empty(len(ds))
    for start in range(0, len(ds), chunk):
        h = ds.h[start : start + chunk]
        out = forward_batch(h, frozen, system, training=False)
        g, p = out.gains.data, out.p.data
        weighted = g * p[:, :, None]
        signal = weighted[:, np.arange(system.n_pairs), np.arange(system.n_pairs)]
        interference = weighted.sum(axis=1) - signal
        r = np.log1p(signal / (interference + system.noise_power)) / LN2
        rates[start : start + chunk] = r
        ee[start : start + chunk] = r.sum(axis=1) / (p.sum(axis=1) + system.p_circuit)
    return rates, ee


def feasible_mask(rates: np.ndarray, system: SystemConfig, tol: float = 1e-6) -> np.ndarray:
    if tol < 0:
        raise ValueError(f"tol must be >= 0, got {tol}")
    return np.all(rates >= system.r_req - tol, axis=1)


def batch_feasibility(ds: Dataset, params: ModelParams, system: SystemConfig,
                      tol: float = 1e-6, chunk: int = 256) -> float:
    """Fraction of samples whose model outputs meet every QoS constraint."""
    rates, _ = model_outputs(ds, params, chunk)
    return float(feasible_mask(rates, system, tol).mean())


@dataclass(frozen=True)
class EvalReport:
    """Aggregated metrics for one (parameters, labeled dataset) pair."""

    n_samples: int
    feasibility: float  # percent over oracle-feasible samples; nan when none
    optimality: float | None  # percent over both-feasible; None when empty
    n_both_feasible: int
    n_oracle_infeasible: int
    mean_ee: float
    mean_oracle_ee: float
    tol: float
    regime: str  # "matched" or "transfer" pair-count regime
    config_echo: dict
    warn_oracle_gap: bool = False  # optimality > 101%: oracle likely deficient


def evaluate(params: ModelParams, ds: Dataset, tol: float = 1e-6,
             train_pairs: int | None = None, chunk: int = 256) -> EvalReport:
    """Score eval-mode outputs against the dataset's oracle labels.

    Feasibility is the percentage of oracle-feasible samples (finite label)
    whose model outputs meet every QoS constraint: draws that admit no
    feasible point at all are not failures of the model, so they only show
    up in n_oracle_infeasible.  Substituting the oracle's own solutions
    therefore always scores 100% / 100%.
    """
    if not ds.labeled:
        raise ValueError("dataset has no oracle labels; run label_dataset first")
    system = ds.config
    rates, ee = model_outputs(ds, params, chunk)
    feasible = feasible_mask(rates, system, tol)
    oracle_ok = np.isfinite(ds.labels)
    both = feasible & oracle_ok
    optimality = float(np.mean(ee[both] / ds.labels[both]) * 100.0) if both.any() else None
    regime = "matched" if train_pairs in (None, system.n_pairs) else "transfer"
    echo = dict(params.config.to_kv())
    echo.update(n_pairs=system.n_pairs, n_antennas=system.n_antennas, snr_db=system.snr_db)
    return EvalReport(
        n_samples=len(ds),
        feasibility=float(feasible[oracle_ok].mean() * 100.0)
        if oracle_ok.any() else float("nan"),
        optimality=optimality,
        n_both_feasible=int(both.sum()),
        n_oracle_infeasible=int((~oracle_ok).sum()),
        mean_ee=float(ee.mean()),
        mean_oracle_ee=float(np.nanmean(ds.labels)) if oracle_ok.any() else float("nan"),
        tol=tol,
        regime=regime,
        config_echo=echo,
        warn_oracle_gap=optimality is not None and optimality > 101.0,
    )


@dataclass(frozen=True)
class TimingReport:
    mean_s: float
    p95_s: float
    repeats: int

    @property
    def mean_ms(self) -> float:
        return self.mean_s * 1e3

    @property
    def p95_ms(self) -> float:
        return self.p95_s * 1e3


def inference_time(params: ModelParams, ds: Dataset, repeats: int = 100,
                   warmup: int = 10) -> TimingReport:
    """Wall clock of repeated single-sample forwards, warm-up excluded."""
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    system = ds.config
    frozen = params.detached()
    n = len(ds)
    for i in range(warmup):
        icgnn_forward(ds.h[i % n], frozen, system)
    times = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter()
        icgnn_forward(ds.h[i % n], frozen, system)
        times[i] = time.perf_counter() - t0
    return TimingReport(float(times.mean()), float(np.percentile(times, 95)), repeats)


@dataclass(frozen=True)
class AblationRow:
    name: str
    report: EvalReport
    timing: TimingReport
    delta_optimality: float | None  # vs the previous row; None for the first
    params: object = None  # trained ModelParams, for reuse by downstream runs


def ablation_suite(train_ds: Dataset, val_ds: Dataset, test_ds: Dataset,
                   base_config: ModelConfig, train_config, timing_repeats: int = 20,
                   log=None, rows_spec=None) -> list:
    """Train and score the cumulative-feature rows under one seed/budget.

    ``rows_spec`` defaults to all of ABLATION_ROWS; pass a prefix to run a
    shorter ladder (deltas are still against the previous row run).
    """
    from .training import train

    rows: list = []
    for name, flags in ABLATION_ROWS if rows_spec is None else rows_spec:
        cfg = dataclasses.replace(base_config, **flags)
        result = train(train_ds, val_ds, cfg, train_config)
        report = evaluate(result.params, test_ds)
        timing = inference_time(result.params, test_ds, repeats=timing_repeats)
        delta = None
        if rows and None not in (report.optimality, rows[-1].report.optimality):
            delta = report.optimality - rows[-1].report.optimality
        rows.append(AblationRow(name, report, timing, delta, result.params))
        if log:
            log(rows[-1])
    return rows


# ---------------------------------------------------------------- reporting


def _fmt_opt(value) -> str:
    return "n/a" if value is None else f"{value:.2f}"


def write_eval_csv(path, report: EvalReport, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={EVAL_SCHEMA}\n")
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["n_samples", report.n_samples])
        writer.writerow(["feasibility_pct", f"{report.feasibility:.4f}"])
        writer.writerow(["optimality_pct", _fmt_opt(report.optimality)])
        writer.writerow(["n_both_feasible", report.n_both_feasible])
        writer.writerow(["n_oracle_infeasible", report.n_oracle_infeasible])
        writer.writerow(["mean_ee", f"{report.mean_ee:.6g}"])
        writer.writerow(["mean_oracle_ee", f"{report.mean_oracle_ee:.6g}"])
        writer.writerow(["tol", report.tol])
        writer.writerow(["regime", report.regime])
        writer.writerow(["warn_oracle_gap", int(report.warn_oracle_gap)])


def format_eval_text(report: EvalReport) -> str:
    lines = [
        f"samples            {report.n_samples}",
        f"feasibility        {report.feasibility:.2f} % of solvable",
        f"optimality         {_fmt_opt(report.optimality)}"
        + (" %" if report.optimality is not None else ""),
        f"both feasible      {report.n_both_feasible}",
        f"oracle infeasible  {report.n_oracle_infeasible}",
        f"mean EE            {report.mean_ee:.4f} (oracle {report.mean_oracle_ee:.4f})",
        f"regime             {report.regime}",
    ]
    if report.warn_oracle_gap:
        lines.append("WARNING: optimality exceeds 101% — oracle labels look deficient")
    return "\n".join(lines)


def write_ablation_csv(path, rows, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={ABLATION_SCHEMA}\n")
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["row", "optimality_pct", "delta_pct", "feasibility_pct",
                         "mean_inference_ms", "p95_inference_ms"])
        for row in rows:
            writer.writerow([
                row.name,
                _fmt_opt(row.report.optimality),
                _fmt_opt(row.delta_optimality),
                f"{row.report.feasibility:.4f}",
                f"{row.timing.mean_ms:.4f}",
                f"{row.timing.p95_ms:.4f}",
            ])


def format_ablation_text(rows) -> str:
    out = [f"{'row':<12} {'optimality':>10} {'delta':>8} {'feas':>8} {'ms':>8}"]
    for row in rows:
        out.append(
            f"{row.name:<12} {_fmt_opt(row.report.optimality):>10} "
            f"{_fmt_opt(row.delta_optimality):>8} {row.report.feasibility:>7.2f}% "
            f"{row.timing.mean_ms:>8.3f}"
        )
    return "\n".join(out)
