"""Reference solvers for QoS-constrained energy-efficiency maximization.

The search space is the factored parameterization (alpha_k, p_k) per pair:
direction mix in [0, 1] and transmit power in (0, p_max].  The objective is
EE when all rate constraints hold and -(total QoS violation) otherwise, so
the search first drives itself feasible, then maximizes EE.

Both solvers walk finite grids.  ``coordinate_ascent_solve`` is the labeling
workhorse (multi-start, cyclic one-coordinate sweeps); ``exhaustive_grid_solve``
is the small-K ground truth used to validate it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from icgnn import beamforming as bf
from icgnn.channel import Dataset, SystemConfig


class BudgetError(ValueError):
    """Exhaustive enumeration refused: cost grows as resolution^(2K)."""


@dataclass
class OracleSolution:
    alpha: np.ndarray
    p: np.ndarray
    ee: float
    feasible: bool
    evals: int


class _GridProblem:
    """Per-sample tables making every coordinate scan a vectorized lookup.

    alpha only enters through transmitter k's gain row, so the full
    (grid, K) gain-row table per k is precomputed once; power moves reuse
    the current gain matrix unchanged.
    """

    def __init__(self, h: np.ndarray, config: SystemConfig, grid_points: int):
        self.k = config.n_pairs
        self.noise = config.noise_power
        self.r_req = config.r_req
        self.p_circuit = config.p_circuit
        self.alpha_grid = np.linspace(0.0, 1.0, grid_points)
        # power grid excludes 0: smallest point p_max/grid_points
        self.p_grid = config.p_max * np.arange(1, grid_points + 1) / grid_points
        zf_proj, mrt_proj, cross = bf.gain_tables(h)
        a = self.alpha_grid[:, None, None]
        mix = a * zf_proj[None] + (1.0 - a) * mrt_proj[None]
        norm2 = (
            self.alpha_grid**2
            + (1.0 - self.alpha_grid) ** 2
            + 2.0 * self.alpha_grid * (1.0 - self.alpha_grid) * cross[None].T
        ).T  # (grid, K)
        self.gain_rows = (np.abs(mix) ** 2) / norm2[:, :, None]  # [c, k, j]

    def rates(self, gains: np.ndarray, p: np.ndarray) -> np.ndarray:
        weighted = p[:, None] * gains
        signal = np.diag(weighted).copy()
        interference = weighted.sum(axis=0) - signal
        return np.log1p(signal / (interference + self.noise)) / bf.LN2

    def objective_batch(self, rates: np.ndarray, total_power: np.ndarray) -> np.ndarray:
        """rates (C, K), total_power (C,) -> mixed objective (C,)."""
        violation = np.maximum(self.r_req - rates, 0.0).sum(axis=1)
        feasible = violation == 0.0
        ee = rates.sum(axis=1) / (total_power + self.p_circuit)
        return np.where(feasible, ee, -violation)


def _ascend(problem: _GridProblem, alpha_idx: np.ndarray, p_idx: np.ndarray, max_sweeps: int):
    """Cyclic coordinate ascent from one start; returns (alpha_idx, p_idx, obj, evals)."""
    k = problem.k
    grid = len(problem.alpha_grid)
    gains = problem.gain_rows[alpha_idx, np.arange(k)]  # (K, K)
    p = problem.p_grid[p_idx]
    evals = 0
    rates = problem.rates(gains, p)
    current = float(problem.objective_batch(rates[None], np.array([p.sum()]))[0])
    evals += 1
    for _ in range(max_sweeps):
        before = current
        for i in range(k):
            # alpha_i move: gain row i varies, powers fixed
            cand_rows = problem.gain_rows[:, i]  # (grid, K)
            weighted = p[:, None] * gains
            col_sums = weighted.sum(axis=0)
            cand_weighted = p[i] * cand_rows
            new_sums = col_sums[None] - weighted[i][None] + cand_weighted
            signal = np.broadcast_to(np.diag(weighted), (grid, k)).copy()
            signal[:, i] = cand_weighted[:, i]
            cand_rates = np.log1p(signal / (new_sums - signal + problem.noise)) / bf.LN2
            obj = problem.objective_batch(cand_rates, np.full(grid, p.sum()))
            evals += grid
            best = int(np.argmax(obj))
            if obj[best] > current:
                current = float(obj[best])
                alpha_idx[i] = best
                gains[i] = cand_rows[best]
        for i in range(k):
            # p_i move: gains fixed, power i varies
            cand_p = problem.p_grid  # (grid,)
            weighted = p[:, None] * gains
            col_sums = weighted.sum(axis=0)
            delta = (cand_p[:, None] - p[i]) * gains[i][None]
            new_sums = col_sums[None] + delta
            signal = np.broadcast_to(np.diag(weighted), (grid, k)).copy()
            signal[:, i] = cand_p * gains[i, i]
            cand_rates = np.log1p(signal / (new_sums - signal + problem.noise)) / bf.LN2
            obj = problem.objective_batch(cand_rates, p.sum() - p[i] + cand_p)
            evals += grid
            best = int(np.argmax(obj))
            if obj[best] > current:
                current = float(obj[best])
                p_idx[i] = best
                p = problem.p_grid[p_idx]
        if current - before < 1e-8:
            break
    return alpha_idx, p_idx, current, evals


def _snap(grid: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.argmin(np.abs(grid[None, :] - np.asarray(values, dtype=np.float64)[:, None]), axis=1)


def coordinate_ascent_solve(
    h: np.ndarray,
    config: SystemConfig,
    grid_points: int = 101,
    max_sweeps: int = 50,
    starts=None,
    n_random_starts: int = 6,
    seed=0,
) -> OracleSolution:
    """Multi-start cyclic coordinate ascent over the (alpha, p) grid.

    Default starts: MRT at full power (alpha=0), ZF at full power (alpha=1),
    plus ``n_random_starts`` random grid points keyed by ``seed``.
    """
    if grid_points < 3:
        raise ValueError(f"grid_points must be >= 3, got {grid_points}")
    problem = _GridProblem(h, config, grid_points)
    k = config.n_pairs
    start_indices = []
    if starts is not None:
        if not starts:
            raise ValueError("starts must be nonempty")
        for alpha0, p0 in starts:
            start_indices.append((_snap(problem.alpha_grid, alpha0), _snap(problem.p_grid, p0)))
    else:
        full = np.full(k, grid_points - 1, dtype=np.intp)
        start_indices.append((np.zeros(k, dtype=np.intp), full.copy()))  # MRT, full power
        start_indices.append((full.copy(), full.copy()))  # ZF, full power
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        for _ in range(n_random_starts):
            start_indices.append(
                (rng.integers(0, grid_points, k).astype(np.intp), rng.integers(0, grid_points, k).astype(np.intp))
            )
    best = None
    total_evals = 0
    for alpha_idx, p_idx in start_indices:
        a_i, p_i, obj, evals = _ascend(problem, alpha_idx.copy(), p_idx.copy(), max_sweeps)
        total_evals += evals
        if best is None or obj > best[0]:
            best = (obj, a_i, p_i)
    obj, alpha_idx, p_idx = best
    alpha = problem.alpha_grid[alpha_idx]
    p = problem.p_grid[p_idx]
    gains = problem.gain_rows[alpha_idx, np.arange(k)]
    rates = problem.rates(gains, p)
    feasible = bool(np.all(rates >= config.r_req))
    ee = float(rates.sum() / (p.sum() + config.p_circuit))
    return OracleSolution(alpha=alpha, p=p, ee=ee, feasible=feasible, evals=total_evals)


def exhaustive_grid_solve(h: np.ndarray, config: SystemConfig, resolution: int = 33) -> OracleSolution:
    """Global optimum over the full resolution^(2K) grid; K <= 3 only."""
    k = config.n_pairs
    if k > 3:
        raise BudgetError(f"exhaustive enumeration at K={k} needs resolution^{2 * k} evaluations; K <= 3 only")
    if resolution < 9:
        raise ValueError(f"resolution must be >= 9, got {resolution}")
    problem = _GridProblem(h, config, resolution)
    p_combos = np.stack(np.meshgrid(*[problem.p_grid] * k, indexing="ij"), axis=-1).reshape(-1, k)
    p_totals = p_combos.sum(axis=1)
    best_obj = -np.inf
    best_alpha = best_p = None
    evals = 0
    for alpha_multi in np.ndindex(*([resolution] * k)):
        gains = problem.gain_rows[list(alpha_multi), np.arange(k)]  # (K, K)
        weighted_cols = p_combos @ gains  # (C, K): col sums
        signal = p_combos * np.diag(gains)[None]
        rates = np.log1p(signal / (weighted_cols - signal + problem.noise)) / bf.LN2
        obj = problem.objective_batch(rates, p_totals)
        evals += len(obj)
        idx = int(np.argmax(obj))
        if obj[idx] > best_obj:
            best_obj = float(obj[idx])
            best_alpha = problem.alpha_grid[list(alpha_multi)]
            best_p = p_combos[idx]
    gains = bf.gains_from_tables(best_alpha, *bf.gain_tables(h))
    rates = problem.rates(gains, best_p)
    feasible = bool(np.all(rates >= config.r_req))
    ee = float(rates.sum() / (best_p.sum() + config.p_circuit))
    return OracleSolution(alpha=best_alpha, p=best_p, ee=ee, feasible=feasible, evals=evals)


def label_dataset(
    dataset: Dataset,
    grid_points: int = 101,
    max_sweeps: int = 50,
    n_random_starts: int = 6,
    seed: int = 0,
) -> Dataset:
    """Attach per-sample max-EE labels (NaN where no feasible point was found)."""
    labels = np.empty(len(dataset), dtype=np.float64)
    for i in range(len(dataset)):
        sol = coordinate_ascent_solve(
            dataset.h[i],
            dataset.config,
            grid_points=grid_points,
            max_sweeps=max_sweeps,
            n_random_starts=n_random_starts,
            seed=(seed, i),
        )
        labels[i] = sol.ee if sol.feasible else np.nan
    return Dataset(dataset.config, dataset.h, labels, dataset.split)
