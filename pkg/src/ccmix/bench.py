"""Simulation studies: surjection-table recovery and KL consistency."""
from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .estim import block_loglik, inner_em, mh_delta, random_block_start
from .model import (BlockParams, BlockPartition, CcmModel, MaxDepParams, clamp_simplex,
                    enumerate_cells, joint_log_matrix, random_surjection, sample, sample_codes)
from .select import SearchConfig, select_model

BASE_ALPHA = np.array([0.20, 0.20, 0.60])
TARGET_FIRST = np.array([0.075, 0.850, 0.075])
TARGET_SECOND = np.array([0.850, 0.075, 0.075])
TAU = np.array([0.60, 0.20, 0.20])
IDENTITY = np.array([0, 1, 2])
CYCLIC = np.array([1, 2, 0])


@dataclass(frozen=True)
class SimScenario:
    """Two classes of ternary variables grouped in consecutive pairs.

    ``u`` in [0, 1) controls the class overlap; ``rho`` overrides the
    dependency weight ``0.6 (1 - u)`` when given.
    """

    d: int
    u: float = 0.0
    rho: Optional[float] = None
    pi: tuple = (0.5, 0.5)

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise ValueError("the scenario needs an even number of variables")
        if not 0.0 <= self.u < 1.0:
            raise ValueError("u must lie in [0, 1)")

    @property
    def dependency_weight(self) -> float:
        return 0.6 * (1 - self.u) if self.rho is None else self.rho

    def partition(self) -> BlockPartition:
        pairs = [[2 * b, 2 * b + 1] for b in range(self.d // 2)]
        return BlockPartition.from_lists([pairs, pairs], (3,) * self.d)

    def model(self) -> CcmModel:
        u, rho = self.u, self.dependency_weight
        a2_first = BASE_ALPHA * (1 - u) + TARGET_FIRST * u
        a2_second = BASE_ALPHA * (1 - u) + TARGET_SECOND * u
        c1 = BlockParams(rho, (BASE_ALPHA.copy(), BASE_ALPHA.copy()), MaxDepParams(TAU.copy(), (IDENTITY.copy(),)))
        c2 = BlockParams(rho, (a2_first, a2_second), MaxDepParams(TAU.copy(), (CYCLIC.copy(),)))
        nb = self.d // 2
        model = CcmModel(2, self.partition(), np.array(self.pi, dtype=float),
                         ((c1,) * nb, (c2,) * nb), (3,) * self.d)
        model.validate()
        return model


# --- divergences and error rates -----------------------------------------

def _check_same_space(truth: CcmModel, est: CcmModel):
    if truth.modality_counts != est.modality_counts:
        raise ValueError("models live on different spaces")


def kl_divergence(truth: CcmModel, est: CcmModel, mode: str = "exact", n_mc: int = 1_000_000,
                  rng: Optional[np.random.Generator] = None, max_cells: int = 1_000_000) -> float:
    """KL(truth || est) between the two mixture distributions.

    The divergence of mixture densities is unchanged by relabelling the
    classes of either model, so no permutation search is needed.
    """
    _check_same_space(truth, est)
    if mode == "exact":
        n_cells = math.prod(truth.modality_counts)
        if n_cells > max_cells:
            raise ValueError(f"{n_cells} cells exceed the exact-mode limit of {max_cells}")
        cells = enumerate_cells(truth.modality_counts)
        lp = logsumexp(joint_log_matrix(cells, truth), axis=1)
        lq = logsumexp(joint_log_matrix(cells, est), axis=1)
        p = np.exp(lp)
        on = p > 0
        if np.isneginf(lq[on]).any():
            return math.inf
        return float(max(0.0, np.sum(p[on] * (lp[on] - lq[on]))))
    if mode == "mc":
        rng = np.random.default_rng() if rng is None else rng
        x, _, _ = sample_codes(truth, n_mc, rng)
        lp = logsumexp(joint_log_matrix(x, truth), axis=1)
        lq = logsumexp(joint_log_matrix(x, est), axis=1)
        return float(np.mean(lp - lq))
    raise ValueError(f"unknown mode {mode!r}")


def bayes_error(model: CcmModel, mode: str = "exact", n_mc: int = 200_000,
                rng: Optional[np.random.Generator] = None) -> float:
    """Misclassification rate of the MAP rule under the generating model."""
    if mode == "exact":
        cells = enumerate_cells(model.modality_counts)
        joint = np.exp(joint_log_matrix(cells, model))
        return float(1.0 - joint.max(axis=1).sum())
    rng = np.random.default_rng() if rng is None else rng
    x, z, _ = sample_codes(model, n_mc, rng)
    return float(np.mean(joint_log_matrix(x, model).argmax(axis=1) != z))


def calibrate_u(target: float, d: int, mc_size: int = 0, rng: Optional[np.random.Generator] = None,
                tol: float = 0.005, rho: Optional[float] = None) -> float:
    """Overlap parameter giving the requested Bayes error.

    The error is computed exactly by cell enumeration when ``mc_size`` is 0,
    otherwise by Monte Carlo with common random numbers across evaluations.
    Bisection runs on the bracket between ``u = 0`` and the ``u`` in [0, 1)
    where the error is furthest from it.
    """
    if not 0 < target < 0.5:
        raise ValueError("target error must lie in (0, 0.5)")
    seed = None if rng is None else int(rng.integers(2**32))

    def err(u):
        model = SimScenario(d, u, rho).model()
        if mc_size:
            return bayes_error(model, "mc", mc_size, np.random.default_rng(seed))
        return bayes_error(model)

    grid = np.linspace(0.0, 0.99, 100)
    values = np.array([err(u) for u in grid])
    above = values - target
    crossings = np.flatnonzero(np.sign(above[:-1]) != np.sign(above[1:]))
    if len(crossings) == 0:
        raise ValueError(f"no u in [0, 1) gives a Bayes error of {target}")
    i = int(crossings[0])
    lo, hi = grid[i], grid[i + 1]
    f_lo = above[i]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        f_mid = err(mid) - target
        if abs(f_mid) <= tol * 1e-3:
            return float(mid)
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return float(0.5 * (lo + hi))


# --- surjection-table recovery -------------------------------------------

@dataclass
class RecoveryRow:
    n_vars: int
    n_modalities: int
    init: str
    replicate: int
    iterations: int
    reached: bool


def _one_class_model(n_vars, n_mod, rho, rng):
    m_block = (n_mod,) * n_vars
    alpha = tuple(clamp_simplex(rng.dirichlet(np.ones(n_mod))) for _ in range(n_vars))
    tau = clamp_simplex(rng.dirichlet(np.ones(n_mod)))
    delta = tuple(random_surjection(n_mod, n_mod, rng) for _ in range(n_vars - 1))
    theta = BlockParams(rho, alpha, MaxDepParams(tau, delta))
    part = BlockPartition.from_lists([[list(range(n_vars))]], m_block)
    return CcmModel(1, part, np.array([1.0]), ((theta,),), m_block)


def delta_recovery_once(n_vars, n_mod, init, rng, n=200, rho=0.5, t_max=20, max_iter=1000):
    """Iterations the walk needs to reach the likelihood of the true table."""
    truth = _one_class_model(n_vars, n_mod, rho, rng)
    data, _, _ = sample(truth, n, rng)
    xb, inv = data.patterns.block(tuple(range(n_vars)))
    w = np.bincount(inv, weights=data.patterns.counts, minlength=len(xb))
    m_block = (n_mod,) * n_vars
    start = random_block_start(xb, w, m_block, rng)
    if init == "random":
        delta = tuple(random_surjection(n_mod, n_mod, rng) for _ in range(n_vars - 1))
        start = BlockParams(start.rho, start.alpha, MaxDepParams(start.maxdep.tau, delta))
    elif init != "smart":
        raise ValueError(f"unknown init {init!r}")
    true_fit = inner_em(xb, w, truth.blocks[0][0].maxdep.delta, start, t_max)
    target = block_loglik(xb, w, true_fit)
    _, path = mh_delta(xb, w, start, max_iter, rng, t_max, stop_at=target - 1e-9, return_path=True)
    true_key = truth.blocks[0][0].maxdep.key()
    for s, key, ll in path:
        if ll >= target - 1e-9 or key == true_key:
            return s, True
    return path[-1][0], False


def run_delta_recovery(modalities=(3, 4), variables=(3,), replicates: int = 50,
                       rng: Optional[np.random.Generator] = None, n: int = 200, rho: float = 0.5,
                       t_max: int = 20, max_iter: int = 1000) -> list:
    rng = np.random.default_rng() if rng is None else rng
    rows = []
    for n_vars in variables:
        for n_mod in modalities:
            for init in ("smart", "random"):
                for rep in range(replicates):
                    it, ok = delta_recovery_once(n_vars, n_mod, init, rng, n, rho, t_max, max_iter)
                    rows.append(RecoveryRow(n_vars, n_mod, init, rep, it, ok))
    return rows


def recovery_medians(rows) -> dict:
    groups = {}
    for r in rows:
        groups.setdefault((r.n_vars, r.n_modalities, r.init), []).append(r.iterations)
    return {k: statistics.median(v) for k, v in sorted(groups.items())}


# --- KL consistency study ------------------------------------------------

@dataclass
class KlCell:
    d: int
    n: int
    values: list
    seeds: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else math.nan

    @property
    def sd(self) -> float:
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 else math.nan


@dataclass
class KlReport:
    cells: list = field(default_factory=list)
    u: dict = field(default_factory=dict)

    def cell(self, d, n) -> KlCell:
        return next(c for c in self.cells if c.d == d and c.n == n)

    def summary(self) -> dict:
        return {
            "u": {str(k): v for k, v in self.u.items()},
            "grid": [{"d": c.d, "n": c.n, "mean": c.mean, "sd": c.sd, "replicates": len(c.values)}
                     for c in self.cells],
        }


def run_kl_study(d_list=(4,), n_list=(100, 800), replicates: int = 20,
                 rng: Optional[np.random.Generator] = None, target_error: float = 0.10,
                 config: Optional[SearchConfig] = None) -> KlReport:
    """Simulate, search the block structure at g = 2 and score the estimate by KL."""
    rng = np.random.default_rng() if rng is None else rng
    config = config or SearchConfig(g_max=2, chains=1)
    report = KlReport()
    for d in d_list:
        u = calibrate_u(target_error, d)
        report.u[d] = u
        truth = SimScenario(d, u).model()
        for n in n_list:
            values, seeds = [], []
            for _ in range(replicates):
                seed = int(rng.integers(2**31))
                rep_rng = np.random.default_rng(seed)
                data, _, _ = sample(truth, n, rep_rng)
                cfg = SearchConfig(**{**config.__dict__, "seed": seed})
                est = select_model(data, cfg, g_values=[2]).best
                values.append(kl_divergence(truth, est))
                seeds.append(seed)
            report.cells.append(KlCell(d, n, values, seeds))
    return report


def write_recovery_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_vars", "n_modalities", "init", "replicate", "iterations", "reached"])
        for r in rows:
            w.writerow([r.n_vars, r.n_modalities, r.init, r.replicate, r.iterations, int(r.reached)])


def write_kl_csv(path, report: KlReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["d", "n", "replicate", "seed", "kl"])
        for c in report.cells:
            for i, (s, v) in enumerate(zip(c.seeds, c.values)):
                w.writerow([c.d, c.n, i, s, repr(v)])
