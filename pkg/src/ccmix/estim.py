"""Parameter estimation for a fixed number of classes and block structure.

Three nested procedures:

* ``inner_em`` fits the continuous block parameters (rho, alpha, tau) for a
  fixed surjection table, with rows weighted by their class responsibility;
* ``mh_delta`` / ``mh_delta_exhaustive`` search the surjection tables;
* ``gem_fit`` alternates class responsibilities and block updates.

Every block routine takes zero-based block codes ``xb`` (rows x block
variables, first column the leading variable) and nonnegative row weights.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .data import Dataset
from .model import (BlockParams, BlockPartition, CcmModel, FitMeta, MaxDepParams,
                    clamp_simplex, count_surjections, joint_log_matrix, nu_ccm, nu_cim,
                    surjection_space_size, all_delta_tables, surjections)

log = logging.getLogger(__name__)

EXHAUSTIVE_CAP = 5000
# starting rho for a freshly proposed table; EM cannot leave rho = 0
PROPOSAL_RHO_FLOOR = 0.05


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class StoppingRules:
    r_max: int = 10
    s_max: int = 1
    t_max: int = 5
    q_max: Optional[int] = None

    def __post_init__(self):
        for name in ("r_max", "s_max", "t_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.q_max is not None and self.q_max < 1:
            raise ValueError("q_max must be at least 1")

    def q_for(self, d: int) -> int:
        return self.q_max if self.q_max is not None else 20 * d


# --- batched block likelihood --------------------------------------------

def _support(xb, deltas):
    """(S, c) mask of rows lying on each table's dependency support."""
    img = deltas[:, :, xb[:, 0]]
    return np.all(img == xb[:, 1:].T[None, :, :], axis=1)


def _estep(xb, w, rho, alphas, tau, support):
    li = np.zeros((len(rho), xb.shape[0]))
    for j, a in enumerate(alphas):
        li += np.log(a[:, xb[:, j]])
    with np.errstate(divide="ignore", invalid="ignore"):
        lm = np.where(support, np.log(tau[:, xb[:, 0]]), -np.inf)
        lo = np.log1p(-rho)[:, None] + li
        hi = np.log(rho)[:, None] + lm
        lp = np.logaddexp(lo, hi)
        y = np.where(np.isfinite(hi), np.exp(hi - lp), 0.0)
        ll = np.where(w > 0, w * lp, 0.0).sum(axis=1)
    return ll, y


def _mstep(xb, w, y, rho, alphas, tau, m_block, fixed_rho):
    total = w.sum()
    wy = w * y
    w1y = w * (1.0 - y)
    n_dep = wy.sum(axis=1)
    n_ind = w1y.sum(axis=1)
    if not fixed_rho:
        rho = np.clip(n_dep / total, 0.0, 1.0)
    onehot = np.eye(m_block[0])[xb[:, 0]]
    with np.errstate(invalid="ignore", divide="ignore"):
        new_tau = (wy @ onehot) / n_dep[:, None]
    tau = clamp_simplex(np.where(n_dep[:, None] > 0, new_tau, tau))
    new_alphas = []
    for j, a in enumerate(alphas):
        onehot = np.eye(m_block[j])[xb[:, j]]
        with np.errstate(invalid="ignore", divide="ignore"):
            upd = (w1y @ onehot) / n_ind[:, None]
        new_alphas.append(clamp_simplex(np.where(n_ind[:, None] > 0, upd, a)))
    return rho, new_alphas, tau


def _em_batch(xb, w, deltas, rho, alphas, tau, m_block, n_iter, fixed_rho=False, trace=False):
    """Run ``n_iter`` local EM iterations for S tables at once."""
    support = _support(xb, deltas)
    lls = []
    for _ in range(n_iter):
        ll, y = _estep(xb, w, rho, alphas, tau, support)
        if trace:
            lls.append(ll)
        rho, alphas, tau = _mstep(xb, w, y, rho, alphas, tau, m_block, fixed_rho)
    ll, _ = _estep(xb, w, rho, alphas, tau, support)
    lls.append(ll)
    return rho, alphas, tau, ll, lls


def _stack(theta: BlockParams, S: int):
    rho = np.full(S, float(theta.rho))
    alphas = [np.tile(np.asarray(a, dtype=float), (S, 1)) for a in theta.alpha]
    tau = np.tile(np.asarray(theta.maxdep.tau, dtype=float), (S, 1))
    return rho, alphas, tau


def _delta_array(delta) -> np.ndarray:
    return np.asarray([np.asarray(img, dtype=np.int64) for img in delta])[None]


def _unstack(rho, alphas, tau, deltas, s) -> BlockParams:
    md = MaxDepParams(tau[s].copy(), tuple(deltas[s, j].copy() for j in range(deltas.shape[1])))
    return BlockParams(float(rho[s]), tuple(a[s].copy() for a in alphas), md)


def _prepare(xb, w):
    xb = np.asarray(xb, dtype=np.int64)
    if xb.ndim == 1:
        xb = xb[:, None]
    w = np.asarray(w, dtype=float)
    if (w < 0).any():
        raise EstimationError("weights must be nonnegative")
    if not w.sum() > 0:
        raise EstimationError("block weights sum to zero")
    return xb, w


def _m_block(theta: BlockParams):
    return tuple(len(a) for a in theta.alpha)


def default_maxdep(m_block) -> MaxDepParams:
    delta = tuple(np.minimum(np.arange(m_block[0]), mj - 1) for mj in m_block[1:])
    return MaxDepParams(np.full(m_block[0], 1.0 / m_block[0]), delta)


def _ensure_maxdep(theta: BlockParams) -> BlockParams:
    if theta.maxdep is None:
        return BlockParams(theta.rho, theta.alpha, default_maxdep(_m_block(theta)))
    return theta


def block_loglik(xb, w, theta: BlockParams) -> float:
    """Weighted block log-likelihood ``sum_i w_i log p(xb_i; theta)``."""
    xb, w = _prepare(xb, w)
    if len(theta.alpha) == 1 or theta.maxdep is None:
        li = sum(np.log(np.asarray(a)[xb[:, j]]) for j, a in enumerate(theta.alpha))
        return float(np.where(w > 0, w * li, 0.0).sum())
    rho, alphas, tau = _stack(theta, 1)
    ll, _ = _estep(xb, w, rho, alphas, tau, _support(xb, _delta_array(theta.maxdep.delta)))
    return float(ll[0])


def block_responsibilities(xb, theta: BlockParams) -> np.ndarray:
    """Posterior probability that each row arises from the dependency part."""
    xb = np.asarray(xb, dtype=np.int64)
    if theta.maxdep is None or theta.rho == 0:
        return np.zeros(xb.shape[0])
    rho, alphas, tau = _stack(theta, 1)
    _, y = _estep(xb, np.ones(xb.shape[0]), rho, alphas, tau,
                  _support(xb, _delta_array(theta.maxdep.delta)))
    return y[0]


# --- inner EM ------------------------------------------------------------

def fit_singleton(xb, w, m: int) -> BlockParams:
    xb, w = _prepare(xb, w)
    freq = np.bincount(xb[:, 0], weights=w, minlength=m) / w.sum()
    return BlockParams(0.0, (clamp_simplex(freq),))


def inner_em(xb, w, delta, init: BlockParams, t_max: int = 5, return_trace: bool = False):
    """Local EM on (rho, alpha, tau) with the surjection table held fixed.

    Returns the block parameters after ``t_max`` iterations, and with
    ``return_trace`` also the weighted block log-likelihood before each
    iteration and after the last one.
    """
    xb, w = _prepare(xb, w)
    m_block = _m_block(init)
    if len(m_block) == 1:
        theta = fit_singleton(xb, w, m_block[0])
        return (theta, [block_loglik(xb, w, theta)]) if return_trace else theta
    init = _ensure_maxdep(init)
    deltas = _delta_array(delta)
    rho, alphas, tau = _stack(init, 1)
    rho, alphas, tau, _, lls = _em_batch(xb, w, deltas, rho, alphas, tau, m_block, t_max,
                                         trace=return_trace)
    theta = _unstack(rho, alphas, tau, deltas, 0)
    if return_trace:
        return theta, [float(v[0]) for v in lls]
    return theta


# --- surjection table neighbourhood --------------------------------------

def _is_surjective_table(table, m_block):
    return all(len(set(row)) == mj for row, mj in zip(table, m_block[1:]))


@lru_cache(maxsize=200_000)
def _neighbours(key: tuple, m_block: tuple) -> tuple:
    entries = [(j, h) for j in range(len(key)) for h in range(m_block[0])]
    base = [list(row) for row in key]
    seen = set()
    out = []

    def emit(table):
        k = tuple(tuple(row) for row in table)
        if k != key and k not in seen and _is_surjective_table(k, m_block):
            seen.add(k)
            out.append(k)

    for e, (j, h) in enumerate(entries):
        for v in range(m_block[j + 1]):
            if v == base[j][h]:
                continue
            table = [row[:] for row in base]
            table[j][h] = v
            emit(table)
    for e1 in range(len(entries)):
        j1, h1 = entries[e1]
        for e2 in range(e1 + 1, len(entries)):
            j2, h2 = entries[e2]
            for v1 in range(m_block[j1 + 1]):
                if v1 == base[j1][h1]:
                    continue
                for v2 in range(m_block[j2 + 1]):
                    if v2 == base[j2][h2]:
                        continue
                    table = [row[:] for row in base]
                    table[j1][h1] = v1
                    table[j2][h2] = v2
                    emit(table)
    return tuple(out)


def _key(delta) -> tuple:
    return tuple(tuple(int(v) for v in img) for img in delta)


def delta_neighborhood(delta, m_block) -> list:
    """Valid tables differing from ``delta`` in one or two image entries.

    ``delta`` is a sequence of zero-based image arrays, one per non-leading
    variable; the result excludes ``delta`` itself.
    """
    nb = _neighbours(_key(delta), tuple(int(v) for v in m_block))
    return [tuple(np.array(row, dtype=np.int64) for row in t) for t in nb]


def neighborhood_size(delta, m_block) -> int:
    return len(_neighbours(_key(delta), tuple(int(v) for v in m_block)))


# --- discrete search -----------------------------------------------------

def _proposal_start(theta: BlockParams) -> BlockParams:
    if theta.rho < PROPOSAL_RHO_FLOOR:
        return BlockParams(PROPOSAL_RHO_FLOOR, theta.alpha, theta.maxdep)
    return theta


def mh_log_acceptance(ll_new: float, ll_cur: float, size_new: int, size_cur: int) -> float:
    """Log of the acceptance ratio before truncation at 1.

    The likelihood ratio is multiplied by ``|N(new)| / |N(cur)|``, the
    neighbourhood sizes of the proposed and current tables.
    """
    return (ll_new - ll_cur) + math.log(size_new) - math.log(size_cur)


def mh_delta(xb, w, theta_init: BlockParams, s_max: int, rng: np.random.Generator,
             t_max: int = 5, stop_at: Optional[float] = None, return_path: bool = False):
    """Metropolis-Hastings walk over surjection tables.

    Each step draws a neighbour uniformly, refits the continuous parameters by
    ``inner_em`` from the initial ones (as the exhaustive search does, so a
    table's score does not depend on the path) and accepts with probability
    ``min(1, L(new) |N(new)| / (L(cur) |N(cur)|))`` where ``L`` is the weighted
    likelihood and ``N`` the neighbourhood.  The best visited state (the
    initial parameters included) is returned.  ``stop_at`` ends the walk as
    soon as a visited state reaches that log-likelihood.
    """
    xb, w = _prepare(xb, w)
    m_block = _m_block(theta_init)
    if len(m_block) < 2:
        raise EstimationError("surjection search needs a block of two or more variables")
    theta_init = _ensure_maxdep(theta_init)
    prop_start = _proposal_start(theta_init)
    best, best_ll = theta_init, block_loglik(xb, w, theta_init)
    cur = inner_em(xb, w, theta_init.maxdep.delta, theta_init, t_max)
    cur_ll = block_loglik(xb, w, cur)
    if cur_ll > best_ll:
        best, best_ll = cur, cur_ll
    path = [(0, cur.maxdep.key(), cur_ll)]
    if stop_at is not None and best_ll >= stop_at:
        return (best, path) if return_path else best
    cur_size = neighborhood_size(cur.maxdep.delta, m_block)
    for s in range(1, s_max + 1):
        if cur_size == 0:
            break
        nb = _neighbours(cur.maxdep.key(), m_block)
        table = nb[int(rng.integers(len(nb)))]
        prop = inner_em(xb, w, table, prop_start, t_max)
        prop_ll = block_loglik(xb, w, prop)
        prop_size = neighborhood_size(prop.maxdep.delta, m_block)
        log_mu = mh_log_acceptance(prop_ll, cur_ll, prop_size, cur_size)
        if log_mu >= 0 or math.log(rng.uniform()) < log_mu:
            cur, cur_ll, cur_size = prop, prop_ll, prop_size
        if prop_ll > best_ll:
            best, best_ll = prop, prop_ll
        path.append((s, prop.maxdep.key(), prop_ll))
        if stop_at is not None and best_ll >= stop_at:
            break
    return (best, path) if return_path else best


def mh_delta_exhaustive(xb, w, theta_init: BlockParams, t_max: int = 5,
                        cap: int = EXHAUSTIVE_CAP, return_scores: bool = False):
    """Fit every surjection table and keep the best (never worse than the start)."""
    xb, w = _prepare(xb, w)
    m_block = _m_block(theta_init)
    size = surjection_space_size(m_block)
    if size > cap:
        raise EstimationError(f"surjection space of {size} tables exceeds the cap of {cap}")
    theta_init = _ensure_maxdep(theta_init)
    deltas = all_delta_tables(m_block)
    rho, alphas, tau = _stack(_proposal_start(theta_init), len(deltas))
    rho, alphas, tau, ll, _ = _em_batch(xb, w, deltas, rho, alphas, tau, m_block, t_max)
    s = int(np.argmax(ll))
    best = _unstack(rho, alphas, tau, deltas, s)
    if block_loglik(xb, w, theta_init) > ll[s]:
        best = theta_init
    return (best, ll) if return_scores else best


# --- constrained rho for the non-identifiable two-variable case ----------

def _profile(xb, w, theta, rhos, n_iter):
    S = len(rhos)
    rho, alphas, tau = _stack(theta, S)
    rho = np.asarray(rhos, dtype=float)
    deltas = np.repeat(_delta_array(theta.maxdep.delta), S, axis=0)
    rho, alphas, tau, ll, _ = _em_batch(xb, w, deltas, rho, alphas, tau, _m_block(theta),
                                        n_iter, fixed_rho=True)
    return rho, alphas, tau, deltas, ll


def _rho_saturated(xb, w, theta: BlockParams) -> Optional[BlockParams]:
    """Largest-rho exact fit of the weighted table, if the model can reach it.

    With a binary second variable every first-variable modality ``h`` has one
    cell off the dependency support, ``c(h) = 1 - delta(h)``.  Matching the
    table there fixes ``alpha_1[h] = P[h, c(h)] / ((1 - rho) b[c(h)])``; the
    dependency weights are non-negative exactly when ``b[0]`` lies in an
    interval given by the row profiles; the normalisation of ``alpha_1``
    then reads ``1 - rho = A0 / b[0] + A1 / b[1]``, which is convex in
    ``b[0]`` and minimised in closed form.  Returns None when no parameter
    reproduces the table.
    """
    m1 = _m_block(theta)[0]
    delta = np.asarray(theta.maxdep.delta[0])
    table = np.bincount(xb[:, 0] * 2 + xb[:, 1], weights=w, minlength=2 * m1).reshape(m1, 2)
    total = table.sum()
    if total <= 0:
        return None
    P = table / total
    rows = np.arange(m1)
    off = 1 - delta
    rowsum = P.sum(axis=1)
    share0 = np.divide(P[:, 0], rowsum, out=np.zeros(m1), where=rowsum > 0)
    live = rowsum > 0
    lo = max([0.0] + share0[live & (off == 0)].tolist())
    hi = min([1.0] + share0[live & (off == 1)].tolist())
    if lo > hi:
        return None
    A0 = P[rows[off == 0], 0].sum()
    A1 = P[rows[off == 1], 1].sum()
    r0, r1 = math.sqrt(A0), math.sqrt(A1)
    b0 = float(np.clip(r0 / (r0 + r1), lo, hi)) if r0 + r1 > 0 else 0.5 * (lo + hi)
    b = np.array([b0, 1.0 - b0])
    with np.errstate(divide="ignore", invalid="ignore"):
        f = sum(A / bc if A > 0 else 0.0 for A, bc in ((A0, b[0]), (A1, b[1])))
    if not math.isfinite(f) or f > 1.0 + 1e-12:
        return None
    rho = float(np.clip(1.0 - f, 0.0, 1.0))
    if rho <= 0.0:
        return None
    if f > 0:
        denom = f * b[off]
        alpha1 = np.divide(P[rows, off], denom, out=np.zeros(m1), where=denom > 0)
        alpha = (clamp_simplex(alpha1), clamp_simplex(b))
    else:
        alpha = theta.alpha
    on = P[rows, delta] - f * np.asarray(alpha[0]) * np.asarray(alpha[1])[delta]
    tau = clamp_simplex(np.maximum(on, 0.0) / rho)
    return BlockParams(rho, alpha, MaxDepParams(tau, theta.maxdep.delta))


def fit_rho_constrained(xb, w, theta: BlockParams, grid_step: float = 1e-3,
                        n_iter: int = 400, flat_tol: float = 1e-7) -> BlockParams:
    """Largest rho attaining the maximum weighted likelihood.

    For two variables with a binary second variable the block distribution is
    not identifiable and the likelihood is flat along a ridge.  When the
    model reproduces the weighted table exactly, the right end of the ridge
    is found in closed form.  Otherwise the profile likelihood (alpha and tau
    maximised at fixed rho) is scanned on a grid and the right end of the
    arg-max set is refined by bisection.  The result is returned unless it
    scores below ``theta``.
    """
    xb, w = _prepare(xb, w)
    m_block = _m_block(theta)
    if len(m_block) != 2 or m_block[1] != 2:
        raise EstimationError("constrained rho applies to two-variable blocks with a binary second variable")
    theta = _ensure_maxdep(theta)
    base_ll = block_loglik(xb, w, theta)
    slack = 1e-9 * max(1.0, abs(base_ll))
    cand = _rho_saturated(xb, w, theta)
    if cand is None or block_loglik(xb, w, cand) < base_ll - slack:
        cand = _rho_grid_scan(xb, w, theta, base_ll, slack, grid_step, n_iter, flat_tol)
    # the incumbent wins ties on the larger-rho side
    if theta.rho > cand.rho and base_ll >= block_loglik(xb, w, cand) - slack:
        return theta
    return cand


def _rho_grid_scan(xb, w, theta, base_ll, slack, grid_step=1e-3, n_iter=400, flat_tol=1e-7):
    start = BlockParams(0.5, theta.alpha, theta.maxdep)
    grid = np.linspace(0.0, 1.0, int(round(1 / grid_step)) + 1)
    _, _, _, _, prof = _profile(xb, w, start, grid, n_iter)
    top = prof.max()
    tol = flat_tol * max(1.0, abs(top))
    i = int(np.flatnonzero(prof >= top - tol).max())
    lo, hi = grid[i], grid[min(i + 1, len(grid) - 1)]
    for _ in range(30 if hi > lo else 0):
        mid = 0.5 * (lo + hi)
        _, _, _, _, val = _profile(xb, w, start, [mid], 4 * n_iter)
        if val[0] >= top - tol:
            lo = mid
        else:
            hi = mid
    rho, alphas, tau, deltas, ll = _profile(xb, w, start, [lo], 10 * n_iter)
    cand = _unstack(rho, alphas, tau, deltas, 0)
    return cand if ll[0] >= base_ll - slack else theta


# --- sequential surjection initialisation --------------------------------

def _pair_gain(xb, w, j, rho, alpha1, alphaj, tau, m1, mj):
    table = np.bincount(xb[:, 0] * mj + xb[:, j], weights=w, minlength=m1 * mj).reshape(m1, mj)
    base = (1 - rho) * np.outer(alpha1, alphaj)
    with np.errstate(divide="ignore"):
        gain = table * (np.log(base + rho * tau[:, None]) - np.log(base))
    return np.where(table > 0, gain, 0.0)


def _best_surjection(gain: np.ndarray) -> np.ndarray:
    """Surjection maximising ``sum_h gain[h, delta_h]``."""
    free = gain.max(axis=1)
    rows, cols = linear_sum_assignment(-(gain - free[:, None]).T)
    img = gain.argmax(axis=1)
    img[cols] = rows
    return img


def init_delta_sequential(xb, w, rho, alpha, tau, rng: Optional[np.random.Generator] = None,
                          enumerate_cap: int = EXHAUSTIVE_CAP) -> tuple:
    """Draw a surjection table variable by variable from pairwise likelihoods.

    For each non-leading variable j the image map is drawn with probability
    proportional to the weighted likelihood of the (first, j) pair under the
    two-part block distribution with the given continuous parameters.  Large
    spaces fall back to the most likely map.
    """
    xb, w = _prepare(xb, w)
    m_block = [len(a) for a in alpha]
    tau = np.asarray(tau, dtype=float)
    out = []
    for j in range(1, len(m_block)):
        gain = _pair_gain(xb, w, j, rho, np.asarray(alpha[0]), np.asarray(alpha[j]), tau,
                          m_block[0], m_block[j])
        if rng is not None and count_surjections(m_block[0], m_block[j]) <= enumerate_cap:
            cands = surjections(m_block[0], m_block[j])
            score = gain[np.arange(m_block[0]), cands].sum(axis=1)
            p = np.exp(score - score.max())
            out.append(cands[rng.choice(len(cands), p=p / p.sum())].copy())
        else:
            out.append(_best_surjection(gain))
    return tuple(out)


def random_block_start(xb, w, m_block, rng: np.random.Generator) -> BlockParams:
    """Random continuous parameters with a sequentially initialised table."""
    alpha = tuple(clamp_simplex(rng.dirichlet(np.ones(mj))) for mj in m_block)
    if len(m_block) == 1:
        return BlockParams(0.0, alpha)
    rho = float(rng.uniform())
    tau = clamp_simplex(rng.dirichlet(np.ones(m_block[0])))
    delta = init_delta_sequential(xb, w, rho, alpha, tau, rng)
    return BlockParams(rho, alpha, MaxDepParams(tau, delta))


# --- global GEM ----------------------------------------------------------

def update_block(xb, w, theta: BlockParams, rules: StoppingRules, rng, constrain_rho: bool = False,
                 exhaustive_cap: int = EXHAUSTIVE_CAP) -> BlockParams:
    m_block = _m_block(theta)
    if len(m_block) == 1:
        return fit_singleton(xb, w, m_block[0])
    if surjection_space_size(m_block) <= exhaustive_cap:
        new = mh_delta_exhaustive(xb, w, theta, rules.t_max, cap=exhaustive_cap)
    else:
        new = mh_delta(xb, w, theta, rules.s_max, rng, rules.t_max)
    if constrain_rho and len(m_block) == 2 and m_block[1] == 2:
        new = fit_rho_constrained(xb, w, new)
    return new


def _reseed_empty(z, counts, lse, k):
    """Hand the worst-fitted patterns to an empty component."""
    target = max(1.0, 0.05 * counts.sum() / z.shape[1])
    taken = 0.0
    for i in np.argsort(lse, kind="stable"):
        z[i] = 0.0
        z[i, k] = 1.0
        taken += counts[i]
        if taken >= target:
            break
    return z


def _estep_patterns(patterns, model):
    joint = joint_log_matrix(patterns.x, model, patterns)
    lse = logsumexp(joint, axis=1)
    if not np.isfinite(lse).all():
        raise EstimationError("a row has zero density under every component")
    return np.exp(joint - lse[:, None]), lse


def _pattern_z(patterns, z_rows):
    z_rows = np.asarray(z_rows, dtype=float)
    acc = np.zeros((len(patterns.counts), z_rows.shape[1]))
    np.add.at(acc, patterns.inverse, z_rows)
    return acc / patterns.counts[:, None]


def bic_value(loglik: float, nu: int, n: int) -> float:
    return float(loglik - 0.5 * nu * math.log(n))


def gem_fit(data: Dataset, g: int, partition: BlockPartition, init: CcmModel,
            rules: StoppingRules = StoppingRules(), rng: Optional[np.random.Generator] = None,
            z_init=None, exhaustive_cap: int = EXHAUSTIVE_CAP,
            constrain_rho: bool = True) -> CcmModel:
    """Generalised EM for fixed ``g`` and ``partition`` starting from ``init``.

    With ``z_init`` (n x g responsibilities) the first iteration skips the E
    step and updates the parameters from those responsibilities.  The
    observed-data log-likelihood after every E step is kept in
    ``meta.trace``.  The largest-rho tie-break for non-identifiable blocks is
    applied on the last iteration only.
    """
    rng = np.random.default_rng() if rng is None else rng
    if init.g != g or init.partition != partition:
        raise EstimationError("initial parameters do not match (g, partition)")
    pat = data.patterns
    counts = pat.counts
    model = init
    trace = []
    reseeded = 0

    def m_step(z, last):
        nk = counts @ z
        blocks = []
        for k, comp in enumerate(partition.components):
            row = []
            for b, variables in enumerate(comp):
                xb, inv = pat.block(variables)
                wb = np.bincount(inv, weights=counts * z[:, k], minlength=len(xb))
                row.append(update_block(xb, wb, model.blocks[k][b], rules, rng,
                                        constrain_rho and last, exhaustive_cap))
            blocks.append(tuple(row))
        return CcmModel(g, partition, nk / nk.sum(), tuple(blocks), data.modality_counts)

    for r in range(rules.r_max):
        if r == 0 and z_init is not None:
            z = _pattern_z(pat, z_init)
            lse = np.zeros(len(counts))
        else:
            z, lse = _estep_patterns(pat, model)
            trace.append(float(counts @ lse))
        last = r == rules.r_max - 1
        nk = counts @ z
        if not (nk < 1.0).any():
            model = m_step(z, last)
            continue
        z_new = z.copy()
        for k in np.flatnonzero(nk < 1.0):
            z_new = _reseed_empty(z_new, counts, lse, k)
        candidate = m_step(z_new, last)
        # the restart is kept only when it does not lower the likelihood;
        # otherwise the plain update, which cannot, is used
        if trace and (nk > 0).all():
            plain = m_step(z, last)
            if counts @ _estep_patterns(pat, candidate)[1] < counts @ _estep_patterns(pat, plain)[1]:
                candidate = plain
            else:
                reseeded += 1
        else:
            reseeded += 1
        model = candidate
    z, lse = _estep_patterns(pat, model)
    loglik = float(counts @ lse)
    trace.append(loglik)
    if reseeded:
        log.debug("gem_fit re-seeded %d empty component(s)", reseeded)
    nu = nu_ccm(g, partition, data.modality_counts)
    meta = FitMeta(loglik, bic_value(loglik, nu, data.n), nu, data.n, z=z[pat.inverse], trace=trace)
    return model.with_meta(meta)


# --- starting values -----------------------------------------------------

def params_from_z(data: Dataset, partition: BlockPartition, z_rows, rng: np.random.Generator) -> CcmModel:
    """Starting parameters from responsibilities: weighted frequencies, random rho,
    and a sequentially initialised surjection table for multi-variable blocks."""
    pat = data.patterns
    z = _pattern_z(pat, z_rows)
    counts = pat.counts
    nk = counts @ z
    blocks = []
    for k, comp in enumerate(partition.components):
        row = []
        for variables in comp:
            xb, inv = pat.block(variables)
            wb = np.bincount(inv, weights=counts * z[:, k], minlength=len(xb))
            if wb.sum() <= 0:
                wb = np.bincount(inv, weights=counts, minlength=len(xb))
            m_block = [data.modality_counts[j] for j in variables]
            alpha = tuple(clamp_simplex(np.bincount(xb[:, j], weights=wb, minlength=mj) / wb.sum())
                          for j, mj in enumerate(m_block))
            if len(variables) == 1:
                row.append(BlockParams(0.0, alpha))
                continue
            rho = float(rng.uniform(0.2, 0.8))
            tau = alpha[0]
            delta = init_delta_sequential(xb, wb, rho, alpha, tau, rng)
            row.append(BlockParams(rho, alpha, MaxDepParams(tau, delta)))
        blocks.append(tuple(row))
    pi = np.maximum(nk, 1e-3)
    return CcmModel(partition.g, partition, pi / pi.sum(), tuple(blocks), data.modality_counts)


def random_labels_z(n: int, g: int, rng: np.random.Generator) -> np.ndarray:
    return np.eye(g)[rng.integers(0, g, size=n)]


def random_params(data: Dataset, partition: BlockPartition, rng: np.random.Generator) -> CcmModel:
    """Random continuous parameters for every block, tables drawn by the
    sequential rule on the whole sample, and Dirichlet proportions."""
    pat = data.patterns
    blocks = []
    for comp in partition.components:
        row = []
        for variables in comp:
            xb, inv = pat.block(variables)
            wb = np.bincount(inv, weights=pat.counts, minlength=len(xb))
            row.append(random_block_start(xb, wb, [data.modality_counts[j] for j in variables], rng))
        blocks.append(tuple(row))
    pi = clamp_simplex(rng.dirichlet(np.ones(partition.g)))
    return CcmModel(partition.g, partition, pi, tuple(blocks), data.modality_counts)


def initial_fit(data: Dataset, g: int, partition: BlockPartition, rules: StoppingRules,
                rng: np.random.Generator, n_starts: int = 5, exhaustive_cap: int = EXHAUSTIVE_CAP) -> CcmModel:
    """Best of ``n_starts`` GEM runs.

    Starts alternate between random parameters and parameters estimated from
    random hard class assignments; the first kind spreads the classes apart,
    the second keeps them close to the overall frequencies.
    """
    best = None
    for s in range(n_starts):
        if s % 2 == 0:
            init = random_params(data, partition, rng)
        else:
            init = params_from_z(data, partition, random_labels_z(data.n, g, rng), rng)
        fit = gem_fit(data, g, partition, init, rules, rng, exhaustive_cap=exhaustive_cap)
        if best is None or fit.meta.loglik > best.meta.loglik:
            best = fit
    return best


# --- plain latent class EM (independent implementation) ------------------

def cim_fit(data: Dataset, g: int, init: CcmModel, r_max: int = 10) -> CcmModel:
    """EM for the conditional independence model on individual rows.

    ``init`` supplies pi and one alpha vector per (class, variable); its
    partition must be all-singleton.
    """
    if not init.partition.is_singleton():
        raise EstimationError("cim_fit needs an all-singleton partition")
    x = data.x0
    n, d = x.shape
    pi = np.asarray(init.pi, dtype=float).copy()
    # alpha[k][j] indexed by variable, independent of block order
    alpha = [[None] * d for _ in range(g)]
    for k, comp in enumerate(init.partition.components):
        for b, (j,) in enumerate(comp):
            alpha[k][j] = np.asarray(init.blocks[k][b].alpha[0], dtype=float).copy()
    onehots = [np.eye(data.modality_counts[j])[x[:, j]] for j in range(d)]
    trace = []

    def log_joint(pi, alpha):
        out = np.tile(np.log(pi), (n, 1))
        for k in range(g):
            for j in range(d):
                out[:, k] += onehots[j] @ np.log(alpha[k][j])
        return out

    def update(z):
        nk = z.sum(axis=0)
        return nk / n, [[clamp_simplex(z[:, k] @ onehots[j] / nk[k]) for j in range(d)]
                        for k in range(g)]

    for _ in range(r_max):
        lj = log_joint(pi, alpha)
        lse = logsumexp(lj, axis=1)
        trace.append(float(lse.sum()))
        z = np.exp(lj - lse[:, None])
        nk = z.sum(axis=0)
        if not (nk < 1.0).any():
            pi, alpha = update(z)
            continue
        z_new = z.copy()
        for k in np.flatnonzero(nk < 1.0):
            z_new = _reseed_empty(z_new, np.ones(n), lse, k)
        new = update(z_new)
        if (nk > 0).all():
            plain = update(z)
            if logsumexp(log_joint(*new), axis=1).sum() < logsumexp(log_joint(*plain), axis=1).sum():
                new = plain
        pi, alpha = new
    lj = log_joint(pi, alpha)
    lse = logsumexp(lj, axis=1)
    loglik = float(lse.sum())
    trace.append(loglik)
    partition = BlockPartition.singletons(g, d)
    blocks = tuple(tuple(BlockParams(0.0, (alpha[k][j],)) for j in range(d)) for k in range(g))
    nu = nu_cim(g, data.modality_counts)
    meta = FitMeta(loglik, bic_value(loglik, nu, n), nu, n, z=np.exp(lj - lse[:, None]), trace=trace)
    return CcmModel(g, partition, pi, blocks, data.modality_counts, meta)
