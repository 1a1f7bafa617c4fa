"""Model selection: block-structure search per class count, scored by BIC."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage
from scipy.spatial.distance import squareform

from .data import Dataset, pairwise_v_matrix
from .estim import (EXHAUSTIVE_CAP, StoppingRules, bic_value, gem_fit, initial_fit,
                    random_block_start, _pattern_z)
from .model import BlockPartition, CcmModel

log = logging.getLogger(__name__)

MAX_INIT_BLOCK = 4


@dataclass(frozen=True)
class SearchConfig:
    g_max: int = 1
    chains: int = 20
    q_max: Optional[int] = None
    rules: StoppingRules = StoppingRules()
    seed: int = 0
    n_starts: int = 5
    linkage: str = "average"
    min_improvement: float = 1e-3
    max_iter: Optional[int] = None
    workers: int = 1
    exhaustive_cap: int = EXHAUSTIVE_CAP

    def __post_init__(self):
        if self.chains < 1 or self.g_max < 1:
            raise ValueError("chains and g_max must be at least 1")

    def q_for(self, d: int) -> int:
        if self.q_max is not None:
            return self.q_max
        return self.rules.q_for(d)


def hac_init(v_matrix, max_block: int = MAX_INIT_BLOCK, method: str = "average") -> list:
    """Blocks from agglomerative clustering of ``1 - V``.

    Among the cuts of the dendrogram whose clusters all have at most
    ``max_block`` variables, the one with the fewest clusters is returned as
    a list of zero-based variable lists.
    """
    v = np.asarray(v_matrix, dtype=float)
    d = v.shape[0]
    if d == 1:
        return [[0]]
    dist = np.clip(1.0 - v, 0.0, None)
    np.fill_diagonal(dist, 0.0)
    dist = 0.5 * (dist + dist.T)
    tree = linkage(squareform(dist, checks=False), method=method)
    for n_clusters in range(1, d + 1):
        labels = cut_tree(tree, n_clusters=n_clusters).reshape(-1)
        sizes = np.bincount(labels)
        if sizes.max() <= max_block:
            groups = [sorted(np.flatnonzero(labels == c).tolist()) for c in range(n_clusters)]
            return sorted(groups, key=min)
    return [[j] for j in range(d)]


def _move(blocks, b_from, j, target):
    out = [list(b) for b in blocks]
    out[b_from].remove(j)
    if target is None:
        out.append([j])
    else:
        out[target].append(j)
    return [b for b in out if b]


def neighborhood_candidates(partition: BlockPartition, m, k: int, b_from: int,
                            b_other: Optional[int] = None) -> list:
    """Partitions reached by moving one variable of block ``b_from`` of
    component ``k`` into block ``b_other`` or into a new block.

    The current partition comes first; duplicates are dropped.
    """
    blocks = partition.components[k]
    targets = [None] if b_other is None else [b_other, None]
    cands = [partition]
    for j in sorted(blocks[b_from]):
        for t in targets:
            cand = partition.with_component(k, _move(blocks, b_from, j, t), m)
            if cand not in cands:
                cands.append(cand)
    return cands


def sigma_neighborhood(partition: BlockPartition, m, rng: np.random.Generator):
    """Stochastic neighbourhood of a partition.

    Draws a component, a source block and (when there is one) another block,
    then returns ``(k, candidates)`` from :func:`neighborhood_candidates`.
    Draws that only reproduce the current partition are retried up to ``d``
    times.
    """
    for _ in range(max(1, partition.d)):
        k = int(rng.integers(partition.g))
        n_blocks = len(partition.components[k])
        b_from = int(rng.integers(n_blocks))
        b_other = None
        if n_blocks >= 2:
            others = [b for b in range(n_blocks) if b != b_from]
            b_other = others[int(rng.integers(len(others)))]
        cands = neighborhood_candidates(partition, m, k, b_from, b_other)
        if len(cands) > 1:
            break
    return k, cands


def bic_score(model: CcmModel, n: Optional[int] = None) -> float:
    n = model.meta.n if n is None else n
    return bic_value(model.meta.loglik, model.meta.n_params, n)


def warm_start(data: Dataset, incumbent: CcmModel, candidate: BlockPartition,
               rng: np.random.Generator) -> CcmModel:
    """Initial parameters for ``candidate`` from a fitted neighbour.

    Blocks present in the incumbent keep their estimates; new blocks get
    random continuous parameters and a sequentially drawn surjection table
    weighted by the incumbent's class responsibilities.
    """
    pat = data.patterns
    z = _pattern_z(pat, incumbent.meta.z)
    blocks = []
    for k, comp in enumerate(candidate.components):
        old = {tuple(v): incumbent.blocks[k][b] for b, v in enumerate(incumbent.partition.components[k])}
        row = []
        for variables in comp:
            theta = old.get(tuple(variables))
            if theta is None:
                xb, inv = pat.block(variables)
                wb = np.bincount(inv, weights=pat.counts * z[:, k], minlength=len(xb))
                if wb.sum() <= 0:
                    wb = np.bincount(inv, weights=pat.counts, minlength=len(xb))
                theta = random_block_start(xb, wb, [data.modality_counts[j] for j in variables], rng)
            row.append(theta)
        blocks.append(tuple(row))
    return CcmModel(incumbent.g, candidate, incumbent.pi, tuple(blocks), data.modality_counts)


@dataclass
class ChainResult:
    partition: BlockPartition
    model: CcmModel
    bic: float
    best_trace: list = field(default_factory=list)
    bic_trace: list = field(default_factory=list)
    iterations: int = 0
    seed: Optional[int] = None


def _tie_key(model: CcmModel):
    return (-model.meta.bic, model.meta.n_params, model.partition.sort_key())


def _fit_candidate(data, incumbent, cand, config, rng):
    if cand == incumbent.partition:
        return gem_fit(data, incumbent.g, cand, incumbent, config.rules, rng,
                       exhaustive_cap=config.exhaustive_cap)
    init = warm_start(data, incumbent, cand, rng)
    return gem_fit(data, incumbent.g, cand, init, config.rules, rng, z_init=incumbent.meta.z,
                   exhaustive_cap=config.exhaustive_cap)


def gibbs_chain(data: Dataset, g: int, init_sigma: BlockPartition, config: SearchConfig,
                rng: np.random.Generator, init_model: Optional[CcmModel] = None) -> ChainResult:
    """Explore block structures for fixed ``g``.

    Each iteration fits every partition of a stochastic neighbourhood and
    moves to one of them with probability proportional to ``exp(BIC)``.  The
    chain stops once ``q_max`` successive iterations bring no BIC gain larger
    than ``min_improvement``.
    """
    q_max = config.q_for(data.d)
    max_iter = config.max_iter if config.max_iter is not None else 50 * q_max
    m = data.modality_counts
    model = init_model
    if model is None:
        model = initial_fit(data, g, init_sigma, config.rules, rng, config.n_starts, config.exhaustive_cap)
    best = model
    anchor = model.meta.bic
    result = ChainResult(model.partition, model, model.meta.bic)
    stall = 0
    q = 0
    while stall < q_max and q < max_iter:
        q += 1
        _, cands = sigma_neighborhood(model.partition, m, rng)
        fits = [_fit_candidate(data, model, c, config, rng) for c in cands]
        bics = np.array([f.meta.bic for f in fits])
        p = np.exp(bics - bics.max())
        model = fits[int(rng.choice(len(fits), p=p / p.sum()))]
        for f in fits:
            if _tie_key(f) < _tie_key(best):
                best = f
        if best.meta.bic > anchor + config.min_improvement:
            anchor = best.meta.bic
            stall = 0
        else:
            stall += 1
        result.best_trace.append(best.meta.bic)
        result.bic_trace.append(model.meta.bic)
    result.partition, result.model, result.bic = best.partition, best, best.meta.bic
    result.iterations = q
    return result


def _chain_task(args):
    data, g, template, config, seed = args
    rng = np.random.default_rng(seed)
    sigma = BlockPartition.replicate(template, g, data.modality_counts)
    t0 = time.perf_counter()
    res = gibbs_chain(data, g, sigma, config, rng)
    res.seed = seed
    return res, time.perf_counter() - t0


@dataclass
class GResult:
    g: int
    model: CcmModel
    bic: float
    n_params: int
    seconds: float
    chains: list


@dataclass
class SelectionResult:
    per_g: list
    best: CcmModel

    @property
    def g_hat(self) -> int:
        return self.best.g


def chain_seeds(seed: int, g_values, chains: int) -> dict:
    root = np.random.SeedSequence(seed)
    children = root.spawn(max(g_values))
    out = {}
    for g in g_values:
        out[g] = [int(s.generate_state(1)[0]) for s in children[g - 1].spawn(chains)]
    return out


def select_model(data: Dataset, config: SearchConfig, g_values=None) -> SelectionResult:
    """Run ``config.chains`` chains per class count and keep the best BIC."""
    g_values = list(range(1, config.g_max + 1)) if g_values is None else list(g_values)
    template = hac_init(pairwise_v_matrix(data), method=config.linkage) if data.d > 1 else [[0]]
    seeds = chain_seeds(config.seed, g_values, config.chains)
    per_g = []
    for g in g_values:
        tasks = [(data, g, template, config, s) for s in seeds[g]]
        t0 = time.perf_counter()
        if config.workers > 1:
            with ProcessPoolExecutor(config.workers) as pool:
                outs = list(pool.map(_chain_task, tasks))
        else:
            outs = [_chain_task(t) for t in tasks]
        chains = [res for res, _ in outs]
        winner = min(chains, key=lambda c: _tie_key(c.model)).model
        per_g.append(GResult(g, winner, winner.meta.bic, winner.meta.n_params,
                             time.perf_counter() - t0, chains))
        log.info("g=%d best BIC %.2f (nu=%d)", g, winner.meta.bic, winner.meta.n_params)
    best = min((r.model for r in per_g), key=_tie_key)
    return SelectionResult(per_g, best)


def search_report(result: SelectionResult) -> dict:
    return {
        "best": {"g": result.best.g, "bic": result.best.meta.bic, "nu": result.best.meta.n_params,
                 "partition": result.best.partition.to_lists()},
        "per_g": [
            {
                "g": r.g,
                "bic": r.bic,
                "loglik": r.model.meta.loglik,
                "nu": r.n_params,
                "seconds": r.seconds,
                "partition": r.model.partition.to_lists(),
                "chains": [{"seed": c.seed, "bic": c.bic, "iterations": c.iterations,
                            "best_trace": c.best_trace} for c in r.chains],
            }
            for r in result.per_g
        ],
    }
