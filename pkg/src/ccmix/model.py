"""Block-structured mixture models for categorical data.

A component partitions the variables into independent blocks.  Each block
follows a two-part mixture: with weight ``1 - rho`` an independence
distribution (one multinomial per variable, ``alpha``) and with weight
``rho`` a maximum dependency distribution, where the first variable is drawn
from ``tau`` and every other variable is a deterministic surjective image of
it (``delta``).  The latent class model is the special case where every
block is a singleton.

Conventions: variable indices and modality codes are 0-based internally;
the model file and the CLI use 1-based indices.  Within a block, variables
are ordered by decreasing modality count (ties by index); blocks of a
component are listed by ascending smallest member.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .data import Dataset

EPS = 1e-10

__all__ = [
    "EPS", "BlockPartition", "MaxDepParams", "BlockParams", "CcmModel", "FitMeta",
    "ModelError", "indep_log_pdf", "maxdep_log_pdf", "block_log_pdf", "mixture_log_pdf",
    "nu_cim", "nu_ccm", "sample", "sample_codes", "surjection_space_size",
    "count_surjections", "surjections", "all_delta_tables", "block_marginals",
    "read_model", "write_model", "model_to_json", "model_from_json",
]


class ModelError(ValueError):
    """Raised when parameters violate a model invariant."""


def clamp_simplex(p: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Floor entries at ``eps`` and renormalise along the last axis."""
    p = np.maximum(np.asarray(p, dtype=float), eps)
    return p / p.sum(axis=-1, keepdims=True)


def order_block(variables, m) -> tuple:
    return tuple(sorted((int(j) for j in variables), key=lambda j: (-int(m[j]), j)))


@dataclass(frozen=True)
class BlockPartition:
    """Per-component partitions of the variables into blocks (canonical form)."""

    components: tuple

    @classmethod
    def from_lists(cls, components, m, d: Optional[int] = None) -> "BlockPartition":
        d = len(m) if d is None else d
        canon = []
        for k, blocks in enumerate(components):
            blocks = [order_block(b, m) for b in blocks]
            members = [j for b in blocks for j in b]
            if any(len(b) == 0 for b in blocks):
                raise ModelError(f"component {k + 1}: empty block")
            if sorted(members) != list(range(d)):
                raise ModelError(f"component {k + 1}: blocks do not partition the {d} variables")
            canon.append(tuple(sorted(blocks, key=min)))
        if not canon:
            raise ModelError("a partition needs at least one component")
        return cls(tuple(canon))

    @classmethod
    def singletons(cls, g: int, d: int) -> "BlockPartition":
        return cls(tuple(tuple((j,) for j in range(d)) for _ in range(g)))

    @classmethod
    def replicate(cls, blocks, g: int, m) -> "BlockPartition":
        return cls.from_lists([blocks] * g, m)

    @property
    def g(self) -> int:
        return len(self.components)

    @property
    def d(self) -> int:
        return sum(len(b) for b in self.components[0])

    def with_component(self, k: int, blocks, m) -> "BlockPartition":
        comps = list(self.components)
        comps[k] = blocks
        return BlockPartition.from_lists(comps, m)

    def is_singleton(self) -> bool:
        return all(len(b) == 1 for comp in self.components for b in comp)

    def to_lists(self, one_based: bool = True) -> list:
        off = 1 if one_based else 0
        return [[sorted(j + off for j in b) for b in comp] for comp in self.components]

    def sort_key(self):
        return tuple(tuple(tuple(sorted(b)) for b in comp) for comp in self.components)


@dataclass(frozen=True, eq=False)
class MaxDepParams:
    """First-variable weights ``tau`` and surjection images ``delta``.

    ``delta[j - 1][h]`` is the modality of the block's variable ``j`` when its
    first variable takes modality ``h`` (both 0-based).
    """

    tau: np.ndarray
    delta: tuple

    def key(self) -> tuple:
        return tuple(tuple(int(v) for v in img) for img in self.delta)

    def validate(self, m_block) -> None:
        tau = np.asarray(self.tau)
        if tau.shape != (m_block[0],):
            raise ModelError("tau has the wrong length")
        if (tau <= 0).any() or abs(tau.sum() - 1) > 1e-8:
            raise ModelError("tau must be a positive probability vector")
        if len(self.delta) != len(m_block) - 1:
            raise ModelError("one surjection per non-leading variable is required")
        for img, mj in zip(self.delta, m_block[1:]):
            img = np.asarray(img)
            if img.shape != (m_block[0],) or set(img.tolist()) != set(range(mj)):
                raise ModelError("delta image map is not surjective")


@dataclass(frozen=True, eq=False)
class BlockParams:
    rho: float
    alpha: tuple
    maxdep: Optional[MaxDepParams] = None

    def validate(self, m_block) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise ModelError("rho outside [0, 1]")
        if len(self.alpha) != len(m_block):
            raise ModelError("one alpha vector per block variable is required")
        for a, mj in zip(self.alpha, m_block):
            a = np.asarray(a)
            if a.shape != (mj,) or (a <= 0).any() or abs(a.sum() - 1) > 1e-8:
                raise ModelError("alpha must hold positive probability vectors")
        if len(m_block) == 1:
            if self.rho != 0 or self.maxdep is not None:
                raise ModelError("a single-variable block has rho = 0 and no dependency part")
        elif self.rho > 0:
            if self.maxdep is None:
                raise ModelError("rho > 0 requires maximum dependency parameters")
        if self.maxdep is not None:
            self.maxdep.validate(m_block)


@dataclass
class FitMeta:
    loglik: float
    bic: float
    n_params: int
    n: int
    z: Optional[np.ndarray] = None
    trace: list = field(default_factory=list)
    seed: Optional[int] = None


@dataclass(frozen=True, eq=False)
class CcmModel:
    g: int
    partition: BlockPartition
    pi: np.ndarray
    blocks: tuple
    modality_counts: tuple
    meta: Optional[FitMeta] = None

    def __post_init__(self):
        object.__setattr__(self, "pi", np.asarray(self.pi, dtype=float))
        object.__setattr__(self, "modality_counts", tuple(int(v) for v in self.modality_counts))
        object.__setattr__(self, "blocks", tuple(tuple(bk) for bk in self.blocks))

    @property
    def d(self) -> int:
        return len(self.modality_counts)

    @property
    def m(self) -> np.ndarray:
        return np.asarray(self.modality_counts)

    def block_m(self, k: int, b: int) -> tuple:
        return tuple(self.modality_counts[j] for j in self.partition.components[k][b])

    def validate(self) -> None:
        if self.partition.g != self.g or len(self.blocks) != self.g or self.pi.shape != (self.g,):
            raise ModelError("component count mismatch")
        if (self.pi <= 0).any() or abs(self.pi.sum() - 1) > 1e-8:
            raise ModelError("mixing proportions must be positive and sum to one")
        if self.partition.d != self.d:
            raise ModelError("partition and modality counts disagree on d")
        for k, comp in enumerate(self.partition.components):
            if len(self.blocks[k]) != len(comp):
                raise ModelError(f"component {k + 1}: block parameter count mismatch")
            for b, variables in enumerate(comp):
                if tuple(variables) != order_block(variables, self.modality_counts):
                    raise ModelError("block variables are not in canonical order")
                self.blocks[k][b].validate(self.block_m(k, b))

    @property
    def n_params(self) -> int:
        return nu_ccm(self.g, self.partition, self.modality_counts)

    def with_meta(self, meta: Optional[FitMeta]) -> "CcmModel":
        return replace(self, meta=meta)


# --- densities -----------------------------------------------------------

def _check_codes(codes, m_block):
    codes = [int(c) for c in codes]
    if len(codes) != len(m_block):
        raise ModelError("code vector length does not match the block")
    for c, mj in zip(codes, m_block):
        if not 1 <= c <= mj:
            raise ModelError(f"code {c} out of range 1..{mj}")
    return codes


def indep_log_pdf(codes, alpha) -> float:
    """Log-probability of 1-based ``codes`` under independent multinomials."""
    codes = _check_codes(codes, [len(a) for a in alpha])
    return float(sum(math.log(a[c - 1]) for a, c in zip(alpha, codes)))


def maxdep_log_pdf(codes, p: MaxDepParams) -> float:
    m_block = [len(p.tau)] + [int(np.max(img)) + 1 for img in p.delta]
    codes = _check_codes(codes, m_block)
    h = codes[0] - 1
    if all(int(img[h]) == c - 1 for img, c in zip(p.delta, codes[1:])):
        return math.log(p.tau[h])
    return -math.inf


def block_log_pdf(codes, theta: BlockParams) -> float:
    li = indep_log_pdf(codes, theta.alpha)
    if theta.rho == 0 or theta.maxdep is None:
        return li
    lm = maxdep_log_pdf(codes, theta.maxdep)
    if theta.rho == 1:
        return lm
    if lm == -math.inf:
        return math.log1p(-theta.rho) + li
    return float(np.logaddexp(math.log1p(-theta.rho) + li, math.log(theta.rho) + lm))


def mixture_log_pdf(row, model: CcmModel) -> float:
    row = list(row)
    if len(row) != model.d:
        raise ModelError("row length does not match the model")
    terms = []
    for k, comp in enumerate(model.partition.components):
        lp = math.log(model.pi[k])
        for b, variables in enumerate(comp):
            lp += block_log_pdf([row[j] for j in variables], model.blocks[k][b])
        terms.append(lp)
    return float(logsumexp(terms))


def block_logpdf_rows(xb: np.ndarray, theta: BlockParams) -> np.ndarray:
    """Vectorised block log-density for zero-based sub-rows ``xb`` (c x d_b)."""
    li = np.zeros(xb.shape[0])
    for j, a in enumerate(theta.alpha):
        li += np.log(np.asarray(a)[xb[:, j]])
    if theta.rho == 0 or theta.maxdep is None:
        return li
    md = theta.maxdep
    first = xb[:, 0]
    on = np.ones(xb.shape[0], dtype=bool)
    for j, img in enumerate(md.delta, start=1):
        on &= np.asarray(img)[first] == xb[:, j]
    lm = np.full(xb.shape[0], -np.inf)
    lm[on] = np.log(np.asarray(md.tau)[first[on]])
    with np.errstate(divide="ignore"):
        return np.logaddexp(np.log1p(-theta.rho) + li, np.log(theta.rho) + lm)


def component_logpdf_rows(x: np.ndarray, model: CcmModel, k: int, patterns=None) -> np.ndarray:
    """Log-density of zero-based rows under component ``k`` (without pi)."""
    out = np.zeros(x.shape[0])
    for b, variables in enumerate(model.partition.components[k]):
        if patterns is not None:
            xb, inv = patterns.block(variables)
            out += block_logpdf_rows(xb, model.blocks[k][b])[inv]
        else:
            out += block_logpdf_rows(x[:, list(variables)], model.blocks[k][b])
    return out


def joint_log_matrix(x: np.ndarray, model: CcmModel, patterns=None) -> np.ndarray:
    """n x g matrix of ``log pi_k + log p_k(x_i)``."""
    with np.errstate(divide="ignore"):
        return np.column_stack([np.log(model.pi[k]) + component_logpdf_rows(x, model, k, patterns)
                                for k in range(model.g)])


def mixture_logpdf_rows(x: np.ndarray, model: CcmModel) -> np.ndarray:
    return logsumexp(joint_log_matrix(x, model), axis=1)


def enumerate_cells(m) -> np.ndarray:
    """All zero-based cells of the product space, in lexicographic order."""
    grids = np.meshgrid(*[np.arange(mj) for mj in m], indexing="ij")
    return np.stack([gr.reshape(-1) for gr in grids], axis=1)


def block_marginals(theta: BlockParams, m_block) -> list:
    """Per-variable marginals ``(1 - rho) alpha_j + rho * (tau pushed through delta_j)``."""
    out = []
    for j, a in enumerate(theta.alpha):
        marg = (1 - theta.rho) * np.asarray(a, dtype=float)
        if theta.rho > 0 and theta.maxdep is not None:
            tau = np.asarray(theta.maxdep.tau)
            if j == 0:
                marg = marg + theta.rho * tau
            else:
                marg = marg + theta.rho * np.bincount(theta.maxdep.delta[j - 1], weights=tau,
                                                      minlength=m_block[j])
        out.append(marg)
    return out


# --- parameter counts ----------------------------------------------------

def nu_cim(g: int, m) -> int:
    if g < 1:
        raise ModelError("g must be at least 1")
    return (g - 1) + g * int(sum(int(mj) - 1 for mj in m))


def nu_ccm(g: int, partition: BlockPartition, m) -> int:
    extra = sum(max(int(m[j]) for j in b) for comp in partition.components for b in comp if len(b) > 1)
    return nu_cim(g, m) + extra


# --- surjections ---------------------------------------------------------

def count_surjections(a: int, b: int) -> int:
    """Number of surjections from an a-set onto a b-set."""
    if b > a:
        return 0
    return sum((-1) ** i * math.comb(b, i) * (b - i) ** a for i in range(b + 1))


def surjection_space_size(m_block) -> int:
    m_block = [int(v) for v in m_block]
    if len(m_block) < 2:
        raise ModelError("a surjection table needs at least two variables")
    if any(mj > m_block[0] for mj in m_block[1:]):
        raise ModelError("first block variable must have the most modalities")
    return math.prod(count_surjections(m_block[0], mj) for mj in m_block[1:])


@lru_cache(maxsize=None)
def surjections(a: int, b: int) -> np.ndarray:
    """All surjections {0..a-1} -> {0..b-1} as an (S, a) array, lexicographic order."""
    rows = [img for img in itertools.product(range(b), repeat=a) if len(set(img)) == b]
    out = np.array(rows, dtype=np.int64).reshape(-1, a)
    out.setflags(write=False)
    return out


def all_delta_tables(m_block) -> np.ndarray:
    """Every surjection table of a block as an (S, d_b - 1, m_1) array."""
    surjection_space_size(m_block)
    per_var = [surjections(m_block[0], mj) for mj in m_block[1:]]
    idx = np.array(list(itertools.product(*[range(len(s)) for s in per_var])), dtype=np.int64)
    return np.stack([per_var[j][idx[:, j]] for j in range(len(per_var))], axis=1)


# --- random parameters and sampling --------------------------------------

def random_surjection(a: int, b: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the surjections {0..a-1} -> {0..b-1}."""
    while True:
        img = rng.integers(0, b, size=a)
        if len(np.unique(img)) == b:
            return img


def random_block_params(m_block, rng: np.random.Generator) -> BlockParams:
    alpha = tuple(clamp_simplex(rng.dirichlet(np.ones(mj))) for mj in m_block)
    if len(m_block) == 1:
        return BlockParams(0.0, alpha)
    tau = clamp_simplex(rng.dirichlet(np.ones(m_block[0])))
    delta = tuple(random_surjection(m_block[0], mj, rng) for mj in m_block[1:])
    return BlockParams(float(rng.uniform()), alpha, MaxDepParams(tau, delta))


def sample_codes(model: CcmModel, n: int, rng: np.random.Generator):
    """Draw ``n`` rows; returns zero-based codes, class labels and block indicators.

    ``y[k][b]`` holds, for every row, whether block ``b`` of component ``k``
    was drawn from the dependency part (only meaningful where ``z == k``).
    """
    z = rng.choice(model.g, size=n, p=model.pi)
    x = np.zeros((n, model.d), dtype=np.int64)
    y = []
    for k, comp in enumerate(model.partition.components):
        rows = np.flatnonzero(z == k)
        yk = []
        for b, variables in enumerate(comp):
            theta = model.blocks[k][b]
            nk = len(rows)
            dep = rng.uniform(size=nk) < theta.rho if theta.maxdep is not None else np.zeros(nk, bool)
            yb = np.zeros(n, dtype=bool)
            yb[rows] = dep
            yk.append(yb)
            for j, v in enumerate(variables):
                a = np.asarray(theta.alpha[j])
                x[rows, v] = rng.choice(len(a), size=nk, p=a / a.sum())
            if dep.any():
                md = theta.maxdep
                tau = np.asarray(md.tau)
                first = rng.choice(len(tau), size=int(dep.sum()), p=tau / tau.sum())
                dep_rows = rows[dep]
                x[dep_rows, variables[0]] = first
                for j, v in enumerate(variables[1:]):
                    x[dep_rows, v] = np.asarray(md.delta[j])[first]
        y.append(yk)
    return x, z, y


def sample(model: CcmModel, n: int, rng: np.random.Generator):
    """Draw a :class:`Dataset` of ``n >= 1`` rows with its latent labels."""
    x, z, y = sample_codes(model, n, rng)
    return Dataset(x + 1, model.modality_counts), z, y


# --- serialisation -------------------------------------------------------

def _floats(a) -> list:
    return [float(v) for v in np.asarray(a).reshape(-1)]


def model_to_json(model: CcmModel) -> dict:
    blocks = []
    for k, comp in enumerate(model.partition.components):
        for b, variables in enumerate(comp):
            theta = model.blocks[k][b]
            entry = {
                "component": k + 1,
                "variables": [j + 1 for j in variables],
                "rho": float(theta.rho),
                "alpha": [_floats(a) for a in theta.alpha],
            }
            if theta.rho > 0 and theta.maxdep is not None:
                entry["tau"] = _floats(theta.maxdep.tau)
                entry["delta_images"] = [[int(v) + 1 for v in img] for img in theta.maxdep.delta]
            blocks.append(entry)
    out = {
        "g": model.g,
        "modality_counts": list(model.modality_counts),
        "partition": model.partition.to_lists(),
        "pi": _floats(model.pi),
        "blocks": blocks,
    }
    if model.meta is not None:
        out["meta"] = {
            "loglik": float(model.meta.loglik),
            "bic": float(model.meta.bic),
            "nu": int(model.meta.n_params),
            "n": int(model.meta.n),
            "seed": model.meta.seed,
        }
    return out


def model_from_json(obj: dict) -> CcmModel:
    m = tuple(obj["modality_counts"])
    comps = [[[j - 1 for j in b] for b in comp] for comp in obj["partition"]]
    partition = BlockPartition.from_lists(comps, m)
    lookup = {(e["component"] - 1, tuple(sorted(j - 1 for j in e["variables"]))): e for e in obj["blocks"]}
    blocks = []
    for k, comp in enumerate(partition.components):
        row = []
        for variables in comp:
            e = lookup[(k, tuple(sorted(variables)))]
            if [j - 1 for j in e["variables"]] != list(variables):
                raise ModelError("block variables are not in canonical order")
            maxdep = None
            if "tau" in e:
                maxdep = MaxDepParams(np.array(e["tau"], dtype=float),
                                      tuple(np.array(img, dtype=np.int64) - 1 for img in e["delta_images"]))
            row.append(BlockParams(float(e["rho"]), tuple(np.array(a, dtype=float) for a in e["alpha"]), maxdep))
        blocks.append(tuple(row))
    meta = None
    if "meta" in obj:
        mt = obj["meta"]
        meta = FitMeta(mt["loglik"], mt["bic"], mt["nu"], mt["n"], seed=mt.get("seed"))
    model = CcmModel(int(obj["g"]), partition, np.array(obj["pi"], dtype=float), tuple(blocks), m, meta)
    model.validate()
    return model


def dumps_model(model: CcmModel) -> str:
    return json.dumps(model_to_json(model), indent=2, sort_keys=True) + "\n"


def write_model(path, model: CcmModel) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_model(model))


def read_model(path) -> CcmModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_json(json.load(fh))
