"""Estimating projected moment matrices A_{2s} and the iterative projection.

The estimator never materializes a d^{2s} tensor.  Each mixture sample
contributes the rank-1 expansion of R_{2s}(z, x_1..x_{4s-1}); the two factor
halves of every term are pushed through (I_d kron Gamma) and accumulated as a
dk x dk outer product.  Terms are grouped by the set of samples they touch,
which collapses the (2s)^{2s} labeled partitions into (2s)^s half-words and a
small coefficient matrix over sample subsets.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .nested_projection import (
    NestedProjection,
    apply_kron_block,
    apply_kron_block_batch,
    identity_projection,
)


class EmptySampleError(ValueError):
    pass


class NumericError(ValueError):
    pass


@dataclass(frozen=True)
class MixtureSpec:
    """Ground-truth mixture: weights, means, and the base distribution tag."""

    weights: np.ndarray
    means: np.ndarray  # (k, d)
    dist_tag: str = "gaussian"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        if w.ndim != 1 or len(w) != m.shape[0]:
            raise ValueError("weights and means must have matching component counts")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if not np.all(np.isfinite(m)):
            raise ValueError("means must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def w_min(self) -> float:
        return float(self.weights.min())

    def min_separation(self) -> float:
        if self.k < 2:
            return float("inf")
        dists = [
            np.linalg.norm(self.means[i] - self.means[j])
            for i, j in itertools.combinations(range(self.k), 2)
        ]
        return float(min(dists))

    def max_separation(self) -> float:
        if self.k < 2:
            return 0.0
        dists = [
            np.linalg.norm(self.means[i] - self.means[j])
            for i, j in itertools.combinations(range(self.k), 2)
        ]
        return float(max(dists))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "dist_tag": self.dist_tag,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MixtureSpec":
        return cls(
            np.array(data["weights"], dtype=float),
            np.array(data["means"], dtype=float),
            data.get("dist_tag", "gaussian"),
        )


@dataclass(frozen=True)
class MomentMatrixEstimate:
    matrix: np.ndarray
    samples_used: int
    degree: int  # 2s

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if not np.all(np.isfinite(m)):
            raise NumericError("moment matrix estimate has non-finite entries")
        object.__setattr__(self, "matrix", (m + m.T) / 2.0)


@dataclass(frozen=True)
class ProjectionChain:
    projection: NestedProjection
    diagnostics: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def degree(self) -> int:
        return self.projection.stage_count


@lru_cache(maxsize=None)
def _half_word_tables(s: int):
    """Grouping tables for the degree-2s estimator.

    Returns (words, indicator, coeffs) where words is the ((2s)^s, s) array of
    half-words over sample slots [2s], indicator scatters each word onto the
    id of its slot set, and coeffs[a, b] is the signed weight of any labeled
    partition whose two halves cover slot sets a and b.
    """
    t = 2 * s
    words = np.array(list(itertools.product(range(t), repeat=s)), dtype=np.intp)
    subsets = []
    sub_id = {}
    for size in range(1, s + 1):
        for comb in itertools.combinations(range(t), size):
            sub_id[frozenset(comb)] = len(subsets)
            subsets.append(frozenset(comb))
    nsub = len(subsets)
    indicator = np.zeros((len(words), nsub))
    for i, w in enumerate(words):
        indicator[i, sub_id[frozenset(w.tolist())]] = 1.0
    coeffs = np.empty((nsub, nsub))
    for a, sa in enumerate(subsets):
        for b, sb in enumerate(subsets):
            c = len(sa | sb)
            coeffs[a, b] = float(Fraction((-1) ** (c - 1), math.comb(t - 1, c - 1)))
    return words, indicator, coeffs


def estimate_moment_matrix(
    mix_sampler, base_sampler, s: int, np_prev: NestedProjection, n: int
) -> MomentMatrixEstimate:
    """Monte-Carlo estimate of A_{2s} from n mixture samples.

    Each sample draws 4s-1 fresh base samples; the rank-1 expansion of
    R_{2s}(z_i, x_1..x_{4s-1}) is applied blockwise through (I kron Gamma)
    and averaged into a symmetric (d c_{s-1}) x (d c_{s-1}) matrix.
    """
    if n < 1:
        raise EmptySampleError("estimate_moment_matrix needs n >= 1")
    if np_prev.stage_count != s - 1:
        raise ValueError(f"np_prev must have {s - 1} stages for degree 2s={2 * s}")
    d = np_prev.d
    out_dim = d * np_prev.out_dim
    words, indicator, coeffs = _half_word_tables(s)
    n_words = len(words)
    acc = np.zeros((out_dim, out_dim))
    chunk = max(1, min(n, 4_000_000 // max(1, n_words * out_dim)))
    done = 0
    while done < n:
        b = min(chunk, n - done)
        z = np.asarray(mix_sampler.draw(b), dtype=float)
        x = np.asarray(base_sampler.draw(b * (4 * s - 1)), dtype=float)
        x = x.reshape(b, 4 * s - 1, d)
        block0 = np.concatenate([z[:, None, :], x[:, : 2 * s - 1, :]], axis=1)
        block1 = x[:, 2 * s - 1 :, :]
        for block, sign in ((block0, 1.0), (block1, -1.0)):
            f = block[:, words, :].reshape(b * n_words, s, d)
            v = apply_kron_block_batch(np_prev, f).reshape(b, n_words, out_dim)
            grouped = np.einsum("bwm,wn->bnm", v, indicator, optimize=True)
            acc += sign * np.einsum(
                "bim,ij,bjn->mn", grouped, coeffs, grouped, optimize=True
            )
        done += b
    return MomentMatrixEstimate(acc / n, samples_used=n, degree=2 * s)


def exact_moment_matrix(spec: MixtureSpec, np_prev: NestedProjection) -> np.ndarray:
    """A_{2s} = sum_i w_i v_i v_i^T with v_i = (I kron Gamma) flat(mu_i^{x s})."""
    s = np_prev.stage_count + 1
    out_dim = spec.d * np_prev.out_dim
    acc = np.zeros((out_dim, out_dim))
    for w, mu in zip(spec.weights, spec.means):
        v = apply_kron_block(np_prev, mu, (mu,) * (s - 1))
        acc += w * np.outer(v, v)
    return acc


def top_k_subspace(m: np.ndarray, k: int, rank_tol: float = 1e-12) -> np.ndarray:
    """Row-orthonormal basis of the top-k eigenspace of a symmetric matrix.

    Deterministic: eigenvectors are sign-normalized (largest-magnitude entry
    positive), ordered by decreasing |eigenvalue| with near-ties (1e-12
    relative) broken lexicographically.  Rows whose |eigenvalue| falls below
    rank_tol * ||m|| are dropped, so fewer than k rows may return.
    """
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix has non-finite entries")
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    scale = float(np.max(np.abs(vals))) if len(vals) else 0.0
    if scale == 0.0:
        return np.zeros((0, m.shape[0]))
    entries = []
    for i in range(len(vals)):
        v = vecs[:, i].copy()
        j = int(np.argmax(np.abs(v)))
        if v[j] < 0:
            v = -v
        entries.append((abs(float(vals[i])), v))
    entries.sort(key=lambda e: -e[0])
    # stable lexicographic break inside near-tied |eigenvalue| groups
    ordered = []
    i = 0
    while i < len(entries):
        j = i
        while j + 1 < len(entries) and entries[i][0] - entries[j + 1][0] <= rank_tol * scale:
            j += 1
        group = sorted(entries[i : j + 1], key=lambda e: tuple(e[1]))
        ordered.extend(group)
        i = j + 1
    rows = [v for a, v in ordered[:k] if a > rank_tol * scale]
    if not rows:
        return np.zeros((0, m.shape[0]))
    return np.array(rows)


def _fallback_stage(m: int) -> np.ndarray:
    """Single fixed unit row used when a stage matrix is numerically zero.

    A zero moment matrix carries no directional signal (e.g. all component
    means coincide), so any fixed one-dimensional stage keeps the chain
    well-formed without affecting which means survive downstream.
    """
    return np.eye(1, m)


def _stage_diagnostics(s: int, matrix: np.ndarray, kept: int, samples: int) -> dict:
    vals = np.sort(np.abs(np.linalg.eigvalsh((matrix + matrix.T) / 2.0)))[::-1]
    top = vals[: kept + 1]
    gap = float(top[kept - 1] - top[kept]) if len(top) > kept else float(top[-1])
    return {
        "stage": s,
        "samples": samples,
        "kept": kept,
        "top_eigenvalues": [float(v) for v in vals[: kept + 1]],
        "spectral_gap": gap,
    }


def iterative_projection(mix_sampler, base_sampler, t: int, k: int, n_per_stage: int = 100_000) -> ProjectionChain:
    """Builds Pi_1 = I_d, then Pi_s from the estimated A_{2s} for s = 2..t.

    Stage sample sets are disjoint by construction: the samplers are streams
    and every stage draws fresh.
    """
    if t < 1:
        raise ValueError("degree t must be >= 1")
    d = mix_sampler.d
    chain = identity_projection(d)
    diags = []
    for s in range(2, t + 1):
        est = estimate_moment_matrix(mix_sampler, base_sampler, s, chain, n_per_stage)
        pi = top_k_subspace(est.matrix, k)
        if pi.shape[0] == 0:
            pi = _fallback_stage(est.matrix.shape[0])
        diags.append(_stage_diagnostics(s, est.matrix, pi.shape[0], est.samples_used))
        chain = NestedProjection(chain.stages + (pi,), d)
    return ProjectionChain(chain, tuple(diags), {"mode": "sampled", "t": t, "k": k, "n_per_stage": n_per_stage})


def exact_projection_chain(spec: MixtureSpec, t: int, k: int) -> ProjectionChain:
    """Oracle chain built from exact A_{2s} matrices (testing path)."""
    chain = identity_projection(spec.d)
    diags = []
    for s in range(2, t + 1):
        a = exact_moment_matrix(spec, chain)
        pi = top_k_subspace(a, k)
        if pi.shape[0] == 0:
            pi = _fallback_stage(a.shape[0])
        diags.append(_stage_diagnostics(s, a, pi.shape[0], 0))
        chain = NestedProjection(chain.stages + (pi,), spec.d)
    return ProjectionChain(chain, tuple(diags), {"mode": "exact", "t": t, "k": k})


class PaddedSampler:
    """Wraps a sampler, appending fresh standard-normal coordinates so that
    the ambient dimension reaches target_d (the d < k normalization)."""

    def __init__(self, inner, target_d: int, rng: np.random.Generator):
        if target_d < inner.d:
            raise ValueError("target dimension must be >= the sampler's")
        self.inner = inner
        self.d = target_d
        self._rng = rng

    def draw(self, n: int) -> np.ndarray:
        x = np.asarray(self.inner.draw(n), dtype=float)
        extra = self.d - x.shape[1]
        if extra == 0:
            return x
        return np.concatenate([x, self._rng.standard_normal((n, extra))], axis=1)


def pad_spec(spec: MixtureSpec, target_d: int) -> MixtureSpec:
    if target_d < spec.d:
        raise ValueError("target dimension must be >= spec.d")
    pad = np.zeros((spec.k, target_d - spec.d))
    return MixtureSpec(spec.weights, np.concatenate([spec.means, pad], axis=1), spec.dist_tag)
