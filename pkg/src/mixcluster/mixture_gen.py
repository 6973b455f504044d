"""Synthetic mixtures: spec construction, base samplers, labeled streams.

All base distributions are mean-zero products normalized to be 1-Poincare:
standard normal coordinates, two-sided exponentials with scale 1/2, or
uniforms on [-pi/2, pi/2].  point_mass is the degenerate noise-free base.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .moment_pipeline import MixtureSpec
from .poly_estimators import BASE_TAGS, LAPLACE_SCALE, UNIFORM_HALF_WIDTH, UnsupportedDistributionError

_PLACEMENT_RETRIES = 20_000


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenConfig:
    k: int
    d: int
    separation: float = 10.0
    profile: str = "uniform"  # "uniform" | "hierarchical"
    ratios: tuple = ()  # hierarchical per-level separations, innermost first
    weight_profile: str = "uniform"  # "uniform" | "dirichlet" | "explicit"
    weights: tuple = ()
    dist_tag: str = "gaussian"
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.d < 1:
            raise ValueError("k and d must be >= 1")
        if self.profile not in ("uniform", "hierarchical"):
            raise ValueError(f"unknown separation profile {self.profile!r}")
        if self.profile == "hierarchical" and len(self.ratios) < 1:
            raise ValueError("hierarchical profile needs at least one ratio level")
        if self.weight_profile == "explicit":
            w = np.array(self.weights, dtype=float)
            if len(w) != self.k or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("explicit weights must have length k and sum to 1")


def _place_points(n: int, d: int, sep: float, rng: np.random.Generator) -> np.ndarray:
    """n points with all pairwise distances in [sep, 1.2*sep]:
    random unit directions, rescaled so the minimum distance is sep,
    rejected when the spread exceeds the 1.2 factor."""
    if n == 1:
        return np.zeros((1, d))
    for _ in range(_PLACEMENT_RETRIES):
        pts = rng.standard_normal((n, d))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        dists = [
            np.linalg.norm(pts[i] - pts[j]) for i, j in itertools.combinations(range(n), 2)
        ]
        lo, hi = min(dists), max(dists)
        if lo < 1e-9:
            continue
        if hi / lo <= 1.2:
            return pts * (sep / lo)
    raise PlacementError(f"could not place {n} points at ratio <= 1.2 in d={d}")


def _split_counts(k: int) -> tuple:
    return (k - k // 2, k // 2)


def _hierarchical_means(k: int, d: int, ratios, rng: np.random.Generator) -> np.ndarray:
    if k == 1 or not ratios:
        return _place_points(k, d, ratios[0] if ratios else 1.0, rng)
    if len(ratios) == 1:
        return _place_points(k, d, ratios[0], rng)
    top = ratios[-1]
    sizes = _split_counts(k)
    centers = _place_points(2, d, top, rng)
    groups = []
    for size, center in zip(sizes, centers):
        groups.append(center + _hierarchical_means(size, d, ratios[:-1], rng))
    return np.concatenate(groups, axis=0)


def build_spec(cfg: GenConfig) -> MixtureSpec:
    """Deterministic mixture spec from a generator config."""
    rng = rngmod.stream(cfg.seed, 0)
    if cfg.profile == "uniform":
        means = _place_points(cfg.k, cfg.d, cfg.separation, rng)
    else:
        means = _hierarchical_means(cfg.k, cfg.d, tuple(cfg.ratios), rng)
    means = means - means.mean(axis=0)
    if cfg.weight_profile == "uniform":
        weights = np.full(cfg.k, 1.0 / cfg.k)
    elif cfg.weight_profile == "dirichlet":
        weights = rng.dirichlet(np.full(cfg.k, 5.0))
    elif cfg.weight_profile == "explicit":
        weights = np.array(cfg.weights, dtype=float)
    else:
        raise ValueError(f"unknown weight profile {cfg.weight_profile!r}")
    weights = weights / weights.sum()
    return MixtureSpec(weights, means, cfg.dist_tag)


class BaseSampler:
    """Stateful stream of i.i.d. mean-zero 1-Poincare base draws."""

    def __init__(self, dist_tag: str, d: int, seed: int, *stream_ids: int):
        if dist_tag not in BASE_TAGS:
            raise UnsupportedDistributionError(f"unknown base distribution {dist_tag!r}")
        self.dist_tag = dist_tag
        self.d = d
        self._rng = rngmod.stream(seed, *(stream_ids or (1,)))

    def draw(self, n: int) -> np.ndarray:
        if self.dist_tag == "gaussian":
            return self._rng.standard_normal((n, self.d))
        if self.dist_tag == "laplace":
            return self._rng.laplace(scale=LAPLACE_SCALE, size=(n, self.d))
        if self.dist_tag == "uniform_cube":
            return self._rng.uniform(-UNIFORM_HALF_WIDTH, UNIFORM_HALF_WIDTH, size=(n, self.d))
        return np.zeros((n, self.d))


def base_sampler(dist_tag: str, d: int, seed: int, *stream_ids: int) -> BaseSampler:
    return BaseSampler(dist_tag, d, seed, *stream_ids)


class MixtureSampler:
    """Stateful labeled sample stream from a mixture spec."""

    def __init__(self, spec: MixtureSpec, seed: int, stream_id: int = 2):
        self.spec = spec
        self.d = spec.d
        self._rng = rngmod.stream(seed, stream_id)
        self._base = BaseSampler(spec.dist_tag, spec.d, seed, stream_id, 1)

    def draw_labeled(self, n: int):
        labels = self._rng.choice(self.spec.k, size=n, p=self.spec.weights)
        x = self.spec.means[labels] + self._base.draw(n)
        return x, labels

    def draw(self, n: int) -> np.ndarray:
        return self.draw_labeled(n)[0]


def sample_stream(spec: MixtureSpec, seed: int, stream_id: int = 2) -> MixtureSampler:
    return MixtureSampler(spec, seed, stream_id)
