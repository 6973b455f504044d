"""Recursive clustering of spherical Gaussian mixtures with unbounded spread.

The strategy: restrict attention to samples whose projection onto a small
subspace lies near a tracked point (a *checker*), find a direction along
which the restricted mixture visibly splits (a *signal direction*), and grow
the subspace one direction at a time until every mean still in scope sits
within a polylog-radius ball.  At that point the scoped submixture has
bounded separation, so the probe/batch/vote procedure recovers its means,
one component is isolated by an explicit accept/reject predicate, its
samples are filtered out, and everything repeats on what remains.

Two preprocessing reductions make this viable in general position: samples
are partitioned along huge empty gaps so each part has polynomially bounded
spread, and the ambient dimension is cut to ``k`` via the top principal
components of (mixture covariance - base covariance).

The literal polylog radii collapse to single digits at desk scale, so every
constant lives in :class:`ClusterParams`, with :func:`desk_params` producing
overrides sized for small-``k`` experiments.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space
from scipy.stats import chi2, ncx2

from . import sample_test as st
from .mixture_gen import BaseSampler
from .moment_pipeline import MixtureSpec, iterative_projection
from .poincare_cluster import LearnedMixture, difference_sampler, majority_vote
from .rng import stream

__all__ = [
    "Checker",
    "SignalDirection",
    "ComponentTest",
    "ClusterParams",
    "desk_params",
    "SampleSizeError",
    "NoSignalError",
    "RefineFailedError",
    "IsolateFailedError",
    "trivial_checker",
    "checker_contains",
    "checker_contains_batch",
    "complement_basis",
    "reduce_by_checker",
    "truncated_weights_oracle",
    "is_reasonable",
    "is_signal_direction",
    "find_signal_direction",
    "full_cluster_bounded",
    "cluster_with_means",
    "refine_checker",
    "test_max_separation",
    "isolate_component",
    "recursive_cluster",
    "reduce_bounded_means",
    "reduce_dimension",
    "dimension_basis",
    "write_trail",
]

_ORTHO_TOL = 1e-10


class SampleSizeError(ValueError):
    """Too few samples for the requested statistical guarantee."""


class NoSignalError(RuntimeError):
    """No verified signal direction found; carries search diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class RefineFailedError(RuntimeError):
    """Checker refinement found no usable signal direction."""


class IsolateFailedError(RuntimeError):
    """No cluster qualified as the component to isolate."""


# ---------------------------------------------------------------------------
# Checkers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Checker:
    """A subspace/point/radius triple restricting attention to samples whose
    projection onto the subspace lands within ``r`` of ``p``."""

    basis: np.ndarray  # (d, a) orthonormal columns spanning V
    p: np.ndarray  # (a,) coordinates of the center in the basis
    r: float

    def __post_init__(self):
        basis = np.atleast_2d(np.asarray(self.basis, dtype=float))
        if basis.size == 0:
            basis = basis.reshape(basis.shape[0] if basis.ndim == 2 else 0, 0)
        p = np.asarray(self.p, dtype=float).reshape(-1)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "p", p)
        d, a = basis.shape
        if a > d:
            raise ValueError(f"checker subspace dimension {a} exceeds ambient {d}")
        if p.shape != (a,):
            raise ValueError(f"center has shape {p.shape}, expected ({a},)")
        if a > 0:
            gram = basis.T @ basis
            if np.max(np.abs(gram - np.eye(a))) > _ORTHO_TOL:
                raise ValueError("checker basis columns are not orthonormal")
        if not self.r > 0:
            raise ValueError("checker radius must be positive")

    @property
    def d(self) -> int:
        return self.basis.shape[0]

    @property
    def a(self) -> int:
        return self.basis.shape[1]

    def with_radius(self, r: float) -> "Checker":
        return dataclasses.replace(self, r=r)


def trivial_checker(d: int) -> Checker:
    """The pass-through checker: zero-dimensional subspace, infinite radius."""
    return Checker(np.zeros((d, 0)), np.zeros(0), math.inf)


def checker_contains(ch: Checker, x) -> bool:
    x = np.asarray(x, dtype=float)
    if x.shape != (ch.d,):
        raise ValueError(f"point has shape {x.shape}, expected ({ch.d},)")
    if ch.a == 0:
        return True
    return bool(np.linalg.norm(x @ ch.basis - ch.p) <= ch.r)


def checker_contains_batch(ch: Checker, xs) -> np.ndarray:
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.shape[1] != ch.d:
        raise ValueError(f"points have width {xs.shape[1]}, expected {ch.d}")
    if ch.a == 0:
        return np.ones(len(xs), dtype=bool)
    return np.linalg.norm(xs @ ch.basis - ch.p, axis=1) <= ch.r


def complement_basis(ch: Checker) -> np.ndarray:
    """Deterministic orthonormal basis of the checker subspace's complement,
    as (d, d-a) columns with the largest-magnitude entry made positive."""
    if ch.a == 0:
        return np.eye(ch.d)
    comp = null_space(ch.basis.T)
    for j in range(comp.shape[1]):
        lead = np.argmax(np.abs(comp[:, j]))
        if comp[lead, j] < 0:
            comp[:, j] = -comp[:, j]
    return comp


class ReducedSampler:
    """Rejection-samples an inner stream through a checker, emitting the
    survivors' coordinates in the complement of the checker subspace."""

    def __init__(self, inner, checker: Checker, max_draw_factor: int = 500):
        if checker.d != inner.d:
            raise ValueError("checker dimension does not match the sampler")
        self.inner = inner
        self.checker = checker
        self.comp = complement_basis(checker)
        self.d = self.comp.shape[1]
        self.max_draw_factor = max_draw_factor

    def draw(self, n: int) -> np.ndarray:
        out = []
        got = 0
        drawn = 0
        budget = self.max_draw_factor * max(n, 64)
        while got < n:
            want = max(n - got, 256)
            x = np.asarray(self.inner.draw(want), dtype=float)
            drawn += want
            keep = x[checker_contains_batch(self.checker, x)]
            got += len(keep)
            out.append(keep @ self.comp)
            if drawn > budget and got == 0:
                raise RuntimeError(
                    f"checker acceptance below 1/{self.max_draw_factor}; "
                    "reduction is starving"
                )
            if drawn > budget:
                raise RuntimeError("reduction exceeded its draw budget")
        return np.concatenate(out)[:n]


def reduce_by_checker(sampler, ch: Checker, max_draw_factor: int = 500) -> ReducedSampler:
    return ReducedSampler(sampler, ch, max_draw_factor)


@dataclass(frozen=True)
class TruncatedWeights:
    relevant: tuple  # indices whose projected mean lies within r + theta
    weights: np.ndarray  # renormalized weights over `relevant`
    accept_probs: np.ndarray  # per-component probability of passing the checker


def _checker_accept_prob(a: int, r: float, dist_sq: float) -> float:
    """Probability that a unit-covariance Gaussian whose projected mean sits
    at squared distance ``dist_sq`` from the center passes an a-dimensional
    radius-r checker (a noncentral chi-square tail)."""
    if a == 0 or math.isinf(r):
        return 1.0
    if dist_sq <= 0:
        return float(chi2.cdf(r * r, df=a))
    return float(ncx2.cdf(r * r, df=a, nc=dist_sq))


def truncated_weights_oracle(spec: MixtureSpec, ch: Checker, theta: float) -> TruncatedWeights:
    """Ground-truth relevant set and renormalized weights of the truncated
    reduction (testing path only)."""
    means = np.asarray(spec.means, dtype=float)
    if means.shape[1] != ch.d:
        raise ValueError("spec dimension does not match the checker")
    w = np.asarray(spec.weights, dtype=float)
    if ch.a == 0:
        dists = np.zeros(len(means))
    else:
        dists = np.linalg.norm(means @ ch.basis - ch.p, axis=1)
    probs = np.array([_checker_accept_prob(ch.a, ch.r, di * di) for di in dists])
    relevant = tuple(int(i) for i in np.flatnonzero(dists <= ch.r + theta))
    if relevant:
        raw = w[list(relevant)] * probs[list(relevant)]
        weights = raw / raw.sum()
    else:
        weights = np.zeros(0)
    return TruncatedWeights(relevant, weights, probs)


def is_reasonable(spec: MixtureSpec, w_star: float) -> bool:
    """Ground-truth predicate: the largest separation among heavy components
    (weight >= w_star) is at least the square root of the global maximum
    separation.  Single-component mixtures count as reasonable."""
    means = np.asarray(spec.means, dtype=float)
    if len(means) <= 1:
        return True
    diffs = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
    global_max = float(diffs.max())
    heavy = np.flatnonzero(np.asarray(spec.weights) >= w_star)
    if len(heavy) < 2:
        return False
    heavy_max = float(diffs[np.ix_(heavy, heavy)].max())
    return heavy_max >= math.sqrt(global_max)


# ---------------------------------------------------------------------------
# Signal directions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SignalDirection:
    v: np.ndarray  # unit vector
    p_level: float
    delta: float
    theta: float  # split point along v

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float).reshape(-1)
        object.__setattr__(self, "v", v)
        if abs(np.linalg.norm(v) - 1.0) > _ORTHO_TOL:
            raise ValueError("signal direction is not a unit vector")


def _signal_interval(proj: np.ndarray, p_level: float):
    """For sorted projections, the widest interval [lo, hi] leaving mass at
    least 0.95*p_level on both sides, or None if none exists."""
    n = len(proj)
    q = max(1, math.ceil(0.95 * p_level * n))
    if q > n:
        return None
    lo, hi = proj[q - 1], proj[n - q]
    if hi <= lo:
        return None
    return lo, hi


def is_signal_direction(samples, v, p_level: float, delta: float) -> bool:
    """True iff some split point has empirical mass >= 0.95*p_level at
    distance >= delta on each side along v."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    needed = math.ceil(20.0 / p_level)
    if len(samples) < needed:
        raise SampleSizeError(f"need at least {needed} samples, got {len(samples)}")
    proj = np.sort(samples @ np.asarray(v, dtype=float))
    interval = _signal_interval(proj, p_level)
    if interval is None:
        return False
    lo, hi = interval
    return bool(hi - lo >= 2.0 * delta)


def _default_grid(mix_sampler, ratio: float, floor: float, max_steps: int, rng) -> list:
    """Multiplicative grid from the empirical spread of a pilot batch down to
    ``floor``."""
    pilot = np.asarray(mix_sampler.draw(min(256, 256)), dtype=float)
    diffs = pilot[:, None, :] - pilot[None, :, :]
    start = float(np.linalg.norm(diffs, axis=2).max())
    if start <= floor:
        return [floor]
    grid = []
    val = start
    while val > floor and len(grid) < max_steps:
        grid.append(val)
        val /= ratio
    grid.append(floor)
    return grid


def _difference_chain(mix_sampler, k: int, params: "ClusterParams", seed: int):
    """Projection chain plus test config factory for a Gaussian mixture
    stream; the chain is built on pairwise differences so it is mean-free."""
    base = BaseSampler("gaussian", mix_sampler.d, seed, 3)
    chain = iterative_projection(
        difference_sampler(mix_sampler),
        difference_sampler(base),
        params.t,
        k,
        params.n_per_stage,
    )
    return chain, base


def _pair_config(sep: float, t: int, k: int, params: "ClusterParams") -> st.TestConfig:
    tau = st.choose_threshold(sep, t)
    void = not st.threshold_feasible(sep, t, k, params.delta, "gaussian")
    return st.TestConfig(t, tau, reps=params.reps, delta=params.delta, guarantee_void=void)


def find_signal_direction(
    mix_sampler,
    k: int,
    w_star: float,
    c: float,
    delta_guess_grid=None,
    *,
    params: "ClusterParams | None" = None,
    seed: int = 0,
    check_p: float | None = None,
    check_delta: float | None = None,
) -> SignalDirection:
    """Search for a direction along which the mixture splits into two heavy,
    well-separated halves.

    For each separation guess on a descending x1.1 grid: draw two anchors,
    pair-test each against a fresh batch, average the accepted batches into
    two candidate means, and verify the normalized difference as a signal
    direction — by default at (0.8*w_star, 0.8*guess), or at a caller-fixed
    level when ``check_p``/``check_delta`` are given.
    """
    params = params or ClusterParams()
    rng = stream(seed, 17)
    log_k = math.log(k / w_star)
    if delta_guess_grid is None:
        floor = max(0.04 * log_k**4, params.pair_sep_floor, 1e-6)
        delta_guess_grid = _default_grid(
            mix_sampler, params.grid_ratio, floor, params.grid_steps, rng
        )
    chain, base = _difference_chain(mix_sampler, k, params, seed)
    m = params.signal_batch
    n_check = max(params.signal_samples, math.ceil(20.0 / (check_p or 0.8 * w_star)))
    tried = []
    for delta in delta_guess_grid:
        sep = max(0.01 * delta, params.pair_sep_floor)
        cfg = _pair_config(sep, params.t, k, params)
        p_lvl = check_p if check_p is not None else 0.8 * w_star
        d_lvl = check_delta if check_delta is not None else 0.8 * delta
        for _ in range(params.signal_trials):
            anchors = np.asarray(mix_sampler.draw(2), dtype=float)
            batch = np.asarray(mix_sampler.draw(2 * m), dtype=float)
            acc0 = st.pair_test_batch(anchors[0], batch[:m], chain, cfg, base)
            acc1 = st.pair_test_batch(anchors[1], batch[m:], chain, cfg, base)
            if not (acc0.any() and acc1.any()):
                tried.append({"delta": delta, "reason": "empty batch"})
                continue
            mu0 = batch[:m][acc0].mean(axis=0)
            mu1 = batch[m:][acc1].mean(axis=0)
            gap = np.linalg.norm(mu0 - mu1)
            if gap < 1e-12:
                tried.append({"delta": delta, "reason": "coincident candidates"})
                continue
            v = (mu0 - mu1) / gap
            fresh = np.asarray(mix_sampler.draw(n_check), dtype=float)
            proj = np.sort(fresh @ v)
            interval = _signal_interval(proj, p_lvl)
            if interval is not None and interval[1] - interval[0] >= 2.0 * d_lvl:
                split = 0.5 * (interval[0] + interval[1])
                return SignalDirection(v, p_lvl, d_lvl, split)
            tried.append({"delta": delta, "reason": "verification failed"})
    raise NoSignalError(
        "no verified signal direction on the separation grid",
        {"grid": [float(x) for x in delta_guess_grid], "attempts": tried[-20:]},
    )


# ---------------------------------------------------------------------------
# Bounded-separation full clustering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClusterParams:
    """Constants table for the Gaussian clustering pipeline.

    Defaults follow the displayed theory values; the probe/batch counts use
    the same practical scaling as the Poincare learner because the theory
    counts ((k/w*)^100) are not runnable.  Use :func:`desk_params` for
    small-k overrides where the polylog radii collapse to single digits.
    """

    t: int = 2  # pair-test degree
    reps: int = st.DEFAULT_REPS
    delta: float = 0.05
    n_per_stage: int = 20_000  # samples per projection stage
    probes: int | None = None  # vote probes l; None -> 20k/w*
    batch: int | None = None  # batch size m per probe; None -> 50k/w*
    vote_alpha: float = 0.1  # vote ball 0.2*alpha = 0.02, dedup alpha = 0.1
    support_factor: float = 0.9  # support threshold factor (x w* x l)
    sep_hint: float | None = None  # known minimum separation, if any
    pair_sep_floor: float = 0.0  # lower bound on the pair-test separation
    gamma_count: int | None = None  # None -> ceil(1e4 * ln ln(k/w*))
    grid_ratio: float = 1.1  # separation-guess grid ratio
    grid_steps: int = 60  # max grid length
    signal_trials: int = 6  # anchor redraws per grid point
    signal_batch: int = 96  # batch size per anchor
    signal_samples: int = 1_500  # fresh samples for signal verification
    refine_attempts: int = 4  # gamma redraws inside refine_checker
    refine_delta: float | None = None  # signal floor for refinement; None -> 0.04 ln(k/w*)^4
    refine_samples: int = 1_500  # kept-sample pool for choosing the new center
    refine_rounds: int | None = None  # None -> ceil(ln(k/w*)^{1+0.1c})
    isolate_samples: int = 3_000  # samples clustered when isolating
    margin_factor: float = 0.1  # clustering margin as a fraction of s
    mean_samples: int = 20_000  # samples for final mean/weight estimates
    pilot_samples: int = 4_000  # samples for the bounded-spread split
    cov_samples: int = 60_000  # samples for the covariance-based projection
    max_draw_factor: int = 500  # rejection-sampling budget multiplier


def desk_params(k: int, w_min: float, sep_hint: float | None = None, **overrides) -> ClusterParams:
    """Constants sized for small-k runs: fewer gamma draws, pair-test
    thresholds floored at the known separation, looser vote support, and a
    dedup radius scaled to the separation."""
    log_k = math.log(k / w_min)
    s = sep_hint if sep_hint is not None else log_k ** 1.0
    values = dict(
        probes=48,
        batch=120,
        vote_alpha=0.5 * s,
        support_factor=0.5,
        sep_hint=sep_hint,
        pair_sep_floor=s,
        gamma_count=2,
        grid_steps=40,
        signal_trials=4,
        refine_attempts=2,
        refine_delta=max(0.04 * log_k**4, 2.0 * s),
        margin_factor=0.3,
        n_per_stage=15_000,
    )
    values.update(overrides)
    return ClusterParams(**values)


def _theta(k: int, w_star: float, c: float) -> float:
    return math.log(k / w_star) ** ((1.0 + c) / 2.0)


def _gamma_count(k: int, w_star: float, params: ClusterParams) -> int:
    if params.gamma_count is not None:
        return params.gamma_count
    return max(1, math.ceil(1e4 * math.log(max(math.log(k / w_star), 1.0 + 1e-9))))


def full_cluster_bounded(
    mix_sampler,
    k: int,
    w_star: float,
    c: float,
    *,
    params: ClusterParams | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Probe/batch/vote mean recovery for a mixture whose maximum separation
    is polylog-bounded; returns r <= k means pairwise >= s/2 apart."""
    params = params or ClusterParams()
    log_k = math.log(k / w_star)
    s = params.sep_hint if params.sep_hint is not None else log_k ** (0.5 + c)
    sep = max(s, params.pair_sep_floor)
    chain, base = _difference_chain(mix_sampler, k, params, seed)
    cfg = _pair_config(sep, params.t, k, params)
    l = params.probes if params.probes is not None else int(round(20 * k / w_star))
    m = params.batch if params.batch is not None else int(round(50 * k / w_star))

    candidates = np.full((l, mix_sampler.d), np.nan)
    for i in range(l):
        probe = np.asarray(mix_sampler.draw(1), dtype=float)[0]
        others = np.asarray(mix_sampler.draw(m), dtype=float)
        accept = st.pair_test_batch(probe, others, chain, cfg, base)
        if accept.any():
            candidates[i] = others[accept].mean(axis=0)
    ledger = majority_vote(candidates, params.vote_alpha, params.support_factor * w_star * l)
    valid = candidates[~np.isnan(candidates[:, 0])]
    # Strongest-supported candidates first, refined by averaging supporters.
    order = sorted(ledger.accepted, key=lambda i: -ledger.support[i])
    means = []
    for i in order:
        ball = valid[np.linalg.norm(valid - candidates[i], axis=1) <= 0.2 * params.vote_alpha]
        means.append(ball.mean(axis=0))
    means = np.array(means) if means else np.zeros((0, mix_sampler.d))
    # Dedup guarantees the spacing only up to the candidate error, so enforce
    # the pairwise floor explicitly.
    kept = []
    for i in range(len(means)):
        if all(np.linalg.norm(means[i] - means[j]) >= 0.5 * s for j in kept):
            kept.append(i)
    return means[kept]


def _margin_matrix(xs: np.ndarray, means: np.ndarray) -> np.ndarray:
    """(n, r) worst-case margins: entry (i, j) is the largest deviation of
    x_i from mean j along any inter-mean unit direction (0 when r == 1)."""
    r = len(means)
    dirs = []
    for j1 in range(r):
        for j2 in range(j1 + 1, r):
            diff = means[j1] - means[j2]
            norm = np.linalg.norm(diff)
            if norm > 0:
                dirs.append(diff / norm)
    if not dirs:
        return np.zeros((len(xs), r))
    dirs = np.array(dirs)  # (D, d)
    # |(x_i - mu_j) . v_D| maximized over D
    proj_x = xs @ dirs.T  # (n, D)
    proj_m = means @ dirs.T  # (r, D)
    return np.max(np.abs(proj_x[:, None, :] - proj_m[None, :, :]), axis=2)


def cluster_with_means(z, candidate_means, s: float):
    """Index of the candidate consistent with z along every inter-candidate
    direction (margin 0.1*s); falls back to the minimax margin with a flag
    when zero or several candidates qualify."""
    means = np.atleast_2d(np.asarray(candidate_means, dtype=float))
    if len(means) == 0:
        raise ValueError("no candidate means")
    z = np.asarray(z, dtype=float)
    margins = _margin_matrix(z[None, :], means)[0]
    qualifying = np.flatnonzero(margins <= 0.1 * s)
    if len(qualifying) == 1:
        return int(qualifying[0]), False
    return int(np.argmin(margins)), True


def _cluster_batch(xs, candidate_means, s: float):
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    means = np.atleast_2d(np.asarray(candidate_means, dtype=float))
    margins = _margin_matrix(xs, means)
    qualifying = margins <= 0.1 * s
    counts = qualifying.sum(axis=1)
    idx = np.where(counts == 1, np.argmax(qualifying, axis=1), np.argmin(margins, axis=1))
    return idx.astype(int), counts != 1


# ---------------------------------------------------------------------------
# Checker refinement and termination test
# ---------------------------------------------------------------------------


def _draw_contained(sampler, ch: Checker, n: int, max_draw_factor: int) -> np.ndarray:
    """Full-dimensional samples that pass the checker (no projection)."""
    out = []
    got = 0
    drawn = 0
    budget = max_draw_factor * max(n, 64)
    while got < n:
        want = max(n - got, 256)
        x = np.asarray(sampler.draw(want), dtype=float)
        drawn += want
        keep = x[checker_contains_batch(ch, x)]
        got += len(keep)
        out.append(keep)
        if drawn > budget:
            raise RuntimeError("checker acceptance too low while collecting samples")
    return np.concatenate(out)[:n]


def refine_checker(
    mix_sampler,
    ch: Checker,
    k: int,
    w_star: float,
    c: float,
    *,
    params: ClusterParams | None = None,
    seed: int = 0,
    trail: list | None = None,
) -> Checker:
    """Grow the checker subspace by one signal direction and recenter on a
    well-supported sample from one side of the split."""
    params = params or ClusterParams()
    rng = stream(seed, 19)
    log_k = math.log(k / w_star)
    theta = _theta(k, w_star, c)
    beta = log_k ** ((1.0 + 1.1 * c) / 2.0)
    class_delta = params.refine_delta if params.refine_delta is not None else 0.04 * log_k**4
    class_p = 0.4 * w_star
    gamma_max = _gamma_count(k, w_star, params)
    gammas = rng.permutation(np.arange(1, gamma_max + 1))[: params.refine_attempts]
    last_error: Exception | None = None
    for gamma in gammas:
        scope = ch.with_radius(beta + float(gamma) * theta) if ch.a > 0 else ch
        try:
            reduced = reduce_by_checker(mix_sampler, scope, params.max_draw_factor) \
                if ch.a > 0 else mix_sampler
            # The grid search verifies at (0.8w*, 0.8*guess) with the largest
            # guess first, which forces alignment with the widest split; the
            # found direction must then also classify as a signal at the
            # refinement floor.
            sig = find_signal_direction(
                reduced, k, w_star, c, params=params, seed=int(rng.integers(2**62))
            )
            n_check = max(params.signal_samples, math.ceil(20.0 / class_p))
            fresh_check = np.asarray(reduced.draw(n_check), dtype=float)
            if not is_signal_direction(fresh_check, sig.v, class_p, class_delta):
                last_error = RefineFailedError(
                    "signal direction failed the refinement floor classification"
                )
                continue
        except (NoSignalError, RuntimeError) as err:
            last_error = err
            continue
        comp = complement_basis(ch)
        v_full = comp @ sig.v
        v_full /= np.linalg.norm(v_full)
        new_basis, _ = np.linalg.qr(np.column_stack([ch.basis, v_full]))
        # QR may flip signs; realign the last column with the signal direction.
        if new_basis[:, -1] @ v_full < 0:
            new_basis[:, -1] = -new_basis[:, -1]
        keep_ch = ch.with_radius(beta + float(gamma + 2) * theta) if ch.a > 0 else ch
        kept = _draw_contained(mix_sampler, keep_ch, params.refine_samples, params.max_draw_factor)
        proj = kept @ new_basis
        dists = np.linalg.norm(proj[:, None, :] - proj[None, :, :], axis=2)
        frac = (dists <= theta).mean(axis=1)
        good = frac >= 0.9 * w_star
        svals = kept @ v_full
        lo_good = np.flatnonzero(good & (svals <= sig.theta - sig.delta))
        hi_good = np.flatnonzero(good & (svals >= sig.theta + sig.delta))
        if len(lo_good) == 0 or len(hi_good) == 0:
            lo_good = np.flatnonzero(good & (svals <= sig.theta))
            hi_good = np.flatnonzero(good & (svals > sig.theta))
        if len(lo_good) == 0 or len(hi_good) == 0:
            last_error = RefineFailedError("no good samples on both sides of the split")
            continue
        pick_lo = kept[int(rng.choice(lo_good))]
        pick_hi = kept[int(rng.choice(hi_good))]
        chosen = pick_lo if rng.integers(2) == 0 else pick_hi
        refined = Checker(new_basis, chosen @ new_basis, 10.0 * theta)
        if trail is not None:
            trail.append(
                {
                    "action": "refine",
                    "checker_dim": refined.a,
                    "radius": refined.r,
                    "gamma": int(gamma),
                    "signal_delta": sig.delta,
                }
            )
        return refined
    raise RefineFailedError(f"refinement exhausted gamma attempts: {last_error}")


def test_max_separation(
    mix_sampler,
    ch: Checker,
    k: int,
    w_star: float,
    c: float,
    *,
    params: ClusterParams | None = None,
    seed: int = 0,
    trail: list | None = None,
) -> str:
    """Reject iff a verified wide split survives in some truncated reduction
    of the checker scope; Accept otherwise."""
    params = params or ClusterParams()
    rng = stream(seed, 23)
    log_k = math.log(k / w_star)
    theta = _theta(k, w_star, c)
    delta = 0.4 * log_k**4
    verdict = st.ACCEPT
    for gamma in range(1, _gamma_count(k, w_star, params) + 1):
        scope = ch.with_radius((30.0 + gamma) * theta) if ch.a > 0 else ch
        try:
            reduced = reduce_by_checker(mix_sampler, scope, params.max_draw_factor) \
                if ch.a > 0 else mix_sampler
            find_signal_direction(
                reduced,
                k,
                w_star,
                c,
                delta_guess_grid=[delta],
                params=params,
                seed=int(rng.integers(2**62)),
                check_p=0.4 * w_star,
                check_delta=delta,
            )
            verdict = st.REJECT
            break
        except (NoSignalError, RuntimeError):
            continue
    if trail is not None:
        trail.append(
            {
                "action": "accept" if verdict == st.ACCEPT else "reject",
                "checker_dim": ch.a,
                "radius": ch.r if math.isfinite(ch.r) else None,
            }
        )
    return verdict


# ---------------------------------------------------------------------------
# Component isolation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComponentTest:
    """Accept/reject predicate isolating one component: membership in the
    checker, closest cluster label equal to the target, and a bounded
    worst-direction margin."""

    checker: Checker  # containment gate (radius 17*theta)
    comp: np.ndarray  # (d, d-a) complement basis for the reduced coordinates
    means: np.ndarray  # candidate means in reduced coordinates
    target: int  # f(j): label that accepts
    s: float  # separation scale for the margins
    margin: float  # absolute margin bound (margin_factor * s)

    @property
    def approx_mean(self) -> np.ndarray:
        """The target candidate lifted back to the ambient space (the checker
        coordinates are filled from the checker center)."""
        lifted = self.comp @ self.means[self.target]
        if self.checker.a > 0:
            lifted = lifted + self.checker.basis @ self.checker.p
        return lifted

    def accept(self, z) -> bool:
        return bool(self.accept_batch(np.asarray(z, dtype=float)[None, :])[0])

    def accept_batch(self, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        mask = checker_contains_batch(self.checker, xs)
        if mask.any():
            margins = _margin_matrix(xs[mask] @ self.comp, self.means)
            hit = (np.argmin(margins, axis=1) == self.target) & (
                margins[:, self.target] <= self.margin
            )
            mask[np.flatnonzero(mask)] = hit
        return mask


def isolate_component(
    mix_sampler,
    ch: Checker,
    k: int,
    w_star: float,
    c: float,
    *,
    params: ClusterParams | None = None,
    seed: int = 0,
    trail: list | None = None,
) -> ComponentTest:
    """Fully cluster the checker scope and return the predicate for the
    cluster that is heavy and concentrated near the checker center."""
    params = params or ClusterParams()
    theta = _theta(k, w_star, c)
    log_k = math.log(k / w_star)
    scope19 = ch.with_radius(19.0 * theta) if ch.a > 0 else ch
    reduced = reduce_by_checker(mix_sampler, scope19, params.max_draw_factor) \
        if ch.a > 0 else mix_sampler
    means_r = full_cluster_bounded(reduced, k, w_star, c, params=params, seed=seed)
    if len(means_r) == 0:
        raise IsolateFailedError("full clustering of the checker scope found no means")
    s = params.sep_hint if params.sep_hint is not None else log_k ** (0.5 + c)
    scope17 = ch.with_radius(17.0 * theta) if ch.a > 0 else ch
    scope11 = ch.with_radius(11.0 * theta) if ch.a > 0 else ch
    comp = complement_basis(ch)
    fresh = _draw_contained(mix_sampler, scope17, params.isolate_samples, params.max_draw_factor)
    margin = params.margin_factor * s
    margins = _margin_matrix(fresh @ comp, means_r)
    labels = np.argmin(margins, axis=1)
    ok = margins[np.arange(len(fresh)), labels] <= margin
    in_core = checker_contains_batch(scope11, fresh)
    best = None
    best_count = -1
    for j in range(len(means_r)):
        members = (labels == j) & ok
        count = int(members.sum())
        if count == 0:
            continue
        weight = count / len(fresh)
        core_frac = float(in_core[members].mean())
        if weight >= 0.5 * w_star and core_frac >= 0.5 and count > best_count:
            best, best_count = j, count
    if best is None:
        raise IsolateFailedError("no cluster was both heavy and concentrated in the core")
    test = ComponentTest(scope17, comp, means_r, best, s, margin)
    if trail is not None:
        trail.append(
            {
                "action": "isolate",
                "checker_dim": ch.a,
                "radius": scope17.r if math.isfinite(scope17.r) else None,
                "clusters": len(means_r),
                "target": best,
            }
        )
    return test


# ---------------------------------------------------------------------------
# Preprocessing reductions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleGroup:
    indices: np.ndarray  # positions in the original sample set
    centered: np.ndarray  # group samples minus the group mean
    offset: np.ndarray  # the group mean


def _far_pair(pts: np.ndarray, threshold: float):
    """Any index pair at distance >= threshold, or None (chunked scan)."""
    n = len(pts)
    step = max(1, int(4e7 // max(n * pts.shape[1], 1)))
    for start in range(0, n, step):
        block = pts[start : start + step]
        dists = np.linalg.norm(block[:, None, :] - pts[None, :, :], axis=2)
        hit = np.argwhere(dists >= threshold)
        if len(hit):
            i, j = hit[0]
            return start + int(i), int(j)
    return None


def reduce_bounded_means(samples, k: int, w_min: float, threshold: float | None = None):
    """Split the sample set along huge empty gaps until each part has
    bounded spread; each part is recentered by its own mean."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    d = samples.shape[1]
    if threshold is None:
        threshold = 1e6 * ((d + k) / w_min) ** 2

    def rec(idx: np.ndarray) -> list:
        pts = samples[idx]
        pair = _far_pair(pts, threshold)
        if pair is None:
            return [idx]
        i, j = pair
        v = pts[j] - pts[i]
        v /= np.linalg.norm(v)
        proj = pts @ v
        order = np.sort(proj)
        gaps = np.diff(order)
        g = int(np.argmax(gaps))
        mid = 0.5 * (order[g] + order[g + 1])
        below = idx[proj <= mid]
        above = idx[proj > mid]
        return rec(below) + rec(above)

    groups = rec(np.arange(len(samples)))
    out = []
    for idx in groups:
        offset = samples[idx].mean(axis=0)
        out.append(SampleGroup(idx, samples[idx] - offset, offset))
    return out


def dimension_basis(cov_diff: np.ndarray, k: int) -> np.ndarray:
    """Top-k principal directions of (mixture covariance - base covariance)
    as (k, d) rows, deterministically signed and padded to k rows."""
    cov_diff = np.asarray(cov_diff, dtype=float)
    d = cov_diff.shape[0]
    k = min(k, d)
    values, vectors = np.linalg.eigh(0.5 * (cov_diff + cov_diff.T))
    order = np.argsort(-values)[:k]
    basis = vectors[:, order].T
    for j in range(len(basis)):
        lead = np.argmax(np.abs(basis[j]))
        if basis[j, lead] < 0:
            basis[j] = -basis[j]
    if len(basis) < k:
        pad = null_space(basis)[:, : k - len(basis)].T
        basis = np.vstack([basis, pad])
    return basis


def reduce_dimension(samples, base_cov, k: int):
    """Project samples onto the top-k principal components of the estimated
    (mixture covariance - base covariance); identity when d <= k."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    d = samples.shape[1]
    if d <= k:
        basis = np.eye(d)
        return samples.copy(), basis
    second = samples.T @ samples / len(samples)
    basis = dimension_basis(second - np.asarray(base_cov, dtype=float), k)
    return samples @ basis.T, basis


class _ProjectedSampler:
    def __init__(self, inner, basis: np.ndarray, offset: np.ndarray):
        self.inner = inner
        self.basis = basis  # (k, d) rows
        self.offset = offset
        self.d = basis.shape[0]

    def draw(self, n: int) -> np.ndarray:
        x = np.asarray(self.inner.draw(n), dtype=float)
        return (x - self.offset) @ self.basis.T


class _FilteredSampler:
    """Rejection-samples the inner stream, dropping points accepted by any of
    the given component tests."""

    def __init__(self, inner, tests, max_draw_factor: int = 500):
        self.inner = inner
        self.tests = tuple(tests)
        self.d = inner.d
        self.max_draw_factor = max_draw_factor

    def draw(self, n: int) -> np.ndarray:
        out = []
        got = 0
        drawn = 0
        budget = self.max_draw_factor * max(n, 64)
        while got < n:
            want = max(n - got, 256)
            x = np.asarray(self.inner.draw(want), dtype=float)
            drawn += want
            mask = np.ones(len(x), dtype=bool)
            for test in self.tests:
                mask &= ~test.accept_batch(x)
            got += int(mask.sum())
            out.append(x[mask])
            if drawn > budget:
                raise RuntimeError("component filtering exceeded its draw budget")
        return np.concatenate(out)[:n]


# ---------------------------------------------------------------------------
# The complete recursive algorithm
# ---------------------------------------------------------------------------


def write_trail(path, events) -> None:
    """Diagnostics trail as JSON-lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for event in events:
            fh.write(json.dumps(event, sort_keys=True) + "\n")


def _cluster_group(sampler, k: int, w_min: float, c: float, params: ClusterParams, rng, trail, level_base: int):
    """Run the refine/test/isolate recursion on one bounded-spread group
    (already recentered and dimension-reduced); returns reduced-space means,
    relative weights, and warnings."""
    tests = []
    warnings = []
    current = sampler
    rounds = params.refine_rounds
    if rounds is None:
        rounds = max(1, math.ceil(math.log(k / w_min) ** (1.0 + 0.1 * c)))
    for comp_idx in range(k - 1):
        level = level_base + comp_idx
        ch = trivial_checker(current.d)
        try:
            for _ in range(rounds):
                verdict = test_max_separation(
                    current, ch, k, w_min, c, params=params, seed=int(rng.integers(2**62)), trail=trail
                )
                if trail:
                    trail[-1]["level"] = level
                if verdict == st.ACCEPT:
                    break
                try:
                    ch = refine_checker(
                        current, ch, k, w_min, c, params=params, seed=int(rng.integers(2**62)), trail=trail
                    )
                    if trail:
                        trail[-1]["level"] = level
                except RefineFailedError as err:
                    warnings.append(f"level {level}: {err}")
                    break
            test = isolate_component(
                current, ch, k, w_min, c, params=params, seed=int(rng.integers(2**62)), trail=trail
            )
            if trail:
                trail[-1]["level"] = level
        except (IsolateFailedError, RuntimeError) as err:
            warnings.append(f"level {level}: {err}")
            break
        tests.append(test)
        current = _FilteredSampler(current, [test], params.max_draw_factor)

    # Provisional means: one per isolated component from its own predicate,
    # plus the never-isolated remainder.  The remainder stream still carries
    # the tails each predicate rejected, so its mean comes from another
    # probe/batch/vote pass (tails are outvoted) rather than a plain average.
    batch = np.asarray(sampler.draw(params.mean_samples), dtype=float)
    provisional = []
    for j, test in enumerate(tests):
        members = test.accept_batch(batch)
        if members.sum() >= 10:
            provisional.append(batch[members].mean(axis=0))
        else:
            warnings.append(f"component {j}: predicate matched too few samples; using its candidate")
            provisional.append(test.approx_mean)
    try:
        tail_means = full_cluster_bounded(
            current, k, w_min, c, params=params, seed=int(rng.integers(2**62))
        )
    except RuntimeError as err:
        tail_means = np.zeros((0, sampler.d))
        warnings.append(f"remainder clustering failed: {err}")
    if len(tail_means):
        provisional.append(tail_means[0])
    else:
        try:
            tail_batch = np.asarray(current.draw(2_000), dtype=float)
            warnings.append("remainder mean falls back to the filtered-stream average")
            provisional.append(tail_batch.mean(axis=0))
        except RuntimeError:
            warnings.append("remainder stream exhausted; no remainder component emitted")
    provisional = np.array(provisional)

    # Final pass: nearest provisional mean wins, which reassigns the tail
    # samples the predicates rejected back to their own components.
    dists = np.linalg.norm(batch[:, None, :] - provisional[None, :, :], axis=2)
    labels = np.argmin(dists, axis=1)
    means = []
    weights = []
    for j in range(len(provisional)):
        members = labels == j
        count = int(members.sum())
        if count < 10:
            warnings.append(f"component {j}: only {count} assigned samples; dropped")
            continue
        means.append(batch[members].mean(axis=0))
        weights.append(count / len(batch))
    return np.array(means), np.array(weights), warnings


def recursive_cluster(
    mix_sampler,
    k: int,
    w_min: float,
    c: float,
    alpha: float,
    *,
    params: ClusterParams | None = None,
    seed: int = 0,
    trail_path=None,
    oracle_spec: MixtureSpec | None = None,
) -> LearnedMixture:
    """Learn all component means and weights of a spherical Gaussian mixture
    with no bound on the overall spread.

    Preprocessing splits the samples along huge empty gaps and projects onto
    the top-k covariance directions; the core loop alternates separation
    testing and checker refinement, then isolates and strips one component
    per level.  ``alpha`` is a target accuracy knob recorded in the metadata
    (estimates are driven by the sample budgets in ``params``).
    """
    params = params or ClusterParams()
    rng = stream(seed, 29)
    trail: list = []
    d0 = mix_sampler.d

    pilot = np.asarray(mix_sampler.draw(params.pilot_samples), dtype=float)
    groups = reduce_bounded_means(pilot, k, w_min)
    offsets = np.array([g.offset for g in groups])
    shares = np.array([len(g.indices) for g in groups], dtype=float)
    shares /= shares.sum()
    trail.append({"action": "split", "groups": len(groups), "level": -1, "checker_dim": 0, "radius": None})

    all_means = []
    all_weights = []
    warnings = []
    level_base = 0
    for g, group in enumerate(groups):
        if len(groups) == 1:
            group_sampler = mix_sampler
            k_g = k
        else:
            group_sampler = _NearestGroupSampler(mix_sampler, offsets, g, params.max_draw_factor)
            k_g = max(1, int(round(k * shares[g])))
        if oracle_spec is not None:
            in_scope = [
                float(np.linalg.norm(mu - offsets[g]))
                for mu in np.asarray(oracle_spec.means)
                if np.argmin(np.linalg.norm(offsets - mu, axis=1)) == g
            ]
            trail[-1].setdefault("means_in_scope", []).append(len(in_scope))

        if group_sampler.d > k_g:
            shifted = np.asarray(group_sampler.draw(params.cov_samples), dtype=float) - offsets[g]
            second = shifted.T @ shifted / len(shifted)
            basis = dimension_basis(second - np.eye(d0), k_g)
            trail.append({"action": "project", "level": -1, "checker_dim": 0, "radius": None, "dims": int(basis.shape[0])})
        else:
            basis = np.eye(group_sampler.d)
        reduced = _ProjectedSampler(group_sampler, basis, offsets[g])

        if k_g == 1:
            batch = np.asarray(reduced.draw(params.mean_samples), dtype=float)
            means_g = batch.mean(axis=0, keepdims=True)
            weights_g = np.array([1.0])
            warn_g = []
        else:
            means_g, weights_g, warn_g = _cluster_group(
                reduced, k_g, w_min, c, params, rng, trail, level_base
            )
        warnings.extend(warn_g)
        level_base += max(k_g - 1, 1)
        for mu, w in zip(means_g, weights_g):
            all_means.append(offsets[g] + mu @ basis)
            all_weights.append(w * shares[g])

    means = np.array(all_means) if all_means else np.zeros((0, d0))
    weights = np.array(all_weights)
    if weights.sum() > 0:
        weights = weights / weights.sum()
    if trail_path is not None:
        write_trail(trail_path, trail)
    refine_levels = sum(1 for e in trail if e["action"] == "refine")
    meta = {
        "seed": seed,
        "alpha": alpha,
        "groups": len(groups),
        "refine_events": refine_levels,
        "trail": trail,
        "warnings": warnings,
    }
    return LearnedMixture(means, weights, meta)


class _NearestGroupSampler:
    """Restricts a stream to the samples nearest one bounded-spread group
    center (the groups are separated by huge empty gaps, so nearest-center
    assignment is exact up to exponentially rare errors)."""

    def __init__(self, inner, offsets: np.ndarray, index: int, max_draw_factor: int = 500):
        self.inner = inner
        self.offsets = offsets
        self.index = index
        self.d = inner.d
        self.max_draw_factor = max_draw_factor

    def draw(self, n: int) -> np.ndarray:
        out = []
        got = 0
        drawn = 0
        budget = self.max_draw_factor * max(n, 64)
        while got < n:
            want = max(n - got, 256)
            x = np.asarray(self.inner.draw(want), dtype=float)
            drawn += want
            dists = np.linalg.norm(x[:, None, :] - self.offsets[None, :, :], axis=2)
            keep = x[np.argmin(dists, axis=1) == self.index]
            got += len(keep)
            out.append(keep)
            if drawn > budget:
                raise RuntimeError("group filtering exceeded its draw budget")
        return np.concatenate(out)[:n]
