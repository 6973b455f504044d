"""End-to-end learner for mixtures of translated 1-Poincare distributions.

Works on the difference mixture: a chain is built for (z - z')/sqrt(2), pair
tests decide same-component membership, accepted batches are averaged into
candidate means, and majority voting dedups the candidates.  Weights come
from assigning a fresh batch to the voted means.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import sample_test as st
from .moment_pipeline import iterative_projection


@dataclass(frozen=True)
class LearnedMixture:
    means: np.ndarray  # (r, d)
    weights: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.weights)

    def to_json(self) -> str:
        return json.dumps(
            {
                "means": np.asarray(self.means).tolist(),
                "weights": np.asarray(self.weights).tolist(),
                "metadata": self.metadata,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, doc: str) -> "LearnedMixture":
        data = json.loads(doc)
        return cls(
            np.array(data["means"], dtype=float),
            np.array(data["weights"], dtype=float),
            data.get("metadata", {}),
        )


@dataclass(frozen=True)
class VoteLedger:
    candidates: np.ndarray  # (l, d) candidate means (NaN rows for failed probes)
    support: np.ndarray  # count of candidates within the 0.2*alpha ball
    accepted: tuple  # indices admitted to the output set


class _DifferenceSampler:
    """Stream of (z - z')/sqrt(2) over independent pairs from an inner stream."""

    def __init__(self, inner):
        self.inner = inner
        self.d = inner.d

    def draw(self, n: int) -> np.ndarray:
        x = np.asarray(self.inner.draw(2 * n), dtype=float)
        return (x[:n] - x[n:]) / math.sqrt(2.0)


def difference_sampler(mix_sampler) -> _DifferenceSampler:
    return _DifferenceSampler(mix_sampler)


def majority_vote(candidates: np.ndarray, alpha: float, support_threshold: float) -> VoteLedger:
    """Sequentially admit candidates with enough 0.2*alpha-ball support that
    are at least alpha away from everything admitted so far."""
    valid = ~np.isnan(candidates[:, 0])
    support = np.zeros(len(candidates), dtype=int)
    accepted = []
    for i in range(len(candidates)):
        if not valid[i]:
            continue
        dists = np.linalg.norm(candidates[valid] - candidates[i], axis=1)
        support[i] = int(np.sum(dists <= 0.2 * alpha))
        if support[i] < support_threshold:
            continue
        if any(np.linalg.norm(candidates[j] - candidates[i]) < alpha for j in accepted):
            continue
        accepted.append(i)
    return VoteLedger(candidates, support, tuple(accepted))


def assign_sample(z, learned: LearnedMixture, band: float):
    """Index of the mean consistent with z along all inter-mean directions.

    Returns (index, ambiguous): ambiguous is set when zero or several means
    satisfy every margin; the minimax margin (lexicographic on ties) decides.
    """
    means = np.asarray(learned.means, dtype=float)
    r = len(means)
    if r == 0:
        raise ValueError("learned mixture has no means")
    z = np.asarray(z, dtype=float)
    dirs = []
    for j1 in range(r):
        for j2 in range(j1 + 1, r):
            v = means[j1] - means[j2]
            nv = np.linalg.norm(v)
            if nv > 0:
                dirs.append(v / nv)
    if not dirs:
        return 0, False
    dirs = np.array(dirs)
    margins = np.max(np.abs((means - z[None, :]) @ dirs.T), axis=1)
    qualifying = np.flatnonzero(margins <= band)
    if len(qualifying) == 1:
        return int(qualifying[0]), False
    return int(np.argmin(margins)), True


def assign_batch(xs, learned: LearnedMixture, band: float):
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    out = np.empty(len(xs), dtype=int)
    flags = np.empty(len(xs), dtype=bool)
    for i, x in enumerate(xs):
        out[i], flags[i] = assign_sample(x, learned, band)
    return out, flags


def default_band(k: int, w_min: float, c: float) -> float:
    return math.log(k / w_min) ** (1.0 + 0.5 * c)


def learn_means(
    mix_sampler,
    base_sampler,
    k: int,
    w_min: float,
    sep: float,
    alpha: float,
    c: float = 0.5,
    *,
    delta: float = 0.05,
    t: int | None = None,
    t_max: int = 2,
    reps: int = st.DEFAULT_REPS,
    probes: int | None = None,
    batch: int | None = None,
    n_per_stage: int = 50_000,
    weight_samples: int = 2_000,
    band: float | None = None,
) -> LearnedMixture:
    """Recover the component means and weights of a 1-Poincare mixture.

    Separations below the (ln K)^{1+c} regime run anyway and are flagged in
    the metadata, as are degree caps; desk-scale runs live outside the
    asymptotic regime by design.
    """
    warnings = []
    regime_floor = math.log(k / w_min) ** (1.0 + c)
    if sep < regime_floor:
        warnings.append(f"separation {sep:.3g} below regime floor {regime_floor:.3g}")
    capped = False
    if t is None:
        choice = st.choose_degree(sep, k, w_min, delta, "poincare", t_max=t_max)
        t, capped = choice.t, choice.capped
        if capped:
            warnings.append(f"degree capped at t={t}")
    m = batch if batch is not None else int(round(50 * k / w_min))
    l = probes if probes is not None else int(round(20 * k / w_min))

    diff_mix = difference_sampler(mix_sampler)
    diff_base = difference_sampler(base_sampler)
    chain = iterative_projection(diff_mix, diff_base, t, k, n_per_stage)
    tau = st.choose_threshold(sep, t)
    void = not st.threshold_feasible(sep, t, k, delta, "poincare")
    cfg = st.TestConfig(t, tau, reps=reps, delta=delta, guarantee_void=void)

    candidates = np.full((l, mix_sampler.d), np.nan)
    for i in range(l):
        probe = mix_sampler.draw(1)[0]
        others = mix_sampler.draw(m)
        accept = st.pair_test_batch(probe, others, chain, cfg, base_sampler)
        if accept.any():
            candidates[i] = others[accept].mean(axis=0)
    ledger = majority_vote(candidates, alpha, 0.9 * w_min * l)
    # Refine each admitted candidate by averaging its supporters: candidates
    # come from disjoint probe batches, so this cuts the variance by the
    # support count without changing what gets admitted.
    valid = candidates[~np.isnan(candidates[:, 0])]
    means = []
    for i in ledger.accepted:
        ball = valid[np.linalg.norm(valid - candidates[i], axis=1) <= 0.2 * alpha]
        means.append(ball.mean(axis=0))
    means = np.array(means) if means else np.zeros((0, mix_sampler.d))

    if band is None:
        band = default_band(k, w_min, c)
    if len(means) > 0:
        fresh = mix_sampler.draw(weight_samples)
        idx, flags = assign_batch(fresh, LearnedMixture(means, np.zeros(len(means))), band)
        weights = np.bincount(idx, minlength=len(means)) / float(weight_samples)
        ambiguous_rate = float(flags.mean())
    else:
        weights = np.zeros(0)
        ambiguous_rate = 0.0
        warnings.append("no candidate survived voting")

    meta = {
        "t": t,
        "degree_capped": capped,
        "tau": tau,
        "reps": reps,
        "probes": l,
        "batch": m,
        "alpha": alpha,
        "band": band,
        "guarantee_void": void,
        "ambiguous_assignment_rate": ambiguous_rate,
        "support_counts": ledger.support[list(ledger.accepted)].tolist(),
        "warnings": warnings,
    }
    return LearnedMixture(means, weights, meta)


def write_assignments_csv(path, xs, learned: LearnedMixture, band: float) -> None:
    """CSV with columns (id, assigned, flags)."""
    idx, flags = assign_batch(xs, learned, band)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id,assigned,flags\n")
        for i, (j, flag) in enumerate(zip(idx, flags)):
            fh.write(f"{i},{j},{'ambiguous' if flag else ''}\n")
