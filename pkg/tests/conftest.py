import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment


def hungarian_errors(true_means, estimated):
    """Per-true-component distances under the optimal matching; unmatched
    components get infinity."""
    true_means = np.asarray(true_means, dtype=float)
    estimated = np.asarray(estimated, dtype=float)
    errors = np.full(len(true_means), np.inf)
    if len(estimated) == 0:
        return errors, np.full(len(true_means), -1, dtype=int)
    cost = np.linalg.norm(true_means[:, None, :] - estimated[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    perm = np.full(len(true_means), -1, dtype=int)
    for i, j in zip(rows, cols):
        errors[i] = cost[i, j]
        perm[i] = j
    return errors, perm


def random_nested_projection(d, widths, rng):
    """A NestedProjection with random row-orthonormal stages of the given
    output widths."""
    from mixcluster.nested_projection import NestedProjection

    stages = []
    c_prev = 1
    for c in widths:
        raw = rng.standard_normal((d * c_prev, max(c, 1)))
        q, _ = np.linalg.qr(raw)
        stages.append(q[:, :c].T)
        c_prev = c
    return NestedProjection(tuple(stages), d)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
