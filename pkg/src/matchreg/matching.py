"""Score maps, outlier-bin augmentation, Sinkhorn assignment, match extraction.

The augmented (M+1) x (N+1) score matrix carries a constant ``alpha`` in its
outlier row/column. The assignment solves entropy-regularized transport with
reward kernel exp(score / lambda) under marginals a = [1,...,1, N] and
b = [1,...,1, M]: every interior point carries unit mass and each bin absorbs
the other side's total. Iterations run in the log domain (log-sum-exp), each
one a column scaling followed by a row scaling, so returned row sums are
exact. The unrolled iterations are differentiable; ``sinkhorn_backward``
reverse-propagates through the recorded potentials.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, TypeAlias

import numpy as np
from numpy.typing import NDArray

from .errors import ChannelMismatch, NonPositiveLambda

ScoreMap: TypeAlias = NDArray[np.float64]  # (M, N)

DEFAULT_ALPHA = 1.0
DEFAULT_LAMBDA = 0.5
DEFAULT_SINKHORN_ITERS = 50
DEFAULT_MATCH_THRESHOLD = 0.5


class Match(NamedTuple):
    source: int
    target: int
    weight: float


def score_map(f_x, f_y) -> ScoreMap:
    """Pairwise inner products of descriptor columns: S[i, j] = <f_x_i, f_y_j>."""
    fx = np.asarray(f_x, dtype=np.float64)
    fy = np.asarray(f_y, dtype=np.float64)
    if fx.shape[0] != fy.shape[0]:
        raise ChannelMismatch(f"descriptor widths differ: {fx.shape[0]} vs {fy.shape[0]}")
    return fx.T @ fy


def augment_scores(scores: ScoreMap, alpha: float = DEFAULT_ALPHA) -> NDArray[np.float64]:
    """Append an outlier row and column holding the constant ``alpha``."""
    s = np.asarray(scores, dtype=np.float64)
    m, n = s.shape
    out = np.full((m + 1, n + 1), float(alpha))
    out[:m, :n] = s
    return out


def _marginals(m: int, n: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    a = np.ones(m + 1)
    a[m] = n
    b = np.ones(n + 1)
    b[n] = m
    return a, b


def _logsumexp(z: NDArray[np.float64], axis: int) -> NDArray[np.float64]:
    zmax = z.max(axis=axis, keepdims=True)
    return np.squeeze(zmax, axis=axis) + np.log(np.exp(z - zmax).sum(axis=axis))


@dataclass
class SinkhornCache:
    log_kernel: NDArray[np.float64]       # augmented scores / lambda
    lam: float
    log_a: NDArray[np.float64]
    log_b: NDArray[np.float64]
    f_hist: list[NDArray[np.float64]]     # row potentials, f_hist[0] = 0
    g_hist: list[NDArray[np.float64]]     # column potentials per iteration
    assignment: NDArray[np.float64]


def sinkhorn_log(
    aug_scores: NDArray[np.float64],
    lam: float = DEFAULT_LAMBDA,
    iters: int = DEFAULT_SINKHORN_ITERS,
    return_cache: bool = False,
):
    """Entropy-regularized soft assignment of the augmented score matrix.

    Higher score means more transported mass. Finishing on the row scaling
    makes the row marginals exact; column marginals converge with iterations.
    """
    if lam <= 0:
        raise NonPositiveLambda(f"lambda must be positive, got {lam}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    s = np.asarray(aug_scores, dtype=np.float64)
    m, n = s.shape[0] - 1, s.shape[1] - 1
    if m < 1 or n < 1:
        raise ValueError("augmented scores must be at least 2 x 2")
    a, b = _marginals(m, n)
    log_a, log_b = np.log(a), np.log(b)
    z = s / lam

    f = np.zeros(m + 1)
    f_hist = [f]
    g_hist = []
    for _ in range(iters):
        g = log_b - _logsumexp(z + f[:, None], axis=0)
        f = log_a - _logsumexp(z + g[None, :], axis=1)
        g_hist.append(g)
        f_hist.append(f)
    p = np.exp(z + f[:, None] + g[None, :])
    if not return_cache:
        return p
    return p, SinkhornCache(
        log_kernel=z, lam=lam, log_a=log_a, log_b=log_b,
        f_hist=f_hist, g_hist=g_hist, assignment=p,
    )


def sinkhorn_backward(cache: SinkhornCache, d_p: NDArray[np.float64]) -> NDArray[np.float64]:
    """Gradient of a scalar loss wrt the augmented scores, given dL/dP.

    Walks the recorded potentials backwards; each log-sum-exp step
    contributes its softmax as a local Jacobian.
    """
    z = cache.log_kernel
    w = np.asarray(d_p) * cache.assignment
    dz = w.copy()
    df = w.sum(axis=1)
    dg = w.sum(axis=0)

    for t in range(len(cache.g_hist) - 1, -1, -1):
        g_t = cache.g_hist[t]
        f_prev = cache.f_hist[t]
        # f_t = log_a - lse_j(z + g_t): row softmax
        row = z + g_t[None, :]
        row -= row.max(axis=1, keepdims=True)
        row_soft = np.exp(row)
        row_soft /= row_soft.sum(axis=1, keepdims=True)
        contrib = df[:, None] * row_soft
        dz -= contrib
        dg = dg - contrib.sum(axis=0)
        # g_t = log_b - lse_i(z + f_{t-1}): column softmax
        col = z + f_prev[:, None]
        col -= col.max(axis=0, keepdims=True)
        col_soft = np.exp(col)
        col_soft /= col_soft.sum(axis=0, keepdims=True)
        contrib = col_soft * dg[None, :]
        dz -= contrib
        df = -contrib.sum(axis=1)
        dg = np.zeros_like(dg)

    return dz / cache.lam


def extract_matches(
    assignment: NDArray[np.float64],
    tau: float = DEFAULT_MATCH_THRESHOLD,
) -> list[Match]:
    """Hard matches from the soft assignment.

    Per interior source row, take the best interior column; keep it only if
    its mass reaches ``tau`` and beats the row's outlier bin. Ties resolve
    to the lowest column index.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    p = np.asarray(assignment, dtype=np.float64)
    m, n = p.shape[0] - 1, p.shape[1] - 1
    interior = p[:m, :n]
    best_j = interior.argmax(axis=1)
    weights = interior[np.arange(m), best_j]
    outlier = p[:m, n]
    keep = (weights >= tau) & (weights > outlier)
    return [
        Match(int(i), int(best_j[i]), float(weights[i]))
        for i in np.nonzero(keep)[0]
    ]
