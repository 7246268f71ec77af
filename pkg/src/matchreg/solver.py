"""Rigid alignment: weighted Kabsch solve, ICP refinement, registration.

``register`` is the end-to-end entry point: features -> score map ->
Sinkhorn assignment -> hard matches -> weighted Kabsch, with optional ICP
refinement. Degenerate matching never raises out of ``register``; the
result carries the identity pose with ``converged=False`` instead so batch
evaluation can proceed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateMatches
from .features import NetParams, extract_features
from .geometry import Points, Pose, apply_pose, as_points
from .matching import (
    DEFAULT_ALPHA,
    DEFAULT_LAMBDA,
    DEFAULT_MATCH_THRESHOLD,
    DEFAULT_SINKHORN_ITERS,
    Match,
    augment_scores,
    extract_matches,
    score_map,
    sinkhorn_log,
)

ICP_REJECT_FACTOR = 2.5  # drop pairs beyond this multiple of the median distance


def weighted_kabsch(x: Points, y: Points, matches: list[Match]) -> Pose:
    """Weighted least-squares rigid transform from matched point pairs.

    Minimizes sum w |R x + t - y|^2 via the SVD of the weighted
    cross-covariance, with the determinant sign fix so the result is a
    proper rotation even for reflection-prone inputs.
    """
    if len(matches) < 3:
        raise DegenerateMatches(f"need at least 3 matches, got {len(matches)}")
    xp = as_points(x)
    yp = as_points(y)
    si = np.array([m.source for m in matches])
    ti = np.array([m.target for m in matches])
    w = np.array([m.weight for m in matches], dtype=np.float64)
    if np.any(w < 0):
        raise DegenerateMatches("negative match weight")
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateMatches("total match weight is zero")

    xs = xp[si]
    ys = yp[ti]
    x_bar = (w[:, None] * xs).sum(axis=0) / wsum
    y_bar = (w[:, None] * ys).sum(axis=0) / wsum
    xc = xs - x_bar
    yc = ys - y_bar

    sv = np.linalg.svd(np.sqrt(w)[:, None] * xc, compute_uv=False)
    if sv[1] < 1e-9:
        raise DegenerateMatches("matched source points are collinear")

    h = (w[:, None] * xc).T @ yc
    u, _, vt = np.linalg.svd(h)
    v = vt.T
    d = 1.0 if np.linalg.det(v @ u.T) > 0 else -1.0
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    t = y_bar - r @ x_bar
    return Pose(r, t)


@dataclass(frozen=True)
class IcpResult:
    pose: Pose
    iterations: int
    converged: bool
    residuals: tuple[float, ...]  # mean accepted-pair distance per iteration


def icp_refine(
    x: Points,
    y: Points,
    init: Pose,
    max_iters: int = 50,
    tol: float = 1e-6,
) -> IcpResult:
    """Point-to-point ICP with median-based correspondence rejection.

    Each iteration matches transformed source points to their nearest
    target, rejects pairs beyond 2.5x the median distance, and re-solves
    the full pose. Stops when the pose delta (rotation angle in radians
    plus translation norm) drops below ``tol``.
    """
    xp = as_points(x)
    yp = as_points(y)
    tree = cKDTree(yp)
    pose = init
    residuals: list[float] = []
    converged = False
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        tx = apply_pose(pose, xp)
        dists, nn = tree.query(tx)
        keep = dists <= ICP_REJECT_FACTOR * np.median(dists)
        matches = [
            Match(int(i), int(nn[i]), 1.0) for i in np.nonzero(keep)[0]
        ]
        new_pose = weighted_kabsch(xp, yp, matches)
        residuals.append(float(dists[keep].mean()))
        delta_rot = np.arccos(
            np.clip((np.trace(new_pose.rotation @ pose.rotation.T) - 1) / 2, -1, 1)
        )
        delta = float(delta_rot + np.linalg.norm(new_pose.translation - pose.translation))
        pose = new_pose
        if delta < tol:
            converged = True
            break
    return IcpResult(
        pose=pose, iterations=iterations, converged=converged, residuals=tuple(residuals)
    )


@dataclass(frozen=True)
class RegisterOptions:
    lam: float = DEFAULT_LAMBDA
    sinkhorn_iters: int = DEFAULT_SINKHORN_ITERS
    tau: float = DEFAULT_MATCH_THRESHOLD
    alpha: float = DEFAULT_ALPHA
    normalization: str = "match_norm"
    use_icp: bool = False
    icp_max_iters: int = 50
    icp_tol: float = 1e-6


@dataclass(frozen=True)
class RegistrationResult:
    pose: Pose
    matches: tuple[Match, ...]
    predicted_match_count: int
    converged: bool
    icp_iterations_used: int = 0
    true_inlier_count: int | None = None  # filled by evaluation
    icp_residuals: tuple[float, ...] = field(default_factory=tuple)


def register(
    params: NetParams,
    x: Points,
    y: Points,
    opts: RegisterOptions = RegisterOptions(),
) -> RegistrationResult:
    """Full pipeline pose estimate for a source/target cloud pair."""
    fx, fy, _ = extract_features(
        params, x, y, mode="eval", normalization=opts.normalization
    )
    scores = score_map(fx, fy)
    assignment = sinkhorn_log(
        augment_scores(scores, alpha=opts.alpha), lam=opts.lam, iters=opts.sinkhorn_iters
    )
    matches = extract_matches(assignment, tau=opts.tau)
    try:
        pose = weighted_kabsch(x, y, matches)
    except DegenerateMatches:
        return RegistrationResult(
            pose=Pose.identity(),
            matches=tuple(matches),
            predicted_match_count=len(matches),
            converged=False,
        )
    icp_iters = 0
    icp_residuals: tuple[float, ...] = ()
    if opts.use_icp:
        refined = icp_refine(x, y, pose, max_iters=opts.icp_max_iters, tol=opts.icp_tol)
        pose = refined.pose
        icp_iters = refined.iterations
        icp_residuals = refined.residuals
    return RegistrationResult(
        pose=pose,
        matches=tuple(matches),
        predicted_match_count=len(matches),
        converged=True,
        icp_iterations_used=icp_iters,
        icp_residuals=icp_residuals,
    )
