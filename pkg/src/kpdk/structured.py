"""Reprojection loss evaluated through the closed-form affine solve.

The loss for one pair is

    L(z) = sum_i || tgt_i - M(z) [src_i, z_i, 1]^T ||^2

where M(z) is itself the damped least-squares fit of the 3D-to-2D affine
map for those depths.  The depths therefore influence the loss along two
paths: inside the stacked system (hence inside the solved map) and inside
the points being transformed.  ``structured_loss`` returns the value and
its exact gradient with respect to z.

Derivation sketch, with A the stacked (2K, 8) system, b the interleaved
targets, H = A^T A + lam*I, m = H^-1 A^T b and r = b - A m:

    dL = -2 r^T dA (m + w) + 2 (A w)^T dA m + 2 (w^T m) dlam,
    w  = H^-1 A^T r.

Since z_k only enters rows 2k and 2k+1 of A (columns 3 and 6), each
gradient component reduces to a handful of dot products; the trailing term
accounts for the damping scale lam = damping * tr(A^T A) / 8, which itself
moves with z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    AffineMap,
    _solve_normal,
    _vec_to_map,
    as_depths,
    as_points2d,
    build_design_matrix,
    compose3d,
)

__all__ = [
    "StructuredLossResult",
    "eq1_loss",
    "eq1_loss_batch",
    "finite_diff_grad",
    "structured_loss",
    "structured_loss_batch",
]


@dataclass(frozen=True)
class StructuredLossResult:
    """Value and exact depth gradient of the solve-through loss."""

    loss: float
    grad_z: np.ndarray  # (K,)
    fitted_map: AffineMap
    normalized: np.ndarray  # (K, 2)


def structured_loss(z, src, tgt, damping: float = 1e-8) -> StructuredLossResult:
    """Loss at the closed-form affine fit, with its exact depth gradient.

    damping must be > 0 for training (it keeps the solve differentiable
    when the predicted depths are degenerate); damping == 0 performs the
    exact solve and raises on rank deficiency.
    """
    s = as_points2d(src, min_points=4, name="src")
    t = as_points2d(tgt, min_points=4, name="tgt")
    zz = as_depths(z, k=s.shape[0], name="z")
    a, b = build_design_matrix(compose3d(s, zz), t)

    if damping == 0.0:
        u, sv, vt = np.linalg.svd(a, full_matrices=False)
        # Reuse the rank check/error of the shared solver.
        m = _solve_normal(a, b, 0.0)
        r = b - a @ m
        w = vt.T @ ((u.T @ r) / sv)
    else:
        m = _solve_normal(a, b, damping)
        r = b - a @ m
        h = a.T @ a
        lam = damping * np.trace(h) / a.shape[1]
        w = np.linalg.solve(h + lam * np.eye(a.shape[1]), a.T @ r)

    loss = float(r @ r)
    rx, ry = r[0::2], r[1::2]
    aw = a @ w
    c = m + w
    grad = -2.0 * (rx * c[2] + ry * c[5]) + 2.0 * (aw[0::2] * m[2] + aw[1::2] * m[5])
    if damping != 0.0:
        # lam = damping * ||A||_F^2 / 8 and d||A||_F^2/dz_k = 4 z_k.
        grad = grad + damping * float(w @ m) * zz
    fitted = _vec_to_map(m)
    normalized = (b - r).reshape(-1, 2)
    return StructuredLossResult(loss=loss, grad_z=grad, fitted_map=fitted, normalized=normalized)


def finite_diff_grad(z, src, tgt, damping: float = 1e-8, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of structured_loss over each depth."""
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    zz = as_depths(z)
    grad = np.zeros_like(zz)
    for k in range(zz.shape[0]):
        zp = zz.copy()
        zp[k] += step
        zm = zz.copy()
        zm[k] -= step
        fp = structured_loss(zp, src, tgt, damping).loss
        fm = structured_loss(zm, src, tgt, damping).loss
        grad[k] = (fp - fm) / (2.0 * step)
    return grad


def eq1_loss(amap: AffineMap, z, src, tgt) -> tuple[float, np.ndarray, np.ndarray]:
    """Reprojection loss for an explicitly supplied map.

    Used by the model variant whose prediction head emits the 8 map
    parameters alongside the depths.  Returns (loss, dloss/dmap (2, 4),
    dloss/dz (K,)).
    """
    s = as_points2d(src, name="src")
    t = as_points2d(tgt, name="tgt")
    zz = as_depths(z, k=s.shape[0], name="z")
    if t.shape[0] != s.shape[0]:
        raise ValueError(f"point count mismatch: {s.shape[0]} vs {t.shape[0]}")
    p = np.column_stack([s, zz, np.ones(s.shape[0])])  # (K, 4)
    m = amap.matrix
    resid = t - p @ m.T  # (K, 2)
    loss = float((resid**2).sum())
    grad_map = -2.0 * resid.T @ p
    grad_z = -2.0 * resid @ m[:, 2]
    return loss, grad_map, grad_z


# ---------------------------------------------------------------------------
# Batched forms used by the trainer.  Same formulas, stacked over a leading
# batch axis; damping must be strictly positive here.
# ---------------------------------------------------------------------------


def _design_batch(z: np.ndarray, src: np.ndarray) -> np.ndarray:
    b, k = z.shape
    a = np.zeros((b, 2 * k, 8))
    a[:, 0::2, 0:2] = src
    a[:, 0::2, 2] = z
    a[:, 0::2, 6] = 1.0
    a[:, 1::2, 3:5] = src
    a[:, 1::2, 5] = z
    a[:, 1::2, 7] = 1.0
    return a


def structured_loss_batch(
    z: np.ndarray, src: np.ndarray, tgt: np.ndarray, damping: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized structured loss over a batch.

    Args:
        z: (B, K) predicted depths.
        src: (B, K, 2) source keypoints.
        tgt: (B, K, 2) target keypoints.
        damping: relative damping, > 0.

    Returns:
        (loss (B,), grad_z (B, K), maps (B, 2, 4), normalized (B, K, 2)).
    """
    if damping <= 0:
        raise ValueError("batched structured loss requires damping > 0")
    bsz, k = z.shape
    a = _design_batch(z, src)
    bvec = tgt.reshape(bsz, 2 * k)
    at = a.transpose(0, 2, 1)
    h = at @ a
    lam = damping * np.trace(h, axis1=1, axis2=2) / 8.0
    hl = h + lam[:, None, None] * np.eye(8)
    m = np.linalg.solve(hl, at @ bvec[:, :, None])[:, :, 0]  # (B, 8)
    r = bvec - (a @ m[:, :, None])[:, :, 0]
    w = np.linalg.solve(hl, at @ r[:, :, None])[:, :, 0]
    loss = (r**2).sum(axis=1)
    aw = (a @ w[:, :, None])[:, :, 0]
    c = m + w
    grad = -2.0 * (r[:, 0::2] * c[:, 2:3] + r[:, 1::2] * c[:, 5:6]) + 2.0 * (
        aw[:, 0::2] * m[:, 2:3] + aw[:, 1::2] * m[:, 5:6]
    )
    grad = grad + damping * (w * m).sum(axis=1)[:, None] * z
    maps = np.stack(
        [
            np.stack([m[:, 0], m[:, 1], m[:, 2], m[:, 6]], axis=1),
            np.stack([m[:, 3], m[:, 4], m[:, 5], m[:, 7]], axis=1),
        ],
        axis=1,
    )
    normalized = (bvec - r).reshape(bsz, k, 2)
    return loss, grad, maps, normalized


def eq1_loss_batch(
    maps: np.ndarray, z: np.ndarray, src: np.ndarray, tgt: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized explicit-map loss.

    Args:
        maps: (B, 2, 4) affine matrices.
        z: (B, K) depths; src/tgt: (B, K, 2).

    Returns:
        (loss (B,), grad_map (B, 2, 4), grad_z (B, K)).
    """
    bsz, k = z.shape
    p = np.concatenate([src, z[:, :, None], np.ones((bsz, k, 1))], axis=2)  # (B, K, 4)
    pred = p @ maps.transpose(0, 2, 1)  # (B, K, 2)
    resid = tgt - pred
    loss = (resid**2).sum(axis=(1, 2))
    grad_map = -2.0 * resid.transpose(0, 2, 1) @ p
    grad_z = -2.0 * (resid * maps[:, None, :, 2]).sum(axis=2)
    return loss, grad_map, grad_z
