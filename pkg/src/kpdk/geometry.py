"""Keypoint and transform types plus closed-form registration solvers.

Conventions used throughout the package:

* A 2D keypoint set is a float64 array of shape (K, 2) holding normalized
  image coordinates, nominally in [0, 1].  Landmark order is semantic and
  must be consistent across sets.
* A depth vector is a float64 array of shape (K,) of dimensionless proxy
  depths (unconstrained sign and scale).  Larger z is farther from the
  camera.
* A 3D keypoint set (K, 3) is a 2D set augmented with a depth vector.
* The 3D-to-2D affine map is the 2x4 matrix
      [[m1, m2, m3, tx],
       [m4, m5, m6, ty]]
  applied to homogeneous points [x, y, z, 1]; the z output row is never
  formed (orthographic drop).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AffineMap",
    "RankDeficiencyError",
    "SimilarityTransform",
    "apply_affine",
    "as_depths",
    "as_points2d",
    "as_points3d",
    "build_design_matrix",
    "compose3d",
    "procrustes",
    "solve_affine",
    "solve_affine_2d",
    "template_baseline_fit",
]

# Names of the 8 solver unknowns, in the stacked-system column order.
_PARAM_NAMES = ("m1", "m2", "m3", "m4", "m5", "m6", "tx", "ty")

# Relative singular-value cutoff below which an undamped solve is rejected.
_RANK_RTOL = 1e-10


class RankDeficiencyError(ValueError):
    """Raised when an undamped least-squares system is (nearly) singular.

    ``directions`` holds the offending unit vectors in parameter space,
    one row per deficient direction.
    """

    def __init__(self, message: str, directions: np.ndarray):
        super().__init__(message)
        self.directions = directions


def as_points2d(points, min_points: int = 1, name: str = "points") -> np.ndarray:
    """Validate and return a (K, 2) float64 keypoint array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name}: expected shape (K, 2), got {arr.shape}")
    if arr.shape[0] < min_points:
        raise ValueError(f"{name}: need at least {min_points} points, got {arr.shape[0]}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def as_points3d(points, min_points: int = 1, name: str = "points") -> np.ndarray:
    """Validate and return a (K, 3) float64 keypoint array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name}: expected shape (K, 3), got {arr.shape}")
    if arr.shape[0] < min_points:
        raise ValueError(f"{name}: need at least {min_points} points, got {arr.shape[0]}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def as_depths(z, k: int | None = None, name: str = "depths") -> np.ndarray:
    """Validate and return a (K,) float64 depth vector."""
    arr = np.asarray(z, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name}: expected shape (K,), got {arr.shape}")
    if k is not None and arr.shape[0] != k:
        raise ValueError(f"{name}: expected length {k}, got {arr.shape[0]}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def compose3d(points2d, depths) -> np.ndarray:
    """Stack a 2D keypoint set and a depth vector into a (K, 3) set."""
    pts = as_points2d(points2d)
    z = as_depths(depths, k=pts.shape[0])
    return np.column_stack([pts, z])


@dataclass(frozen=True)
class AffineMap:
    """The 2x4 matrix mapping homogeneous 3D points to 2D.

    ``matrix`` rows are [m1, m2, m3, tx] and [m4, m5, m6, ty].  The
    flattened parameter order (``params``) is row-major, matching the
    layout a prediction head emits.
    """

    matrix: np.ndarray = field()

    def __post_init__(self):
        arr = np.asarray(self.matrix, dtype=np.float64)
        if arr.shape != (2, 4):
            raise ValueError(f"AffineMap matrix must be (2, 4), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("AffineMap matrix contains non-finite values")
        object.__setattr__(self, "matrix", arr)

    @classmethod
    def identity(cls) -> "AffineMap":
        return cls(np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]))

    @classmethod
    def from_params(cls, params) -> "AffineMap":
        """Build from the 8-vector (m1, m2, m3, tx, m4, m5, m6, ty)."""
        p = np.asarray(params, dtype=np.float64)
        if p.shape != (8,):
            raise ValueError(f"expected 8 parameters, got shape {p.shape}")
        return cls(p.reshape(2, 4))

    @property
    def params(self) -> np.ndarray:
        """Row-major 8-vector (m1, m2, m3, tx, m4, m5, m6, ty)."""
        return self.matrix.ravel().copy()


def _vec_to_map(m: np.ndarray) -> AffineMap:
    """Solver vector (m1..m6, tx, ty) -> AffineMap."""
    return AffineMap(np.array([[m[0], m[1], m[2], m[6]], [m[3], m[4], m[5], m[7]]]))


def _map_to_vec(amap: AffineMap) -> np.ndarray:
    """AffineMap -> solver vector (m1..m6, tx, ty)."""
    m = amap.matrix
    return np.array([m[0, 0], m[0, 1], m[0, 2], m[1, 0], m[1, 1], m[1, 2], m[0, 3], m[1, 3]])


def build_design_matrix(src3d, tgt) -> tuple[np.ndarray, np.ndarray]:
    """Stack the overdetermined linear system whose solution is the affine map.

    Row 2i of A is [x_i, y_i, z_i, 0, 0, 0, 1, 0] and row 2i+1 is
    [0, 0, 0, x_i, y_i, z_i, 0, 1]; b interleaves the target coordinates
    (x_1, y_1, x_2, y_2, ...).

    Returns:
        (A, b) with A of shape (2K, 8) and b of shape (2K,).
    """
    src = as_points3d(src3d, min_points=4, name="src3d")
    dst = as_points2d(tgt, min_points=4, name="tgt")
    if src.shape[0] != dst.shape[0]:
        raise ValueError(f"point count mismatch: {src.shape[0]} vs {dst.shape[0]}")
    k = src.shape[0]
    a = np.zeros((2 * k, 8))
    a[0::2, 0:3] = src
    a[0::2, 6] = 1.0
    a[1::2, 3:6] = src
    a[1::2, 7] = 1.0
    b = dst.reshape(-1)
    return a, b.copy()


def _solve_normal(a: np.ndarray, b: np.ndarray, damping: float) -> np.ndarray:
    """Least-squares solve of A m = b in the solver parameter order.

    damping > 0 solves the damped normal equations
    (A^T A + damping * tr(A^T A)/n * I) m = A^T b, which is smooth in the
    inputs even when A^T A is singular.  damping == 0 solves the exact
    least-squares problem via SVD and raises RankDeficiencyError when the
    system does not determine all parameters.
    """
    if damping < 0:
        raise ValueError(f"damping must be >= 0, got {damping}")
    n = a.shape[1]
    if damping == 0.0:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        if s[0] == 0.0 or s[-1] <= _RANK_RTOL * s[0]:
            bad = s <= _RANK_RTOL * (s[0] if s[0] > 0 else 1.0)
            directions = vt[bad]
            names = []
            for row in directions:
                parts = [
                    f"{_PARAM_NAMES[j]}:{row[j]:+.3f}"
                    for j in np.argsort(-np.abs(row))[:3]
                    if abs(row[j]) > 1e-3
                ]
                names.append("[" + ", ".join(parts) + "]")
            raise RankDeficiencyError(
                "design matrix is rank deficient with damping=0; "
                f"undetermined parameter directions: {'; '.join(names)}",
                directions,
            )
        return vt.T @ ((u.T @ b) / s)
    h = a.T @ a
    lam = damping * np.trace(h) / n
    return np.linalg.solve(h + lam * np.eye(n), a.T @ b)


def solve_affine(src3d, tgt, damping: float = 0.0) -> AffineMap:
    """Closed-form 3D-to-2D affine fit minimizing the stacked residual.

    With damping == 0 this is the exact least-squares minimizer of
    ||A m - b||^2; with damping > 0 the normal equations are ridge-damped
    by damping * tr(A^T A) / 8 so the solve stays well-posed (and
    differentiable) when the depth column is degenerate.
    """
    a, b = build_design_matrix(src3d, tgt)
    return _vec_to_map(_solve_normal(a, b, damping))


def apply_affine(amap: AffineMap, src3d) -> np.ndarray:
    """Transform depth-augmented points and drop z (orthographic output).

    Returns the (K, 2) array of transformed 2D positions.
    """
    src = as_points3d(src3d, name="src3d")
    m = amap.matrix
    return src @ m[:, :3].T + m[:, 3]


def solve_affine_2d(src, tgt) -> AffineMap:
    """Plain 2D affine registration (depth coefficients pinned to zero).

    Least-squares fit of tgt_i ~ B [x_i, y_i, 1] over the 6 parameters of
    a 2D affine; returned as an AffineMap with m3 = m6 = 0.
    """
    s = as_points2d(src, min_points=3, name="src")
    d = as_points2d(tgt, min_points=3, name="tgt")
    if s.shape[0] != d.shape[0]:
        raise ValueError(f"point count mismatch: {s.shape[0]} vs {d.shape[0]}")
    k = s.shape[0]
    a = np.zeros((2 * k, 6))
    a[0::2, 0:2] = s
    a[0::2, 4] = 1.0
    a[1::2, 2:4] = s
    a[1::2, 5] = 1.0
    b = d.reshape(-1)
    u, sv, vt = np.linalg.svd(a, full_matrices=False)
    if sv[0] == 0.0 or sv[-1] <= _RANK_RTOL * sv[0]:
        bad = sv <= _RANK_RTOL * (sv[0] if sv[0] > 0 else 1.0)
        raise RankDeficiencyError(
            "2D affine fit is rank deficient (collinear or coincident source points)",
            vt[bad],
        )
    p = vt.T @ ((u.T @ b) / sv)
    return AffineMap(np.array([[p[0], p[1], 0.0, p[4]], [p[2], p[3], 0.0, p[5]]]))


@dataclass(frozen=True)
class SimilarityTransform:
    """A scale + proper rotation + translation acting on 3D points."""

    scale: float
    rotation: np.ndarray  # (3, 3), R^T R = I, det R = +1
    translation: np.ndarray  # (3,)

    def apply(self, points3d) -> np.ndarray:
        pts = as_points3d(points3d)
        return self.scale * (pts @ self.rotation.T) + self.translation


def procrustes(template3d, target3d) -> SimilarityTransform:
    """Least-squares similarity alignment of one 3D point set onto another.

    Returns the (scale, rotation, translation) minimizing
    sum_i || s R p_i + t - q_i ||^2 with R constrained to a proper rotation
    (the reflection case is excluded by flipping the sign of the smallest
    singular value).  Kabsch-Umeyama.
    """
    p = as_points3d(template3d, min_points=3, name="template3d")
    q = as_points3d(target3d, min_points=3, name="target3d")
    if p.shape[0] != q.shape[0]:
        raise ValueError(f"point count mismatch: {p.shape[0]} vs {q.shape[0]}")
    n = p.shape[0]
    mu_p = p.mean(axis=0)
    mu_q = q.mean(axis=0)
    pc = p - mu_p
    qc = q - mu_q
    var_p = (pc**2).sum() / n
    if var_p == 0.0:
        raise ValueError("degenerate template: all points coincide")
    cov = qc.T @ pc / n
    u, s, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    if sign == 0:
        sign = 1.0
    d = np.ones(3)
    d[-1] = sign
    rot = u @ np.diag(d) @ vt
    scale = float((s * d).sum() / var_p)
    if scale <= 0:
        # Anti-correlated clouds can drive the LSQ scale negative; clamp to
        # keep the similarity-transform invariant (scale > 0).
        scale = np.finfo(float).tiny
    trans = mu_q - scale * rot @ mu_p
    return SimilarityTransform(scale=scale, rotation=rot, translation=trans)


def _align_template_to_view(template3d: np.ndarray, view2d: np.ndarray) -> np.ndarray:
    """Pose a 3D template onto a 2D view, ignoring the view's unknown depth.

    Fits the unconstrained 2x3 linear map + translation by least squares,
    projects it to the nearest scaled pair of orthonormal rows (SVD), and
    completes the rotation with their cross product.  Returns the posed
    template points (K, 3); their z is the template's own depth under the
    recovered pose.
    """
    p = as_points3d(template3d, min_points=3, name="template3d")
    q = as_points2d(view2d, min_points=3, name="view2d")
    if p.shape[0] != q.shape[0]:
        raise ValueError(f"point count mismatch: {p.shape[0]} vs {q.shape[0]}")
    mu_p = p.mean(axis=0)
    mu_q = q.mean(axis=0)
    pc = p - mu_p
    qc = q - mu_q
    # 2x3 least squares: qc ~ pc @ B^T
    bt, *_ = np.linalg.lstsq(pc, qc, rcond=None)
    b = bt.T
    u, s, vt = np.linalg.svd(b, full_matrices=False)
    scale = float(s.mean())
    if scale <= 0:
        raise ValueError("degenerate view: projected template collapses to a point")
    rows = u @ vt  # nearest 2x3 with orthonormal rows
    r3 = np.cross(rows[0], rows[1])
    rot = np.vstack([rows, r3])
    posed = scale * (p - mu_p) @ rot.T
    posed[:, :2] += mu_q
    return posed


def template_baseline_fit(template3d, src, tgt, damping: float = 0.0) -> tuple[np.ndarray, float]:
    """Registration baseline that borrows depth from a rigid 3D template.

    The template is posed onto the source view (depth dimension carries no
    weight in the alignment since the source has no depth), giving a 3D
    stand-in for the source face; a closed-form affine fit then maps that
    stand-in to the target.  Returns the transformed points and the summed
    squared reprojection error.
    """
    t = as_points3d(template3d, min_points=4, name="template3d")
    s = as_points2d(src, min_points=4, name="src")
    d = as_points2d(tgt, min_points=4, name="tgt")
    if not (t.shape[0] == s.shape[0] == d.shape[0]):
        raise ValueError("template, src and tgt must share the same point count")
    posed = _align_template_to_view(t, s)
    amap = solve_affine(posed, d, damping=damping)
    normalized = apply_affine(amap, posed)
    loss = float(((d - normalized) ** 2).sum())
    return normalized, loss
