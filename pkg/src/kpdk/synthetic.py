"""Synthetic scene generation and dataset file I/O.

Pairs of views are produced by posing a rigid 3D landmark template twice
(rotation, scale, in-plane translation) and orthographically projecting
each view.  Both views are affine images of the same template, so the
source-to-target relation is an exact 3D-to-2D affine map and a perfect
depth predictor achieves zero reprojection loss.

Coordinates are normalized: scene (x, y) in roughly [-1, 1] maps to
[0, 1] via u = 0.5 + x/2, and depth is scaled by the same 1/2 factor
(camera looks along +z; larger z is farther).
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .geometry import AffineMap, as_depths, as_points2d, as_points3d

__all__ = [
    "DEFAULT_POSE_RANGE",
    "DatasetFormatError",
    "PairSample",
    "PoseRange",
    "SceneTemplate",
    "cloud_template",
    "face68_template",
    "generate_dataset",
    "load_dataset",
    "relative_affine_map",
    "sample_from_meta",
    "save_dataset",
    "template_by_name",
]


class DatasetFormatError(ValueError):
    """Malformed dataset file; message carries the offending line."""


@dataclass(frozen=True)
class SceneTemplate:
    """A rigid 3D landmark layout used to synthesize view pairs."""

    name: str
    points3d: np.ndarray  # (K, 3)

    def __post_init__(self):
        pts = as_points3d(self.points3d, min_points=4, name="points3d")
        centered = pts - pts.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-9) < 3:
            raise ValueError(f"template {self.name!r} is degenerate (centered rank < 3)")
        object.__setattr__(self, "points3d", pts)

    @property
    def k(self) -> int:
        return self.points3d.shape[0]


def _ring(cx, cy, cz, rx, ry, n, z_bulge=0.0, start=0.0):
    t = start + np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    x = cx + rx * np.cos(t)
    y = cy + ry * np.sin(t)
    z = cz + z_bulge * np.cos(t)
    return np.column_stack([x, y, z])


def face68_template() -> SceneTemplate:
    """Canonical 68-landmark face-like 3D layout.

    Follows the usual 68-point ordering (jaw 0-16, brows 17-26, nose
    27-35, eyes 36-47, outer lips 48-59, inner lips 60-67) so eye-ring
    indices carry their standard meaning.  Width ~1, depth span ~0.3x
    width, nose tip nearest the camera (smallest z).
    """
    pts = []
    # Jaw: 17 points sweeping ear to ear, chin low, ears high and farther.
    t = np.linspace(-1.0, 1.0, 17)
    jaw_x = 0.5 * np.sin(t * math.pi / 2)
    jaw_y = -0.38 + 0.50 * t**2
    jaw_z = 0.06 + 0.09 * np.abs(t)
    pts.append(np.column_stack([jaw_x, jaw_y, jaw_z]))
    # Brows: two 5-point arcs.
    for side in (-1, 1):
        bt = np.linspace(-1.0, 1.0, 5)
        bx = side * (0.26 + 0.13 * bt)
        by = 0.26 + 0.05 * (1 - bt**2)
        bz = 0.02 + 0.02 * np.abs(bt)
        pts.append(np.column_stack([bx, by, bz]))
    # Nose: 4 bridge points descending, then 5 across the base.
    bridge_y = np.linspace(0.20, -0.02, 4)
    bridge_z = np.linspace(0.01, -0.09, 4)  # tip toward the camera
    pts.append(np.column_stack([np.zeros(4), bridge_y, bridge_z]))
    base_x = np.linspace(-0.10, 0.10, 5)
    base_z = -0.03 - 0.04 * (1 - (base_x / 0.10) ** 2)
    pts.append(np.column_stack([base_x, np.full(5, -0.08), base_z]))
    # Eyes: two 6-point rings.
    pts.append(_ring(-0.21, 0.14, 0.03, 0.08, 0.04, 6))
    pts.append(_ring(+0.21, 0.14, 0.03, 0.08, 0.04, 6))
    # Mouth: outer 12-ring and inner 8-ring.
    pts.append(_ring(0.0, -0.24, 0.00, 0.16, 0.08, 12, z_bulge=0.02))
    pts.append(_ring(0.0, -0.24, 0.01, 0.10, 0.04, 8, z_bulge=0.01))
    arr = np.vstack(pts)
    assert arr.shape == (68, 3)
    return SceneTemplate(name="face68", points3d=arr)


def cloud_template(k: int = 68, seed: int = 0) -> SceneTemplate:
    """Seeded Gaussian point cloud (math-test stand-in for a face)."""
    if k < 4:
        raise ValueError(f"cloud template needs k >= 4, got {k}")
    rng = np.random.default_rng(seed)
    pts = rng.normal(0.0, 1.0, (k, 3)) * np.array([0.25, 0.25, 0.08])
    return SceneTemplate(name=f"cloud-k{k}-s{seed}", points3d=pts)


_CLOUD_NAME = re.compile(r"^cloud-k(\d+)-s(\d+)$")


def template_by_name(name: str) -> SceneTemplate:
    """Resolve a template from its name ('face68' or 'cloud-k{K}-s{seed}')."""
    if name == "face68":
        return face68_template()
    m = _CLOUD_NAME.match(name)
    if m:
        return cloud_template(k=int(m.group(1)), seed=int(m.group(2)))
    raise ValueError(f"unknown template name: {name!r}")


@dataclass(frozen=True)
class PoseRange:
    """Sampling limits for a random view pose.

    Angles are radians; scale is a multiplicative factor; translation is
    applied in the image plane (a depth translation is unobservable under
    orthographic projection and is therefore not sampled).
    """

    yaw: tuple[float, float] = (-math.pi / 3, math.pi / 3)
    pitch: tuple[float, float] = (-math.pi / 9, math.pi / 9)
    roll: tuple[float, float] = (-math.pi / 18, math.pi / 18)
    scale: tuple[float, float] = (0.8, 1.2)
    translation: tuple[float, float] = (-0.1, 0.1)

    def __post_init__(self):
        for fname in ("yaw", "pitch", "roll", "scale", "translation"):
            lo, hi = getattr(self, fname)
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError(f"{fname} range must be finite")
            if hi < lo:
                raise ValueError(f"{fname} range has negative extent: ({lo}, {hi})")
        if self.scale[0] <= 0:
            raise ValueError(f"scale must stay positive, got lower bound {self.scale[0]}")


DEFAULT_POSE_RANGE = PoseRange()


@dataclass
class PairSample:
    """One source/target keypoint pair, optionally with evaluation depth."""

    src: np.ndarray  # (K, 2)
    tgt: np.ndarray  # (K, 2)
    gt_depth: np.ndarray | None = None  # (K,), source-view depth
    meta: dict | None = None

    def __post_init__(self):
        self.src = as_points2d(self.src, name="src")
        self.tgt = as_points2d(self.tgt, name="tgt")
        if self.src.shape[0] != self.tgt.shape[0]:
            raise ValueError(
                f"src/tgt point count mismatch: {self.src.shape[0]} vs {self.tgt.shape[0]}"
            )
        if self.gt_depth is not None:
            self.gt_depth = as_depths(self.gt_depth, k=self.src.shape[0], name="gt_depth")

    @property
    def k(self) -> int:
        return self.src.shape[0]


def _rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """R = Rz(roll) @ Rx(pitch) @ Ry(yaw)."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return rz @ rx @ ry


def _pose_matrix(pose: dict) -> tuple[np.ndarray, np.ndarray]:
    """Pose dict -> (3x3 linear part, 3-vector translation)."""
    lin = pose["scale"] * _rotation(pose["yaw"], pose["pitch"], pose["roll"])
    t = np.array([pose["tx"], pose["ty"], 0.0])
    return lin, t


# Fixed scene->image normalization: u = x/2 + (0.5, 0.5, 0).
_NORM_SCALE = 0.5
_NORM_OFFSET = np.array([0.5, 0.5, 0.0])


def _view(template: SceneTemplate, pose: dict) -> np.ndarray:
    lin, t = _pose_matrix(pose)
    placed = template.points3d @ lin.T + t
    return placed * _NORM_SCALE + _NORM_OFFSET


def _draw_pose(rng: np.random.Generator, pose_range: PoseRange) -> dict:
    return {
        "yaw": float(rng.uniform(*pose_range.yaw)),
        "pitch": float(rng.uniform(*pose_range.pitch)),
        "roll": float(rng.uniform(*pose_range.roll)),
        "scale": float(rng.uniform(*pose_range.scale)),
        "tx": float(rng.uniform(*pose_range.translation)),
        "ty": float(rng.uniform(*pose_range.translation)),
    }


def generate_dataset(
    template: SceneTemplate,
    count: int,
    pose_range: PoseRange | None = None,
    seed: int = 0,
) -> list[PairSample]:
    """Draw view pairs of the template under random poses.

    Each sample records the orthographic projections of two random poses
    and the source view's depth as gt_depth.  Deterministic in seed.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    pr = pose_range if pose_range is not None else DEFAULT_POSE_RANGE
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        src_pose = _draw_pose(rng, pr)
        tgt_pose = _draw_pose(rng, pr)
        src_view = _view(template, src_pose)
        tgt_view = _view(template, tgt_pose)
        samples.append(
            PairSample(
                src=src_view[:, :2],
                tgt=tgt_view[:, :2],
                gt_depth=src_view[:, 2],
                meta={"template": template.name, "src_pose": src_pose, "tgt_pose": tgt_pose},
            )
        )
    return samples


def sample_from_meta(meta: dict) -> PairSample:
    """Regenerate a sample from its meta record (bit-exact)."""
    template = template_by_name(meta["template"])
    src_view = _view(template, meta["src_pose"])
    tgt_view = _view(template, meta["tgt_pose"])
    return PairSample(
        src=src_view[:, :2],
        tgt=tgt_view[:, :2],
        gt_depth=src_view[:, 2],
        meta={"template": meta["template"], "src_pose": dict(meta["src_pose"]),
              "tgt_pose": dict(meta["tgt_pose"])},
    )


def relative_affine_map(meta: dict) -> AffineMap:
    """The exact source-to-target map implied by a sample's meta record.

    Composes target placement with the inverse of the source placement in
    normalized coordinates; the result sends [src_x, src_y, gt_depth, 1]
    onto the target keypoints with zero residual.
    """
    lin_s, t_s = _pose_matrix(meta["src_pose"])
    lin_t, t_t = _pose_matrix(meta["tgt_pose"])
    # Normalized source observable: u = N (L_s p + t_s), with N the fixed
    # scale/offset; invert to p, push through the target placement.
    lin_sn = _NORM_SCALE * lin_s
    off_sn = _NORM_SCALE * t_s + _NORM_OFFSET
    lin_tn = _NORM_SCALE * lin_t
    off_tn = _NORM_SCALE * t_t + _NORM_OFFSET
    inv = np.linalg.inv(lin_sn)
    lin = lin_tn @ inv
    off = off_tn - lin @ off_sn
    return AffineMap(np.column_stack([lin[:2], off[:2]]))


# ---------------------------------------------------------------------------
# JSON Lines dataset files.  Floats are serialized with repr, which
# round-trips float64 exactly.
# ---------------------------------------------------------------------------


def _atomic_write(path: str, data: str):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_dataset(samples: list[PairSample], path: str):
    """Write samples as JSON Lines; the round trip is lossless."""
    if not samples:
        raise ValueError("refusing to save an empty dataset")
    lines = []
    for s in samples:
        rec = {
            "src": s.src.tolist(),
            "tgt": s.tgt.tolist(),
            "gt_depth": None if s.gt_depth is None else s.gt_depth.tolist(),
            "meta": s.meta,
        }
        lines.append(json.dumps(rec))
    _atomic_write(path, "\n".join(lines) + "\n")


def _parse_points(value, lineno: int, fieldname: str) -> np.ndarray:
    if not isinstance(value, list) or not value:
        raise DatasetFormatError(f"line {lineno}: field {fieldname!r} must be a non-empty list")
    for p in value:
        if not isinstance(p, list) or len(p) != 2:
            raise DatasetFormatError(f"line {lineno}: field {fieldname!r} must hold [x, y] pairs")
    try:
        return as_points2d(value, name=fieldname)
    except ValueError as exc:
        raise DatasetFormatError(f"line {lineno}: {exc}") from exc


def load_dataset(path: str) -> list[PairSample]:
    """Read a JSON Lines dataset, validating every record.

    Raises DatasetFormatError naming the offending line and field on any
    malformed record, including a point count that differs from the first
    record's.
    """
    samples: list[PairSample] = []
    k_ref = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise DatasetFormatError(f"line {lineno}: record must be a JSON object")
            unknown = set(rec) - {"src", "tgt", "gt_depth", "meta"}
            if unknown:
                raise DatasetFormatError(
                    f"line {lineno}: unknown field(s) {sorted(unknown)}"
                )
            for fieldname in ("src", "tgt"):
                if fieldname not in rec:
                    raise DatasetFormatError(f"line {lineno}: missing field {fieldname!r}")
            src = _parse_points(rec["src"], lineno, "src")
            tgt = _parse_points(rec["tgt"], lineno, "tgt")
            gt = rec.get("gt_depth")
            depth = None
            if gt is not None:
                try:
                    depth = as_depths(gt, k=src.shape[0], name="gt_depth")
                except ValueError as exc:
                    raise DatasetFormatError(f"line {lineno}: {exc}") from exc
            meta = rec.get("meta")
            if meta is not None and not isinstance(meta, dict):
                raise DatasetFormatError(f"line {lineno}: field 'meta' must be an object or null")
            try:
                sample = PairSample(src=src, tgt=tgt, gt_depth=depth, meta=meta)
            except ValueError as exc:
                raise DatasetFormatError(f"line {lineno}: {exc}") from exc
            if k_ref is None:
                k_ref = sample.k
            elif sample.k != k_ref:
                raise DatasetFormatError(
                    f"line {lineno}: point count {sample.k} differs from first record ({k_ref})"
                )
            samples.append(sample)
    if not samples:
        raise DatasetFormatError("dataset file holds no records")
    return samples
