"""Point-cloud data model, synthetic shapes, stochastic augmentations, file I/O.

All randomized operations are pure functions of (input, config, seed): they
build their own ``numpy.random.Generator`` from the seed and never touch
global RNG state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    ConfigError,
    CropError,
    DegenerateCloudError,
    EmptyInputError,
    NumericError,
    ParseError,
    ShapeError,
)

SHAPE_KINDS = ("sphere", "box", "plane", "cylinder", "two_blobs")

TWO_BLOBS_SIGMA = 0.1
TWO_BLOBS_CENTERS = np.array([[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]])


@dataclass
class PointCloud:
    """N points in 3D model units, with optional class and per-point labels."""

    points: np.ndarray
    label: Optional[int] = None
    part_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ShapeError(f"points must be (N,3), got {self.points.shape}")
        if self.points.shape[0] < 1:
            raise EmptyInputError("point cloud must contain at least one point")
        if not np.isfinite(self.points).all():
            raise NumericError("point cloud contains non-finite coordinates")
        if self.part_labels is not None:
            self.part_labels = np.asarray(self.part_labels, dtype=np.int64)
            if self.part_labels.shape != (self.points.shape[0],):
                raise ShapeError(
                    f"part_labels must have shape ({self.points.shape[0]},), "
                    f"got {self.part_labels.shape}"
                )

    @property
    def n(self):
        return self.points.shape[0]


@dataclass
class AugmentConfig:
    """Knobs for the crop / rotate / jitter view pipeline."""

    keep_fraction: float = 0.85
    out_points: Optional[int] = None  # None: keep the source cloud's size
    max_angle_deg: float = 5.0
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.025
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError(f"keep_fraction must be in (0,1], got {self.keep_fraction}")
        if self.jitter_clip < 0.0:
            raise ConfigError(f"jitter_clip must be >= 0, got {self.jitter_clip}")
        if self.max_angle_deg < 0.0:
            raise ConfigError(f"max_angle_deg must be >= 0, got {self.max_angle_deg}")
        if self.out_points is not None and self.out_points < 1:
            raise ConfigError(f"out_points must be >= 1, got {self.out_points}")


# ---------------------------------------------------------------------------
# synthetic shapes


def _sample_sphere(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_box(rng, n):
    # 6 faces of the cube [-1,1]^3, equal areas
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1.0, 1.0, (n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    for a in range(3):
        m = axis == a
        others = [b for b in range(3) if b != a]
        pts[m, a] = sign[m]
        pts[np.ix_(m, others)] = uv[m]
    return pts


def _sample_plane(rng, n):
    pts = np.zeros((n, 3))
    pts[:, :2] = rng.uniform(-1.0, 1.0, (n, 2))
    return pts


def _sample_cylinder(rng, n, radius=0.5, half_height=1.0):
    lateral_area = 2.0 * math.pi * radius * (2.0 * half_height)
    cap_area = math.pi * radius * radius
    probs = np.array([lateral_area, cap_area, cap_area])
    probs = probs / probs.sum()
    part = rng.choice(3, size=n, p=probs)
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    pts = np.empty((n, 3))
    lat = part == 0
    pts[lat, 0] = radius * np.cos(theta[lat])
    pts[lat, 1] = radius * np.sin(theta[lat])
    pts[lat, 2] = rng.uniform(-half_height, half_height, lat.sum())
    for cap, z in ((1, half_height), (2, -half_height)):
        m = part == cap
        r = radius * np.sqrt(rng.uniform(0.0, 1.0, m.sum()))
        pts[m, 0] = r * np.cos(theta[m])
        pts[m, 1] = r * np.sin(theta[m])
        pts[m, 2] = z
    return pts


def generate_shape(kind, n, seed):
    """Sample n points on a synthetic surface (deterministic per seed).

    ``two_blobs`` draws from two Gaussians with centers 10 sigma apart and
    sets ``part_labels`` to the blob id, split as evenly as n allows.
    """
    if kind not in SHAPE_KINDS:
        raise ConfigError(f"unknown shape kind {kind!r}; choose from {SHAPE_KINDS}")
    if n < 8:
        raise ConfigError(f"need n >= 8 points, got {n}")
    rng = np.random.default_rng(seed)
    if kind == "two_blobs":
        n0 = n // 2
        counts = (n0, n - n0)
        pts = np.concatenate(
            [
                TWO_BLOBS_CENTERS[b] + TWO_BLOBS_SIGMA * rng.standard_normal((c, 3))
                for b, c in enumerate(counts)
            ]
        )
        labels = np.concatenate([np.full(c, b, dtype=np.int64) for b, c in enumerate(counts)])
        return PointCloud(pts, part_labels=labels)
    sampler = {
        "sphere": _sample_sphere,
        "box": _sample_box,
        "plane": _sample_plane,
        "cylinder": _sample_cylinder,
    }[kind]
    return PointCloud(sampler(rng, n))


def normalize_cloud(pc):
    """Center at the origin and scale so the farthest point has norm 1."""
    centered = pc.points - pc.points.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius <= 0.0:
        raise DegenerateCloudError("all points identical; cannot normalize")
    return PointCloud(centered / radius, label=pc.label, part_labels=pc.part_labels)


# ---------------------------------------------------------------------------
# augmentations


def _unit_direction(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def random_crop(pc, cfg, seed):
    """Keep the ceil(keep_fraction*N) points with smallest projection onto a
    random direction, then resample with replacement to a fixed size."""
    rng = np.random.default_rng(seed)
    n = pc.n
    keep = math.ceil(cfg.keep_fraction * n)
    if keep < 4:
        raise CropError(f"crop would keep only {keep} of {n} points")
    s = _unit_direction(rng)
    proj = pc.points @ s
    survivors = np.argsort(proj, kind="stable")[:keep]
    out_n = cfg.out_points if cfg.out_points is not None else n
    picks = survivors[rng.integers(0, keep, out_n)]
    parts = pc.part_labels[picks] if pc.part_labels is not None else None
    return PointCloud(pc.points[picks], label=pc.label, part_labels=parts)


def rotation_matrix(angles_rad):
    """R = Rz @ Ry @ Rx for per-axis angles (x, y, z order of arguments)."""
    ax, ay, az = angles_rad
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def random_rotation(pc, cfg, seed):
    """Small random rotation about all three axes, each angle uniform within
    +/- max_angle_deg."""
    rng = np.random.default_rng(seed)
    limit = math.radians(cfg.max_angle_deg)
    angles = rng.uniform(-limit, limit, 3)
    r = rotation_matrix(angles)
    return PointCloud(pc.points @ r.T, label=pc.label, part_labels=pc.part_labels)


def random_jitter(pc, cfg, seed):
    """Per-coordinate Gaussian noise (std jitter_sigma) clipped per axis."""
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, cfg.jitter_sigma, pc.points.shape) if cfg.jitter_sigma > 0 else 0.0
    noise = np.clip(noise, -cfg.jitter_clip, cfg.jitter_clip)
    return PointCloud(pc.points + noise, label=pc.label, part_labels=pc.part_labels)


def _augment_once(pc, cfg, seeds):
    out = random_crop(pc, cfg, seeds[0])
    out = random_rotation(out, cfg, seeds[1])
    return random_jitter(out, cfg, seeds[2])


def make_views(pc, cfg, seed):
    """Two independent crop -> rotate -> jitter draws of the same cloud."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63 - 1, 6)
    return _augment_once(pc, cfg, seeds[:3]), _augment_once(pc, cfg, seeds[3:])


# ---------------------------------------------------------------------------
# file I/O


def save_xyz(pc, path):
    """Write one 'x y z [part_label]' line per point, 17 significant digits."""
    with open(path, "w") as fh:
        for i in range(pc.n):
            x, y, z = pc.points[i]
            line = f"{x:.17g} {y:.17g} {z:.17g}"
            if pc.part_labels is not None:
                line += f" {int(pc.part_labels[i])}"
            fh.write(line + "\n")


def load_xyz(path):
    """Read a whitespace-separated XYZ file; a 4th column is a part label."""
    pts, parts = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            tokens = raw.split()
            if not tokens:
                continue
            if len(tokens) not in (3, 4):
                raise ParseError(
                    f"expected 3 or 4 columns, got {len(tokens)}", line=lineno
                )
            try:
                pts.append([float(t) for t in tokens[:3]])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if len(tokens) == 4:
                try:
                    parts.append(int(tokens[3]))
                except ValueError as exc:
                    raise ParseError(str(exc), line=lineno) from None
    if not pts:
        raise EmptyInputError(f"no points found in {path}")
    if parts and len(parts) != len(pts):
        raise ParseError("part labels present on some lines but not all")
    return PointCloud(np.array(pts), part_labels=np.array(parts) if parts else None)


def _read_off_tokens(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            stripped = raw.split("#", 1)[0].strip()
            if stripped:
                yield lineno, stripped.split()


def load_off(path, n, seed):
    """Area-weighted uniform sampling of n points from an ASCII OFF mesh.

    Faces with more than 3 vertices are fan-triangulated.
    """
    tokens = _read_off_tokens(path)
    try:
        lineno, first = next(tokens)
    except StopIteration:
        raise EmptyInputError(f"empty OFF file {path}") from None
    if first[0] != "OFF":
        raise ParseError(f"expected OFF header, got {first[0]!r}", line=lineno)
    if len(first) > 1:
        counts = first[1:]
    else:
        lineno, counts = next(tokens, (lineno, None))
        if counts is None:
            raise ParseError("missing vertex/face counts", line=lineno)
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise ParseError("malformed vertex/face counts", line=lineno) from None

    verts = np.empty((nv, 3))
    for i in range(nv):
        lineno, row = next(tokens, (lineno, None))
        if row is None or len(row) < 3:
            raise ParseError(f"vertex {i} missing or short", line=lineno)
        try:
            verts[i] = [float(v) for v in row[:3]]
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None

    tris = []
    for i in range(nf):
        lineno, row = next(tokens, (lineno, None))
        if row is None:
            raise ParseError(f"face {i} missing", line=lineno)
        try:
            k = int(row[0])
            idx = [int(v) for v in row[1 : 1 + k]]
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if len(idx) != k or k < 3 or max(idx) >= nv or min(idx) < 0:
            raise ParseError(f"malformed face {i}", line=lineno)
        for j in range(1, k - 1):
            tris.append((idx[0], idx[j], idx[j + 1]))

    if not tris:
        raise ParseError("mesh has no triangles")
    tris = np.asarray(tris)
    a = verts[tris[:, 0]]
    ab = verts[tris[:, 1]] - a
    ac = verts[tris[:, 2]] - a
    areas = 0.5 * np.linalg.norm(np.cross(ab, ac), axis=1)
    total = areas.sum()
    if total <= 0.0:
        raise ParseError("mesh has zero total surface area")

    rng = np.random.default_rng(seed)
    faces = rng.choice(len(tris), size=n, p=areas / total)
    u = rng.uniform(0.0, 1.0, n)
    v = rng.uniform(0.0, 1.0, n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    pts = a[faces] + u[:, None] * ab[faces] + v[:, None] * ac[faces]
    return PointCloud(pts)
