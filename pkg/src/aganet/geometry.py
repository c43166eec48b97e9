"""Pose-level geometry: attention-map ROI extraction, pinhole projection, map losses."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# 4-connectivity
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")


@dataclass(frozen=True)
class Roi:
    x: int
    y: int
    width: int
    height: int

    def to_json(self):
        return {"x": self.x, "y": self.y, "width": self.width, "height": self.height}


def backproject(p2d, depth, intr: CameraIntrinsics):
    """Pixel ``(u, v)`` at ``depth`` metres -> camera-frame ``(x, y, z)``.

    Vectorised: ``p2d`` may be ``(..., 2)`` with ``depth`` broadcasting to ``(...)``.
    """
    p = np.asarray(p2d, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("depth must be positive")
    x = (p[..., 0] - intr.cx) * z / intr.fx
    y = (p[..., 1] - intr.cy) * z / intr.fy
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def project(p3d, intr: CameraIntrinsics):
    """Camera-frame ``(x, y, z)`` -> pixel ``(u, v)``."""
    p = np.asarray(p3d, dtype=np.float64)
    if np.any(p[..., 2] <= 0):
        raise ValueError("points must lie in front of the camera (z > 0)")
    u = intr.fx * p[..., 0] / p[..., 2] + intr.cx
    v = intr.fy * p[..., 1] / p[..., 2] + intr.cy
    return np.stack([u, v], axis=-1)


def label_components(binary):
    """4-connected labels (1..n, raster order of first pixel) and the count."""
    labels, n = ndimage.label(np.asarray(binary, dtype=bool), structure=_CROSS)
    return labels, int(n)


def extract_roi(attention_map, bin_threshold: float = 0.5, scale=None):
    """Bounding rectangle of the largest connected blob above ``bin_threshold``.

    ``scale`` is the ``(width, height)`` of the source image the map was
    computed for; the rectangle origin is floored and its far edge ceiled
    when mapping back. Returns ``None`` if no pixel exceeds the threshold.
    """
    if not 0.0 < bin_threshold < 1.0:
        raise ValueError(f"bin_threshold must lie in (0, 1), got {bin_threshold}")
    m = np.asarray(attention_map, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"attention map must be 2D, got shape {m.shape}")
    labels, n = label_components(m > bin_threshold)
    if n == 0:
        return None
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    best = int(np.argmax(sizes)) + 1  # argmax keeps the lowest label on ties
    rows, cols = np.nonzero(labels == best)
    r0, r1, c0, c1 = int(rows.min()), int(rows.max()) + 1, int(cols.min()), int(cols.max()) + 1
    h, w = m.shape
    src_w, src_h = (w, h) if scale is None else (int(scale[0]), int(scale[1]))
    # integer arithmetic keeps floor/ceil exact
    x0, x1 = (c0 * src_w) // w, -((-c1 * src_w) // w)
    y0, y1 = (r0 * src_h) // h, -((-r1 * src_h) // h)
    return Roi(x0, y0, x1 - x0, y1 - y0)


def intermediate_supervision_loss(predicted_stacks, gt_stacks) -> float:
    """Sum over stacks (and joints, when maps carry a joint axis) of squared L2 map errors."""
    if len(predicted_stacks) != len(gt_stacks):
        raise ValueError(f"{len(predicted_stacks)} predicted stacks vs {len(gt_stacks)} targets")
    total = 0.0
    for i, (p, g) in enumerate(zip(predicted_stacks, gt_stacks)):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ValueError(f"stack {i}: prediction {p.shape} vs target {g.shape}")
        d = p - g
        total += float(np.sum(d * d))
    return total


def attention_loss(predicted_stacks, gt_stacks) -> float:
    """Pre-attention map loss; each stack is one (H, W) map."""
    for p in predicted_stacks:
        if np.ndim(p) != 2:
            raise ValueError("attention maps must be (H, W)")
    return intermediate_supervision_loss(predicted_stacks, gt_stacks)


def pose_loss(predicted_stacks, gt_stacks) -> float:
    """Joint confidence-map loss; each stack is (K, H, W)."""
    for p in predicted_stacks:
        if np.ndim(p) != 3:
            raise ValueError("joint maps must be (K, H, W)")
    return intermediate_supervision_loss(predicted_stacks, gt_stacks)


def read_map_csv(path) -> np.ndarray:
    """Attention map stored as a headerless CSV grid of numbers."""
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    try:
        m = np.array([[float(v) for v in row] for row in rows])
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"{path}: expected a non-empty rectangular grid")
    return m
