"""Planar geometry: frame transforms, the kinematic update, TTC, boxes, circles.

Differentiable helpers take and return :class:`~traffic_lab.autodiff.Tensor`
objects whose last axis holds ``(x, y)`` pairs; headings are unit vectors, not
angles.  The box and polygon predicates work on plain numpy arrays because
they only feed metrics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

TTC_MAX = 10.0
ACTION_EPS = 1e-6


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    hx: float = 1.0
    hy: float = 0.0

    def __post_init__(self):
        n = np.hypot(self.hx, self.hy)
        if abs(n - 1.0) > 1e-9:
            raise ContractError(f"heading must be a unit vector, norm={n}")

    @classmethod
    def from_angle(cls, x, y, angle):
        return cls(float(x), float(y), float(np.cos(angle)), float(np.sin(angle)))

    @property
    def position(self):
        return np.array([self.x, self.y])

    @property
    def heading(self):
        return np.array([self.hx, self.hy])


@dataclass(frozen=True)
class OrientedBox:
    center: Pose2D
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ContractError("box dimensions must be positive")


def _xy(t):
    return t[..., 0], t[..., 1]


def to_local(points, origin, heading) -> Tensor:
    """Express global points in the frame at ``origin`` whose x-axis is ``heading``."""
    d = ad.sub(points, origin)
    dx, dy = _xy(d)
    hx, hy = _xy(ad._as_tensor(heading))
    lx = dx * hx + dy * hy
    ly = dy * hx - dx * hy
    return ad.stack([lx, ly], axis=-1)


def to_global(local, origin, heading) -> Tensor:
    lx, ly = _xy(ad._as_tensor(local))
    hx, hy = _xy(ad._as_tensor(heading))
    gx = lx * hx - ly * hy
    gy = lx * hy + ly * hx
    return ad.add(origin, ad.stack([gx, gy], axis=-1))


def rotate_to_local(vectors, heading) -> Tensor:
    """Rotate free vectors (no translation) into the heading frame."""
    vx, vy = _xy(ad._as_tensor(vectors))
    hx, hy = _xy(ad._as_tensor(heading))
    return ad.stack([vx * hx + vy * hy, vy * hx - vx * hy], axis=-1)


def safe_norm(v, eps=1e-12) -> Tensor:
    """Euclidean norm over the last axis with a finite gradient at zero."""
    sq = (ad._as_tensor(v) ** 2).sum(axis=-1)
    return ad.sqrt(sq + eps)


def apply_action(position, heading, action):
    """Move by a local-frame position delta; heading follows the displacement.

    Returns ``(new_position, new_heading)``.  Agents whose action norm is at
    most 1e-6 m keep their heading.
    """
    position, heading, action = (ad._as_tensor(a) for a in (position, heading, action))
    disp = to_global(action, np.zeros(2), heading)
    new_pos = position + disp
    moving = np.linalg.norm(action.data, axis=-1) > ACTION_EPS
    sq = (disp ** 2).sum(axis=-1, keepdims=True)
    norm = ad.sqrt(ad.maximum(sq, 1e-24))
    new_heading = ad.where(moving[..., None], disp / norm, heading)
    return new_pos, new_heading


def time_to_collision(pos_src, vel_src, pos_tgt, vel_tgt) -> Tensor:
    """Center range divided by closing speed, clipped to ``[0, TTC_MAX]``.

    Non-closing pairs get ``TTC_MAX``.  Algebraically ``range / closing`` equals
    ``|dp|^2 / (-dp . dv)``, which avoids a square root.
    """
    dp = ad.sub(pos_src, pos_tgt)
    dv = ad.sub(vel_src, vel_tgt)
    approach = -(dp * dv).sum(axis=-1)
    r2 = (dp ** 2).sum(axis=-1)
    ttc = r2 / ad.maximum(approach, 1e-9)
    return ad.clamp(ttc, 0.0, TTC_MAX)


# -- boxes -------------------------------------------------------------------
def box_corners(center, heading, length, width) -> np.ndarray:
    """Corners of oriented boxes; broadcasting over leading axes, output (..., 4, 2)."""
    center = np.asarray(center, dtype=float)
    h = np.asarray(heading, dtype=float)
    perp = np.stack([-h[..., 1], h[..., 0]], axis=-1)
    hl = np.asarray(length, dtype=float)[..., None] / 2.0
    hw = np.asarray(width, dtype=float)[..., None] / 2.0
    fwd = h * hl
    side = perp * hw
    return np.stack([center + fwd + side, center + fwd - side,
                     center - fwd - side, center - fwd + side], axis=-2)


def obb_intersect_many(ca, ha, la, wa, cb, hb, lb, wb) -> np.ndarray:
    """Vectorised separating-axis test; touching boxes count as intersecting."""
    A = box_corners(ca, ha, la, wa)
    B = box_corners(cb, hb, lb, wb)
    ha = np.asarray(ha, dtype=float)
    hb = np.asarray(hb, dtype=float)
    axes = [ha, np.stack([-ha[..., 1], ha[..., 0]], -1),
            hb, np.stack([-hb[..., 1], hb[..., 0]], -1)]
    hit = np.ones(np.broadcast_shapes(A.shape[:-2], B.shape[:-2]), dtype=bool)
    for axis in axes:
        pa = np.einsum("...kd,...d->...k", A, axis)
        pb = np.einsum("...kd,...d->...k", B, axis)
        separated = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
        hit &= ~separated
    return hit


def obb_intersect(a: OrientedBox, b: OrientedBox) -> bool:
    return bool(obb_intersect_many(a.center.position, a.center.heading, a.length, a.width,
                                   b.center.position, b.center.heading, b.length, b.width))


def circle_offsets(length, width, n: int = 5) -> np.ndarray:
    """Longitudinal offsets of ``n`` circle centres along the box axis."""
    length = np.asarray(length, dtype=float)
    width = np.asarray(width, dtype=float)
    if np.any(length < width):
        raise ContractError("circle decomposition needs length >= width")
    half = (length - width) / 2.0
    return half[..., None] * np.linspace(-1.0, 1.0, n)


def circle_decomposition(box: OrientedBox, n: int = 5):
    """Centres ``(n, 2)`` and common radius of the circles covering ``box``."""
    offs = circle_offsets(box.length, box.width, n)
    centers = box.center.position + offs[:, None] * box.center.heading
    return centers, box.width / 2.0


# -- polygons ----------------------------------------------------------------
def points_in_polygon(points, polygon, tol=1e-9) -> np.ndarray:
    """Closed point-in-polygon test (boundary counts as inside)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    poly = np.asarray(polygon, dtype=float)
    a = poly
    b = np.roll(poly, -1, axis=0)
    px = pts[:, 0:1]
    py = pts[:, 1:2]
    # boundary: distance to any edge within tol
    e = b - a
    ee = np.maximum((e ** 2).sum(-1), 1e-300)
    t = ((px - a[:, 0]) * e[:, 0] + (py - a[:, 1]) * e[:, 1]) / ee
    t = np.clip(t, 0.0, 1.0)
    dx = a[:, 0] + t * e[:, 0] - px
    dy = a[:, 1] + t * e[:, 1] - py
    on_edge = ((dx * dx + dy * dy) <= tol * tol).any(axis=1)
    cond = (a[:, 1] > py) != (b[:, 1] > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = a[:, 0] + (py - a[:, 1]) * e[:, 0] / e[:, 1]
    inside = (cond & (px < xcross)).sum(axis=1) % 2 == 1
    return inside | on_edge


def polygon_centroid(polygon) -> np.ndarray:
    p = np.asarray(polygon, dtype=float)
    q = np.roll(p, -1, axis=0)
    cross = p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]
    area = cross.sum() / 2.0
    if abs(area) < 1e-12:
        return p.mean(axis=0)
    cx = ((p[:, 0] + q[:, 0]) * cross).sum() / (6.0 * area)
    cy = ((p[:, 1] + q[:, 1]) * cross).sum() / (6.0 * area)
    return np.array([cx, cy])
