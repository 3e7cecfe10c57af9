"""Evaluation metrics: collisions, off-road, ADE and distributional realism.

All functions take plain :class:`~traffic_lab.scene.Rollout` objects; the
``control_mask`` of the generated rollout decides which agents are scored.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import geometry as geo
from .errors import MetricError

ADE_HORIZON_STEPS = 10
JSD_BINS = 100
DEBOUNCE_FRAMES = 2
REPORT_FIELDS = ("method", "control_mode", "seed", "col_pct", "off_pct", "ade_m",
                 "jsd_speed", "jsd_accel", "jsd_nlc")


# -- collisions -----------------------------------------------------------------
def collision_flags(rollout) -> np.ndarray:
    """Per agent: controlled and overlapping another present agent in a controlled frame."""
    n = rollout.num_agents
    hit = np.zeros(n, dtype=bool)
    if n < 2:
        return hit
    ii, jj = np.triu_indices(n, 1)
    for t in range(rollout.positions.shape[0]):
        both = rollout.present[t, ii] & rollout.present[t, jj]
        ctrl = rollout.control_mask[t, ii] | rollout.control_mask[t, jj]
        k = np.flatnonzero(both & ctrl)
        if k.size == 0:
            continue
        a, b = ii[k], jj[k]
        p, h = rollout.positions[t], rollout.headings[t]
        over = geo.obb_intersect_many(p[a], h[a], rollout.lengths[a], rollout.widths[a],
                                      p[b], h[b], rollout.lengths[b], rollout.widths[b])
        hit[a[over & rollout.control_mask[t, a]]] = True
        hit[b[over & rollout.control_mask[t, b]]] = True
    return hit


def _controlled_agents(rollout):
    return rollout.control_mask.any(axis=0)


def collision_rate(rollouts, pooled=True) -> float:
    """Percentage of controlled agents with at least one collision.

    ``pooled`` counts agents across all rollouts; otherwise the per-rollout
    percentages are averaged over rollouts with controlled agents.
    """
    rollouts = _as_list(rollouts)
    hits, totals = [], []
    for r in rollouts:
        ctrl = _controlled_agents(r)
        hits.append(int((collision_flags(r) & ctrl).sum()))
        totals.append(int(ctrl.sum()))
    if sum(totals) == 0:
        raise MetricError("no controlled agents")
    if pooled:
        return 100.0 * sum(hits) / sum(totals)
    per = [100.0 * h / n for h, n in zip(hits, totals) if n]
    return float(np.mean(per))


# -- off-road -------------------------------------------------------------------
def on_road(points, map_model) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    inside = np.zeros(len(pts), dtype=bool)
    for poly in map_model.drivable_polygons:
        inside |= geo.points_in_polygon(pts, poly)
    return inside


def _map_for(maps, rollout):
    if hasattr(maps, "drivable_polygons"):
        return maps
    return maps[rollout.map_id]


def offroad_rate(rollouts, maps) -> float:
    """Percentage of controlled (frame, agent) pairs whose center is off every lane polygon."""
    off = total = 0
    for r in _as_list(rollouts):
        t, i = np.nonzero(r.control_mask)
        if t.size == 0:
            continue
        ok = on_road(r.positions[t, i], _map_for(maps, r))
        off += int((~ok).sum())
        total += int(t.size)
    return 100.0 * off / total if total else 0.0


# -- displacement -----------------------------------------------------------------
def ade(generated, gt, horizon=ADE_HORIZON_STEPS) -> float:
    """Mean over controlled agents of the mean position error over ``horizon`` steps
    starting at each agent's first controlled step."""
    errs = []
    for g, r in zip(_as_list(generated), _as_list(gt)):
        for i in np.flatnonzero(_controlled_agents(g)):
            t0 = int(np.argmax(g.control_mask[:, i]))
            ts = np.arange(t0, min(t0 + horizon, g.positions.shape[0]))
            ts = ts[g.present[ts, i]]
            d = np.linalg.norm(g.positions[ts, i] - r.positions[ts, i], axis=-1)
            errs.append(float(d.mean()))
    if not errs:
        raise MetricError("no controlled agents")
    return float(np.mean(errs))


# -- distributions ----------------------------------------------------------------
def jsd_probs(p, q) -> float:
    """Jensen-Shannon divergence of two probability vectors in nats."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))
    return max(0.0, 0.5 * kl(p) + 0.5 * kl(q))


def histograms(samples_gen, samples_gt, bins=JSD_BINS):
    """Shared-range histograms ``(edges, p_gen, p_gt)`` normalised to probabilities."""
    a = np.asarray(samples_gen, dtype=float).ravel()
    b = np.asarray(samples_gt, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise MetricError("jsd needs at least one sample on each side")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if not hi > lo:
        edges = np.array([lo, lo])
        return edges, np.array([1.0]), np.array([1.0])
    edges = np.linspace(lo, hi, bins + 1)
    pa = np.histogram(a, edges)[0].astype(float)
    pb = np.histogram(b, edges)[0].astype(float)
    return edges, pa / pa.sum(), pb / pb.sum()


def jsd(samples_gen, samples_gt, bins=JSD_BINS) -> float:
    """JSD between the histograms of two sample sets over their joint range."""
    _, pa, pb = histograms(samples_gen, samples_gt, bins)
    return jsd_probs(pa, pb)


# -- lanes --------------------------------------------------------------------------
def lane_index(points, map_model) -> np.ndarray:
    """Containing lane polygon per point, nearest centroid on overlaps, -1 off-road."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    polys = map_model.drivable_polygons
    if not polys:
        return np.full(len(pts), -1)
    inside = np.stack([geo.points_in_polygon(pts, p) for p in polys], axis=1)
    cent = np.array([geo.polygon_centroid(p) for p in polys])
    d = np.linalg.norm(pts[:, None] - cent[None], axis=-1)
    d = np.where(inside, d, np.inf)
    idx = np.argmin(d, axis=1)
    return np.where(inside.any(axis=1), idx, -1)


def count_transitions(lanes, debounce=DEBOUNCE_FRAMES) -> int:
    """Lane switches where the new lane holds for at least ``debounce`` frames.

    Off-road frames (-1) keep the previous lane.
    """
    stable = cand = None
    run = changes = 0
    for lane in lanes:
        lane = int(lane)
        if lane < 0:
            if stable is None:
                continue
            lane = cand if cand is not None else stable
        if stable is None:
            stable = lane
        elif lane == stable:
            cand, run = None, 0
        else:
            run = run + 1 if lane == cand else 1
            cand = lane
            if run >= debounce:
                changes += 1
                stable, cand, run = lane, None, 0
    return changes


def count_lane_changes(rollout, map_model, agents=None) -> np.ndarray:
    """Debounced lane-change counts for ``agents`` (default: controlled agents)."""
    agents = np.flatnonzero(_controlled_agents(rollout)) if agents is None else agents
    out = np.zeros(len(agents), dtype=np.int64)
    for k, i in enumerate(agents):
        ts = np.flatnonzero(rollout.present[:, i])
        out[k] = count_transitions(lane_index(rollout.positions[ts, i], map_model))
    return out


def feature_samples(rollouts, maps):
    """Speed, acceleration and lane-change samples of controlled agents."""
    speed, accel, nlc = [], [], []
    for r in _as_list(rollouts):
        v = np.linalg.norm(np.diff(r.positions, axis=0), axis=-1) / r.dt
        v_ok = r.present[1:] & r.present[:-1]
        ctrl = r.control_mask[1:]
        speed.append(v[v_ok & ctrl])
        a = np.diff(v, axis=0) / r.dt
        a_ok = v_ok[1:] & v_ok[:-1] & r.control_mask[2:]
        accel.append(a[a_ok])
        nlc.append(count_lane_changes(r, _map_for(maps, r)))
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)  # noqa: E731
    return {"speed": cat(speed), "accel": cat(accel), "n_lc": cat(nlc).astype(float)}


# -- report ------------------------------------------------------------------------
@dataclass
class MetricReport:
    collision_pct: float
    offroad_pct: float
    ade_m: float
    jsd_speed: float
    jsd_accel: float
    jsd_lane_changes: float
    n_controlled_agents: int
    n_frames: int
    collision_pct_per_rollout: float = float("nan")

    def to_dict(self):
        return asdict(self)

    def row(self, method="", control_mode="", seed=""):
        return {"method": method, "control_mode": control_mode, "seed": seed,
                "col_pct": self.collision_pct, "off_pct": self.offroad_pct,
                "ade_m": self.ade_m, "jsd_speed": self.jsd_speed,
                "jsd_accel": self.jsd_accel, "jsd_nlc": self.jsd_lane_changes}


def _safe_jsd(a, b):
    if len(a) == 0 or len(b) == 0:
        return 0.0 if len(a) == len(b) else math.log(2.0)
    return jsd(a, b)


def pair_rollouts(generated, gt):
    by_id = {r.rollout_id: r for r in _as_list(gt)}
    pairs = []
    for g in _as_list(generated):
        if g.rollout_id not in by_id:
            raise MetricError(f"no ground truth for rollout {g.rollout_id}")
        pairs.append((g, by_id[g.rollout_id]))
    return [p[0] for p in pairs], [p[1] for p in pairs]


def evaluate(generated, gt, maps) -> MetricReport:
    """All metrics for generated rollouts against their recorded counterparts.

    Recorded rollouts are scored with the generated control masks so both
    feature distributions cover the same agents and frames.
    """
    gen, ref = pair_rollouts(generated, gt)
    ref = [r.with_states(r.positions, r.headings, control_mask=g.control_mask,
                         generated=False) for g, r in zip(gen, ref)]
    fg = feature_samples(gen, maps)
    fr = feature_samples(ref, maps)
    n_ctrl = int(sum(_controlled_agents(g).sum() for g in gen))
    n_frames = int(sum(g.control_mask.sum() for g in gen))
    return MetricReport(
        collision_pct=collision_rate(gen),
        offroad_pct=offroad_rate(gen, maps),
        ade_m=ade(gen, ref),
        jsd_speed=_safe_jsd(fg["speed"], fr["speed"]),
        jsd_accel=_safe_jsd(fg["accel"], fr["accel"]),
        jsd_lane_changes=_safe_jsd(fg["n_lc"], fr["n_lc"]),
        n_controlled_agents=n_ctrl,
        n_frames=n_frames,
        collision_pct_per_rollout=collision_rate(gen, pooled=False),
    )


def write_report_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(REPORT_FIELDS), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def write_histogram_csv(path, generated, gt, maps, bins=JSD_BINS):
    """Rows ``feature, bin_left, bin_right, p_gt, p_gen`` for each realism feature."""
    gen, ref = pair_rollouts(generated, gt)
    ref = [r.with_states(r.positions, r.headings, control_mask=g.control_mask,
                         generated=False) for g, r in zip(gen, ref)]
    fg = feature_samples(gen, maps)
    fr = feature_samples(ref, maps)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "bin_left", "bin_right", "p_gt", "p_gen"])
        for name in ("speed", "accel", "n_lc"):
            if len(fg[name]) == 0 or len(fr[name]) == 0:
                continue
            edges, p_gen, p_gt = histograms(fg[name], fr[name], bins)
            for k in range(len(p_gen)):
                w.writerow([name, edges[k], edges[k + 1], p_gt[k], p_gen[k]])


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]
