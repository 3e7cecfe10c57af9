"""Agents, maps and rollouts: ingestion, snippets, synthetic data and splits.

A :class:`Rollout` holds ``T + 1 = 21`` states at 2 Hz for ``N`` agents as
dense arrays.  Frames where an agent is absent are padded with its nearest
present state so every array stays finite; the ``present`` mask is the source
of truth.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .errors import FormatError, GenerationError, SplitError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DT = 0.5
RATE_HZ = 2.0
NUM_STEPS = 20
WARMUP = 3
SEGMENT_MAX_LEN = 20.0
POINTS_PER_SEGMENT = 10
CROP_FRONT, CROP_REAR, CROP_SIDE = 120.0, 45.0, 10.0
AGENT_TYPES = ("car", "truck")
LINE_TYPES = ("solid", "dashed")

EXID_TRACK_COLUMNS = ("trackId", "frame", "xCenter", "yCenter", "heading", "width", "length",
                      "xVelocity", "yVelocity", "xAcceleration", "yAcceleration")
EXID_META_COLUMNS = ("trackId", "class")


# -- records ------------------------------------------------------------------
@dataclass
class AgentRecord:
    agent_id: int
    agent_type: str
    length: float
    width: float
    frames: np.ndarray
    positions: np.ndarray
    headings: np.ndarray
    velocities: np.ndarray | None = None
    accelerations: np.ndarray | None = None

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise FormatError(f"agent {self.agent_id}: non-positive dimensions")
        if len(self.frames) and np.any(np.diff(self.frames) != 1):
            raise FormatError(f"agent {self.agent_id}: frames are not contiguous")


@dataclass
class Recording:
    recording_id: str
    frame_rate: float
    agents: list
    map_id: str = ""

    @property
    def first_frame(self):
        return min((int(a.frames[0]) for a in self.agents if len(a.frames)), default=0)

    @property
    def last_frame(self):
        return max((int(a.frames[-1]) for a in self.agents if len(a.frames)), default=-1)


# -- map ----------------------------------------------------------------------
@dataclass
class Polyline:
    points: np.ndarray
    line_type: str = "dashed"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or len(self.points) < 2:
            raise FormatError("a polyline needs at least 2 points")
        if self.line_type not in LINE_TYPES:
            raise FormatError(f"unknown line type {self.line_type!r}")


def resample_polyline(points, n) -> np.ndarray:
    """``n`` points at equal arc-length spacing along ``points``."""
    p = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.linspace(0.0, cum[-1], n)
    return np.stack([np.interp(target, cum, p[:, 0]), np.interp(target, cum, p[:, 1])], axis=1)


def split_polyline(points, max_len=SEGMENT_MAX_LEN, n_points=POINTS_PER_SEGMENT):
    """Cut a polyline into equal pieces no longer than ``max_len``, each resampled."""
    p = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    k = max(1, int(math.ceil(total / max_len - 1e-9)))
    out = []
    for j in range(k):
        lo, hi = total * j / k, total * (j + 1) / k
        inner = (cum > lo) & (cum < hi)
        s = np.concatenate([[lo], cum[inner], [hi]])
        piece = np.stack([np.interp(s, cum, p[:, 0]), np.interp(s, cum, p[:, 1])], axis=1)
        out.append(resample_polyline(piece, n_points))
    return out


@dataclass(eq=False)
class MapModel:
    map_id: str
    polylines: list
    drivable_polygons: list
    lanes: list = field(default_factory=list)
    _segments: tuple | None = field(default=None, repr=False)

    def segments(self):
        """Segment points ``(S, 10, 2)`` and line-type codes ``(S,)`` (0 solid, 1 dashed)."""
        if self._segments is None:
            pts, types = [], []
            for pl in self.polylines:
                for piece in split_polyline(pl.points):
                    pts.append(piece)
                    types.append(LINE_TYPES.index(pl.line_type))
            arr = np.array(pts).reshape(-1, POINTS_PER_SEGMENT, 2)
            self._segments = (arr, np.array(types, dtype=np.int64))
        return self._segments

    def transformed(self, angle, translation):
        """The same map under a global rotation by ``angle`` then ``translation``."""
        R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
        t = np.asarray(translation, dtype=float)
        move = lambda p: np.asarray(p, dtype=float) @ R.T + t  # noqa: E731
        lanes = [{**ln, "centerline": move(ln["centerline"]).tolist()} for ln in self.lanes]
        return MapModel(self.map_id, [Polyline(move(pl.points), pl.line_type)
                                      for pl in self.polylines],
                        [move(p) for p in self.drivable_polygons], lanes)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "map_id": self.map_id,
            "polylines": [{"points": pl.points.tolist(), "type": pl.line_type}
                          for pl in self.polylines],
            "drivable_polygons": [np.asarray(p).tolist() for p in self.drivable_polygons],
            "lanes": self.lanes,
        }

    @classmethod
    def from_dict(cls, d):
        _check_version(d, "map")
        return cls(map_id=d["map_id"],
                   polylines=[Polyline(p["points"], p["type"]) for p in d["polylines"]],
                   drivable_polygons=[np.asarray(p, dtype=float) for p in d["drivable_polygons"]],
                   lanes=d.get("lanes", []))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_version(d, what):
    if d.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"unsupported {what} schema_version {d.get('schema_version')!r}")


# -- rollout ------------------------------------------------------------------
@dataclass
class MultiAgentState:
    positions: np.ndarray
    headings: np.ndarray
    present: np.ndarray
    agent_types: np.ndarray
    lengths: np.ndarray
    widths: np.ndarray


def _fill_absent(arr, present):
    out = np.array(arr, dtype=float)
    for i in range(present.shape[1]):
        idx = np.flatnonzero(present[:, i])
        if idx.size == 0:
            continue
        pos = np.searchsorted(idx, np.arange(present.shape[0]))
        nearest = idx[np.clip(pos, 0, idx.size - 1)]
        before = idx[np.clip(pos - 1, 0, idx.size - 1)]
        use_before = np.arange(present.shape[0]) > idx[-1]
        src = np.where(use_before, before, nearest)
        out[:, i] = out[src, i]
    return out


def warmup_mask(present, warmup=WARMUP) -> np.ndarray:
    """Controlled flags: an agent is controlled from its ``warmup + 1``-th present frame on."""
    present = np.asarray(present, dtype=bool)
    run = np.zeros(present.shape, dtype=np.int64)
    count = np.zeros(present.shape[1], dtype=np.int64)
    for t in range(present.shape[0]):
        count = np.where(present[t], count + 1, 0)
        run[t] = count
    return present & (run > warmup)


@dataclass(eq=False)
class Rollout:
    rollout_id: str
    recording_id: str
    map_id: str
    agent_ids: np.ndarray
    agent_types: np.ndarray
    lengths: np.ndarray
    widths: np.ndarray
    positions: np.ndarray
    headings: np.ndarray
    present: np.ndarray
    control_mask: np.ndarray | None = None
    dt: float = DT
    generated: bool = False

    def __post_init__(self):
        self.agent_ids = np.asarray(self.agent_ids, dtype=np.int64)
        self.agent_types = np.asarray(self.agent_types, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=float)
        self.widths = np.asarray(self.widths, dtype=float)
        self.present = np.asarray(self.present, dtype=bool)
        self.positions = _fill_absent(self.positions, self.present)
        self.headings = _fill_absent(self.headings, self.present)
        if self.control_mask is None:
            self.control_mask = warmup_mask(self.present)
        self.control_mask = np.asarray(self.control_mask, dtype=bool) & self.present

    @property
    def num_steps(self):
        return self.positions.shape[0] - 1

    @property
    def num_agents(self):
        return self.positions.shape[1]

    @property
    def action_valid(self):
        return self.present[:-1] & self.present[1:]

    @property
    def ground_truth_actions(self) -> np.ndarray:
        """Local position deltas ``(T, N, 2)``; zero where the agent is absent at t or t+1."""
        with ad.no_grad():
            a = geo.to_local(self.positions[1:], self.positions[:-1], self.headings[:-1]).data
        return np.where(self.action_valid[..., None], a, 0.0)

    def state(self, t) -> MultiAgentState:
        return MultiAgentState(self.positions[t], self.headings[t], self.present[t],
                               self.agent_types, self.lengths, self.widths)

    def with_states(self, positions, headings, control_mask=None, generated=True):
        return Rollout(self.rollout_id, self.recording_id, self.map_id, self.agent_ids,
                       self.agent_types, self.lengths, self.widths, np.array(positions),
                       np.array(headings), self.present,
                       self.control_mask if control_mask is None else control_mask,
                       self.dt, generated)

    def transformed(self, angle, translation):
        """The same rollout under a global rotation by ``angle`` then ``translation``."""
        R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
        return Rollout(self.rollout_id, self.recording_id, self.map_id, self.agent_ids,
                       self.agent_types, self.lengths, self.widths,
                       self.positions @ R.T + np.asarray(translation), self.headings @ R.T,
                       self.present, self.control_mask, self.dt, self.generated)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "rollout_id": self.rollout_id,
            "recording_id": self.recording_id,
            "map_id": self.map_id,
            "dt": self.dt,
            "generated": self.generated,
            "agents": [{"agent_id": int(i), "type": AGENT_TYPES[int(k)], "length": float(l),
                        "width": float(w)}
                       for i, k, l, w in zip(self.agent_ids, self.agent_types, self.lengths,
                                             self.widths)],
            "positions": self.positions.tolist(),
            "headings": self.headings.tolist(),
            "present": self.present.tolist(),
            "control_mask": self.control_mask.tolist(),
            "ground_truth_actions": self.ground_truth_actions.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        _check_version(d, "rollout")
        agents = d["agents"]
        n = len(agents)
        steps = len(d["present"])
        pos = np.asarray(d["positions"], dtype=float).reshape(steps, n, 2)
        head = np.asarray(d["headings"], dtype=float).reshape(steps, n, 2)
        return cls(d["rollout_id"], d["recording_id"], d["map_id"],
                   [a["agent_id"] for a in agents],
                   [AGENT_TYPES.index(a["type"]) for a in agents],
                   [a["length"] for a in agents], [a["width"] for a in agents],
                   pos, head, np.asarray(d["present"], dtype=bool).reshape(steps, n),
                   np.asarray(d["control_mask"], dtype=bool).reshape(steps, n),
                   d.get("dt", DT), bool(d.get("generated", False)))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def action_consistency_error(rollout: Rollout) -> float:
    """Max position error when replaying the ground-truth actions one step each."""
    acts = rollout.ground_truth_actions
    with ad.no_grad():
        nxt, _ = geo.apply_action(rollout.positions[:-1], rollout.headings[:-1], acts)
    err = np.linalg.norm(nxt.data - rollout.positions[1:], axis=-1)
    err = np.where(rollout.action_valid, err, 0.0)
    return float(err.max()) if err.size else 0.0


# -- dataset ------------------------------------------------------------------
@dataclass
class Dataset:
    maps: dict
    rollouts: list
    splits: dict = field(default_factory=dict)

    @property
    def recording_ids(self):
        seen = []
        for r in self.rollouts:
            if r.recording_id not in seen:
                seen.append(r.recording_id)
        return seen

    def subset(self, recording_ids):
        keep = set(recording_ids)
        rollouts = [r for r in self.rollouts if r.recording_id in keep]
        used = {r.map_id for r in rollouts}
        return Dataset({k: v for k, v in self.maps.items() if k in used}, rollouts)

    def split(self, name):
        return self.subset(self.splits[name])

    def save(self, root):
        root = Path(root)
        (root / "maps").mkdir(parents=True, exist_ok=True)
        (root / "rollouts").mkdir(parents=True, exist_ok=True)
        for m in self.maps.values():
            m.save(root / "maps" / f"{m.map_id}.json")
        for r in self.rollouts:
            r.save(root / "rollouts" / f"{r.rollout_id}.json")
        splits = {"schema_version": SCHEMA_VERSION,
                  "order": [r.rollout_id for r in self.rollouts]}
        splits.update({k: list(v) for k, v in self.splits.items()})
        (root / "splits.json").write_text(json.dumps(splits, indent=1))

    @classmethod
    def load(cls, root):
        root = Path(root)
        maps = {}
        for p in sorted((root / "maps").glob("*.json")):
            m = MapModel.load(p)
            maps[m.map_id] = m
        by_id = {}
        for p in sorted((root / "rollouts").glob("*.json")):
            r = Rollout.load(p)
            by_id[r.rollout_id] = r
        splits = {}
        order = sorted(by_id)
        sp = root / "splits.json"
        if sp.exists():
            meta = json.loads(sp.read_text())
            _check_version(meta, "splits")
            order = [o for o in meta.get("order", order) if o in by_id]
            splits = {k: v for k, v in meta.items() if k not in ("schema_version", "order")}
        return cls(maps, [by_id[o] for o in order], splits)


# -- exiD ingestion -------------------------------------------------------------
def _read_csv(path, required):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if cols:
            for c in required:
                if c not in cols:
                    raise FormatError(c)
        return list(reader)


def ingest_exid(tracks_csv, tracks_meta_csv, map_file=None, frame_rate=25.0,
                recording_id=None) -> Recording:
    """Read an exiD-style recording; classes other than car/truck are dropped."""
    rows = _read_csv(tracks_csv, EXID_TRACK_COLUMNS)
    meta = _read_csv(tracks_meta_csv, EXID_META_COLUMNS)
    classes = {int(m["trackId"]): m["class"].strip().lower() for m in meta}
    by_track = {}
    for row in rows:
        by_track.setdefault(int(row["trackId"]), []).append(row)
    map_id = ""
    if map_file is not None:
        map_id = MapModel.load(map_file).map_id
    agents = []
    for tid in sorted(by_track):
        trows = by_track[tid]
        frames = np.array([int(r["frame"]) for r in trows])
        if np.any(np.diff(frames) <= 0):
            raise FormatError(f"track {tid}: frames are not strictly increasing")
        cls_ = classes.get(tid, "car")
        if cls_ not in AGENT_TYPES:
            log.warning("dropping track %d of class %s", tid, cls_)
            continue
        f = lambda c: np.array([float(r[c]) for r in trows])  # noqa: E731
        yaw = np.deg2rad(f("heading"))
        agents.append(AgentRecord(
            agent_id=tid, agent_type=cls_, length=float(f("length")[0]),
            width=float(f("width")[0]), frames=frames,
            positions=np.stack([f("xCenter"), f("yCenter")], 1),
            headings=np.stack([np.cos(yaw), np.sin(yaw)], 1),
            velocities=np.stack([f("xVelocity"), f("yVelocity")], 1),
            accelerations=np.stack([f("xAcceleration"), f("yAcceleration")], 1)))
    rid = recording_id or Path(tracks_csv).stem.split("_")[0]
    return Recording(rid, float(frame_rate), agents, map_id)


# -- snipping -----------------------------------------------------------------
def snip(recording: Recording, window_s=10.0, rate_hz=RATE_HZ) -> list:
    """Disjoint 10 s windows of ``window_s * rate_hz + 1`` states, downsampled by striding.

    The sample ``k`` of a recording uses the frame nearest to ``k / rate_hz``
    seconds.  Incomplete tail windows are dropped.
    """
    n_states = int(round(window_s * rate_hz)) + 1
    f0, f1 = recording.first_frame, recording.last_frame
    if f1 < f0:
        return []
    ratio = recording.frame_rate / rate_hz
    n_samples = int(math.floor((f1 - f0) / ratio + 1e-9)) + 1
    sample_frames = f0 + np.floor(np.arange(n_samples) * ratio + 0.5).astype(np.int64)
    out = []
    for w in range(n_samples // n_states):
        frames = sample_frames[w * n_states:(w + 1) * n_states]
        ids, types, lens, wids, cols_p, cols_h, cols_m = [], [], [], [], [], [], []
        for agent in recording.agents:
            idx = frames - int(agent.frames[0]) if len(agent.frames) else frames
            ok = (idx >= 0) & (idx < len(agent.frames))
            if not ok.any():
                continue
            safe = np.clip(idx, 0, len(agent.frames) - 1)
            ids.append(agent.agent_id)
            types.append(AGENT_TYPES.index(agent.agent_type))
            lens.append(agent.length)
            wids.append(agent.width)
            cols_p.append(agent.positions[safe])
            cols_h.append(agent.headings[safe])
            cols_m.append(ok)
        if ids:
            pos = np.stack(cols_p, axis=1)
            head = np.stack(cols_h, axis=1)
            present = np.stack(cols_m, axis=1)
        else:
            pos = np.zeros((n_states, 0, 2))
            head = np.zeros((n_states, 0, 2))
            present = np.zeros((n_states, 0), dtype=bool)
        out.append(Rollout(f"{recording.recording_id}_{w:03d}", recording.recording_id,
                           recording.map_id, ids, types, lens, wids, pos, head, present))
    return out


# -- map crop -----------------------------------------------------------------
def crop_pairs(seg_points, positions, headings):
    """Indices ``(agent, segment)`` of segments with a point inside each agent's crop."""
    seg_points = np.asarray(seg_points, dtype=float)
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    headings = np.asarray(headings, dtype=float).reshape(-1, 2)
    if seg_points.size == 0 or positions.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    centers = seg_points.mean(axis=1)
    radius = np.linalg.norm(seg_points - centers[:, None], axis=-1).max(axis=1)
    reach = math.hypot(CROP_FRONT, CROP_SIDE)
    dist = np.linalg.norm(centers[None] - positions[:, None], axis=-1)
    cand_a, cand_s = np.nonzero(dist <= reach + radius[None])
    if cand_a.size == 0:
        return cand_a, cand_s
    d = seg_points[cand_s] - positions[cand_a][:, None]
    h = headings[cand_a][:, None]
    lx = d[..., 0] * h[..., 0] + d[..., 1] * h[..., 1]
    ly = d[..., 1] * h[..., 0] - d[..., 0] * h[..., 1]
    inside = (lx >= -CROP_REAR) & (lx <= CROP_FRONT) & (np.abs(ly) <= CROP_SIDE)
    keep = inside.any(axis=1)
    return cand_a[keep], cand_s[keep]


def crop_map(map_model: MapModel, position, heading):
    """Segments visible from one pose, in that pose's frame.

    Returns ``(segment_indices, local_points, line_types)`` where
    ``local_points`` is a Tensor ``(k, 10, 2)`` differentiable w.r.t.
    ``position`` and ``heading`` when those are Tensors.
    """
    pts, types = map_model.segments()
    p = position.data if isinstance(position, ad.Tensor) else np.asarray(position, float)
    h = heading.data if isinstance(heading, ad.Tensor) else np.asarray(heading, float)
    _, seg = crop_pairs(pts, p[None], h[None])
    pos_t = ad._as_tensor(position).reshape(1, 1, 2)
    head_t = ad._as_tensor(heading).reshape(1, 1, 2)
    local = geo.to_local(ad.Tensor(pts[seg]), pos_t, head_t)
    return seg, local, types[seg]


# -- synthetic highway ----------------------------------------------------------
def highway_map(n_lanes=3, lane_width=3.75, x_min=-100.0, x_max=1500.0, ramp=False,
                ramp_start=50.0, ramp_end=300.0, map_id=None) -> MapModel:
    """Straight highway along +x; lane 0 is the rightmost main lane at ``y = 0``.

    With ``ramp`` an acceleration lane sits to the right of lane 0 between
    ``ramp_start`` and ``ramp_end``.
    """
    w = lane_width
    polylines = []
    right_edge = -w / 2
    if ramp:
        polylines.append(Polyline([[x_min, right_edge], [ramp_start, right_edge]], "solid"))
        polylines.append(Polyline([[ramp_start, right_edge], [ramp_end, right_edge]], "dashed"))
        polylines.append(Polyline([[ramp_end, right_edge], [x_max, right_edge]], "solid"))
        polylines.append(Polyline([[ramp_start, right_edge - w], [ramp_end, right_edge - w]],
                                  "solid"))
    else:
        polylines.append(Polyline([[x_min, right_edge], [x_max, right_edge]], "solid"))
    for k in range(1, n_lanes):
        y = right_edge + k * w
        polylines.append(Polyline([[x_min, y], [x_max, y]], "dashed"))
    polylines.append(Polyline([[x_min, right_edge + n_lanes * w],
                               [x_max, right_edge + n_lanes * w]], "solid"))
    polygons, lanes = [], []
    for k in range(n_lanes):
        lo = right_edge + k * w
        polygons.append(np.array([[x_min, lo], [x_max, lo], [x_max, lo + w], [x_min, lo + w]]))
        lanes.append({"lane_id": k, "centerline": [[x_min, k * w], [x_max, k * w]],
                      "width": w, "ramp": False})
    if ramp:
        lo = right_edge - w
        polygons.append(np.array([[ramp_start, lo], [ramp_end, lo], [ramp_end, lo + w],
                                  [ramp_start, lo + w]]))
        lanes.append({"lane_id": n_lanes, "centerline": [[ramp_start, -w], [ramp_end, -w]],
                      "width": w, "ramp": True})
    mid = map_id or f"highway_{n_lanes}l{'_ramp' if ramp else ''}"
    return MapModel(mid, polylines, polygons, lanes)


@dataclass
class SynthConfig:
    n_lanes: int = 3
    ramp: bool = False
    n_agents: int = 10
    duration: float = 10.0
    seed: int = 0
    n_recordings: int = 1
    lane_width: float = 3.75
    truck_fraction: float = 0.15
    ramp_fraction: float = 0.2
    lane_changes: bool = True


def _placement_span(cfg):
    return 60.0 + 60.0 * cfg.n_agents / cfg.n_lanes


def _sample_vehicle(rng, vid, lanes, cfg, placed, x_span):
    from .baseline import IdmParams, Vehicle, equilibrium_gap

    for _ in range(1000):
        truck = rng.random() < cfg.truck_fraction
        on_ramp = cfg.ramp and rng.random() < cfg.ramp_fraction
        if on_ramp:
            lane = len(lanes) - 1
            s = rng.uniform(lanes[lane].s_start + 10.0, lanes[lane].s_end - 100.0)
        else:
            lane = int(rng.integers(0, cfg.n_lanes))
            s = rng.uniform(0.0, x_span)
        if truck:
            length, width, v0 = rng.uniform(12.0, 15.0), 2.5, rng.uniform(22.0, 25.0)
        else:
            length, width, v0 = rng.uniform(4.2, 5.0), rng.uniform(1.8, 2.0), rng.uniform(28.0, 36.0)
        idm = IdmParams(v0=v0)
        v = v0 * rng.uniform(0.75, 0.95)
        ok = True
        for o in placed:
            if o.lane != lane:
                continue
            gap = abs(o.s - s) - (o.length + length) / 2
            slower = min(v, o.v)
            if gap < equilibrium_gap(slower, idm) * 0.8 + 2.0:
                ok = False
                break
        if ok:
            return Vehicle(vid=vid, length=length, width=width, s=s, v=v, lane=lane,
                           d=lanes[lane].offset, idm=idm, agent_type="truck" if truck else "car",
                           next_decision=rng.uniform(0.0, 1.0))
    raise GenerationError(f"could not place vehicle {vid} after 1000 samples")


def _has_collision(pos, head, lengths, widths):
    n = pos.shape[1]
    if n < 2:
        return False
    ii, jj = np.triu_indices(n, 1)
    for t in range(pos.shape[0]):
        hit = geo.obb_intersect_many(pos[t, ii], head[t, ii], lengths[ii], widths[ii],
                                     pos[t, jj], head[t, jj], lengths[jj], widths[jj])
        if hit.any():
            return True
    return False


def simulate_highway(cfg: SynthConfig, rng, map_model: MapModel, substeps=5):
    """One IDM+MOBIL run recorded at 2 Hz; returns a :class:`Recording`."""
    from .baseline import HighwaySim, lanes_from_map

    frame, lanes = lanes_from_map(map_model)
    x_span = _placement_span(cfg)
    placed = []
    for vid in range(cfg.n_agents):
        placed.append(_sample_vehicle(rng, vid, lanes, cfg, placed, x_span))
    sim = HighwaySim(lanes, placed, dt=DT / substeps, lane_changes=cfg.lane_changes)
    n_frames = int(round(cfg.duration * RATE_HZ)) + 1
    pos = np.zeros((n_frames, len(placed), 2))
    vel = np.zeros_like(pos)
    for k in range(n_frames):
        if k:
            for _ in range(substeps):
                sim.step()
        for i, v in enumerate(placed):
            pos[k, i] = frame.to_world(v.s, v.d)
            d_dot = 0.0
            if v.changing:
                frac = min(v.change_elapsed / sim.change_duration, 1.0)
                target = lanes[v.lane].offset
                d_dot = (target - v.d_start) * 0.5 * math.pi * math.sin(math.pi * frac) \
                    / sim.change_duration
            vel[k, i] = v.v * frame.u + d_dot * frame.n
    speed = np.linalg.norm(vel, axis=-1, keepdims=True)
    head = np.where(speed > 1e-6, vel / np.maximum(speed, 1e-12), frame.u)
    agents = [AgentRecord(v.vid, v.agent_type, v.length, v.width, np.arange(n_frames),
                          pos[:, i], head[:, i], vel[:, i]) for i, v in enumerate(placed)]
    return Recording("", RATE_HZ, agents, map_model.map_id), pos, head, placed


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """IDM+MOBIL highway traffic recorded into rollouts; deterministic per seed."""
    x_span = _placement_span(cfg)
    x_max = x_span + 45.0 * cfg.duration + 300.0
    map_model = highway_map(cfg.n_lanes, cfg.lane_width, x_max=x_max, ramp=cfg.ramp)
    rollouts = []
    for r in range(cfg.n_recordings):
        rng = np.random.default_rng([cfg.seed, r])
        for _attempt in range(20):
            rec, pos, head, placed = simulate_highway(cfg, rng, map_model)
            lengths = np.array([v.length for v in placed])
            widths = np.array([v.width for v in placed])
            if not _has_collision(pos, head, lengths, widths):
                break
        else:
            raise GenerationError("could not generate a collision-free recording")
        rec.recording_id = f"syn{cfg.seed:04d}_{r:04d}"
        rollouts.extend(snip(rec))
    return Dataset({map_model.map_id: map_model}, rollouts)


# -- splitting ----------------------------------------------------------------
def _largest_remainder(n, ratios):
    raw = np.asarray(ratios, dtype=float) * n
    counts = np.floor(raw + 1e-9).astype(int)
    rem = raw - counts
    for k in np.argsort(-rem, kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    # every split with positive weight gets at least one recording
    for k in range(len(counts)):
        if ratios[k] > 0 and counts[k] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[k] += 1
    return counts


def split(dataset: Dataset, ratios=(0.8, 0.1, 0.1), seed=0, names=("train", "val", "test")):
    """Split at recording granularity using largest-remainder rounding."""
    ratios = tuple(float(r) for r in ratios)
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise SplitError("ratios must be non-negative and sum to 1")
    recs = sorted(dataset.recording_ids)
    needed = sum(1 for r in ratios if r > 0)
    if len(recs) < needed:
        raise SplitError(f"{len(recs)} recordings cannot fill {needed} splits")
    order = [recs[i] for i in np.random.default_rng(seed).permutation(len(recs))]
    counts = _largest_remainder(len(recs), ratios)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    assignment = {name: order[bounds[k]:bounds[k + 1]] for k, name in enumerate(names)}
    dataset.splits = assignment
    return tuple(dataset.subset(assignment[name]) for name in names)


def env_threads(default=1):
    try:
        return max(1, int(os.environ.get("TRAFFIC_LAB_THREADS", default)))
    except ValueError:
        return default
