"""IDM car following with MOBIL lane changes.

The same lane-coordinate simulator drives the synthetic data generator and the
rule-based comparison row.  Vehicles live in a straight road frame: ``s`` runs
along the road, ``d`` is the lateral offset.  Lanes are parallel bands in that
frame; an on-ramp is a lane with a finite ``s_end`` that acts as a stationary
obstacle for vehicles still on it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError

MIN_ACCEL = -9.0


@dataclass(frozen=True)
class IdmParams:
    """Intelligent Driver Model parameters (SI units)."""

    v0: float = 30.0
    T: float = 1.6
    s0: float = 2.0
    a_max: float = 0.73
    b: float = 1.67
    delta: float = 4.0

    def __post_init__(self):
        if min(self.v0, self.T, self.s0, self.a_max, self.b, self.delta) <= 0:
            raise ConfigError("IDM parameters must be positive")


@dataclass(frozen=True)
class MobilParams:
    politeness: float = 0.3
    threshold: float = 0.1
    b_safe: float = 4.0

    def __post_init__(self):
        if not 0.0 <= self.politeness <= 1.0 or self.b_safe <= 0:
            raise ConfigError("invalid MOBIL parameters")


def idm_accel(v, gap=math.inf, dv=0.0, p: IdmParams = IdmParams()) -> float:
    """IDM acceleration for speed ``v``, bumper gap ``gap`` and closing speed ``dv``.

    ``gap=inf`` encodes a free road.  The result is clamped below at -9 m/s^2.
    """
    free = 1.0 - (v / p.v0) ** p.delta
    if math.isinf(gap):
        return max(p.a_max * free, MIN_ACCEL)
    s_star = p.s0 + v * p.T + v * dv / (2.0 * math.sqrt(p.a_max * p.b))
    gap = max(gap, 1e-3)
    return max(p.a_max * (free - (s_star / gap) ** 2), MIN_ACCEL)


def equilibrium_gap(v, p: IdmParams = IdmParams()) -> float:
    """Bumper gap at which a follower at speed ``v`` behind a leader at ``v`` has zero accel."""
    return (p.s0 + v * p.T) / math.sqrt(1.0 - (v / p.v0) ** p.delta)


@dataclass
class Neighbor:
    """A vehicle seen from the ego: bumper ``gap`` (m) and ``speed`` (m/s)."""

    gap: float
    speed: float
    idm: IdmParams | None = None


def _acc(v, leader: Neighbor | None, p, gap_override=None):
    if leader is None:
        return idm_accel(v, math.inf, 0.0, p)
    gap = leader.gap if gap_override is None else gap_override
    return idm_accel(v, gap, v - leader.speed, p)


def mobil_gain(ego_speed, ego_length, cur_leader, cur_follower, tgt_leader, tgt_follower,
               idm: IdmParams = IdmParams(), mobil: MobilParams = MobilParams()):
    """Return ``(incentive, safe)`` for a prospective change to the target lane."""
    a_c = _acc(ego_speed, cur_leader, idm)
    a_c_new = _acc(ego_speed, tgt_leader, idm)
    safe = a_c_new >= -mobil.b_safe
    gain_new = gain_old = 0.0
    if tgt_follower is not None:
        pf = tgt_follower.idm or idm
        if tgt_leader is None:
            a_n = idm_accel(tgt_follower.speed, math.inf, 0.0, pf)
        else:
            a_n = _acc(tgt_follower.speed, tgt_leader, pf,
                       tgt_follower.gap + ego_length + tgt_leader.gap)
        a_n_new = idm_accel(tgt_follower.speed, tgt_follower.gap,
                            tgt_follower.speed - ego_speed, pf)
        safe = safe and a_n_new >= -mobil.b_safe and tgt_follower.gap > 0
        gain_new = a_n_new - a_n
    if tgt_leader is not None and tgt_leader.gap <= 0:
        safe = False
    if cur_follower is not None:
        po = cur_follower.idm or idm
        a_o = idm_accel(cur_follower.speed, cur_follower.gap,
                        cur_follower.speed - ego_speed, po)
        if cur_leader is None:
            a_o_new = idm_accel(cur_follower.speed, math.inf, 0.0, po)
        else:
            a_o_new = _acc(cur_follower.speed, cur_leader, po,
                           cur_follower.gap + ego_length + cur_leader.gap)
        gain_old = a_o_new - a_o
    incentive = (a_c_new - a_c) + mobil.politeness * (gain_new + gain_old)
    return incentive, safe


def mobil_decide(ego_speed, ego_length, cur_leader, cur_follower, tgt_leader, tgt_follower,
                 idm: IdmParams = IdmParams(), mobil: MobilParams = MobilParams(),
                 bias: float = 0.0) -> str:
    """``"change"`` iff the safety criterion holds and the incentive beats the threshold."""
    incentive, safe = mobil_gain(ego_speed, ego_length, cur_leader, cur_follower,
                                 tgt_leader, tgt_follower, idm, mobil)
    return "change" if safe and incentive + bias > mobil.threshold else "stay"


# -- lane-coordinate simulator ------------------------------------------------
@dataclass
class LaneSpec:
    offset: float
    width: float = 3.75
    s_start: float = -math.inf
    s_end: float = math.inf
    ramp: bool = False

    def contains_s(self, s, margin=0.0):
        return self.s_start <= s <= self.s_end - margin


@dataclass
class Vehicle:
    vid: int
    length: float
    width: float
    s: float
    v: float
    lane: int
    d: float
    idm: IdmParams = field(default_factory=IdmParams)
    agent_type: str = "car"
    external: bool = False
    a: float = 0.0
    d_start: float | None = None
    change_elapsed: float = 0.0
    next_decision: float = 0.0
    changes: int = 0

    @property
    def changing(self):
        return self.d_start is not None


def blend(frac):
    """Smooth 0 -> 1 lateral profile used for lane changes."""
    frac = min(max(frac, 0.0), 1.0)
    return 0.5 - 0.5 * math.cos(math.pi * frac)


class HighwaySim:
    """Fixed-step IDM+MOBIL integration over parallel lanes."""

    def __init__(self, lanes, vehicles, mobil: MobilParams = MobilParams(), dt=0.1,
                 change_duration=3.0, decision_interval=1.0, ramp_bias=1.0,
                 lane_changes=True):
        self.lanes = list(lanes)
        self.vehicles = list(vehicles)
        self.mobil = mobil
        self.dt = dt
        self.change_duration = change_duration
        self.decision_interval = decision_interval
        self.ramp_bias = ramp_bias
        self.lane_changes = lane_changes
        self.time = 0.0
        order = np.argsort([ln.offset for ln in self.lanes])
        self._sorted = [int(i) for i in order]

    # lane topology ---------------------------------------------------------
    def neighbor_lane(self, lane, side, s):
        """Adjacent lane index on ``side`` (+1 left, -1 right) present at ``s``."""
        pos = self._sorted.index(lane)
        j = pos + side
        if not 0 <= j < len(self._sorted):
            return None
        cand = self._sorted[j]
        a, b = self.lanes[lane], self.lanes[cand]
        if abs(abs(a.offset - b.offset) - (a.width + b.width) / 2) > 1e-6:
            return None
        return cand if b.contains_s(s) else None

    def nearest_lane(self, d, s=None):
        best, bd = 0, math.inf
        for i, ln in enumerate(self.lanes):
            if s is not None and not ln.contains_s(s):
                continue
            if abs(ln.offset - d) < bd:
                best, bd = i, abs(ln.offset - d)
        return best

    def occupied(self, veh):
        occ = {veh.lane}
        lo, hi = veh.d - veh.width / 2, veh.d + veh.width / 2
        for i, ln in enumerate(self.lanes):
            if not ln.contains_s(veh.s):
                continue
            if hi > ln.offset - ln.width / 2 and lo < ln.offset + ln.width / 2:
                occ.add(i)
        return occ

    def _lane_members(self):
        members = {i: [] for i in range(len(self.lanes))}
        for veh in self.vehicles:
            for ln in self.occupied(veh):
                members[ln].append(veh)
        return members

    def leader(self, veh, lane, members):
        best = None
        for o in members[lane]:
            if o is veh:
                continue
            if (o.s, o.vid) > (veh.s, veh.vid) and (best is None or o.s < best.s):
                best = o
        if best is None:
            return None
        return Neighbor(best.s - veh.s - (best.length + veh.length) / 2, best.v, best.idm)

    def follower(self, veh, lane, members):
        best = None
        for o in members[lane]:
            if o is veh:
                continue
            if (o.s, o.vid) < (veh.s, veh.vid) and (best is None or o.s > best.s):
                best = o
        if best is None:
            return None
        return Neighbor(veh.s - best.s - (best.length + veh.length) / 2, best.v, best.idm)

    def _obstacle(self, veh, lane):
        ln = self.lanes[lane]
        if math.isinf(ln.s_end):
            return None
        return Neighbor(ln.s_end - veh.s - veh.length / 2, 0.0)

    def _closest(self, a, b):
        if a is None:
            return b
        if b is None:
            return a
        return a if a.gap < b.gap else b

    def accel(self, veh, members):
        acc = math.inf
        for lane in self.occupied(veh) | {veh.lane}:
            lead = self._closest(self.leader(veh, lane, members), self._obstacle(veh, lane))
            acc = min(acc, _acc(veh.v, lead, veh.idm))
        return acc

    def _decide(self, veh, members):
        cur = veh.lane
        cur_lead = self._closest(self.leader(veh, cur, members), self._obstacle(veh, cur))
        cur_fol = self.follower(veh, cur, members)
        best, best_gain = None, -math.inf
        bias = self.ramp_bias if self.lanes[cur].ramp else 0.0
        for side in (1, -1):
            tgt = self.neighbor_lane(cur, side, veh.s)
            if tgt is None or self.lanes[tgt].ramp:
                continue
            if not self.lanes[tgt].contains_s(veh.s + veh.v * self.change_duration):
                continue
            t_lead = self._closest(self.leader(veh, tgt, members), self._obstacle(veh, tgt))
            t_fol = self.follower(veh, tgt, members)
            gain, safe = mobil_gain(veh.v, veh.length, cur_lead, cur_fol, t_lead, t_fol,
                                    veh.idm, self.mobil)
            if safe and gain + bias > self.mobil.threshold and gain > best_gain:
                best, best_gain = tgt, gain
        return best

    def step(self):
        dt = self.dt
        members = self._lane_members()
        movers = [v for v in self.vehicles if not v.external]
        if self.lane_changes:
            for veh in movers:
                if veh.changing or self.time + 1e-9 < veh.next_decision:
                    continue
                veh.next_decision = self.time + self.decision_interval
                tgt = self._decide(veh, members)
                if tgt is not None:
                    veh.d_start = veh.d
                    veh.change_elapsed = 0.0
                    veh.lane = tgt
                    veh.changes += 1
                    members = self._lane_members()
        for veh in movers:
            veh.a = self.accel(veh, members)
        for veh in movers:
            v_new = veh.v + veh.a * dt
            if v_new < 0.0:
                veh.s += veh.v * veh.v / (2.0 * -veh.a) if veh.a < 0 else 0.0
                v_new = 0.0
            else:
                veh.s += (veh.v + v_new) / 2.0 * dt
            veh.v = v_new
            if veh.changing:
                veh.change_elapsed += dt
                frac = blend(veh.change_elapsed / self.change_duration)
                target = self.lanes[veh.lane].offset
                veh.d = veh.d_start + (target - veh.d_start) * frac
                if veh.change_elapsed >= self.change_duration - 1e-9:
                    veh.d = target
                    veh.d_start = None
        self.time += dt


@dataclass(frozen=True)
class RoadFrame:
    """Straight road frame: ``p = origin + s * u + d * n`` with ``n`` = ``u`` rotated +90 deg."""

    origin: tuple
    direction: tuple

    @property
    def u(self):
        return np.asarray(self.direction, dtype=float)

    @property
    def n(self):
        u = self.u
        return np.array([-u[1], u[0]])

    def to_road(self, p):
        d = np.asarray(p, dtype=float) - np.asarray(self.origin)
        return d @ self.u, d @ self.n

    def to_world(self, s, d):
        return (np.asarray(self.origin) + np.multiply.outer(s, self.u)
                + np.multiply.outer(d, self.n))


def lanes_from_map(map_model):
    """Road frame and lane bands from a map's straight, parallel lane centrelines."""
    if not map_model.lanes:
        raise ConfigError("baseline needs lane centrelines in the map")
    first = np.asarray(map_model.lanes[0]["centerline"], dtype=float)
    u = first[-1] - first[0]
    u = u / np.linalg.norm(u)
    frame = RoadFrame(tuple(first[0]), tuple(u))
    lanes = []
    for ln in map_model.lanes:
        c = np.asarray(ln["centerline"], dtype=float)
        du = (c[-1] - c[0]) / np.linalg.norm(c[-1] - c[0])
        if abs(du @ u - 1.0) > 1e-6:
            raise ConfigError("baseline supports straight parallel lanes only")
        s0, d0 = frame.to_road(c[0])
        s1, _ = frame.to_road(c[-1])
        lanes.append(LaneSpec(offset=float(d0), width=float(ln.get("width", 3.75)),
                              s_start=float(s0), s_end=float(s1) if ln.get("ramp") else math.inf,
                              ramp=bool(ln.get("ramp", False))))
    # main lanes extend backwards and forwards for car following purposes
    for ln in lanes:
        if not ln.ramp:
            ln.s_start = -math.inf
    return frame, lanes


def baseline_rollout(rollout, map_model, control_mask=None, idm: IdmParams = IdmParams(),
                     mobil: MobilParams = MobilParams(), substeps=5):
    """Drive the controlled agents of ``rollout`` with IDM+MOBIL; replay the rest.

    Each agent enters the rule-based simulation at the state preceding its
    first controlled frame, using its finite-difference speed as initial speed
    (and as desired speed when that exceeds ``idm.v0``), and leaves at its last
    ground-truth frame.
    """
    frame, lanes = lanes_from_map(map_model)
    mask = rollout.control_mask if control_mask is None else np.asarray(control_mask, bool)
    T = rollout.num_steps
    dt = rollout.dt
    pos = rollout.positions.copy()
    head = rollout.headings.copy()
    present = rollout.present
    N = rollout.num_agents
    sim = HighwaySim(lanes, [], mobil, dt=dt / substeps)
    internal = {}
    for t in range(T):
        # (re)build the replayed set and admit newly controlled agents
        ext = {}
        for i in range(N):
            if not (present[t, i] and present[t + 1, i]) or i in internal:
                continue
            if mask[t + 1, i]:
                s, d = frame.to_road(pos[t, i])
                sp, _ = frame.to_road(pos[t - 1, i]) if t > 0 and present[t - 1, i] else (s, d)
                lane = sim.nearest_lane(d, s)
                veh = Vehicle(vid=i, length=float(rollout.lengths[i]), width=float(rollout.widths[i]),
                              s=float(s), v=max(float(s - sp) / dt, 0.0), lane=lane, d=float(d),
                              idm=replace(idm, v0=max(idm.v0, float(s - sp) / dt)),
                              d_start=float(d), next_decision=sim.time + 1.0)
                internal[i] = veh
            else:
                ext[i] = Vehicle(vid=i, length=float(rollout.lengths[i]),
                                 width=float(rollout.widths[i]), s=0.0, v=0.0, lane=0, d=0.0,
                                 external=True)
        for i in [i for i in internal if not present[t + 1, i] or not mask[t + 1, i]]:
            del internal[i]
        sim.vehicles = list(internal.values()) + list(ext.values())
        s0 = {i: frame.to_road(pos[t, i]) for i in ext}
        s1 = {i: frame.to_road(pos[t + 1, i]) for i in ext}
        for k in range(substeps):
            w = k / substeps
            for i, veh in ext.items():
                veh.s = (1 - w) * s0[i][0] + w * s1[i][0]
                veh.d = (1 - w) * s0[i][1] + w * s1[i][1]
                veh.v = (s1[i][0] - s0[i][0]) / dt
                veh.lane = sim.nearest_lane(veh.d, veh.s)
            sim.step()
        for i, veh in internal.items():
            new = frame.to_world(veh.s, veh.d)
            disp = new - pos[t, i]
            nrm = np.linalg.norm(disp)
            pos[t + 1, i] = new
            head[t + 1, i] = disp / nrm if nrm > 1e-6 else head[t, i]
    return rollout.with_states(pos, head, control_mask=mask, generated=True)
