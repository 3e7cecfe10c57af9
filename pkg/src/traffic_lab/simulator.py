"""Closed-loop rollouts of the policy over one or many scenes at once.

Agents of all rollouts in a batch are flattened into one axis.  At every
step the agents with a three-frame history form the graph; controlled agents
move by the policy action, all others copy their recorded state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import policy as pol
from .autodiff import Tensor
from .errors import ContractError, SelectionError, SimulationError
from .scene import Rollout, warmup_mask

MODES = ("deterministic", "sampled")


# -- control masks ---------------------------------------------------------------
def control_mask_all(rollout: Rollout) -> np.ndarray:
    """Every agent is controlled from its 4th present frame onward."""
    return warmup_mask(rollout.present)


def eligible_counts(rollout: Rollout) -> np.ndarray:
    return control_mask_all(rollout).sum(axis=0)


def control_mask_single(rollout: Rollout, selector="max_timesteps", rng=None) -> np.ndarray:
    """Control exactly one agent.

    ``selector`` is ``"max_timesteps"`` (most controllable steps, ties to the
    lowest agent id) or ``"proportional"`` (drawn with probability
    proportional to the number of controllable steps using ``rng``).
    """
    full = control_mask_all(rollout)
    counts = full.sum(axis=0)
    if counts.sum() == 0:
        raise SelectionError("no agent has enough history to be controlled")
    if selector == "max_timesteps":
        best = counts.max()
        cand = np.flatnonzero(counts == best)
        pick = cand[np.argmin(rollout.agent_ids[cand])]
    elif selector == "proportional":
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = int(rng.choice(len(counts), p=counts / counts.sum()))
    else:
        raise ContractError(f"unknown selector {selector!r}")
    mask = np.zeros_like(full)
    mask[:, pick] = full[:, pick]
    return mask


def make_masks(rollouts, control="all_agents", rng=None):
    if control in ("all", "all_agents"):
        return [control_mask_all(r) for r in rollouts]
    if control in ("single", "single_agent"):
        return [control_mask_single(r, "max_timesteps") for r in rollouts]
    if control == "single_proportional":
        return [control_mask_single(r, "proportional", rng) for r in rollouts]
    raise ContractError(f"unknown control mode {control!r}")


# -- batch layout ----------------------------------------------------------------
class Batch:
    """Rollouts flattened along the agent axis."""

    def __init__(self, rollouts, bank: pol.MapBank | None = None, masks=None):
        self.rollouts = list(rollouts)
        if not self.rollouts:
            raise ContractError("empty batch")
        steps = {r.num_steps for r in self.rollouts}
        if len(steps) != 1:
            raise ContractError("rollouts in a batch must have equal length")
        self.T = steps.pop()
        self.dt = self.rollouts[0].dt
        self.bank = bank
        masks = [r.control_mask for r in self.rollouts] if masks is None else masks
        sizes = [r.num_agents for r in self.rollouts]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.n = int(self.offsets[-1])
        cat = np.concatenate
        self.positions = cat([r.positions for r in self.rollouts], axis=1)
        self.headings = cat([r.headings for r in self.rollouts], axis=1)
        self.present = cat([r.present for r in self.rollouts], axis=1)
        self.control = cat([np.asarray(m, dtype=bool) for m in masks], axis=1) & self.present
        self.agent_types = cat([r.agent_types for r in self.rollouts])
        self.lengths = cat([r.lengths for r in self.rollouts])
        self.widths = cat([r.widths for r in self.rollouts])
        self.owner = np.repeat(np.arange(len(self.rollouts)), sizes)
        self.map_ids = np.array([self.rollouts[k].map_id for k in self.owner], dtype=object)
        hist = self.history_ok()
        if self.control[0].any() or (self.control[1:] & ~hist[:-1]).any():
            raise ContractError("controlled agents need three earlier present frames")

    def history_ok(self) -> np.ndarray:
        """``(T+1, n)`` flags: present at t, t-1 and t-2."""
        p = self.present
        ok = np.zeros_like(p)
        ok[2:] = p[2:] & p[1:-1] & p[:-2]
        return ok

    def scene(self, positions, headings, times, select=None):
        """One flat :class:`SceneInput` stacking the graphs of several steps.

        ``positions``/``headings`` index by step and hold ``(n, 2)`` arrays or
        Tensors.  ``select(t)`` may restrict the node set (default: agents with
        history).  Returns ``(scene, node_agent, node_time)``.
        """
        hist = self.history_ok()
        agents, tt = [], []
        for t in times:
            nodes = np.flatnonzero(hist[t] if select is None else select(t) & hist[t])
            agents.append(nodes)
            tt.append(np.full(len(nodes), t))
        agents = np.concatenate(agents) if agents else np.zeros(0, np.int64)
        tt = np.concatenate(tt) if tt else np.zeros(0, np.int64)
        rows = [[], [], []]
        head_rows = []
        for t in times:
            nodes = agents[tt == t]
            for k in range(3):
                rows[k].append(ad.take(ad._as_tensor(positions[t - 2 + k]), nodes))
            head_rows.append(ad.take(ad._as_tensor(headings[t]), nodes))
        if len(times) == 1:
            pos = ad.stack([rows[0][0], rows[1][0], rows[2][0]], axis=0)
            head = head_rows[0]
        else:
            pos = ad.stack([ad.concat(r, axis=0) for r in rows], axis=0)
            head = ad.concat(head_rows, axis=0)
        groups = self.owner[agents] * (self.T + 1) + tt
        scene = pol.SceneInput(pos, head, self.agent_types[agents], self.lengths[agents],
                               self.widths[agents], groups, self.map_ids[agents], self.bank,
                               self.dt)
        return scene, agents, tt

    def split(self, arr):
        """Per-rollout views of an agent-axis array ``(..., n, ...)`` (axis 1)."""
        return [arr[:, a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]


@dataclass
class GeneratedTrajectory:
    batch: Batch
    positions: list
    headings: list
    actions: dict
    mode: str

    def position_array(self) -> np.ndarray:
        return np.stack([ad._as_tensor(p).data for p in self.positions])

    def heading_array(self) -> np.ndarray:
        return np.stack([ad._as_tensor(h).data for h in self.headings])

    def stacked_positions(self) -> Tensor:
        return ad.stack([ad._as_tensor(p) for p in self.positions], axis=0)

    def stacked_headings(self) -> Tensor:
        return ad.stack([ad._as_tensor(h) for h in self.headings], axis=0)

    def to_rollouts(self) -> list:
        pos = self.batch.split(self.position_array())
        head = self.batch.split(self.heading_array())
        mask = self.batch.split(self.batch.control)
        return [r.with_states(p, h, control_mask=m, generated=True)
                for r, p, h, m in zip(self.batch.rollouts, pos, head, mask)]


def rollout(policy, rollouts, mode="deterministic", differentiable=True, rng=None,
            bank=None, masks=None) -> GeneratedTrajectory:
    """Run the policy closed-loop over one rollout or a list of rollouts.

    ``policy`` is a :class:`~traffic_lab.policy.Policy` or any callable
    mapping a :class:`SceneInput` to an :class:`ActionDistribution`.
    In ``sampled`` mode noise comes from ``rng``.
    """
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}")
    if isinstance(rollouts, Rollout):
        rollouts = [rollouts]
    batch = rollouts if isinstance(rollouts, Batch) else Batch(rollouts, bank, masks)
    if mode == "sampled" and rng is None:
        rng = np.random.default_rng(0)
    if differentiable:
        return _run(policy, batch, mode, rng)
    with ad.no_grad():
        return _run(policy, batch, mode, rng)


def _run(policy, batch: Batch, mode, rng):
    gt_p, gt_h = batch.positions, batch.headings
    P = [Tensor(gt_p[0])]
    H = [Tensor(gt_h[0])]
    actions = {}
    for t in range(batch.T):
        ctrl = batch.control[t + 1]
        if t < 2 or not ctrl.any():
            P.append(Tensor(gt_p[t + 1]))
            H.append(Tensor(gt_h[t + 1]))
            continue
        scene, agents, _ = batch.scene(P, H, [t])
        dist = policy(scene)
        if mode == "deterministic":
            act = pol.mode_action(dist)
        else:
            m = scene.num_nodes
            act = pol.sample_reparameterized(dist, rng.standard_normal((m, 2)), rng.random(m))
        pick = np.flatnonzero(ctrl[agents])
        act = ad.take(act, pick)
        if not np.all(np.isfinite(act.data)):
            raise SimulationError(f"non-finite action at step {t}", step=t)
        idx = agents[pick]
        actions[t] = (act, idx)
        full = ad.segment_sum(act, idx, batch.n)
        moved_p, moved_h = geo.apply_action(P[t], H[t], full)
        c = ctrl[:, None]
        nxt = ad.where(c, moved_p, gt_p[t + 1])
        nxt.op = "sim_step"
        P.append(nxt)
        H.append(ad.where(c, moved_h, gt_h[t + 1]))
    return GeneratedTrajectory(batch, P, H, actions, mode)


def bc_scene(batch: Batch):
    """Ground-truth scene of every step ``t`` whose successor state is controlled.

    Returns ``(scene, node_agent, node_time, target_mask)``; ``target_mask``
    marks nodes whose next state is controlled.
    """
    times = [t for t in range(2, batch.T) if batch.control[t + 1].any()]
    scene, agents, tt = batch.scene(batch.positions, batch.headings, times)
    target = batch.control[tt + 1, agents]
    return scene, agents, tt, target
