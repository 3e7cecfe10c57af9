"""Training objectives: likelihood and weighted-MSE cloning, closed-loop imitation,
circle-overlap collision penalty and the adversarial terms.

All functions are pure and return scalar :class:`Tensor` objects.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor
from .errors import ConfigError, ContractError

LOG_2PI = math.log(2.0 * math.pi)
COLLISION_PAIR_RADIUS = 20.0
N_CIRCLES = 5


@dataclass(frozen=True)
class LossWeights:
    alpha_x: float = 0.10472
    alpha_y: float = 65.177
    beta_orient: float = 6209.8
    beta_col: float = 4.0
    alpha_adv: float = 1.0
    beta_imit: float = 1.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"loss weight {k} must be finite and >= 0, got {v}")


WMSE_WEIGHTS = LossWeights()
# the collision variant was tuned with its own axis weights
DS_COL_WEIGHTS = LossWeights(alpha_x=0.1, alpha_y=2.8, beta_col=4.0)
MSE_WEIGHTS = LossWeights(alpha_x=1.0, alpha_y=1.0)


def wmse(pred, target, w: LossWeights = WMSE_WEIGHTS) -> Tensor:
    """``alpha_x dx^2 + alpha_y dy^2`` per pair (reduces the last axis)."""
    d = ad.sub(pred, target)
    return w.alpha_x * d[..., 0] ** 2 + w.alpha_y * d[..., 1] ** 2


def _masked_mean(x: Tensor, mask=None) -> Tensor:
    if mask is None:
        return x.mean()
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return Tensor(0.0)
    return (x * mask).sum() / n


# -- behavioural cloning ------------------------------------------------------------
def gaussian_log_prob(x, mean, std) -> Tensor:
    """Log density of a diagonal 2-D Gaussian, summed over the last axis."""
    z = ad.sub(x, mean) / std
    return (-0.5 * z ** 2 - ad.log(std) - 0.5 * LOG_2PI).sum(axis=-1)


def log_prob(dist, actions) -> Tensor:
    """Per-row log likelihood of ``actions`` under a gaussian or gmm head."""
    actions = np.asarray(actions.data if isinstance(actions, Tensor) else actions, dtype=float)
    if dist.kind == "gaussian":
        return gaussian_log_prob(actions, dist.mean, dist.std)
    if dist.kind == "gmm":
        comp = gaussian_log_prob(actions[:, None, :], dist.mean, dist.std)
        return ad.logsumexp(ad.log_softmax(dist.logits, axis=-1) + comp, axis=-1)
    raise ContractError(f"likelihood needs a gaussian or gmm head, got {dist.kind}")


def bc_nll(dist, actions, mask=None) -> Tensor:
    """Mean negative log likelihood of the recorded actions."""
    return _masked_mean(-log_prob(dist, actions), mask)


def heading_from_action(action) -> Tensor:
    """Local-frame heading after an action; ``(1, 0)`` when the agent does not move."""
    action = ad._as_tensor(action)
    _, h = geo.apply_action(np.zeros(action.shape), np.broadcast_to([1.0, 0.0], action.shape),
                            action)
    return h


def bc_wmse_orientation(pred_action, gt_action, gt_heading, w: LossWeights = WMSE_WEIGHTS,
                        mask=None, pred_heading=None) -> Tensor:
    """Mean of the weighted position error plus the weighted heading MSE.

    Headings are unit vectors in the agent's frame at ``t``; the heading MSE
    averages over the two components.  ``pred_heading`` defaults to the
    heading implied by ``pred_action``.
    """
    if pred_heading is None:
        pred_heading = heading_from_action(pred_action)
    pos = wmse(pred_action, gt_action, w)
    orient = (ad.sub(pred_heading, gt_heading) ** 2).mean(axis=-1)
    return _masked_mean(pos + w.beta_orient * orient, mask)


# -- closed loop ----------------------------------------------------------------
def ds_loss(gen_positions, gt_positions, gt_headings, mask, w: LossWeights = WMSE_WEIGHTS):
    """Sum over steps of the mean weighted error over controlled agents.

    Errors at step ``t`` are measured in the frame of the recorded pose at
    ``t - 1``.  ``gen_positions`` is ``(T+1, N, 2)`` (Tensor or list of
    ``(N, 2)`` Tensors); ``mask`` is ``(T+1, N)``.
    """
    if isinstance(gen_positions, (list, tuple)):
        gen_positions = ad.stack([ad._as_tensor(p) for p in gen_positions], axis=0)
    gen_positions = ad._as_tensor(gen_positions)
    gt_positions = np.asarray(gt_positions, dtype=float)
    gt_headings = np.asarray(gt_headings, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if gen_positions.shape != gt_positions.shape or mask.shape != gt_positions.shape[:2]:
        raise ContractError("generated and recorded trajectories are not aligned")
    origin = gt_positions[:-1]
    frame = gt_headings[:-1]
    gen_local = geo.to_local(gen_positions[1:], origin, frame)
    with ad.no_grad():
        gt_local = geo.to_local(gt_positions[1:], origin, frame).data
    err = wmse(gen_local, gt_local, w)
    counts = mask[1:].sum(axis=1)
    scale = np.where(mask[1:], 1.0 / np.maximum(counts, 1)[:, None], 0.0)
    return (err * scale).sum()


def collision_pairs(positions, present, radius=COLLISION_PAIR_RADIUS, mask=None, groups=None):
    """``(t, i, j)`` index arrays of unordered agent pairs closer than ``radius``.

    With ``mask`` only pairs with at least one flagged agent are kept; with
    ``groups`` pairs must share a group.
    """
    positions = np.asarray(positions, dtype=float)
    present = np.asarray(present, dtype=bool)
    n = positions.shape[1]
    ii, jj = np.triu_indices(n, 1)
    if groups is not None:
        g = np.asarray(groups)
        same = g[ii] == g[jj]
        ii, jj = ii[same], jj[same]
    d = np.linalg.norm(positions[:, ii] - positions[:, jj], axis=-1)
    ok = (d < radius) & present[:, ii] & present[:, jj]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        ok &= mask[:, ii] | mask[:, jj]
    t, k = np.nonzero(ok)
    return t, ii[k], jj[k]


def collision_loss(positions, headings, lengths, widths, present=None, mask=None,
                   groups=None, radius=COLLISION_PAIR_RADIUS) -> Tensor:
    """Sum over steps, nearby pairs and circle pairs of ``relu(r_i + r_j - d)^2``.

    Each box is covered by five circles of radius ``width / 2`` along its axis.
    """
    if isinstance(positions, (list, tuple)):
        positions = ad.stack([ad._as_tensor(p) for p in positions], axis=0)
    if isinstance(headings, (list, tuple)):
        headings = ad.stack([ad._as_tensor(h) for h in headings], axis=0)
    positions, headings = ad._as_tensor(positions), ad._as_tensor(headings)
    lengths = np.asarray(lengths, dtype=float)
    widths = np.asarray(widths, dtype=float)
    steps, n = positions.shape[:2]
    present = np.ones((steps, n), bool) if present is None else present
    t, i, j = collision_pairs(positions.data, present, radius, mask, groups)
    if len(t) == 0:
        return Tensor(0.0) if not positions.requires_grad else positions.sum() * 0.0
    offs = geo.circle_offsets(lengths, widths, N_CIRCLES)
    flat_p = ad.reshape(positions, (steps * n, 2))
    flat_h = ad.reshape(headings, (steps * n, 2))

    def centers(a):
        rows = t * n + a
        p = ad.reshape(ad.take(flat_p, rows), (-1, 1, 2))
        h = ad.reshape(ad.take(flat_h, rows), (-1, 1, 2))
        return p + h * offs[a][:, :, None]

    ci = ad.reshape(centers(i), (-1, N_CIRCLES, 1, 2))
    cj = ad.reshape(centers(j), (-1, 1, N_CIRCLES, 2))
    dist = geo.safe_norm(ci - cj)
    reach = (widths[i] + widths[j])[:, None, None] / 2.0
    return (ad.relu(reach - dist) ** 2).sum()


# -- adversarial ----------------------------------------------------------------
def _neg_log_score(dist_or_score, positive: bool) -> Tensor:
    """``-log D`` (``positive``) or ``-log(1 - D)`` per row."""
    logit = getattr(dist_or_score, "score_logit", None)
    if logit is not None:
        return ad.softplus(-logit if positive else logit)
    score = ad._as_tensor(getattr(dist_or_score, "score", dist_or_score))
    return -ad.log(score) if positive else -ad.log(1.0 - score)


def mgail_d_loss(d_gt, d_gen, mask_gt=None, mask_gen=None) -> Tensor:
    """Discriminator cross entropy: ``E[-log D(gt)] + E[-log(1 - D(gen))]``.

    Inputs are discriminator outputs (distributions with logits, or score
    Tensors); the generated side should be computed from detached states.
    """
    return _masked_mean(_neg_log_score(d_gt, True), mask_gt) + \
        _masked_mean(_neg_log_score(d_gen, False), mask_gen)


def mgail_g_loss(d_gen, mask=None) -> Tensor:
    """Generator objective ``E[log(1 - D(gen))]`` (minimised)."""
    return -_masked_mean(_neg_log_score(d_gen, False), mask)


def combine(terms, log=None) -> Tensor:
    """Weighted sum of ``(loss, weight)`` or ``(name, loss, weight)`` terms.

    When ``log`` is a dict the unweighted value of each named term is stored.
    """
    total = None
    for k, term in enumerate(terms):
        if len(term) == 3:
            name, loss, weight = term
        else:
            (loss, weight), name = term, f"term{k}"
        if log is not None:
            log[name] = float(ad._as_tensor(loss).data)
        part = ad._as_tensor(loss) * float(weight)
        total = part if total is None else total + part
    if total is None:
        raise ContractError("combine needs at least one term")
    return total


# combination weights (adversarial, imitation)
COMBINATION_WEIGHTS = {
    "mgail_bc": (50.0, 1.0),
    "mgail_ds": (1.0, 1.0),
    "mgail_ds_col": (5.0, 1.0),
}
