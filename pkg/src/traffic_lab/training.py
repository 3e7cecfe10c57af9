"""Optimiser, learning-rate schedule and the training loops of every method.

Open-loop cloning fits one-step actions on recorded states.  Closed-loop
methods roll the policy out over the whole snippet and backpropagate through
time.  Adversarial methods alternate one discriminator and one generator
update per batch.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import autodiff as ad
from . import geometry as geo
from . import losses as L
from . import policy as pol
from . import simulator as sim
from .errors import ConfigError, TrainingError

log = logging.getLogger(__name__)

METHODS = (
    "bc_gauss_ll", "bc_gmm_ll", "bc_wmse_orient", "ds_mse", "ds_wmse", "ds_wmse_col",
    "mgail_bc_gauss", "mgail_bc_gmm", "mgail_ds_gauss", "mgail_ds_gmm",
    "mgail_ds_col_gauss", "mgail_ds_col_gmm",
)
CONTROL_MODES = ("all_agents", "single_agent")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# per-method optimiser settings: lr, gamma, n_step, and for adversarial
# methods the discriminator lr
_HYPER = {
    "bc_gauss_ll": dict(lr=1e-3, lr_gamma=0.95, lr_step=2),
    "bc_gmm_ll": dict(lr=1e-3, lr_gamma=0.99, lr_step=2),
    "bc_wmse_orient": dict(lr=5e-4, lr_gamma=0.99, lr_step=1),
    "ds_mse": dict(lr=1e-3, lr_gamma=0.99, lr_step=2),
    "ds_wmse": dict(lr=1e-3, lr_gamma=0.99, lr_step=2),
    "ds_wmse_col": dict(lr=2.5e-5, lr_gamma=0.99, lr_step=2),
    "mgail_bc_gauss": dict(lr=2e-5, disc_lr=2e-5, lr_gamma=0.99, lr_step=2),
    "mgail_bc_gmm": dict(lr=5e-5, disc_lr=1e-4, lr_gamma=0.5, lr_step=20),
    "mgail_ds_gauss": dict(lr=5e-5, disc_lr=1e-4, lr_gamma=0.5, lr_step=40),
    "mgail_ds_gmm": dict(lr=1e-4, disc_lr=2e-4, lr_gamma=0.5, lr_step=20),
    "mgail_ds_col_gauss": dict(lr=5e-5, disc_lr=1e-3, lr_gamma=0.5, lr_step=40),
    "mgail_ds_col_gmm": dict(lr=5e-5, disc_lr=1e-3, lr_gamma=0.5, lr_step=40),
}


def method_head(method) -> str:
    if method.startswith("bc_gauss") or method.endswith("_gauss"):
        return "gaussian"
    if method.startswith("bc_gmm") or method.endswith("_gmm"):
        return "gmm"
    return "deterministic"


def method_family(method) -> str:
    if method.startswith("mgail"):
        return "mgail"
    if method.startswith("ds"):
        return "ds"
    return "bc"


def pretrain_method(method):
    """The cloning method a closed-loop method starts from (None for cloning)."""
    fam = method_family(method)
    if fam == "bc":
        return None
    if fam == "ds":
        return "bc_wmse_orient"
    return "bc_gauss_ll" if method_head(method) == "gaussian" else "bc_gmm_ll"


def default_weights(method) -> L.LossWeights:
    if method == "ds_mse":
        return L.MSE_WEIGHTS
    if method.startswith("ds_wmse_col") or method.startswith("mgail_ds_col"):
        base = L.DS_COL_WEIGHTS
    else:
        base = L.WMSE_WEIGHTS
    if method.startswith("mgail"):
        key = ("mgail_ds_col" if "_col" in method else
               "mgail_ds" if "_ds" in method else "mgail_bc")
        adv, imit = L.COMBINATION_WEIGHTS[key]
        base = dataclasses.replace(base, alpha_adv=adv, beta_imit=imit)
    return base


def default_hyperparameters(method) -> dict:
    """Optimiser settings and loss weights of ``method``."""
    if method not in _HYPER:
        raise ConfigError(f"unknown method {method!r}")
    out = dict(_HYPER[method])
    out.setdefault("disc_lr", None)
    out["weights"] = default_weights(method)
    return out


# -- optimiser --------------------------------------------------------------------
@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr,
              betas=ADAM_BETAS, eps=ADAM_EPS) -> AdamState:
    """Bias-corrected Adam update of ``params`` (Tensors, modified in place)."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def steplr(epoch, lr0, gamma, n_step) -> float:
    if not (0.0 < gamma <= 1.0) or n_step < 1:
        raise ConfigError("StepLR needs gamma in (0, 1] and n_step >= 1")
    return lr0 * gamma ** (epoch // n_step)


def clip_grads(grads: dict, max_norm) -> float:
    """Scale gradients to global norm ``max_norm``; returns the norm before clipping."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        s = max_norm / total
        for k in grads:
            grads[k] = grads[k] * s
    return total


def collect_grads(params: dict) -> dict:
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in params.items()}


def zero_grads(params: dict):
    for p in params.values():
        p.grad = None


# -- configuration ------------------------------------------------------------------
@dataclass
class TrainConfig:
    method: str = "bc_wmse_orient"
    control: str = "all_agents"
    epochs: int = 100
    batch_size: int = 8
    lr: float | None = None
    lr_gamma: float | None = None
    lr_step: int | None = None
    disc_lr: float | None = None
    weights: L.LossWeights | None = None
    seed: int = 0
    pretrain_checkpoint: str | None = None
    pretrain_epochs: int = 20
    policy: pol.PolicyConfig | None = None
    grad_clip: float | None = None
    target_ade: float | None = None
    eval_every: int = 10

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.control not in CONTROL_MODES:
            raise ConfigError(f"unknown control mode {self.control!r}")
        hp = default_hyperparameters(self.method)
        for k in ("lr", "lr_gamma", "lr_step", "disc_lr", "weights"):
            if getattr(self, k) is None:
                setattr(self, k, hp[k])
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**{**dataclasses.asdict(hp["weights"]),
                                            **self.weights})
        if isinstance(self.policy, dict):
            self.policy = pol.PolicyConfig(**self.policy)
        head = method_head(self.method)
        if self.policy is None:
            self.policy = pol.PolicyConfig(head=head)
        elif self.policy.head != head:
            self.policy = dataclasses.replace(self.policy, head=head)
        if self.grad_clip is None and self.method.startswith("mgail"):
            self.grad_clip = 10.0
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.lr > 0 or (self.method.startswith("mgail") and not (self.disc_lr or 0) > 0):
            raise ConfigError("learning rates must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")

    def to_dict(self):
        d = dataclasses.asdict(self)
        return {k: v for k, v in d.items() if v is not None}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_config(path, **overrides) -> TrainConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw = dict(raw.get("train", raw))
    raw.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return TrainConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def save_config(cfg: TrainConfig, path):
    with open(path, "wb") as fh:
        tomli_w.dump({"train": cfg.to_dict()}, fh)


# -- checkpoints --------------------------------------------------------------------
@dataclass
class Checkpoint:
    policy: pol.Policy
    discriminator: pol.Policy | None
    epoch: int
    seed: int
    config_hash: str
    config: dict
    gen_opt: AdamState | None = None
    disc_opt: AdamState | None = None

    def save(self, directory):
        tensors = {f"policy/{k}": v for k, v in self.policy.params.items()}
        if self.discriminator is not None:
            tensors.update({f"disc/{k}": v for k, v in self.discriminator.params.items()})
        for tag, opt in (("gen", self.gen_opt), ("disc", self.disc_opt)):
            if opt is None:
                continue
            tensors.update({f"adam/{tag}/m/{k}": v for k, v in opt.m.items()})
            tensors.update({f"adam/{tag}/v/{k}": v for k, v in opt.v.items()})
        meta = {"epoch": self.epoch, "seed": self.seed, "config_hash": self.config_hash,
                "config": self.config, "policy": pol.config_dict(self.policy.cfg),
                "adam_steps": {"gen": self.gen_opt.t if self.gen_opt else 0,
                               "disc": self.disc_opt.t if self.disc_opt else 0}}
        if self.discriminator is not None:
            meta["discriminator"] = pol.config_dict(self.discriminator.cfg)
        pol.save_tensors(directory, tensors, meta)


def load_checkpoint(directory) -> Checkpoint:
    arrays, meta = pol.load_tensors(directory)
    policy = pol.Policy(pol.PolicyConfig(**meta["policy"]),
                        pol.params_from_arrays(arrays, "policy/"))
    disc = None
    if "discriminator" in meta:
        disc = pol.Policy(pol.PolicyConfig(**meta["discriminator"]),
                          pol.params_from_arrays(arrays, "disc/"))
    opts = {}
    for tag in ("gen", "disc"):
        m = {k[len(f"adam/{tag}/m/"):]: v for k, v in arrays.items()
             if k.startswith(f"adam/{tag}/m/")}
        if m:
            v = {k[len(f"adam/{tag}/v/"):]: a for k, a in arrays.items()
                 if k.startswith(f"adam/{tag}/v/")}
            opts[tag] = AdamState(m, v, int(meta.get("adam_steps", {}).get(tag, 0)))
    return Checkpoint(policy, disc, int(meta["epoch"]), int(meta["seed"]),
                      meta["config_hash"], meta.get("config", {}), opts.get("gen"),
                      opts.get("disc"))


# -- per-method losses ------------------------------------------------------------
def _gt_local_targets(batch: sim.Batch, agents, tt):
    """Recorded action and next heading of each node, in its frame at ``t``."""
    p, h = batch.positions, batch.headings
    with ad.no_grad():
        act = geo.to_local(p[tt + 1, agents], p[tt, agents], h[tt, agents]).data
        nxt = geo.rotate_to_local(h[tt + 1, agents], h[tt, agents]).data
    return act, nxt


def bc_loss(policy: pol.Policy, batch: sim.Batch, method, weights):
    scene, agents, tt, target = sim.bc_scene(batch)
    if scene.num_nodes == 0 or not target.any():
        return None, {}
    act, nxt = _gt_local_targets(batch, agents, tt)
    dist = policy(scene)
    if method == "bc_wmse_orient":
        loss = L.bc_wmse_orientation(dist.mean, act, nxt, weights, mask=target)
    else:
        loss = L.bc_nll(dist, act, mask=target)
    return loss, {method: float(loss.data)}


def imitation_ds(traj: sim.GeneratedTrajectory, batch: sim.Batch, weights, collision: bool):
    terms = {}
    loss = L.ds_loss(traj.positions, batch.positions, batch.headings, batch.control, weights)
    terms["ds"] = float(loss.data)
    if collision:
        col = L.collision_loss(traj.positions, traj.headings, batch.lengths, batch.widths,
                               batch.present, mask=batch.control, groups=batch.owner)
        terms["collision"] = float(col.data)
        loss = loss + weights.beta_col * col
    return loss, terms


def disc_scene(batch: sim.Batch, positions, headings):
    """Scene of all steps with controlled agents; returns it with the scored-node mask."""
    times = [t for t in range(3, batch.T + 1) if batch.control[t].any()]
    scene, agents, tt = batch.scene(positions, headings, times)
    return scene, batch.control[tt, agents]


# -- training loop ------------------------------------------------------------------
@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    checkpoint_dir: Path | None = None


def _dataset_parts(dataset):
    maps = dataset.maps
    rollouts = list(dataset.rollouts)
    if not rollouts:
        raise ConfigError("training needs at least one rollout")
    return maps, rollouts


def evaluate_ade(policy, rollouts, bank, control="all_agents", batch_size=64):
    from . import metrics
    gen = generate(policy, rollouts, bank, control, batch_size=batch_size)
    return metrics.ade(gen, rollouts)


def generate(policy, rollouts, bank, control="all_agents", mode="deterministic",
             batch_size=64, rng=None):
    """Closed-loop rollouts without gradients; returns generated :class:`Rollout` objects."""
    out = []
    masks = sim.make_masks(rollouts, control)
    for k in range(0, len(rollouts), batch_size):
        chunk = rollouts[k:k + batch_size]
        traj = sim.rollout(policy, chunk, mode=mode, differentiable=False, rng=rng, bank=bank,
                           masks=masks[k:k + batch_size])
        out.extend(traj.to_rollouts())
    return out


def train(cfg: TrainConfig, dataset, out_dir=None, init: Checkpoint | None = None,
          progress=None) -> TrainResult:
    """Train ``cfg.method`` on ``dataset``; checkpoints go to ``out_dir`` each epoch."""
    maps, rollouts = _dataset_parts(dataset)
    bank = pol.MapBank(maps)
    rng = np.random.default_rng(cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    fam = method_family(cfg.method)

    if init is None and fam != "bc":
        init = _pretrained(cfg, dataset, out_dir)
    policy = pol.Policy(cfg.policy, pol.init_params(cfg.policy, rng=rng))
    if init is not None:
        _copy_params(init.policy.params, policy.params)
    disc = None
    if fam == "mgail":
        dcfg = dataclasses.replace(cfg.policy, head="discriminator")
        disc = pol.Policy(dcfg, pol.init_params(dcfg, rng=rng))
    gen_opt, disc_opt = AdamState(), (AdamState() if disc is not None else None)

    history, term_rows = [], []
    last_good = None
    for epoch in range(cfg.epochs):
        lr = steplr(epoch, cfg.lr, cfg.lr_gamma, cfg.lr_step)
        dlr = steplr(epoch, cfg.disc_lr, cfg.lr_gamma, cfg.lr_step) if disc is not None else None
        order = rng.permutation(len(rollouts))
        sums, counts = {}, {}
        for step, k in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = [rollouts[i] for i in order[k:k + cfg.batch_size]]
            if cfg.control == "single_agent":
                masks = [sim.control_mask_single(r, "proportional", rng) for r in chunk]
            else:
                masks = [sim.control_mask_all(r) for r in chunk]
            batch = sim.Batch(chunk, bank, masks)
            if not batch.control.any():
                continue
            terms = _train_batch(cfg, fam, policy, disc, batch, gen_opt, disc_opt, lr, dlr, rng)
            for name, v in terms.items():
                if not math.isfinite(v):
                    raise TrainingError(f"loss term {name} diverged at epoch {epoch}",
                                        last_checkpoint=last_good)
                sums[name] = sums.get(name, 0.0) + v
                counts[name] = counts.get(name, 0) + 1
                term_rows.append({"epoch": epoch, "step": step, "term": name, "value": v})
        row = {"epoch": epoch, "lr": lr}
        if dlr is not None:
            row["disc_lr"] = dlr
        row.update({k: sums[k] / counts[k] for k in sums})
        if cfg.target_ade is not None and ((epoch + 1) % cfg.eval_every == 0
                                           or epoch == cfg.epochs - 1):
            row["train_ade"] = evaluate_ade(policy, rollouts, bank)
        history.append(row)
        ckpt = Checkpoint(policy, disc, epoch + 1, cfg.seed, cfg.hash(), cfg.to_dict(),
                          gen_opt, disc_opt)
        if out_dir is not None:
            ckpt.save(out_dir / "checkpoint")
            last_good = str(out_dir / "checkpoint")
            _write_logs(out_dir, history, term_rows)
        if progress is not None:
            progress(row)
        log.info("epoch %d %s", epoch, {k: round(v, 5) for k, v in row.items()})
        if cfg.target_ade is not None and row.get("train_ade", math.inf) < cfg.target_ade:
            break
    return TrainResult(ckpt, history, out_dir / "checkpoint" if out_dir is not None else None)


def _train_batch(cfg, fam, policy, disc, batch, gen_opt, disc_opt, lr, dlr, rng):
    w = cfg.weights
    if fam == "bc":
        loss, terms = bc_loss(policy, batch, cfg.method, w)
        if loss is None:
            return {}
        _apply(loss, policy.params, gen_opt, lr, cfg.grad_clip)
        return terms
    if fam == "ds":
        traj = sim.rollout(policy, batch, mode="deterministic", differentiable=True)
        loss, terms = imitation_ds(traj, batch, w, collision=cfg.method == "ds_wmse_col")
        _apply(loss, policy.params, gen_opt, lr, cfg.grad_clip)
        return terms

    # adversarial: sample a rollout on the graph, update D on detached states, then G
    traj = sim.rollout(policy, batch, mode="sampled", differentiable=True, rng=rng)
    terms = {}
    gt_scene, gt_mask = disc_scene(batch, batch.positions, batch.headings)
    gen_np = [p.data for p in traj.positions]
    head_np = [h.data for h in traj.headings]
    gen_scene_det, gen_mask = disc_scene(batch, gen_np, head_np)
    d_gt = disc(gt_scene)
    d_gen = disc(gen_scene_det)
    d_loss = L.mgail_d_loss(d_gt, d_gen, gt_mask, gen_mask)
    terms["disc"] = float(d_loss.data)
    acc_gt = (d_gt.score.data[gt_mask] > 0.5).mean()
    acc_gen = (d_gen.score.data[gen_mask] < 0.5).mean()
    terms["disc_acc"] = float(0.5 * (acc_gt + acc_gen))
    _apply(d_loss, disc.params, disc_opt, dlr, cfg.grad_clip)

    gen_scene, gen_mask = disc_scene(batch, traj.positions, traj.headings)
    g_adv = L.mgail_g_loss(disc(gen_scene), gen_mask)
    if "_ds" in cfg.method:
        imit, extra = imitation_ds(traj, batch, w, collision="_col" in cfg.method)
    else:
        imit, extra = bc_loss(policy, batch, "bc_ll", w)
        if imit is None:
            imit, extra = ad.Tensor(0.0), {}
    terms.update(extra)
    terms["gen_adv"] = float(g_adv.data)
    loss = L.combine([("gen_adv", g_adv, w.alpha_adv), ("imitation", imit, w.beta_imit)])
    zero_grads(disc.params)
    _apply(loss, policy.params, gen_opt, lr, cfg.grad_clip)
    zero_grads(disc.params)
    return terms


def _apply(loss, params, opt, lr, clip):
    zero_grads(params)
    ad.backward(loss)
    grads = collect_grads(params)
    clip_grads(grads, clip)
    adam_step(params, grads, opt, lr)
    zero_grads(params)


def _copy_params(src, dst):
    for k, v in src.items():
        if k in dst and dst[k].shape == v.shape:
            dst[k].data = np.array(v.data)


def _pretrained(cfg: TrainConfig, dataset, out_dir):
    if cfg.pretrain_checkpoint:
        return load_checkpoint(cfg.pretrain_checkpoint)
    base = pretrain_method(cfg.method)
    pcfg = TrainConfig(method=base, control=cfg.control, epochs=cfg.pretrain_epochs,
                       batch_size=cfg.batch_size, seed=cfg.seed,
                       policy=dataclasses.replace(cfg.policy, head=method_head(base)))
    log.info("pretraining %s for %d epochs", base, cfg.pretrain_epochs)
    sub = out_dir / "pretrain" if out_dir is not None else None
    return train(pcfg, dataset, sub).checkpoint


def _write_logs(out_dir: Path, history, term_rows):
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = []
    for row in history:
        keys.extend(k for k in row if k not in keys)
    with open(out_dir / "train_log.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(history)
    with open(out_dir / "loss_terms.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "step", "term", "value"])
        w.writeheader()
        w.writerows(term_rows)
