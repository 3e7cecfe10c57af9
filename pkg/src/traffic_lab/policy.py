"""Encoder, graph message passing and decoder heads of the driving policy.

Every agent is a node of a graph whose edges connect agents closer than a
connectivity radius.  Inputs are built from a three-frame position history
so that all features are differentiable functions of the simulated states and
invariant under global rigid motion.

Batches are flat: nodes from several scenes (rollouts, time steps) are
concatenated and carry a ``groups`` id; edges never cross groups.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor
from .errors import ConfigError, ContractError, FormatError
from .scene import DT, MultiAgentState, POINTS_PER_SEGMENT, crop_pairs

HEAD_KINDS = ("deterministic", "gaussian", "gmm", "discriminator")
SIGMA_MIN = 1e-3
LOGIT_CLAMP = 15.0
CHECKPOINT_FORMAT = 1

# fixed input scalings; keep pre-activations of order one
POS_SCALE = 50.0
SPEED_SCALE = 10.0
ACCEL_SCALE = 2.0
LENGTH_SCALE = 5.0
WIDTH_SCALE = 2.0
ACTION_SCALE = np.array([10.0, 1.0])
NODE_DIM = 6
EDGE_DIM = 12
POS_EMB_FREQS = 3
POINT_DIM = 2 + 2 * POS_EMB_FREQS + 2


@dataclass(frozen=True)
class PolicyConfig:
    embed_dim: int = 64
    heads: int = 4
    layers: int = 2
    components: int = 4
    radius: float = 75.0
    map_dim: int = 16
    head: str = "gaussian"
    residual: bool = True

    def __post_init__(self):
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"unknown head {self.head!r}")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        if self.radius <= 0 or self.layers < 0 or self.components < 1:
            raise ConfigError("invalid policy dimensions")


def head_width(cfg: PolicyConfig, kind=None) -> int:
    kind = kind or cfg.head
    return {"deterministic": 2, "gaussian": 4, "gmm": 5 * cfg.components,
            "discriminator": 1}[kind]


# -- parameters -----------------------------------------------------------------
def _linear_init(rng, n_in, n_out):
    bound = 1.0 / math.sqrt(n_in)
    return (rng.uniform(-bound, bound, size=(n_in, n_out)),
            rng.uniform(-bound, bound, size=n_out))


def param_shapes(cfg: PolicyConfig) -> dict:
    d, m = cfg.embed_dim, cfg.map_dim
    shapes = {}

    def lin(name, n_in, n_out, bias=True):
        shapes[f"{name}.w"] = (n_in, n_out)
        if bias:
            shapes[f"{name}.b"] = (n_out,)

    lin("node.0", NODE_DIM, d)
    lin("node.1", d, d)
    lin("edge.0", EDGE_DIM, d)
    lin("edge.1", d, d)
    lin("map.pn0", POINT_DIM, m)
    lin("map.pn1a", m, m)
    lin("map.pn1b", m, m, bias=False)
    lin("map.pn2a", m, m)
    lin("map.pn2b", m, m, bias=False)
    for name in ("q", "k", "v"):
        lin(f"map.attn.{name}", d if name == "q" else m, d, bias=False)
    lin("map.attn.o", d, d, bias=False)
    for k in range(cfg.layers):
        lin(f"mp{k}.edge.0", 3 * d, d)
        lin(f"mp{k}.edge.1", d, d)
        for name in ("q", "k", "v", "o"):
            lin(f"mp{k}.attn.{name}", d, d, bias=False)
    lin("head.0", d, d)
    lin("head.1", d, head_width(cfg))
    return shapes


def init_params(cfg: PolicyConfig, seed=0, rng=None) -> dict:
    """Uniform fan-in initialisation, zero biases; returns ``{name: Tensor}`` leaves.

    With a residual head the output layer starts at zero.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "head.1.w" and cfg.residual and cfg.head != "discriminator":
            # start as the constant-velocity policy
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
        elif name.endswith(".w"):
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        else:
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
    return params


def linear(x, params, name):
    return ad.linear(x, params[f"{name}.w"], params.get(f"{name}.b"))


def mlp2(x, params, name):
    return linear(ad.relu(linear(x, params, f"{name}.0")), params, f"{name}.1")


# -- scene inputs ---------------------------------------------------------------
class MapBank:
    """Segments of several maps concatenated, addressable by map id."""

    def __init__(self, maps):
        self.ids = list(maps)
        pts, types, self.offsets = [], [], {}
        start = 0
        for mid in self.ids:
            p, t = maps[mid].segments()
            self.offsets[mid] = (start, start + len(p))
            pts.append(p)
            types.append(t)
            start += len(p)
        self.points = (np.concatenate(pts) if pts
                       else np.zeros((0, POINTS_PER_SEGMENT, 2)))
        self.types = np.concatenate(types) if types else np.zeros(0, np.int64)

    def crop(self, positions, headings, map_ids):
        """``(node, segment)`` pairs for nodes at ``positions`` on ``map_ids``."""
        positions = np.asarray(positions)
        headings = np.asarray(headings)
        map_ids = np.asarray(map_ids)
        nodes, segs = [], []
        for mid in np.unique(map_ids):
            if mid not in self.offsets:
                continue
            lo, hi = self.offsets[mid]
            sel = np.flatnonzero(map_ids == mid)
            a, s = crop_pairs(self.points[lo:hi], positions[sel], headings[sel])
            nodes.append(sel[a])
            segs.append(s + lo)
        if not nodes:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        nodes = np.concatenate(nodes)
        segs = np.concatenate(segs)
        order = np.lexsort((segs, nodes))
        return nodes[order], segs[order]


@dataclass
class SceneInput:
    """Flat node set with a three-frame history.

    ``positions`` is ``(3, M, 2)`` ordered ``t-2, t-1, t``; ``headings`` is the
    heading at ``t``.  ``map_ids`` names each node's map in ``bank``.
    """
    positions: Tensor
    headings: Tensor
    agent_types: np.ndarray
    lengths: np.ndarray
    widths: np.ndarray
    groups: np.ndarray
    map_ids: np.ndarray | None = None
    bank: MapBank | None = None
    dt: float = DT

    def __post_init__(self):
        self.positions = ad._as_tensor(self.positions)
        self.headings = ad._as_tensor(self.headings)
        if self.positions.ndim != 3 or self.positions.shape[0] != 3:
            raise ContractError("node features need a 3-frame position history")
        m = self.positions.shape[1]
        self.agent_types = np.asarray(self.agent_types, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=float)
        self.widths = np.asarray(self.widths, dtype=float)
        self.groups = (np.zeros(m, np.int64) if self.groups is None
                       else np.asarray(self.groups, dtype=np.int64))

    @property
    def num_nodes(self):
        return self.positions.shape[1]

    def transformed(self, angle, translation, bank=None):
        """The scene moved rigidly; pass ``bank`` built from the moved maps to keep them aligned."""
        R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
        return SceneInput(self.positions.data @ R.T + translation, self.headings.data @ R.T,
                          self.agent_types, self.lengths, self.widths, self.groups,
                          self.map_ids, self.bank if bank is None else bank, self.dt)


def scene_from_rollout(rollout, t, bank=None, nodes=None):
    """Ground-truth scene of one rollout at step ``t`` (``t >= 2``).

    Nodes default to agents present at ``t-2``, ``t-1`` and ``t``.
    """
    if t < 2:
        raise ContractError("a scene needs two earlier frames")
    if nodes is None:
        nodes = np.flatnonzero(rollout.present[t - 2:t + 1].all(axis=0))
    return SceneInput(rollout.positions[t - 2:t + 1, nodes], rollout.headings[t, nodes],
                      rollout.agent_types[nodes], rollout.lengths[nodes],
                      rollout.widths[nodes], np.zeros(len(nodes), np.int64),
                      np.array([rollout.map_id] * len(nodes), dtype=object), bank, rollout.dt)


# -- features -------------------------------------------------------------------
def node_features(scene: SceneInput) -> Tensor:
    """Speed, signed longitudinal acceleration, type one-hot, length, width."""
    p = scene.positions
    d1 = p[2] - p[1]
    d0 = p[1] - p[0]
    v1 = geo.safe_norm(d1) / scene.dt
    v0 = geo.safe_norm(d0) / scene.dt
    acc = (v1 - v0) / scene.dt
    onehot = np.eye(2)[scene.agent_types]
    const = np.concatenate([onehot, (scene.lengths / LENGTH_SCALE)[:, None],
                            (scene.widths / WIDTH_SCALE)[:, None]], axis=1)
    return ad.concat([ad.stack([v1 / SPEED_SCALE, acc / ACCEL_SCALE], axis=-1),
                      Tensor(const)], axis=1)


def build_graph(state, radius=75.0, groups=None):
    """Directed edges ``src -> tgt`` for pairs closer than ``radius``, ordered by (tgt, src).

    ``state`` is a :class:`MultiAgentState`, a :class:`SceneInput` or an
    ``(M, 2)`` position array.  Absent agents of a MultiAgentState get no edges.
    """
    if radius <= 0:
        raise ContractError("radius must be positive")
    present = None
    if isinstance(state, MultiAgentState):
        pos = np.asarray(state.positions, dtype=float)
        present = np.asarray(state.present, dtype=bool)
    elif isinstance(state, SceneInput):
        pos = state.positions.data[2]
        groups = state.groups if groups is None else groups
    else:
        pos = np.asarray(state.data if isinstance(state, Tensor) else state, dtype=float)
    m = len(pos)
    if m < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    groups = np.zeros(m, np.int64) if groups is None else np.asarray(groups)
    order = np.argsort(groups, kind="stable")
    sg = groups[order]
    starts = np.flatnonzero(np.r_[True, sg[1:] != sg[:-1], True])
    src_all, tgt_all = [], []
    for a, b in zip(starts[:-1], starts[1:]):
        idx = order[a:b]
        if len(idx) < 2:
            continue
        q = pos[idx]
        dist = np.linalg.norm(q[:, None] - q[None], axis=-1)
        ok = (dist < radius) & ~np.eye(len(idx), dtype=bool)
        if present is not None:
            ok &= present[idx][:, None] & present[idx][None]
        s, t = np.nonzero(ok)
        src_all.append(idx[s])
        tgt_all.append(idx[t])
    if not src_all:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    src = np.concatenate(src_all)
    tgt = np.concatenate(tgt_all)
    o = np.lexsort((src, tgt))
    return src[o], tgt[o]


def edge_features(scene: SceneInput, src, tgt) -> Tensor:
    """Per edge: distance, velocity difference and source history in the target frame,
    (cos, sin) of the heading difference and TTC.  Shape ``(E, 12)``."""
    p = scene.positions
    h = scene.headings
    vel = (p[2] - p[1]) / scene.dt
    pt = ad.take(p[2], tgt)
    ht = ad.take(h, tgt)
    hist = [geo.to_local(ad.take(p[k], src), pt, ht) for k in range(3)]
    dist = geo.safe_norm(hist[2])
    vs = ad.take(vel, src)
    vt = ad.take(vel, tgt)
    dv = geo.rotate_to_local(vs - vt, ht)
    rel_h = geo.rotate_to_local(ad.take(h, src), ht)
    ttc = geo.time_to_collision(ad.take(p[2], src), vs, pt, vt)
    cols = [ad.reshape(dist / POS_SCALE, (-1, 1)), dv / SPEED_SCALE]
    cols += [x / POS_SCALE for x in hist]
    cols += [rel_h, ad.reshape(ttc / geo.TTC_MAX, (-1, 1))]
    return ad.concat(cols, axis=1)


def positional_embedding(n=POINTS_PER_SEGMENT, freqs=POS_EMB_FREQS) -> np.ndarray:
    """Sinusoidal embedding of point indices ``0..n-1``; shape ``(n, 2 * freqs)``."""
    k = np.arange(n)[:, None] / max(n - 1, 1)
    w = np.pi * 2.0 ** np.arange(freqs)[None]
    return np.concatenate([np.sin(k * w), np.cos(k * w)], axis=1)


# -- attention ------------------------------------------------------------------
def segment_softmax(scores: Tensor, seg, num_segments) -> Tensor:
    """Softmax of ``scores`` rows within each segment id (rows of one segment compete)."""
    shift = np.full((num_segments,) + scores.shape[1:], -np.inf)
    np.maximum.at(shift, seg, scores.data)
    e = ad.exp(scores - shift[seg])
    denom = ad.segment_sum(e, seg, num_segments)
    return e / ad.take(denom, seg)


def cross_attention(query, keys, values, seg, params, name, heads):
    """Per-target multi-head attention over the keys grouped by ``seg``; no residual."""
    n, d = query.shape
    dh = d // heads
    q = ad.reshape(linear(query, params, f"{name}.q"), (n, heads, dh))
    k = ad.reshape(linear(keys, params, f"{name}.k"), (-1, heads, dh))
    v = ad.reshape(linear(values, params, f"{name}.v"), (-1, heads, dh))
    score = (ad.take(q, seg) * k).sum(axis=-1) / math.sqrt(dh)
    alpha = segment_softmax(score, seg, n)
    out = ad.segment_sum(ad.reshape(alpha, (-1, heads, 1)) * v, seg, n)
    return linear(ad.reshape(out, (n, d)), params, f"{name}.o")


# -- network --------------------------------------------------------------------
def pointnet(points: Tensor, line_types, params) -> Tensor:
    """Three shared point layers with max-pool context; ``(P, 10, 2) -> (P, map_dim)``."""
    n = points.shape[0]
    npts = points.shape[1]
    w0 = params["map.pn0.w"]
    # the embedding and type inputs take only 2 * npts distinct values, so their
    # contribution is a small table gathered per segment
    codes = np.concatenate([np.broadcast_to(positional_embedding(npts), (2, npts, 2 * POS_EMB_FREQS)),
                            np.broadcast_to(np.eye(2)[:, None], (2, npts, 2))], axis=-1)
    table = ad.linear(Tensor(codes), w0[2:], params["map.pn0.b"])
    x = ad.linear(points / POS_SCALE, w0[0:2]) + ad.take(table, line_types)
    m = x.shape[-1]
    x = ad.reshape(ad.relu(x), (n * npts, m))
    for name in ("map.pn1", "map.pn2"):
        pooled = ad.reduce_max(ad.reshape(x, (n, npts, m)), axis=1)
        ctx = ad.reshape(linear(pooled, params, f"{name}b"), (n, 1, m))
        y = ad.reshape(linear(x, params, f"{name}a"), (n, npts, m)) + ctx
        x = ad.reshape(ad.relu(y), (n * npts, m))
    return ad.reduce_max(ad.reshape(x, (n, npts, m)), axis=1)


def embed_map(local_points, line_types, agent_embedding, pair_nodes, params, heads):
    """Fuse cropped map segments into agent embeddings with cross-attention plus residual.

    ``local_points`` ``(P, 10, 2)`` are segments already in their agent's frame
    and ``pair_nodes`` ``(P,)`` says which agent each segment belongs to.
    """
    if len(pair_nodes) == 0:
        return agent_embedding
    lines = pointnet(local_points, line_types, params)
    return agent_embedding + cross_attention(agent_embedding, lines, lines, pair_nodes,
                                             params, "map.attn", heads)


def encode(scene: SceneInput, params, cfg: PolicyConfig) -> Tensor:
    """Per-node embeddings ``(M, d)`` from node features and the cropped map."""
    h = mlp2(node_features(scene), params, "node")
    if scene.bank is None or scene.map_ids is None or scene.num_nodes == 0:
        return h
    pos_np = scene.positions.data[2]
    head_np = scene.headings.data
    nodes, segs = scene.bank.crop(pos_np, head_np, scene.map_ids)
    if len(nodes) == 0:
        return h
    local = geo.to_local(Tensor(scene.bank.points[segs]),
                         ad.reshape(ad.take(scene.positions[2], nodes), (-1, 1, 2)),
                         ad.reshape(ad.take(scene.headings, nodes), (-1, 1, 2)))
    return embed_map(local, scene.bank.types[segs], h, nodes, params, cfg.heads)


def message_pass(h, e, src, tgt, params, k, heads):
    """One edge update followed by target-side attention over incoming edges."""
    if len(src) == 0:
        return h, e
    e_new = mlp2(ad.concat([ad.take(h, src), ad.take(h, tgt), e], axis=1), params, f"mp{k}.edge")
    h_new = h + cross_attention(h, e_new, e_new, tgt, params, f"mp{k}.attn", heads)
    return h_new, e_new


def trunk(scene: SceneInput, params, cfg: PolicyConfig) -> Tensor:
    h = encode(scene, params, cfg)
    src, tgt = build_graph(scene, cfg.radius)
    if len(src):
        e = mlp2(edge_features(scene, src, tgt), params, "edge")
        for k in range(cfg.layers):
            h, e = message_pass(h, e, src, tgt, params, k, cfg.heads)
    return h


@dataclass
class ActionDistribution:
    kind: str
    mean: Tensor | None = None
    std: Tensor | None = None
    logits: Tensor | None = None
    score: Tensor | None = None
    score_logit: Tensor | None = None

    @property
    def weights(self) -> Tensor:
        return ad.softmax(self.logits, axis=-1)


def constant_velocity_action(scene: SceneInput) -> Tensor:
    """The last displacement expressed in the current frame; the action that keeps velocity."""
    p = scene.positions
    return geo.rotate_to_local(p[2] - p[1], scene.headings)


def decode(h, params, cfg: PolicyConfig, kind=None, prior=None) -> ActionDistribution:
    """Weight-shared MLP head mapping embeddings to per-agent outputs.

    ``prior`` (``(M, 2)``) is added to every action mean, so the network
    predicts a correction to it.
    """
    kind = kind or cfg.head
    if kind not in HEAD_KINDS:
        raise ConfigError(f"unknown head {kind!r}")
    if "head.1.w" not in params or params["head.1.w"].shape[1] != head_width(cfg, kind):
        raise ConfigError(f"parameters carry no {kind} head")
    out = mlp2(h, params, "head")
    n = out.shape[0]

    def shift(mean):
        if prior is None:
            return mean
        pr = ad._as_tensor(prior)
        return mean + (ad.reshape(pr, (n, 1, 2)) if mean.ndim == 3 else pr)

    if kind == "deterministic":
        return ActionDistribution(kind, mean=shift(out * ACTION_SCALE))
    if kind == "gaussian":
        return ActionDistribution(kind, mean=shift(out[:, 0:2] * ACTION_SCALE),
                                  std=ad.softplus(out[:, 2:4]) + SIGMA_MIN)
    if kind == "gmm":
        c = cfg.components
        logits = out[:, 0:c]
        mean = shift(ad.reshape(out[:, c:3 * c], (n, c, 2)) * ACTION_SCALE)
        std = ad.softplus(ad.reshape(out[:, 3 * c:5 * c], (n, c, 2))) + SIGMA_MIN
        return ActionDistribution(kind, mean=mean, std=std, logits=logits)
    logit = ad.clamp(ad.reshape(out, (n,)), -LOGIT_CLAMP, LOGIT_CLAMP)
    return ActionDistribution(kind, score=ad.sigmoid(logit), score_logit=logit)


def forward(scene: SceneInput, params, cfg: PolicyConfig, kind=None) -> ActionDistribution:
    kind = kind or cfg.head
    prior = None
    if cfg.residual and kind != "discriminator":
        prior = constant_velocity_action(scene)
    return decode(trunk(scene, params, cfg), params, cfg, kind, prior)


def sample_reparameterized(dist: ActionDistribution, noise, u=None) -> Tensor:
    """Differentiable sample: ``mean + std * noise`` of the (chosen) component.

    For mixtures the component is picked by inverse CDF of ``u`` over the
    weights; that choice carries no gradient.
    """
    noise = np.asarray(noise, dtype=float)
    if dist.kind == "gaussian":
        return dist.mean + dist.std * noise
    if dist.kind != "gmm":
        raise ContractError(f"cannot sample from a {dist.kind} head")
    w = dist.weights.data
    n, c = w.shape
    u = np.zeros(n) if u is None else np.broadcast_to(np.asarray(u, dtype=float), (n,))
    cdf = np.cumsum(w, axis=1)
    comp = np.minimum((cdf <= u[:, None]).sum(axis=1), c - 1)
    rows = np.arange(n) * c + comp
    mean = ad.take(ad.reshape(dist.mean, (n * c, 2)), rows)
    std = ad.take(ad.reshape(dist.std, (n * c, 2)), rows)
    return mean + std * noise


def mode_action(dist: ActionDistribution) -> Tensor:
    """Deterministic action: the mean, or the mean of the heaviest mixture component."""
    if dist.kind in ("deterministic", "gaussian"):
        return dist.mean
    if dist.kind == "gmm":
        n, c = dist.logits.shape
        comp = np.argmax(dist.logits.data, axis=1)
        return ad.take(ad.reshape(dist.mean, (n * c, 2)), np.arange(n) * c + comp)
    raise ContractError("a discriminator head produces no action")


# -- checkpoint IO ----------------------------------------------------------------
def save_tensors(directory, tensors: dict, meta: dict | None = None):
    """Write ``manifest.json`` plus a little-endian float64 blob ``tensors.bin``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset, blobs = [], 0, []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(_array(tensors[name]), dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(arr.reshape(-1))
    manifest = {"format_version": CHECKPOINT_FORMAT, "tensors": entries}
    manifest.update(meta or {})
    tmp = directory / "tensors.bin.tmp"
    (np.concatenate(blobs) if blobs else np.zeros(0, "<f8")).astype("<f8").tofile(tmp)
    tmp.replace(directory / "tensors.bin")
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_tensors(directory):
    """Inverse of :func:`save_tensors`; returns ``(arrays, manifest)``."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        blob = np.fromfile(directory / "tensors.bin", dtype="<f8")
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint at {directory}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise FormatError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    arrays = {}
    for e in manifest["tensors"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = blob[e["offset"]:e["offset"] + size].astype(np.float64).reshape(
            e["shape"])
    return arrays, manifest


def _array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)


def config_dict(cfg: PolicyConfig):
    return asdict(cfg)


def params_from_arrays(arrays, prefix=""):
    return {k[len(prefix):]: Tensor(v, requires_grad=True)
            for k, v in arrays.items() if k.startswith(prefix)}


@dataclass
class Policy:
    """A parameter set bound to its configuration."""
    cfg: PolicyConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: PolicyConfig, seed=0):
        return cls(cfg, init_params(cfg, seed))

    def __call__(self, scene: SceneInput, kind=None) -> ActionDistribution:
        return forward(scene, self.params, self.cfg, kind)

    def save(self, directory, meta=None):
        m = {"policy": config_dict(self.cfg)}
        m.update(meta or {})
        save_tensors(directory, self.params, m)

    @classmethod
    def load(cls, directory, prefix=""):
        arrays, manifest = load_tensors(directory)
        cfg = PolicyConfig(**manifest["policy"])
        return cls(cfg, params_from_arrays(arrays, prefix))

