import math

import numpy as np
import pytest

from traffic_lab import autodiff as ad
from traffic_lab import policy as pol
from traffic_lab import scene as S
from traffic_lab.autodiff import Tensor
from traffic_lab.errors import ConfigError, ContractError, FormatError

from oracles import rotation


def perturbed(cfg, seed=0, scale=0.1):
    """Initial parameters plus noise, so that no layer is exactly zero."""
    params = pol.init_params(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for v in params.values():
        v.data = v.data + scale * rng.standard_normal(v.shape)
    return params


@pytest.fixture(scope="module")
def merge_scene():
    ds = S.generate_synthetic(S.SynthConfig(n_lanes=2, ramp=True, n_agents=6, seed=11))
    r = ds.rollouts[0]
    return ds, r, pol.MapBank(ds.maps)


def toy_scene(pos_now, speed=20.0, bank=None, map_ids=None):
    pos_now = np.asarray(pos_now, dtype=float)
    m = len(pos_now)
    step = np.array([speed * 0.5, 0.0])
    pos = np.stack([pos_now - 2 * step, pos_now - step, pos_now])
    return pol.SceneInput(pos, np.tile([1.0, 0.0], (m, 1)), np.zeros(m, int), np.full(m, 4.5),
                          np.full(m, 1.9), None, map_ids, bank)


# -- graph ------------------------------------------------------------------------
def test_build_graph_examples():
    src, tgt = pol.build_graph(np.array([[0.0, 0.0], [10.0, 0.0]]), 75.0)
    assert sorted(zip(src.tolist(), tgt.tolist())) == [(0, 1), (1, 0)]
    src, tgt = pol.build_graph(np.array([[0.0, 0.0], [100.0, 0.0]]), 75.0)
    assert len(src) == 0
    src, tgt = pol.build_graph(np.array([[0.0, 0.0]]), 75.0)
    assert len(src) == 0


def test_build_graph_ordering_and_groups(rng):
    pos = rng.uniform(0, 60, (7, 2))
    groups = np.array([0, 0, 1, 1, 1, 0, 2])
    src, tgt = pol.build_graph(pos, 75.0, groups)
    pairs = list(zip(tgt.tolist(), src.tolist()))
    assert pairs == sorted(pairs)
    assert np.all(groups[src] == groups[tgt]) and np.all(src != tgt)
    brute = {(i, j) for i in range(7) for j in range(7)
             if i != j and groups[i] == groups[j] and np.linalg.norm(pos[i] - pos[j]) < 75}
    assert set(zip(src.tolist(), tgt.tolist())) == brute


def test_missing_history_raises():
    with pytest.raises(ContractError):
        pol.SceneInput(np.zeros((2, 3, 2)), np.tile([1.0, 0.0], (3, 1)), [0] * 3, [4.5] * 3,
                       [1.9] * 3, None)


# -- map embedding ------------------------------------------------------------------
def test_embed_map_without_polylines_is_identity():
    cfg = pol.PolicyConfig()
    params = perturbed(cfg)
    h = Tensor(np.random.default_rng(0).normal(size=(3, cfg.embed_dim)))
    out = pol.embed_map(Tensor(np.zeros((0, 10, 2))), np.zeros(0, int), h, np.zeros(0, int),
                        params, cfg.heads)
    assert out is h


def test_embed_map_duplicate_polylines(rng):
    cfg = pol.PolicyConfig()
    params = perturbed(cfg)
    h = Tensor(rng.normal(size=(2, cfg.embed_dim)))
    pts = Tensor(rng.uniform(-50, 50, (5, 10, 2)))
    types = np.array([0, 1, 1, 0, 1])
    nodes = np.array([0, 0, 0, 1, 1])
    once = pol.embed_map(pts, types, h, nodes, params, cfg.heads).data
    twice_pts = ad.concat([pts, pts], axis=0)
    twice = pol.embed_map(twice_pts, np.r_[types, types], h, np.r_[nodes, nodes], params,
                          cfg.heads).data
    assert np.abs(once - twice).max() < 1e-6


def test_encode_rigid_invariance(merge_scene):
    ds, r, bank = merge_scene
    cfg = pol.PolicyConfig()
    params = perturbed(cfg)
    sc = pol.scene_from_rollout(r, 6, bank)
    base = pol.encode(sc, params, cfg).data
    m = ds.maps[r.map_id]
    rng = np.random.default_rng(5)
    for _ in range(5):
        a, t = rng.uniform(-math.pi, math.pi), rng.uniform(-500, 500, 2)
        moved = sc.transformed(a, t, pol.MapBank({m.map_id: m.transformed(a, t)}))
        assert np.abs(pol.encode(moved, params, cfg).data - base).max() < 1e-6


def test_identical_agents_get_identical_embeddings():
    cfg = pol.PolicyConfig()
    params = perturbed(cfg)
    sc = toy_scene([[0.0, 0.0], [500.0, 0.0]])
    h = pol.encode(sc, params, cfg).data
    assert np.array_equal(h[0], h[1])


# -- message passing -----------------------------------------------------------------
def test_message_pass_without_edges():
    cfg = pol.PolicyConfig()
    params = perturbed(cfg)
    h = Tensor(np.ones((3, cfg.embed_dim)))
    out, e = pol.message_pass(h, None, np.zeros(0, int), np.zeros(0, int), params, 0, cfg.heads)
    assert out is h


def test_message_pass_reaches_neighbours():
    cfg = pol.PolicyConfig()
    params = perturbed(cfg)
    sc = toy_scene([[0.0, 0.0], [20.0, 3.0], [400.0, 0.0]])
    h0 = pol.encode(sc, params, cfg)
    src, tgt = pol.build_graph(sc, cfg.radius)
    e0 = pol.mlp2(pol.edge_features(sc, src, tgt), params, "edge")
    base = h0.data

    def out_row(j, hin):
        return pol.message_pass(Tensor(hin), e0, src, tgt, params, 0, cfg.heads)[0].data[j]

    bumped = base.copy()
    bumped[0] += 1e-3
    assert np.abs(out_row(1, bumped) - out_row(1, base)).max() > 1e-8
    assert np.array_equal(out_row(2, bumped), out_row(2, base))


# -- heads ------------------------------------------------------------------------
def test_zeroed_gaussian_head():
    cfg = pol.PolicyConfig(head="gaussian", residual=False)
    params = perturbed(cfg)
    params["head.1.w"].data[:] = 0
    params["head.1.b"].data[:] = 0
    dist = pol.decode(Tensor(np.ones((4, cfg.embed_dim))), params, cfg)
    assert np.array_equal(dist.mean.data, np.zeros((4, 2)))
    assert np.allclose(dist.std.data, math.log(2) + 1e-3)
    assert dist.std.data[0, 0] == pytest.approx(0.6941, abs=1e-4)


def test_gmm_uniform_weights():
    cfg = pol.PolicyConfig(head="gmm", components=4)
    params = perturbed(cfg)
    params["head.1.w"].data[:] = 0
    params["head.1.b"].data[:] = 0
    dist = pol.decode(Tensor(np.ones((3, cfg.embed_dim))), params, cfg)
    assert np.allclose(dist.weights.data, 0.25)
    assert np.all(dist.std.data >= pol.SIGMA_MIN)


def test_discriminator_range(rng):
    cfg = pol.PolicyConfig(head="discriminator")
    params = perturbed(cfg, scale=1.0)
    h = Tensor(rng.normal(scale=50.0, size=(1000, cfg.embed_dim)))
    score = pol.decode(h, params, cfg).score.data
    assert score.shape == (1000,) and np.all((score >= 0) & (score <= 1))


def test_unknown_head_raises():
    cfg = pol.PolicyConfig(head="gaussian")
    with pytest.raises(ConfigError):
        pol.decode(Tensor(np.ones((1, cfg.embed_dim))), pol.init_params(cfg), cfg, kind="beta")
    with pytest.raises(ConfigError):
        pol.decode(Tensor(np.ones((1, cfg.embed_dim))), pol.init_params(cfg), cfg, kind="gmm")


# -- sampling -----------------------------------------------------------------------
def test_reparameterized_sampling(rng):
    mean = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    std = Tensor(rng.uniform(0.5, 1.0, (3, 2)), requires_grad=True)
    dist = pol.ActionDistribution("gaussian", mean=mean, std=std)
    assert np.array_equal(pol.sample_reparameterized(dist, np.zeros((3, 2))).data, mean.data)
    noise = rng.normal(size=(3, 2))
    for k in range(2):
        err = ad.grad_check(
            lambda m: pol.sample_reparameterized(
                pol.ActionDistribution("gaussian", mean=m, std=std), noise)[:, k].sum(), mean)
        assert err < 1e-6
    mean.zero_grad()
    std.zero_grad()
    pol.sample_reparameterized(dist, noise).sum().backward()
    assert np.allclose(mean.grad, 1.0) and np.allclose(std.grad, noise)


def test_single_component_gmm_matches_gaussian(rng):
    mean, std = rng.normal(size=(4, 2)), rng.uniform(0.3, 1.0, (4, 2))
    noise = rng.normal(size=(4, 2))
    g = pol.ActionDistribution("gaussian", mean=Tensor(mean), std=Tensor(std))
    m = pol.ActionDistribution("gmm", mean=Tensor(mean[:, None]), std=Tensor(std[:, None]),
                               logits=Tensor(np.zeros((4, 1))))
    assert np.allclose(pol.sample_reparameterized(g, noise).data,
                       pol.sample_reparameterized(m, noise, rng.random(4)).data)


def test_gmm_component_frequencies(rng):
    logits = np.log(np.array([[0.2, 0.5, 0.3]]))
    mean = np.array([[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]])
    dist = pol.ActionDistribution("gmm", mean=Tensor(mean), std=Tensor(np.full((1, 3, 2), 1e-3)),
                                  logits=Tensor(logits))
    picks = [pol.sample_reparameterized(dist, np.zeros((1, 2)), rng.random(1)).data[0, 0]
             for _ in range(4000)]
    freq = np.bincount(np.round(picks).astype(int), minlength=3) / 4000
    assert np.allclose(freq, [0.2, 0.5, 0.3], atol=0.03)


def test_sampling_requires_stochastic_head():
    with pytest.raises(ContractError):
        pol.sample_reparameterized(pol.ActionDistribution("deterministic", mean=Tensor(
            np.zeros((1, 2)))), np.zeros((1, 2)))


# -- end to end -----------------------------------------------------------------------
@pytest.mark.parametrize("head", ["deterministic", "gaussian", "gmm", "discriminator"])
def test_forward_rigid_invariance_and_permutation(merge_scene, head):
    ds, r, bank = merge_scene
    cfg = pol.PolicyConfig(head=head)
    params = perturbed(cfg)
    sc = pol.scene_from_rollout(r, 8, bank)
    base = pol.forward(sc, params, cfg)
    out = lambda d: d.score.data if head == "discriminator" else pol.mode_action(d).data  # noqa
    m = ds.maps[r.map_id]
    a, t = 2.1, np.array([-300.0, 800.0])
    moved = pol.forward(sc.transformed(a, t, pol.MapBank({m.map_id: m.transformed(a, t)})),
                        params, cfg)
    assert np.abs(out(moved) - out(base)).max() < 1e-6
    perm = np.random.default_rng(0).permutation(sc.num_nodes)
    ps = pol.SceneInput(sc.positions.data[:, perm], sc.headings.data[perm], sc.agent_types[perm],
                        sc.lengths[perm], sc.widths[perm], sc.groups[perm], sc.map_ids[perm],
                        bank)
    assert np.abs(out(pol.forward(ps, params, cfg)) - out(base)[perm]).max() < 1e-9


def test_actions_are_differentiable_in_positions(merge_scene):
    ds, r, bank = merge_scene
    cfg = pol.PolicyConfig(head="deterministic")
    params = perturbed(cfg)
    sc = pol.scene_from_rollout(r, 8, bank)
    pos = Tensor(sc.positions.data, requires_grad=True)
    sc2 = pol.SceneInput(pos, sc.headings, sc.agent_types, sc.lengths, sc.widths, sc.groups,
                         sc.map_ids, bank)
    pol.forward(sc2, params, cfg).mean.sum().backward()
    assert pos.grad is not None and np.abs(pos.grad).sum() > 0


def test_residual_policy_starts_at_constant_velocity():
    cfg = pol.PolicyConfig(head="deterministic")
    params = pol.init_params(cfg, seed=3)
    sc = toy_scene([[0.0, 0.0], [30.0, 3.5]], speed=25.0)
    assert np.allclose(pol.forward(sc, params, cfg).mean.data, [[12.5, 0.0], [12.5, 0.0]])


def test_checkpoint_round_trip_is_bit_identical(tmp_path, merge_scene):
    ds, r, bank = merge_scene
    cfg = pol.PolicyConfig(head="gmm")
    policy = pol.Policy(cfg, perturbed(cfg))
    policy.save(tmp_path / "ck")
    back = pol.Policy.load(tmp_path / "ck")
    sc = pol.scene_from_rollout(r, 5, bank)
    a, b = policy(sc), back(sc)
    for x, y in ((a.mean, b.mean), (a.std, b.std), (a.logits, b.logits)):
        assert x.data.tobytes() == y.data.tobytes()
    raw = np.fromfile(tmp_path / "ck" / "tensors.bin", dtype="<f8")
    assert raw.size == sum(v.size for v in policy.params.values())


def test_checkpoint_version_checked(tmp_path):
    pol.save_tensors(tmp_path, {"a": np.ones(2)}, {"format_version": 7})
    with pytest.raises(FormatError):
        pol.load_tensors(tmp_path)


def test_edge_features_invariant(rng):
    pos_now = rng.uniform(-20, 20, (4, 2))
    sc = toy_scene(pos_now)
    src, tgt = pol.build_graph(sc, 75.0)
    base = pol.edge_features(sc, src, tgt).data
    R = rotation(0.9)
    moved = pol.SceneInput(sc.positions.data @ R.T + 7.0, sc.headings.data @ R.T,
                           sc.agent_types, sc.lengths, sc.widths, None)
    assert np.abs(pol.edge_features(moved, src, tgt).data - base).max() < 1e-9
