"""Model components against independent straight-line reimplementations."""

import json

import numpy as np
import pytest

from floorgraph.autodiff import ShapeError, Tape
from floorgraph.features import FeatureMatrix
from floorgraph.floorplan import MultiAdjacency, TaskInstance
from floorgraph.model import (
    Model,
    ModelConfig,
    ModelConfigError,
    attention_coefficients,
    decode,
    encode,
    forward_graph,
    init_params,
    node_update,
    param_count,
    prepare_instances,
    update_topology,
)
from floorgraph.synthgen import GenParams, generate_record


def small_config(**overrides) -> ModelConfig:
    base = dict(
        k_iterations=2,
        gat_hidden=6,
        scoring_mlp_dims=(6, 3, 1),
        decoder_mlp_dims=(6, 3, 1),
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_state(cfg: ModelConfig, n: int, f: int, seed: int):
    rng = np.random.default_rng(seed)
    params = init_params(cfg, f, rng)
    x = rng.normal(size=(n, f))
    soft = rng.uniform(0.05, 0.95, size=(n, n))
    door = (soft + soft.T) / 2
    np.fill_diagonal(door, 1.0)
    soft2 = rng.uniform(0.05, 0.95, size=(n, n))
    wall = (soft2 + soft2.T) / 2
    np.fill_diagonal(wall, 1.0)
    a = {"door": door, "wall": wall, "spatial": np.clip(door + wall, 0, 1)}
    return params, x, a


# ----------------------------------------------------------------------
# straight-line reference implementations (independent of the tape)

def np_elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def np_leaky(x, leak):
    return np.where(x > 0, x, leak * x)


def np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def ref_mlp(params, prefix, vec, n_layers, leak=None):
    h = vec
    for i in range(n_layers):
        h = h @ params[f"{prefix}.W{i}"] + params[f"{prefix}.b{i}"][0]
        if i < n_layers - 1:
            h = np_elu(h)
    return h


def ref_update_topology(params, cfg, x, a, bid):
    """Entry-by-entry version of the topology refinement."""
    n = x.shape[0]
    out = {}
    for rel in cfg.encoder_relations():
        scores = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                vec = np.concatenate([x[i], [a[rel][i, j]], x[j]])
                scores[i, j] = ref_mlp(params, f"{bid}.score.{rel}", vec, len(cfg.scoring_mlp_dims))[0]
        mat = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                mat[i, j] = np_sigmoid(0.5 * (scores[i, j] + scores[j, i]))
        np.fill_diagonal(mat, 1.0)
        out[rel] = mat
    if "door" in out and "wall" in out:
        out["spatial"] = np.clip(out["door"] + out["wall"], 0.0, 1.0)
    return out


def ref_attention(params, cfg, x, a_rel, bid, rel):
    n = x.shape[0]
    att = params[f"{bid}.att.{rel}"][:, 0]
    beta = np.zeros((n, n))
    for i in range(n):
        neigh = [j for j in range(n) if a_rel[i, j] > cfg.neighborhood_tau]
        if not neigh:
            continue
        logits = np.array(
            [np_leaky(np.concatenate([x[i], x[j]]) @ att, cfg.attention_leak) for j in neigh]
        )
        e = np.exp(logits - logits.max())
        w = e / e.sum()
        for j, wj in zip(neigh, w):
            beta[i, j] = wj
    return beta


def ref_node_update(params, cfg, x, a, bid):
    """Per-node loop over relation subgraphs with softmax-mixed fusion."""
    n = x.shape[0]
    rels = cfg.encoder_relations()
    if len(rels) > 1:
        alpha = params[f"{bid}.alpha"][0]
        e = np.exp(alpha - alpha.max())
        mix = e / e.sum()
    else:
        mix = [1.0]
    out = np.zeros((n, params[f"{bid}.W.{rels[0]}"].shape[1]))
    for ridx, rel in enumerate(rels):
        beta = ref_attention(params, cfg, x, a[rel], bid, rel)
        w_r = params[f"{bid}.W.{rel}"]
        for i in range(n):
            acc = np.zeros(w_r.shape[1])
            for j in range(n):
                acc += beta[i, j] * a[rel][i, j] * (x[j] @ w_r)
            out[i] += mix[ridx] * acc
    return np_elu(out)


# ----------------------------------------------------------------------
# equivalence oracles

def test_update_topology_matches_naive_loop():
    cfg = small_config()
    params, x, a = random_state(cfg, n=4, f=7, seed=0)
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    out = update_topology(tape, leaves, cfg, tape.const(x), {r: tape.const(m) for r, m in a.items()}, "block0")
    ref = ref_update_topology(params, cfg, x, a, "block0")
    for rel in ("door", "wall", "spatial"):
        assert np.allclose(out[rel].data, ref[rel], atol=1e-12), rel


def test_update_topology_output_symmetric_with_unit_diagonal():
    cfg = small_config()
    params, x, a = random_state(cfg, n=5, f=4, seed=3)
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    out = update_topology(tape, leaves, cfg, tape.const(x), {r: tape.const(m) for r, m in a.items()}, "block0")
    for rel, t in out.items():
        assert np.allclose(t.data, t.data.T, atol=1e-15)
        assert np.allclose(np.diag(t.data), 1.0)
        assert np.all((t.data >= 0) & (t.data <= 1))


def test_spatial_channel_is_clamped_sum():
    n = 3
    tape = Tape()
    door = np.full((n, n), 0.9)
    wall = np.full((n, n), 0.4)
    s = tape.clamp(tape.add(tape.const(door), tape.const(wall)), 0.0, 1.0)
    assert np.allclose(s.data, 1.0)
    s2 = tape.clamp(tape.add(tape.const(door * 0), tape.const(wall * 0)), 0.0, 1.0)
    assert np.allclose(s2.data, 0.0)


def test_attention_single_neighbor_gets_weight_one():
    cfg = small_config()
    params, x, _ = random_state(cfg, n=4, f=7, seed=1)
    a_rel = np.eye(4)
    a_rel[0, 1] = a_rel[1, 0] = 1.0  # node 0's only neighbors: itself and 1
    a_rel[0, 0] = 0.0  # drop the self loop for this row
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    beta = attention_coefficients(tape, leaves, cfg, tape.const(x), tape.const(a_rel), "block0", "door")
    assert beta.data[0, 1] == pytest.approx(1.0, abs=1e-15)


def test_attention_equal_logits_uniform():
    cfg = small_config()
    rng = np.random.default_rng(2)
    params = init_params(cfg, 5, rng)
    x = np.tile(rng.normal(size=(1, 5)), (6, 1))  # identical features -> equal logits
    a_rel = np.ones((6, 6))
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    beta = attention_coefficients(tape, leaves, cfg, tape.const(x), tape.const(a_rel), "block0", "wall")
    assert np.allclose(beta.data, 1.0 / 6.0, atol=1e-12)


def test_attention_rows_sum_to_one_or_zero():
    cfg = small_config()
    params, x, a = random_state(cfg, n=7, f=6, seed=5)
    a_rel = a["door"].copy()
    a_rel[2, :] = 0.0
    a_rel[:, 2] = 0.0  # node 2 has an empty neighborhood
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    beta = attention_coefficients(tape, leaves, cfg, tape.const(x), tape.const(a_rel), "block0", "door")
    sums = beta.data.sum(axis=1)
    assert np.all(np.abs(np.delete(sums, 2) - 1.0) <= 1e-12)
    assert sums[2] == 0.0


def test_node_update_matches_naive_loop():
    cfg = small_config()
    params, x, a = random_state(cfg, n=5, f=7, seed=4)
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    out = node_update(tape, leaves, cfg, tape.const(x), {r: tape.const(m) for r, m in a.items()}, "block0")
    ref = ref_node_update(params, cfg, x, a, "block0")
    assert np.allclose(out.data, ref, atol=1e-12)


def test_node_update_alpha_extreme_selects_single_relation():
    cfg = small_config()
    params, x, a = random_state(cfg, n=4, f=7, seed=6)
    params = dict(params)
    params["block0.alpha"] = np.array([[60.0, -60.0]])  # softmax weight ~1 on door

    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    mixed = node_update(tape, leaves, cfg, tape.const(x), {r: tape.const(m) for r, m in a.items()}, "block0")

    single = ref_attention(params, cfg, x, a["door"], "block0", "door")
    w = params["block0.W.door"]
    expected = np_elu((single * a["door"]) @ x @ w)
    assert np.allclose(mixed.data, expected, atol=1e-12)


def test_node_update_diagonal_only_adjacency_is_self_update():
    cfg = small_config()
    params, x, _ = random_state(cfg, n=4, f=7, seed=7)
    eye = {r: np.eye(4) for r in ("door", "wall", "spatial")}
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    out = node_update(tape, leaves, cfg, tape.const(x), {r: tape.const(m) for r, m in eye.items()}, "block0")
    # each row depends only on that node's own features
    x2 = x.copy()
    x2[3] = 99.0
    tape2 = Tape()
    leaves2 = {k: tape2.leaf(v) for k, v in params.items()}
    out2 = node_update(tape2, leaves2, cfg, tape2.const(x2), {r: tape2.const(m) for r, m in eye.items()}, "block0")
    assert np.allclose(out.data[:3], out2.data[:3], atol=1e-15)
    assert not np.allclose(out.data[3], out2.data[3])


# ----------------------------------------------------------------------
# encode / decode

def _instance(cfg: ModelConfig, seed: int = 0, sets=(1,)) -> tuple[Model, TaskInstance]:
    record = generate_record(GenParams(min_rooms=5, max_rooms=7, grid_w=8, grid_h=8), seed=seed)
    fm = record.features.select_sets(sets)
    model = Model.initialize(cfg, fm.f, seed=seed + 1, feature_sets=sets, feature_layout=fm.layout)
    inst = prepare_instances(model, [record], "generate")[0]
    return model, inst


def test_encode_k0_returns_features_unchanged():
    cfg = small_config(k_iterations=0)
    model, inst = _instance(cfg)
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in model.params.items()}
    x0 = tape.const(inst.features.x)
    a0 = {r: tape.const(m) for r, m in inst.a0.channels().items()}
    x_out, a_out, steps = encode(tape, leaves, cfg, x0, a0)
    assert x_out is x0
    assert steps == []


def test_encode_default_k2_collects_two_intermediates():
    cfg = small_config()
    model, inst = _instance(cfg)
    out = model.predict_instance(inst)
    assert len(out.per_iteration) == 2
    for step in out.per_iteration:
        assert set(step) == {"door", "wall", "spatial"}


def test_forward_deterministic_bit_identical():
    cfg = small_config()
    model, inst = _instance(cfg)
    a = model.predict_instance(inst)
    b = model.predict_instance(inst)
    assert np.array_equal(a.p_spatial, b.p_spatial)
    assert np.array_equal(a.p_door, b.p_door)


def test_decode_symmetry_and_fusion_bound():
    cfg = small_config()
    model, inst = _instance(cfg, seed=2)
    out = model.predict_instance(inst)
    for mat in (out.p_door, out.p_wall, out.p_spatial):
        assert np.allclose(mat, mat.T, atol=1e-12)
        assert np.all((mat >= 0) & (mat <= 1))
    assert np.all(out.p_spatial >= np.maximum(out.p_door, out.p_wall) - 1e-12)


def test_decode_long_skip_requires_matching_rows():
    cfg = small_config()
    params, x, a = random_state(cfg, n=4, f=7, seed=8)
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    xk = tape.const(np.zeros((4, 6)))
    x0_bad = tape.const(np.zeros((5, 7)))
    a_t = {r: tape.const(m) for r, m in a.items()}
    with pytest.raises(ShapeError):
        decode(tape, leaves, cfg, xk, x0_bad, a_t)


def test_no_il_variant_equals_k0_encode_path():
    cfg = small_config(variant="no_il", k_iterations=2)
    assert cfg.effective_iterations() == 0
    model, inst = _instance(cfg, seed=3)
    out = model.predict_instance(inst)
    assert out.per_iteration == []
    # identical params under a plain K=0 config give identical predictions
    cfg0 = small_config(k_iterations=0)
    model0 = Model(config=cfg0, params=model.params, feature_sets=model.feature_sets,
                   feature_layout=model.feature_layout, set2_stats=model.set2_stats)
    out0 = model0.predict_instance(inst)
    assert np.array_equal(out.p_spatial, out0.p_spatial)


def test_no_mr_gat_variant_single_channel_intermediates():
    cfg = small_config(variant="no_mr_gat")
    model, inst = _instance(cfg, seed=4)
    out = model.predict_instance(inst)
    assert len(out.per_iteration) == 2
    for step in out.per_iteration:
        assert set(step) == {"spatial"}
    assert np.all(out.p_spatial >= np.maximum(out.p_door, out.p_wall) - 1e-12)


def test_no_mr_decoder_variant_three_independent_branches():
    cfg = small_config(variant="no_mr_decoder")
    assert any(k.startswith("decoder.spatial") for k in init_params(cfg, 5, np.random.default_rng(0)))
    model, inst = _instance(cfg, seed=5)
    out = model.predict_instance(inst)
    # no fusion: spatial is its own branch, not the clamped sum
    assert not np.allclose(out.p_spatial, np.clip(out.p_door + out.p_wall, 0, 1))


def test_mlp_variant_ignores_initial_adjacency():
    cfg = small_config(variant="mlp")
    model, inst = _instance(cfg, seed=6)
    out1 = model.predict_instance(inst)
    scrambled = inst.a0.copy()
    scrambled.door[0, 1] = scrambled.door[1, 0] = 1.0
    scrambled.spatial[0, 1] = scrambled.spatial[1, 0] = 1.0
    inst2 = TaskInstance(
        floorplan_id=inst.floorplan_id,
        features=inst.features,
        a0=scrambled,
        target=inst.target,
        heldout_pairs=inst.heldout_pairs,
    )
    out2 = model.predict_instance(inst2)
    assert np.array_equal(out1.p_spatial, out2.p_spatial)


def test_two_room_forward_is_finite():
    cfg = small_config()
    record = generate_record(GenParams(min_rooms=2, max_rooms=2, grid_w=6, grid_h=4), seed=9)
    fm = record.features.select_sets((1,))
    model = Model.initialize(cfg, fm.f, seed=0, feature_sets=(1,), feature_layout=fm.layout)
    inst = prepare_instances(model, [record], "generate")[0]
    out = model.predict_instance(inst)
    for mat in (out.p_door, out.p_wall, out.p_spatial):
        assert np.isfinite(mat).all()


def test_forward_rejects_non_finite_features():
    cfg = small_config()
    model, inst = _instance(cfg, seed=7)
    bad = inst.features.x.copy()
    bad[0, 0] = np.nan
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in model.params.items()}
    with pytest.raises(ValueError, match="non-finite"):
        forward_graph(tape, leaves, cfg, bad, {r: m for r, m in inst.a0.channels().items()})


# ----------------------------------------------------------------------
# permutation equivariance

def permute_instance(inst: TaskInstance, perm: np.ndarray) -> TaskInstance:
    p = np.asarray(perm)
    fm = inst.features
    channels = {rel: mat[np.ix_(p, p)] for rel, mat in inst.a0.channels().items()}
    target = {rel: mat[np.ix_(p, p)] for rel, mat in inst.target.channels().items()}
    inv = np.empty_like(p)
    inv[p] = np.arange(len(p))
    return TaskInstance(
        floorplan_id=inst.floorplan_id,
        features=FeatureMatrix(n=fm.n, f=fm.f, x=fm.x[p], layout=fm.layout),
        a0=MultiAdjacency(inst.a0.n, channels["door"], channels["wall"], channels["spatial"]),
        target=MultiAdjacency(inst.target.n, target["door"], target["wall"], target["spatial"]),
        heldout_pairs=tuple(tuple(sorted((int(inv[i]), int(inv[j])))) for i, j in inst.heldout_pairs),
    )


@pytest.mark.parametrize("seed", range(4))
def test_permutation_equivariance(seed):
    cfg = small_config()
    record = generate_record(GenParams(min_rooms=6, max_rooms=6, grid_w=8, grid_h=8), seed=seed)
    fm = record.features.select_sets((1, 2))
    model = Model.initialize(cfg, fm.f, seed=seed, feature_sets=(1, 2), feature_layout=fm.layout)
    inst = prepare_instances(model, [record], "generate")[0]
    rng = np.random.default_rng(seed + 100)
    perm = rng.permutation(inst.target.n)

    base = model.predict_instance(inst)
    permuted = model.predict_instance(permute_instance(inst, perm))
    assert np.allclose(base.p_spatial[np.ix_(perm, perm)], permuted.p_spatial, atol=1e-10)
    assert np.allclose(base.p_door[np.ix_(perm, perm)], permuted.p_door, atol=1e-10)
    assert np.allclose(base.p_wall[np.ix_(perm, perm)], permuted.p_wall, atol=1e-10)


# ----------------------------------------------------------------------
# parameters, sharing, checkpointing

def expected_block_param_count(cfg: ModelConfig, in_dim: int) -> int:
    total = 0
    n_rel = len(cfg.encoder_relations())
    prev = 2 * in_dim + 1
    if cfg.has_topology_update():
        mlp = 0
        for d in cfg.scoring_mlp_dims:
            mlp += prev * d + d
            prev = d
        total += n_rel * mlp
    total += n_rel * (2 * in_dim)  # attention vectors
    total += n_rel * (in_dim * cfg.gat_hidden)
    if n_rel > 1:
        total += n_rel  # mixing logits
    return total


def test_param_count_shared_vs_unshared_structure():
    f = 11
    unshared = small_config(share_block_weights=False)
    shared = small_config(share_block_weights=True)
    pu = init_params(unshared, f, np.random.default_rng(0))
    ps = init_params(shared, f, np.random.default_rng(0))

    dec = 0
    prev = unshared.decoder_input_dim(f)
    for d in unshared.decoder_mlp_dims:
        dec += prev * d + d
        prev = d
    dec *= len(unshared.decoder_relations())

    expected_unshared = expected_block_param_count(unshared, f) + expected_block_param_count(
        unshared, unshared.gat_hidden
    ) + dec
    assert param_count(pu) == expected_unshared

    # shared: one hidden-width block plus the input projection
    expected_shared = expected_block_param_count(shared, shared.gat_hidden) + f * shared.gat_hidden + dec
    assert param_count(ps) == expected_shared
    assert sum(1 for k in ps if k.startswith("block")) == sum(
        1 for k in pu if k.startswith("block0")
    )


def test_shared_weights_forward_runs():
    cfg = small_config(share_block_weights=True)
    model, inst = _instance(cfg, seed=8)
    out = model.predict_instance(inst)
    assert np.isfinite(out.p_spatial).all()


def test_checkpoint_round_trip_is_exact():
    cfg = small_config()
    model, inst = _instance(cfg, seed=10, sets=(1,))
    base = model.predict_instance(inst)
    data = json.loads(json.dumps(model.to_checkpoint()))
    back = Model.from_checkpoint(data)
    assert back.config == model.config
    assert back.feature_sets == model.feature_sets
    for name, p in model.params.items():
        assert np.array_equal(back.params[name], p)
    again = back.predict_instance(inst)
    assert np.array_equal(base.p_spatial, again.p_spatial)


def test_config_validation():
    with pytest.raises(ModelConfigError, match="variant"):
        ModelConfig(variant="bogus")
    with pytest.raises(ModelConfigError, match="end in 1"):
        ModelConfig(decoder_mlp_dims=(8, 4))
    with pytest.raises(ModelConfigError, match="k_iterations"):
        ModelConfig(k_iterations=-1)
