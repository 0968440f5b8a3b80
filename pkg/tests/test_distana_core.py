"""Lattice network: shapes, hand oracles, topology, checkpoint format."""
from __future__ import annotations

import math

import numpy as np
import pytest

from distana import autodiff as ad
from distana.core import (
    NEIGHBOR_OFFSETS,
    DistanaModel,
    LatticeTopology,
    NetworkConfig,
    PKState,
    PKWeights,
    lattice_step,
    load_weights,
    lstm_forward,
    param_count,
    pk_forward,
    save_weights,
)

from .oracles import cell_pk_step, lattice_oracle


def tensors(weights: PKWeights):
    return weights.as_tensors(None)


def random_model(cfg: NetworkConfig, seed=0) -> DistanaModel:
    return DistanaModel.init_random(cfg, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# configuration and weights


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(d=0)
    with pytest.raises(ValueError):
        NetworkConfig(m=0)
    with pytest.raises(ValueError):
        NetworkConfig(s=1, s_pre=0)
    assert not NetworkConfig(s=0).static_path
    assert NetworkConfig(s=1).static_path
    assert NetworkConfig(height=3, width=5).n_cells == 15


def test_weight_shapes_order_and_sizes():
    cfg = NetworkConfig(d=1, l=1, s=1, pre=8, m=12, s_pre=5)
    shapes = cfg.weight_shapes()
    assert [n for n, _ in shapes] == [
        "dl_pre", "s_pre",
        "xi", "xf", "xo", "xu",
        "hi", "hf", "ho", "hu",
        "si", "sf", "so",
        "dl_post",
    ]
    d = dict(shapes)
    assert d["dl_pre"] == (8, 9)
    assert d["s_pre"] == (5, 1)
    assert d["xi"] == (12, 8)
    assert d["hi"] == (12, 12)
    assert d["si"] == (12, 5)
    assert d["dl_post"] == (2, 12)


def test_weight_shapes_without_static_path():
    names = [n for n, _ in NetworkConfig(s=0).weight_shapes()]
    assert "s_pre" not in names and "si" not in names
    assert names[0] == "dl_pre" and names[-1] == "dl_post"


def test_param_count_matches_shape_sum():
    for cfg in (
        NetworkConfig(),
        NetworkConfig(s=1),
        NetworkConfig(d=2, l=3, s=2, pre=5, m=7, s_pre=4),
    ):
        total = sum(h * w for _, (h, w) in cfg.weight_shapes())
        assert param_count(cfg) == total


def test_param_count_known_values():
    # (d+8l)*pre + 4*pre*m + 4*m^2 + m*(d+l), no bias terms:
    # 9*8 + 4*8*12 + 4*144 + 12*2 = 72 + 384 + 576 + 24 = 1056
    assert param_count(NetworkConfig(d=1, l=1, s=0, pre=8, m=12)) == 1056
    # all dims 1, s=0: 9 + 4 + 4 + 2 = 19
    assert param_count(NetworkConfig(d=1, l=1, s=0, pre=1, m=1)) == 19
    # static path adds s*s_pre + 3*s_pre*m
    assert (
        param_count(NetworkConfig(s=1, s_pre=5, pre=8, m=12))
        == 1056 + 5 + 3 * 5 * 12
    )


def test_param_count_superlinear_in_m():
    base = param_count(NetworkConfig(m=12))
    assert param_count(NetworkConfig(m=24)) > 2 * base


def test_init_random_bounds_and_determinism():
    cfg = NetworkConfig(s=1)
    a = PKWeights.init_random(cfg, np.random.default_rng(3))
    b = PKWeights.init_random(cfg, np.random.default_rng(3))
    assert a == b
    for name, shape in cfg.weight_shapes():
        bound = 1.0 / math.sqrt(shape[1])
        arr = a.arrays[name]
        assert arr.shape == shape
        assert np.abs(arr).max() <= bound


def test_weights_validation():
    cfg = NetworkConfig(s=0)
    good = {n: np.zeros(s) for n, s in cfg.weight_shapes()}
    with pytest.raises(ValueError):
        PKWeights(cfg, {**good, "extra": np.zeros((1, 1))})
    missing = dict(good)
    del missing["xu"]
    with pytest.raises(ValueError):
        PKWeights(cfg, missing)
    bad = {**good, "dl_pre": np.zeros((3, 3))}
    with pytest.raises(ValueError):
        PKWeights(cfg, bad)


def test_weights_copy_is_independent():
    cfg = NetworkConfig()
    a = PKWeights.init_random(cfg, np.random.default_rng(0))
    b = a.copy()
    b.arrays["xi"][0, 0] += 1.0
    assert a != b


# ---------------------------------------------------------------------------
# topology


def test_interior_neighbor_order():
    topo = LatticeTopology(3, 4)
    # cell (1,1) = index 5; NW,N,NE,W,E,SW,S,SE around it
    assert topo.neighbors(5) == [0, 1, 2, 4, 6, 8, 9, 10]
    assert NEIGHBOR_OFFSETS[0] == (-1, -1) and NEIGHBOR_OFFSETS[-1] == (1, 1)


def test_corner_and_edge_neighbors():
    topo = LatticeTopology(3, 4)
    assert topo.neighbors(0) == [None, None, None, None, 1, None, 4, 5]
    # sentinel value in the raw index is n_cells
    assert topo.neighbor_index.max() == 12
    counts = (topo.neighbor_index < 12).sum(axis=0)
    assert counts[5] == 8 and counts[0] == 3


def test_neighbor_relation_symmetric():
    topo = LatticeTopology(4, 5)
    n = topo.height * topo.width
    for a in range(n):
        for b in topo.neighbors(a):
            if b is not None:
                assert a in topo.neighbors(b)


def test_topology_validation():
    with pytest.raises(ValueError):
        LatticeTopology(0, 4)


# ---------------------------------------------------------------------------
# LSTM and PK hand oracles


def test_lstm_zero_weights_zero_output():
    cfg = NetworkConfig(s=0, pre=3, m=4)
    w = tensors(PKWeights.zeros(cfg))
    x = ad.constant(np.random.default_rng(0).normal(size=(3, 5)))
    h0 = ad.constant(np.random.default_rng(1).normal(size=(4, 5)))
    c0 = ad.constant(np.random.default_rng(2).normal(size=(4, 5)))
    h, c = lstm_forward(x, None, h0, c0, w)
    np.testing.assert_array_equal(c.data, 0.5 * c0.data)  # f=0.5 gates c_prev
    np.testing.assert_array_equal(h.data, 0.5 * np.tanh(c.data))


def test_lstm_zero_inputs_half_gates():
    # zero x, h_prev and any weights: i=f=o=0.5, u=0, c=0.5*c_prev
    cfg = NetworkConfig(s=0, pre=3, m=4)
    w = tensors(PKWeights.init_random(cfg, np.random.default_rng(9)))
    zeros = ad.constant(np.zeros((3, 2)))
    h0 = ad.constant(np.zeros((4, 2)))
    c0 = ad.constant(np.random.default_rng(3).normal(size=(4, 2)))
    h, c = lstm_forward(zeros, None, h0, c0, w)
    np.testing.assert_allclose(c.data, 0.5 * c0.data, rtol=0, atol=1e-15)
    np.testing.assert_allclose(
        h.data, 0.5 * np.tanh(0.5 * c0.data), rtol=0, atol=1e-15
    )


def test_lstm_scalar_hand_computation():
    # m=1, every matrix a hand-picked scalar; includes the static path
    vals = dict(
        xi=1.0, hi=-0.5, si=0.25,
        xf=-1.0, hf=0.75, sf=0.5,
        xo=0.2, ho=0.3, so=-0.4,
        xu=0.6, hu=-0.7,
    )
    w = {k: ad.constant(np.array([[v]])) for k, v in vals.items()}
    x, s_code, h_prev, c_prev = 0.3, 0.4, -0.2, 0.5
    h, c = lstm_forward(
        ad.constant(np.array([[x]])),
        ad.constant(np.array([[s_code]])),
        ad.constant(np.array([[h_prev]])),
        ad.constant(np.array([[c_prev]])),
        w,
    )

    def sig(z):
        return 1.0 / (1.0 + math.exp(-z))

    i = sig(1.0 * x + (-0.5) * h_prev + 0.25 * s_code)
    f = sig(-1.0 * x + 0.75 * h_prev + 0.5 * s_code)
    o = sig(0.2 * x + 0.3 * h_prev + (-0.4) * s_code)
    u = math.tanh(0.6 * x + (-0.7) * h_prev)
    c_ref = i * u + f * c_prev
    h_ref = o * math.tanh(c_ref)
    assert c.data[0, 0] == pytest.approx(c_ref, abs=1e-14)
    assert h.data[0, 0] == pytest.approx(h_ref, abs=1e-14)


def test_pk_zero_weights_and_bounds():
    cfg = NetworkConfig(s=0, pre=3, m=4, height=1, width=1)
    wz = tensors(PKWeights.zeros(cfg))
    state = PKState.initial(cfg)
    d_in = ad.constant(np.array([[0.7]]))
    lat = ad.constant(np.zeros((8, 1)))
    d_out, lat_out, st = pk_forward(d_in, lat, None, state, wz, cfg)
    np.testing.assert_array_equal(d_out.data, 0.0)
    np.testing.assert_array_equal(lat_out.data, 0.0)
    np.testing.assert_array_equal(st.h.data, 0.0)

    wr = tensors(PKWeights.init_random(cfg, np.random.default_rng(4)))
    big = ad.constant(np.array([[50.0]]))
    d_out, lat_out, st = pk_forward(big, lat, None, state, wr, cfg)
    assert np.abs(d_out.data).max() < 1.0
    assert np.abs(lat_out.data).max() < 1.0
    assert np.abs(st.h.data).max() <= 1.0  # |o*tanh(c)| <= 1


def test_pk_static_path_consistency_errors():
    on = NetworkConfig(s=1, pre=2, m=2, s_pre=2, height=1, width=1)
    off = NetworkConfig(s=0, pre=2, m=2, height=1, width=1)
    w_on = tensors(PKWeights.init_random(on, np.random.default_rng(0)))
    w_off = tensors(PKWeights.init_random(off, np.random.default_rng(0)))
    d_in = ad.constant(np.zeros((1, 1)))
    lat = ad.constant(np.zeros((8, 1)))
    s_in = ad.constant(np.zeros((1, 1)))
    with pytest.raises(ValueError):
        pk_forward(d_in, lat, s_in, PKState.initial(off), w_off, off)
    with pytest.raises(ValueError):
        pk_forward(d_in, lat, None, PKState.initial(on), w_on, on)


def test_single_cell_two_step_trace_matches_oracle():
    cfg = NetworkConfig(d=1, l=1, s=1, pre=3, m=2, s_pre=2, height=1, width=1)
    weights = PKWeights.init_random(cfg, np.random.default_rng(11))
    w = tensors(weights)
    topo = LatticeTopology(1, 1)
    state = PKState.initial(cfg)
    ctx = ad.constant(np.array([[0.55]]))
    inputs = [0.9, -0.3]

    h = np.zeros(2)
    c = np.zeros(2)
    lat = np.zeros(1)
    for t in range(2):
        pred, state = lattice_step(
            ad.constant(np.array([[inputs[t]]])), ctx, state, w, cfg, topo
        )
        # single cell has no neighbors: all lateral slots read zero
        d_ref, lat, h, c = cell_pk_step(
            weights.arrays,
            np.array([inputs[t]]),
            np.zeros(8),
            np.array([0.55]),
            h,
            c,
        )
        assert abs(pred.data[0, 0] - d_ref[0]) < 1e-12
        assert np.abs(state.h.data[:, 0] - h).max() < 1e-12
        assert np.abs(state.c.data[:, 0] - c).max() < 1e-12
        assert abs(state.lateral.data[0, 0] - lat[0]) < 1e-12


def test_lattice_three_steps_matches_per_cell_oracle():
    cfg = NetworkConfig(d=1, l=1, s=1, pre=4, m=3, s_pre=2, height=3, width=3)
    weights = PKWeights.init_random(cfg, np.random.default_rng(21))
    model = DistanaModel(weights)
    rng = np.random.default_rng(22)
    fields = rng.uniform(-0.9, 0.9, size=(3, 3, 3))
    context = rng.uniform(-1.0, 1.0, size=(3, 3))

    w = tensors(weights)
    ctx = model.context_tensor(context)
    state = PKState.initial(cfg)
    got = np.zeros((3, 3, 3))
    for t in range(3):
        pred, state = lattice_step(
            model.step_inputs(fields[t]), ctx, state, w, cfg, model.topo
        )
        got[t] = pred.data.reshape(3, 3)

    ref = lattice_oracle(
        weights.arrays, fields, context, height=3, width=3, d=1, l=1, m=3, steps=3
    )
    assert np.abs(got - ref).max() < 1e-12


def test_lattice_without_static_path_matches_oracle():
    cfg = NetworkConfig(d=1, l=1, s=0, pre=3, m=2, height=2, width=4)
    weights = PKWeights.init_random(cfg, np.random.default_rng(31))
    model = DistanaModel(weights)
    rng = np.random.default_rng(32)
    fields = rng.uniform(-0.9, 0.9, size=(2, 2, 4))

    w = tensors(weights)
    state = PKState.initial(cfg)
    got = np.zeros((2, 2, 4))
    for t in range(2):
        pred, state = lattice_step(
            model.step_inputs(fields[t]), None, state, w, cfg, model.topo
        )
        got[t] = pred.data.reshape(2, 4)
    ref = lattice_oracle(
        weights.arrays, fields, None, height=2, width=4, d=1, l=1, m=2, steps=2
    )
    assert np.abs(got - ref).max() < 1e-12


# ---------------------------------------------------------------------------
# lattice invariants


def test_uniform_inputs_make_interior_cells_equal():
    cfg = NetworkConfig(s=1, pre=4, m=3, s_pre=2, height=5, width=5)
    model = random_model(cfg, seed=8)
    w = tensors(model.weights)
    ctx = model.context_tensor(np.full((5, 5), 0.3))
    state = PKState.initial(cfg)

    pred, state = lattice_step(
        model.step_inputs(np.full((5, 5), 0.6)), ctx, state, w, cfg, model.topo
    )
    # step 1: laterals are all zero, so every cell is bit-identical
    grid = pred.data.reshape(5, 5)
    assert np.all(grid == grid[0, 0])

    pred, state = lattice_step(
        model.step_inputs(np.full((5, 5), 0.6)), ctx, state, w, cfg, model.topo
    )
    # step 2: boundary effects have moved one ring in; the 3x3 interior
    # still sees 8 identical laterals and stays uniform, edges do not
    grid = pred.data.reshape(5, 5)
    interior = grid[1:-1, 1:-1].ravel()
    assert np.all(interior == interior[0])
    assert grid[0, 0] != interior[0]


def test_activity_propagates_one_chebyshev_ring_per_step():
    cfg = NetworkConfig(s=0, pre=3, m=2, height=6, width=6)
    model = random_model(cfg, seed=12)
    w = tensors(model.weights)
    state = PKState.initial(cfg)
    impulse = np.zeros((6, 6))
    impulse[0, 0] = 0.8
    ys, xs = np.mgrid[0:6, 0:6]
    cheb = np.maximum(ys, xs)  # Chebyshev distance from the corner
    for n in range(1, 5):
        field = impulse if n == 1 else np.zeros((6, 6))
        pred, state = lattice_step(
            model.step_inputs(field), None, state, w, cfg, model.topo
        )
        grid = pred.data.reshape(6, 6)
        # after n steps, influence has covered Chebyshev radius n-1
        np.testing.assert_array_equal(grid[cheb > n - 1], 0.0)
        assert np.all(grid[cheb <= n - 1] != 0.0)


def test_cell_permutation_equivariance_bit_exact():
    cfg = NetworkConfig(s=1, pre=4, m=3, s_pre=2, height=3, width=4)
    model = random_model(cfg, seed=5)
    w = tensors(model.weights)
    rng = np.random.default_rng(6)
    field = rng.uniform(-0.8, 0.8, size=(3, 4))
    context = rng.uniform(-1, 1, size=(3, 4))
    k = cfg.n_cells

    pred, state = lattice_step(
        model.step_inputs(field),
        model.context_tensor(context),
        PKState.initial(cfg),
        w,
        cfg,
        model.topo,
    )
    pred2, _ = lattice_step(pred, model.context_tensor(context), state, w, cfg, model.topo)

    perm = rng.permutation(k)
    pos = np.empty(k + 1, dtype=np.int64)  # old cell index -> new column
    pos[perm] = np.arange(k)
    pos[k] = k  # sentinel maps to sentinel
    topo_p = LatticeTopology(3, 4)
    topo_p.neighbor_index = pos[model.topo.neighbor_index[:, perm]]

    ctx_p = ad.constant(context.reshape(1, -1)[:, perm])
    pred_p, state_p = lattice_step(
        ad.constant(field.reshape(1, -1)[:, perm]),
        ctx_p,
        PKState.initial(cfg),
        w,
        cfg,
        topo_p,
    )
    pred2_p, _ = lattice_step(pred_p, ctx_p, state_p, w, cfg, topo_p)
    assert np.array_equal(pred_p.data, pred.data[:, perm])
    assert np.array_equal(pred2_p.data, pred2.data[:, perm])


def test_zeroed_static_gates_ignore_context():
    cfg = NetworkConfig(s=1, pre=4, m=3, s_pre=2, height=3, width=3)
    weights = PKWeights.init_random(cfg, np.random.default_rng(14))
    for name in ("si", "sf", "so"):
        weights.arrays[name][:] = 0.0
    model = DistanaModel(weights)
    rng = np.random.default_rng(15)
    fields = rng.uniform(-0.5, 0.5, size=(4, 3, 3))
    r1 = model.rollout(fields, np.full((3, 3), -0.9), tf_steps=2, cl_steps=2)
    r2 = model.rollout(fields, np.full((3, 3), 0.9), tf_steps=2, cl_steps=2)
    assert np.array_equal(r1.predictions, r2.predictions)


def test_predictions_bounded_by_tanh():
    cfg = NetworkConfig(s=0, pre=4, m=3, height=4, width=4)
    model = random_model(cfg, seed=16)
    fields = np.random.default_rng(17).uniform(-5, 5, size=(30, 4, 4))
    result = model.rollout(fields, None, tf_steps=10, cl_steps=20)
    assert np.abs(result.predictions).max() < 1.0


# ---------------------------------------------------------------------------
# rollout semantics


def test_rollout_alignment_and_mse():
    cfg = NetworkConfig(s=0, pre=3, m=2, height=3, width=3)
    model = random_model(cfg, seed=20)
    rng = np.random.default_rng(23)
    fields = rng.uniform(-0.8, 0.8, size=(5, 3, 3))

    # manual: consume u[0], u[1] teacher-forced; preds[0] estimates u[2]
    w = tensors(model.weights)
    state = PKState.initial(cfg)
    for t in range(2):
        pred, state = lattice_step(
            model.step_inputs(fields[t]), None, state, w, cfg, model.topo
        )
    first = pred.data.reshape(3, 3)
    pred, state = lattice_step(pred, None, state, w, cfg, model.topo)
    second = pred.data.reshape(3, 3)

    result = model.rollout(fields, None, tf_steps=2, cl_steps=3)
    assert result.predictions.shape == (3, 3, 3)
    np.testing.assert_array_equal(result.predictions[0], first)
    np.testing.assert_array_equal(result.predictions[1], second)
    expected_mse = np.mean((result.predictions - fields[2:5]) ** 2)
    assert result.mse_closed_loop == pytest.approx(expected_mse, rel=1e-15)


def test_sequence_loss_split_matches_rollout_trajectory():
    # with tf_steps=2 on 5 fields, the last three predictions are the
    # self-fed chain that rollout(tf=2, cl=3) produces, and the first
    # one is the teacher-forced prediction of u[1]
    cfg = NetworkConfig(s=0, pre=3, m=2, height=3, width=3)
    model = random_model(cfg, seed=20)
    rng = np.random.default_rng(29)
    fields = rng.uniform(-0.8, 0.8, size=(5, 3, 3))
    w = tensors(model.weights)

    split = float(model.sequence_loss(fields, None, w, tf_steps=2).data)
    tf_part = float(model.teacher_forced_loss(fields[:2], None, w).data)
    roll = model.rollout(fields, None, tf_steps=2, cl_steps=3)
    cl_part = sum(
        float(np.mean((roll.predictions[j] - fields[2 + j]) ** 2))
        for j in range(3)
    )
    assert split == pytest.approx(tf_part + cl_part, rel=1e-12)

    full = float(model.teacher_forced_loss(fields, None, w).data)
    assert split != pytest.approx(full, rel=1e-6)
    # a split at least as long as the transition count is full TF
    assert float(model.sequence_loss(fields, None, w, tf_steps=9).data) == full
    with pytest.raises(ValueError):
        model.sequence_loss(fields, None, w, tf_steps=0)


def test_rollout_window_validation():
    cfg = NetworkConfig(s=0, pre=2, m=2, height=3, width=3)
    model = random_model(cfg)
    fields = np.zeros((5, 3, 3))
    with pytest.raises(ValueError):
        model.rollout(fields, None, tf_steps=3, cl_steps=3)
    with pytest.raises(ValueError):
        model.rollout(fields, None, tf_steps=2, cl_steps=0)
    with pytest.raises(ValueError):
        model.rollout(fields, None, tf_steps=0, cl_steps=2)
    with pytest.raises(ValueError):
        model.rollout(np.zeros((5, 4, 4)), None, tf_steps=1, cl_steps=1)


def test_context_tensor_shapes():
    cfg = NetworkConfig(s=1, pre=2, m=2, s_pre=2, height=3, width=3)
    model = random_model(cfg)
    t = model.context_tensor(np.zeros((3, 3)))
    assert t.data.shape == (1, 9)
    with pytest.raises(ValueError):
        model.context_tensor(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        model.context_tensor(None)
    off = random_model(NetworkConfig(s=0, pre=2, m=2, height=3, width=3))
    assert off.context_tensor(None) is None


# ---------------------------------------------------------------------------
# checkpoint format


def test_weights_roundtrip_bit_exact(tmp_path):
    for cfg in (
        NetworkConfig(s=0, pre=3, m=4, height=5, width=6),
        NetworkConfig(s=1, pre=3, m=4, s_pre=2, height=5, width=6),
    ):
        weights = PKWeights.init_random(cfg, np.random.default_rng(77))
        p = tmp_path / f"w{cfg.s}.dstw"
        save_weights(weights, p)
        back = load_weights(p)
        assert back.cfg == cfg
        assert back == weights


def test_weights_file_errors(tmp_path):
    cfg = NetworkConfig(s=0, pre=2, m=2, height=2, width=2)
    weights = PKWeights.init_random(cfg, np.random.default_rng(0))
    p = tmp_path / "w.dstw"
    save_weights(weights, p)

    bad = tmp_path / "bad.dstw"
    bad.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(ValueError):
        load_weights(bad)

    trunc = tmp_path / "trunc.dstw"
    trunc.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_weights(trunc)

    trailing = tmp_path / "trail.dstw"
    trailing.write_bytes(p.read_bytes() + b"\x00" * 8)
    with pytest.raises(ValueError):
        load_weights(trailing)
