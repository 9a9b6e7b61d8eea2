"""Neural block contracts: MLP, graph attention, selective SSM, gated fusion."""

import math

import numpy as np
import pytest

from gamnet import tensor as T
from gamnet.blocks import (
    GamBlock, GamConfig, GatBlock, Linear, Mlp2, SsmBlock, SsmLayer,
    gated_fusion, silu,
)
from gamnet.graphs import RelationGraph, build_scene_graphs
from gamnet.rng import SplitMix64
from gamnet.scene import GeneratorParams, generate_scene
from gamnet.tensor import Tensor


def _graph(n, src, dst, feats=None):
    src = np.asarray(src, dtype=np.int64)
    u = len(src)
    return RelationGraph(
        kind="agent", n_src=n, n_dst=n, src=src,
        dst=np.asarray(dst, dtype=np.int64),
        feat_unique=np.asarray(feats) if feats is not None else np.zeros((u, 4)),
        expand=np.arange(u, dtype=np.int64))


def _rand(rng, *shape):
    return np.array(rng.normals(int(np.prod(shape)))).reshape(shape)


# mlp2


def test_mlp2_zero_params_zero_output():
    m = Mlp2(3, 8, 4, SplitMix64(0))
    m.zero_all_parameters()
    out = m(Tensor(np.ones((5, 3))))
    np.testing.assert_array_equal(out.data, np.zeros((5, 4)))


def test_mlp2_hand_value():
    m = Mlp2(1, 2, 2, SplitMix64(0))
    m.fc1.weight.data[...] = [[1.0, -1.0]]
    m.fc1.bias.data[...] = [0.0, 0.0]
    m.fc2.weight.data[...] = [[2.0, 0.0], [0.0, 3.0]]
    m.fc2.bias.data[...] = [0.0, 1.0]
    # x=1: relu([1,-1])=[1,0]; fc2 -> [2,1]; LN -> [1,-1]
    out = m(Tensor(np.array([[1.0]])))
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-9)


def test_mlp2_preserves_batch():
    m = Mlp2(3, 4, 6, SplitMix64(5))
    out = m(Tensor(np.ones((7, 2, 3))))
    assert out.shape == (7, 2, 6)


# gat_block


def test_gat_zero_in_edges_zero_message():
    rng = SplitMix64(10)
    gat = GatBlock(8, 2, rng)
    g = _graph(3, [0], [1])
    out = gat(Tensor(_rand(rng, 3, 8)), g, Tensor(_rand(rng, 1, 8)))
    np.testing.assert_array_equal(out.data[0], np.zeros(8))
    np.testing.assert_array_equal(out.data[2], np.zeros(8))
    assert np.abs(out.data[1]).max() > 0


def test_gat_single_edge_attention_weight_one():
    rng = SplitMix64(11)
    gat = GatBlock(8, 2, rng)
    g = _graph(2, [0], [1])
    nodes = Tensor(_rand(rng, 2, 8))
    edge = Tensor(_rand(rng, 1, 8))
    out = gat(nodes, g, edge)
    # with a single in-edge the softmax weight is 1, so the message is just
    # the projected value of that edge
    v = nodes.data @ gat.v_proj.weight.data + gat.v_proj.bias.data
    e = edge.data @ gat.e_proj.weight.data + gat.e_proj.bias.data
    expected = (v[0] + e[0]) @ gat.out_proj.weight.data
    np.testing.assert_allclose(out.data[1], expected, atol=1e-12)


def test_gat_edge_permutation_invariant():
    rng = SplitMix64(12)
    for trial in range(10):
        n = 6
        gat = GatBlock(16, 4, rng.spawn(f"p{trial}"))
        y = 12
        src = np.array([rng.randint(0, n) for _ in range(y)])
        dst = np.array([rng.randint(0, n) for _ in range(y)])
        nodes = Tensor(_rand(rng, n, 16))
        edges = _rand(rng, y, 16)
        out = gat(nodes, _graph(n, src, dst), Tensor(edges))
        perm = np.arange(y)
        rng.shuffle(list_perm := perm.tolist())
        perm = np.array(list_perm)
        out_p = gat(nodes, _graph(n, src[perm], dst[perm]), Tensor(edges[perm]))
        np.testing.assert_allclose(out.data, out_p.data, atol=1e-12)


def test_gat_node_edge_permutation_equivariant():
    rng = SplitMix64(13)
    n, y = 7, 14
    gat = GatBlock(8, 2, rng)
    src = np.array([rng.randint(0, n) for _ in range(y)])
    dst = np.array([rng.randint(0, n) for _ in range(y)])
    nodes = _rand(rng, n, 8)
    edges = _rand(rng, y, 8)
    out = gat(Tensor(nodes), _graph(n, src, dst), Tensor(edges)).data
    perm = np.random.RandomState(0).permutation(n)
    inv = np.argsort(perm)
    out_p = gat(Tensor(nodes[perm]), _graph(n, inv[src], inv[dst]),
                Tensor(edges)).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_gat_index_out_of_range():
    rng = SplitMix64(14)
    gat = GatBlock(8, 2, rng)
    with pytest.raises(IndexError):
        gat(Tensor(np.zeros((2, 8))), _graph(5, [4], [1]), Tensor(np.zeros((1, 8))))


# ssm_block


def _naive_ssm_reference(layer: SsmLayer, x: np.ndarray) -> np.ndarray:
    """Step-by-step recurrence oracle, independent of the scan primitive."""
    ln, bn, _ = x.shape
    w = lambda lin: (lin.weight.data, lin.bias.data)
    u = x @ layer.in_proj.weight.data + layer.in_proj.bias.data
    z = x @ layer.gate_proj.weight.data + layer.gate_proj.bias.data
    dt = np.logaddexp(0.0, x @ layer.dt_proj.weight.data + layer.dt_proj.bias.data)
    b_t = x @ layer.b_proj.weight.data + layer.b_proj.bias.data
    c_t = x @ layer.c_proj.weight.data + layer.c_proj.bias.data
    a = np.exp(layer.log_a.data)
    h = np.zeros((bn, layer.e, layer.s))
    ys = []
    for t in range(ln):
        decay = np.exp(-dt[t] * a)  # [B, E]
        h = decay[:, :, None] * h + (dt[t] * u[t])[:, :, None] * b_t[t][:, None, :]
        ys.append((h * c_t[t][:, None, :]).sum(axis=2))
    y = np.stack(ys)
    gate = y * (z / (1.0 + np.exp(-z)))
    return gate @ layer.out_proj.weight.data + layer.out_proj.bias.data


def test_ssm_zero_input_zero_biases_zero_output():
    layer = SsmLayer(4, 3, 2, SplitMix64(20))
    for lin in (layer.in_proj, layer.gate_proj, layer.dt_proj, layer.b_proj,
                layer.c_proj, layer.out_proj):
        lin.bias.data[...] = 0.0
    out = layer(Tensor(np.zeros((5, 2, 4))))
    np.testing.assert_array_equal(out.data, np.zeros((5, 2, 4)))


def test_ssm_length_one_single_step():
    rng = SplitMix64(21)
    layer = SsmLayer(4, 3, 2, rng)
    x = _rand(rng, 1, 2, 4)
    np.testing.assert_allclose(layer(Tensor(x)).data,
                               _naive_ssm_reference(layer, x), atol=1e-12)


def test_ssm_scan_matches_naive_recurrence():
    rng = SplitMix64(22)
    layer = SsmLayer(6, 4, 2, rng)
    x = _rand(rng, 64, 3, 6)
    got = layer(Tensor(x)).data
    want = _naive_ssm_reference(layer, x)
    np.testing.assert_allclose(got, want, atol=1e-10, rtol=0)


def test_ssm_causality_exact():
    rng = SplitMix64(23)
    layer = SsmLayer(4, 3, 2, rng)
    x = _rand(rng, 10, 1, 4)
    base = layer(Tensor(x)).data
    for t in (3, 7):
        bumped = x.copy()
        bumped[t] += 1.0
        out = layer(Tensor(bumped)).data
        np.testing.assert_array_equal(out[:t], base[:t])
        assert np.abs(out[t:] - base[t:]).max() > 0


def test_ssm_rejects_empty_sequence():
    layer = SsmLayer(4, 3, 2, SplitMix64(24))
    with pytest.raises(ValueError):
        layer(Tensor(np.zeros((0, 1, 4))))


def test_ssm_block_stacks_layers():
    cfg = GamConfig(d=4, n_heads=2, ssm_state_dim=3, ssm_expand=2, n_mamba_layers=3)
    block = SsmBlock(cfg, SplitMix64(25))
    assert len(block.layers) == 3
    x = np.zeros((2, 1, 4))
    chained = Tensor(x)
    for layer in block.layers:
        chained = layer(chained)
    np.testing.assert_array_equal(block(Tensor(x)).data, chained.data)


# gated fusion


def test_gated_fusion_zero_gate_is_half_half():
    rng = SplitMix64(30)
    fc = Linear(4, 4, rng)
    fc.weight.data[...] = 0.0
    fc.bias.data[...] = 0.0
    p, pa, pm = (Tensor(_rand(rng, 3, 4)) for _ in range(3))
    out = gated_fusion(p, pa, pm, fc, gate_enabled=True)
    expected = p.data + 0.5 * pa.data + 0.5 * pm.data
    np.testing.assert_array_equal(out.data, expected)


def test_gated_fusion_saturated_gate_selects_attention():
    rng = SplitMix64(31)
    fc = Linear(4, 4, rng)
    fc.weight.data[...] = 0.0
    fc.bias.data[...] = 80.0  # sigmoid saturates to 1 in float64
    p, pa, pm = (Tensor(_rand(rng, 2, 4)) for _ in range(3))
    out = gated_fusion(p, pa, pm, fc, gate_enabled=True)
    np.testing.assert_allclose(out.data, p.data + pa.data, atol=1e-12)


def test_gated_fusion_hand_fixture_2dim():
    fc = Linear(2, 2, SplitMix64(32))
    fc.weight.data[...] = [[0.5, -0.25], [1.0, 0.75]]
    fc.bias.data[...] = [0.1, -0.2]
    p = np.array([[0.3, -0.6]])
    pa = np.array([[1.0, 2.0]])
    pm = np.array([[-0.5, 0.25]])
    pre = (pm + pa) @ fc.weight.data + fc.bias.data
    g = 1.0 / (1.0 + np.exp(-pre))
    expected = p + g * pa + (1.0 - g) * pm
    out = gated_fusion(Tensor(p), Tensor(pa), Tensor(pm), fc, gate_enabled=True)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)
    assert np.all(g > 0) and np.all(g < 1)


def test_gated_fusion_disabled_path():
    rng = SplitMix64(33)
    fc = Linear(4, 4, rng)
    p, pa, pm = (Tensor(_rand(rng, 2, 4)) for _ in range(3))
    out = gated_fusion(p, pa, pm, fc, gate_enabled=False)
    np.testing.assert_array_equal(out.data, p.data + 0.5 * pa.data + 0.5 * pm.data)


def test_fixed_gate_convex_combination_exact():
    rng = SplitMix64(34)
    fc = Linear(4, 4, rng)
    fc.weight.data[...] = 0.0
    for bias in (-2.0, 0.0, 1.5):
        fc.bias.data[...] = bias
        g = 1.0 / (1.0 + math.exp(-bias))
        p, pa, pm = (Tensor(_rand(rng, 3, 4)) for _ in range(3))
        out = gated_fusion(p, pa, pm, fc, gate_enabled=True)
        expected = p.data + g * pa.data + (1.0 - g) * pm.data
        np.testing.assert_array_equal(out.data, expected)


# gam_block


def _tiny_scene_setup(seed, d=8, k=2):
    scene = generate_scene(GeneratorParams(
        seed=seed, n_agents=2, t_history=3, f_future=2, n_lanes=2))
    graphs = build_scene_graphs(scene, 100.0, 100.0, None, k)
    dims = (scene.t_history, scene.n_agents, k)
    v = dims[0] * dims[1] * dims[2]
    return scene, graphs, dims, v


def test_gam_block_zero_params_identity():
    cfg = GamConfig(d=8, n_heads=2, ssm_state_dim=4, ssm_expand=2)
    rng = SplitMix64(40)
    block = GamBlock(cfg, rng)
    block.zero_all_parameters()
    _, graphs, dims, v = _tiny_scene_setup(seed=2)
    p = _rand(rng, v, 8)
    edge = _rand(rng, graphs.agent.n_edges, 8)
    out = block(Tensor(p), graphs.agent, Tensor(edge), dims, "time")
    np.testing.assert_array_equal(out.data, p)


def test_gam_block_composition_matches_manual():
    cfg = GamConfig(d=8, n_heads=2, ssm_state_dim=4, ssm_expand=2)
    rng = SplitMix64(41)
    block = GamBlock(cfg, rng)
    _, graphs, dims, v = _tiny_scene_setup(seed=3)
    p = Tensor(_rand(rng, v, 8))
    edge = Tensor(_rand(rng, graphs.mode.n_edges, 8))
    out = block(p, graphs.mode, edge, dims, "mode")

    from gamnet.blocks import _unview_sequences, _view_sequences
    x = block.node_norm(p)
    branch_a = block.gat(x, graphs.mode, block.edge_norm(edge))
    branch_m = _unview_sequences(block.ssm(_view_sequences(x, dims, "mode")),
                                 dims, "mode")
    manual = gated_fusion(p, branch_a, branch_m, block.gate_fc, True)
    np.testing.assert_allclose(out.data, manual.data, atol=1e-12)
    # and the fused output is the convex combination of the residual
    # branch outputs of the underlying attention/state-space equations
    gate = 1.0 / (1.0 + np.exp(-((branch_m.data + branch_a.data)
                                 @ block.gate_fc.weight.data
                                 + block.gate_fc.bias.data)))
    recomposed = gate * (p.data + branch_a.data) + (1 - gate) * (p.data + branch_m.data)
    np.testing.assert_allclose(out.data, recomposed, atol=1e-12)


def test_gam_block_gate_ablation_flag():
    cfg = GamConfig(d=8, n_heads=2, ssm_state_dim=4, ssm_expand=2,
                    gate_enabled=False)
    rng = SplitMix64(42)
    block = GamBlock(cfg, rng)
    _, graphs, dims, v = _tiny_scene_setup(seed=4)
    p = Tensor(_rand(rng, v, 8))
    edge = Tensor(_rand(rng, graphs.agent.n_edges, 8))
    out = block(p, graphs.agent, edge, dims, "time")
    x = block.node_norm(p)
    branch_a = block.gat(x, graphs.agent, block.edge_norm(edge))
    from gamnet.blocks import _unview_sequences, _view_sequences
    branch_m = _unview_sequences(block.ssm(_view_sequences(x, dims, "time")),
                                 dims, "time")
    np.testing.assert_array_equal(
        out.data, p.data + 0.5 * branch_a.data + 0.5 * branch_m.data)


def test_gate_values_strictly_inside_unit_interval():
    rng = SplitMix64(43)
    fc = Linear(8, 8, rng)
    for _ in range(20):
        pre = fc(Tensor(_rand(rng, 5, 8)))
        g = T.sigmoid(pre).data
        assert np.all(g > 0.0) and np.all(g < 1.0)


# gradient checks over whole blocks


def test_blocks_finite_difference():
    rng = SplitMix64(50)
    _, graphs, dims, v = _tiny_scene_setup(seed=5, d=8)
    for trial in range(5):
        trial_rng = rng.spawn(f"fd{trial}")
        cfg = GamConfig(d=8, n_heads=2, ssm_state_dim=3, ssm_expand=2)
        block = GamBlock(cfg, trial_rng)
        edge = Tensor(_rand(trial_rng, graphs.agent.n_edges, 8))
        w = Tensor(_rand(trial_rng, v, 8))
        x0 = Tensor(_rand(trial_rng, v, 8))

        def f(x):
            return (block(x, graphs.agent, edge, dims, "time") * w).sum()

        assert T.finite_difference_check(f, x0) < 1e-5


def test_mlp_and_ssm_param_gradients():
    rng = SplitMix64(51)
    m = Mlp2(4, 6, 4, rng)
    x = Tensor(_rand(rng, 3, 4))
    w = Tensor(_rand(rng, 3, 4))

    def f_w1(v):
        saved, m.fc1.weight = m.fc1.weight, v
        try:
            return (m(x) * w).sum()
        finally:
            m.fc1.weight = saved

    assert T.finite_difference_check(f_w1, m.fc1.weight) < 1e-5

    layer = SsmLayer(4, 3, 2, rng)
    seq = Tensor(_rand(rng, 6, 2, 4))
    ww = Tensor(_rand(rng, 6, 2, 4))

    def f_a(v):
        saved, layer.log_a = layer.log_a, v
        try:
            return (layer(seq) * ww).sum()
        finally:
            layer.log_a = saved

    assert T.finite_difference_check(f_a, layer.log_a) < 1e-5
