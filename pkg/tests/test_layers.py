import numpy as np
import pytest

from clfe import tensor as T
from clfe.checks import layer_gradient_suite, random_graph
from clfe.graph import from_edges, gen_sbm, permute
from clfe.layers import (BACKBONES, ConfigError, Encoder, GraphContext, LayerSpec, clfe_compose, gat_attention,
                         gat_hidden, gatedgcn_gates, gatedgcn_hidden, gcn_hidden, monet_hidden, monet_weights,
                         sage_hidden, stack_forward)
from clfe.tensor import DimensionError, Tensor

PATH = from_edges(2, [(0, 1)])


def const(x):
    return Tensor(np.asarray(x, dtype=float))


class TestGCN:
    def test_path_identity(self):
        h = gcn_hidden(const(np.eye(2)), GraphContext.build(PATH), {"W": const(np.eye(2))})
        assert h.data.tolist() == [[0.5, 0.5], [0.5, 0.5]]

    def test_zero_weight(self):
        h = gcn_hidden(const(np.ones((2, 3))), GraphContext.build(PATH), {"W": const(np.zeros((3, 3)))})
        assert not h.data.any()

    def test_isolated_node_no_mixing(self):
        g = from_edges(3, [(0, 1)])
        H = np.arange(6.0).reshape(3, 2)
        W = np.array([[1.0, 2.0], [0.5, -1.0]])
        h = gcn_hidden(const(H), GraphContext.build(g), {"W": const(W)})
        np.testing.assert_array_equal(h.data[2], H[2] @ W)

    def test_row_mismatch(self):
        with pytest.raises(DimensionError):
            gcn_hidden(const(np.ones((3, 2))), GraphContext.build(PATH), {"W": const(np.eye(2))})


class TestSAGE:
    def test_isolated_node(self):
        g = from_edges(2, [])
        W = np.array([[1.0], [3.0]])
        h = sage_hidden(const([[2.0], [5.0]]), GraphContext.build(g), {"W": const(W)})
        assert h.data.tolist() == [[2.0], [5.0]]

    def test_path(self):
        h = sage_hidden(const([[2.0], [4.0]]), GraphContext.build(PATH), {"W": const([[1.0], [1.0]])})
        assert h.data[0].tolist() == [6.0]

    def test_regular_graph_constant_features(self):
        cycle = from_edges(5, [(i, (i + 1) % 5) for i in range(5)])
        c = np.array([1.5, -2.0])
        W = np.vstack([np.zeros((2, 2)), np.eye(2)])  # read the neighbour mean only
        h = sage_hidden(const(np.tile(c, (5, 1))), GraphContext.build(cycle), {"W": const(W)})
        np.testing.assert_array_equal(h.data, np.tile(c, (5, 1)))


def gat_params(rng, d, heads):
    dk = d // heads
    P = {}
    for k in range(heads):
        P[f"W{k}"] = const(rng.normal(size=(d, dk)))
        P[f"a_src{k}"] = const(rng.normal(size=(dk, 1)))
        P[f"a_dst{k}"] = const(rng.normal(size=(dk, 1)))
    return P


class TestGAT:
    def test_single_node(self):
        rng = np.random.default_rng(0)
        P = gat_params(rng, 4, 2)
        H = rng.normal(size=(1, 4))
        ctx = GraphContext.build(from_edges(1, []))
        for _, alpha in gat_attention(const(H), ctx, P, 2):
            assert alpha.data.tolist() == [[1.0]]
        h = gat_hidden(const(H), ctx, P, 2)
        np.testing.assert_allclose(h.data, np.hstack([H @ P["W0"].data, H @ P["W1"].data]), rtol=1e-14)

    def test_identical_neighbours_share_attention(self):
        rng = np.random.default_rng(1)
        g = from_edges(3, [(0, 1), (0, 2)])
        H = rng.normal(size=(3, 4))
        H[2] = H[1]
        ctx = GraphContext.build(g)
        for _, alpha in gat_attention(const(H), ctx, gat_params(rng, 4, 2), 2):
            a = alpha.data[:, 0]
            on_0 = {int(s): a[e] for e, (s, d) in enumerate(zip(ctx.loop_src, ctx.loop_dst)) if d == 0}
            assert on_0[1] == on_0[2]

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        g = random_graph(12, 0.3, rng)
        ctx = GraphContext.build(g)
        for _, alpha in gat_attention(const(rng.normal(size=(12, 8))), ctx, gat_params(rng, 8, 4), 4):
            sums = np.bincount(ctx.loop_dst, weights=alpha.data[:, 0], minlength=12)
            np.testing.assert_allclose(sums, 1.0, atol=1e-12, rtol=0)

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            LayerSpec("gat", 6, heads=4)


class TestMoNet:
    def test_zero_displacement_weight_one(self):
        cycle = from_edges(6, [(i, (i + 1) % 6) for i in range(6)])
        ctx = GraphContext.build(cycle)
        u = ctx.pseudo[0]
        assert np.all(ctx.pseudo == u)
        P = {"mu0": const(u[None, :]), "log_sigma0": const([[0.3, -0.2]])}
        assert np.all(monet_weights(ctx, P, 0).data == 1.0)

    def test_closed_neighbourhood_sum(self):
        ctx = GraphContext.build(PATH)
        u = ctx.pseudo[0]  # every closed-neighbourhood pair on the path has d~ = 2
        P = {"W0": const(np.eye(2)), "mu0": const(u[None, :]), "log_sigma0": const(np.zeros((1, 2)))}
        h = monet_hidden(const([[1.0, 2.0], [3.0, 5.0]]), ctx, P, 1)
        assert h.data.tolist() == [[4.0, 7.0], [4.0, 7.0]]

    def test_wide_kernels_flatten(self):
        rng = np.random.default_rng(3)
        ctx = GraphContext.build(random_graph(9, 0.4, rng))
        P = {"mu0": const(rng.random((1, 2))), "log_sigma0": const(np.full((1, 2), np.log(1e6)))}
        w = monet_weights(ctx, P, 0).data
        np.testing.assert_allclose(w, 1.0, atol=1e-6, rtol=0)


def gated_params(rng, d, scale=1.0):
    return {k: const(rng.normal(scale=scale, size=(d, d))) for k in "ABCUV"}


class TestGatedGCN:
    def test_equal_logits_give_uniform_gates(self):
        g = from_edges(4, [(0, 1), (0, 2), (0, 3)])
        ctx = GraphContext.build(g)
        d = 2
        P = {k: const(np.zeros((d, d))) for k in "ABCUV"}
        E = const(np.ones((g.num_edges, d)))
        _, eta = gatedgcn_gates(const(np.ones((4, d))), E, ctx, P)
        into_0 = eta.data[ctx.dst == 0]
        np.testing.assert_allclose(into_0, 0.5 / (1.5 + 1e-6), rtol=1e-14)
        np.testing.assert_allclose(into_0, 1 / 3, atol=1e-6)

    def test_saturated_gates_are_finite(self):
        ctx = GraphContext.build(PATH)
        P = {k: const(np.zeros((1, 1))) for k in "BCUV"}
        P["A"] = const([[1.0]])
        E = const(np.full((2, 1), -40.0))
        with np.errstate(all="raise", under="ignore"):
            _, eta = gatedgcn_gates(const(np.ones((2, 1))), E, ctx, P)
        assert np.all(np.isfinite(eta.data))
        assert np.all(eta.data < 1e-3)

    def test_single_edge(self):
        g = from_edges(2, [(0, 1)], undirected=False)
        ctx = GraphContext.build(from_edges(2, [(0, 1)]))
        ctx.src, ctx.dst = g.src, g.cols
        P = {k: const(np.zeros((1, 1))) for k in "BCUV"}
        P["A"] = const([[1.0]])
        _, eta = gatedgcn_gates(const([[0.0], [0.0]]), const([[0.7]]), ctx, P)
        s = 1 / (1 + np.exp(-0.7))
        assert eta.data[0, 0] == pytest.approx(s / (s + 1e-6), rel=1e-14)
        assert eta.data[0, 0] == pytest.approx(1.0, abs=1e-5)

    def test_gates_in_open_unit_interval(self):
        rng = np.random.default_rng(5)
        g = random_graph(10, 0.4, rng)
        ctx = GraphContext.build(g)
        _, eta = gatedgcn_gates(const(rng.normal(size=(10, 3))), const(rng.normal(size=(g.num_edges, 3))),
                                ctx, gated_params(rng, 3))
        assert np.all((eta.data > 0) & (eta.data < 1))

    def test_missing_edge_state(self):
        with pytest.raises(ValueError):
            gatedgcn_hidden(const(np.ones((2, 1))), None, GraphContext.build(PATH), {})


class TestCompose:
    SPEC = LayerSpec("gcn", 1, clfe=True, skip=True, activation="identity")

    def test_hand_example(self):
        P = {"clfe_W": const([[0.5], [0.5]]), "clfe_b": const([0.0])}
        out = clfe_compose(const([[2.0]]), const([[3.0]]), P, self.SPEC)
        assert out.data.tolist() == [[7.5]]

    def test_relu_clamp(self):
        spec = LayerSpec("gcn", 1, clfe=True, skip=True, activation="relu")
        P = {"clfe_W": const([[0.0], [0.0]]), "clfe_b": const([0.0])}
        assert clfe_compose(const([[3.0]]), const([[-5.0]]), P, spec).data.tolist() == [[3.0]]

    def test_zero_weights_match_baseline(self):
        rng = np.random.default_rng(0)
        H, h = const(rng.normal(size=(5, 3))), const(rng.normal(size=(5, 3)))
        P = {"clfe_W": const(np.zeros((6, 3))), "clfe_b": const(np.zeros(3))}
        on = clfe_compose(H, h, P, LayerSpec("gcn", 3, clfe=True))
        off = clfe_compose(H, h, P, LayerSpec("gcn", 3, clfe=False))
        assert np.array_equal(on.data, off.data)

    def test_no_skip(self):
        spec = LayerSpec("gcn", 1, clfe=False, skip=False, activation="identity")
        assert clfe_compose(const([[2.0]]), const([[3.0]]), {}, spec).data.tolist() == [[3.0]]

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            clfe_compose(const(np.ones((2, 2))), const(np.ones((2, 3))), {}, LayerSpec("gcn", 2, clfe=False))


def paired_encoders(kind, seed, d=4, depth=2, in_dim=3, edge_dim=1):
    off = Encoder(in_dim, [LayerSpec(kind, d, clfe=False, heads=2)] * depth, seed=seed, edge_dim=edge_dim)
    on = Encoder(in_dim, [LayerSpec(kind, d, clfe=True, heads=2)] * depth, seed=seed, edge_dim=edge_dim)
    for layer in on.layers:
        layer.params["clfe_W"].data[...] = 0.0
        layer.params["clfe_b"].data[...] = 0.0
    return off, on


@pytest.mark.parametrize("kind", BACKBONES)
def test_zero_clfe_equivalence(kind):
    rng = np.random.default_rng(11)
    for trial in range(10):
        g = random_graph(int(rng.integers(1, 12)), float(rng.random()), rng)
        off, on = paired_encoders(kind, trial)
        ctx = GraphContext.build(g)
        assert np.array_equal(off(ctx).data, on(ctx).data)


@pytest.mark.parametrize("kind", BACKBONES)
@pytest.mark.parametrize("clfe", [False, True])
def test_gradient_integrity(kind, clfe):
    rep = layer_gradient_suite(kind, clfe, seed=3, n=5, d=4)
    assert rep.passed, rep.per_param


@pytest.mark.parametrize("kind", BACKBONES)
@pytest.mark.parametrize("clfe", [False, True])
def test_width_and_permutation_equivariance(kind, clfe):
    rng = np.random.default_rng(7)
    g = random_graph(9, 0.4, rng)
    enc = Encoder(3, [LayerSpec(kind, 8, clfe=clfe)] * 3, seed=2)
    out = enc(GraphContext.build(g)).data
    assert out.shape == (9, 8)
    perm = rng.permutation(9)
    out_p = enc(GraphContext.build(permute(g, perm))).data
    np.testing.assert_allclose(out_p[perm], out, atol=1e-10, rtol=0)


def test_gcn_permutation_is_exact():
    rng = np.random.default_rng(8)
    g = random_graph(10, 0.5, rng)
    enc = Encoder(3, [LayerSpec("gcn", 4)] * 2, seed=0)
    perm = rng.permutation(10)
    a = enc(GraphContext.build(g)).data
    b = enc(GraphContext.build(permute(g, perm))).data[perm]
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


class TestStack:
    def test_zero_layers_is_embedding(self):
        g = random_graph(4, 0.5, np.random.default_rng(0))
        enc = Encoder(3, [], seed=1)
        out = stack_forward(enc, GraphContext.build(g))
        expected = g.node_feats @ enc.embed.W.data + enc.embed.b.data
        assert np.array_equal(out.data, expected)

    def test_one_gcn_layer_matches_parts(self):
        enc = Encoder(2, [LayerSpec("gcn", 2)], seed=3)
        ctx = GraphContext.build(from_edges(2, [(0, 1)], [[1.0, 0.0], [0.0, 1.0]]))
        H0 = enc.embed(Tensor(ctx.graph.node_feats))
        P = enc.layers[0].params
        expected = clfe_compose(H0, gcn_hidden(H0, ctx, P), P, enc.layers[0].spec)
        assert np.array_equal(stack_forward(enc, ctx).data, expected.data)

    @pytest.mark.parametrize("norm", ["none", "batch"])
    def test_deep_stack_smoke(self, norm):
        g = gen_sbm([25] * 4, 0.2, 0.02, seed=0)
        enc = Encoder(4, [LayerSpec("gcn", 16, norm=norm)] * 16, seed=0)
        with T.recording() as tape:
            out = enc(GraphContext.build(g))
            tape.backward(T.mean_rows(T.sum_cols(out)))
        assert np.all(np.isfinite(out.data))
        assert all(p.grad is not None and np.all(np.isfinite(p.grad)) for _, p in enc.parameters())

    def test_clfe_toggle_keeps_backbone_init(self):
        off, on = Encoder(3, [LayerSpec("gat", 4, clfe=False)] * 2, seed=5), \
            Encoder(3, [LayerSpec("gat", 4, clfe=True)] * 2, seed=5)
        shared = dict(off.parameters())
        for name, p in on.parameters():
            if name in shared:
                assert np.array_equal(p.data, shared[name].data), name

    def test_mixed_widths_rejected(self):
        with pytest.raises(ConfigError):
            Encoder(3, [LayerSpec("gcn", 4), LayerSpec("gcn", 8)])

    def test_clfe_parameter_shapes(self):
        enc = Encoder(3, [LayerSpec("sage", 6)] * 2, seed=0)
        for layer in enc.layers:
            assert layer.params["clfe_W"].shape == (12, 6)
            assert layer.params["clfe_b"].shape == (6,)
            assert not layer.params["clfe_b"].data.any()
