import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clfe import tensor as T
from clfe.heads import (MetricError, Mlp2, accuracy_weighted, edge_head, f1_positive, graph_head, hits_at_k, mae,
                        node_head)
from clfe.tensor import Tensor


def confusion(pred, true, C):
    m = np.zeros((C, C), dtype=int)
    for p, t in zip(pred, true):
        m[t, p] += 1
    return m


def balanced_from_confusion(m):
    rows = m.sum(axis=1)
    present = rows > 0
    return float(np.mean(np.diag(m)[present] / rows[present]))


def f1_from_confusion(m):
    tp, fp, fn = m[1, 1], m[0, 1], m[1, 0]
    if tp == 0:
        return 0.0
    p, r = tp / (tp + fp), tp / (tp + fn)
    return 2 * p * r / (p + r)


def hits_brute_force(pos, neg, k):
    """Merge each positive into the negative list and read off its rank (ties rank below)."""
    hits = 0
    for s in pos:
        ranked = sorted([(v, 1) for v in neg] + [(s, 0)], key=lambda t: (-t[0], -t[1]))
        rank = [i for i, (_, is_neg) in enumerate(ranked) if not is_neg][0] + 1
        hits += rank <= k
    return hits / len(pos) if len(pos) else 0.0


def mlp(rng, d_in, d_out):
    return Mlp2.init(rng, d_in, d_out)


class TestGraphHead:
    def test_single_node_readout(self):
        rng = np.random.default_rng(0)
        m = mlp(rng, 4, 3)
        x = rng.normal(size=(1, 4))
        np.testing.assert_array_equal(graph_head(Tensor(x), np.array([0]), m).data, m(Tensor(x)).data)

    def test_constant_features_any_size(self):
        rng = np.random.default_rng(1)
        m = mlp(rng, 4, 1)
        c = rng.normal(size=4)
        small = graph_head(Tensor(np.tile(c, (2, 1))), np.zeros(2, int), m).data
        large = graph_head(Tensor(np.tile(c, (9, 1))), np.zeros(9, int), m).data
        np.testing.assert_allclose(small, large, rtol=1e-14)

    def test_two_graph_batch_order(self):
        rng = np.random.default_rng(2)
        m = mlp(rng, 2, 3)
        x = rng.normal(size=(5, 2))
        out = graph_head(Tensor(x), np.array([0, 0, 1, 1, 1]), m).data
        assert out.shape == (2, 3)
        np.testing.assert_allclose(out[1], m(Tensor(x[2:].mean(axis=0, keepdims=True))).data[0], rtol=1e-14)

    def test_empty_graph(self):
        m = mlp(np.random.default_rng(0), 2, 2)
        with pytest.raises(MetricError):
            graph_head(Tensor(np.ones((2, 2))), np.array([0, 2]), m, 3)


class TestNodeHead:
    def test_shape(self):
        m = mlp(np.random.default_rng(0), 8, 5)
        assert m.first.W.shape == (8, 4)
        assert node_head(Tensor(np.ones((7, 8))), m).shape == (7, 5)

    def test_row_permutation(self):
        rng = np.random.default_rng(3)
        m = mlp(rng, 4, 2)
        x = rng.normal(size=(6, 4))
        perm = rng.permutation(6)
        np.testing.assert_array_equal(node_head(Tensor(x[perm]), m).data, node_head(Tensor(x), m).data[perm])

    def test_zero_input_zero_bias(self):
        m = mlp(np.random.default_rng(4), 4, 3)
        assert not node_head(Tensor(np.zeros((3, 4))), m).data.any()


class TestEdgeHead:
    def test_self_edge_repeats_features(self):
        rng = np.random.default_rng(5)
        m = mlp(rng, 6, 2)
        h = rng.normal(size=(2, 3))
        out = edge_head(Tensor(h), np.array([[1, 1]]), m).data
        np.testing.assert_array_equal(out, m(Tensor(np.concatenate([h[1], h[1]])[None])).data)

    def test_direction_matters(self):
        rng = np.random.default_rng(6)
        m = mlp(rng, 6, 2)
        h = Tensor(rng.normal(size=(2, 3)))
        a = edge_head(h, np.array([[0, 1]]), m).data
        b = edge_head(h, np.array([[1, 0]]), m).data
        assert not np.allclose(a, b)

    def test_zero_features_bias_path(self):
        rng = np.random.default_rng(7)
        m = mlp(rng, 4, 2)
        m.first.b.data[...] = rng.normal(size=2)
        m.second.b.data[...] = rng.normal(size=2)
        out = edge_head(Tensor(np.zeros((3, 2))), np.array([[0, 1], [2, 0]]), m).data
        expected = np.maximum(m.first.b.data, 0) @ m.second.W.data + m.second.b.data
        np.testing.assert_allclose(out, np.tile(expected, (2, 1)), rtol=1e-14)

    def test_index_out_of_range(self):
        m = mlp(np.random.default_rng(0), 4, 2)
        with pytest.raises(IndexError):
            edge_head(Tensor(np.zeros((2, 2))), np.array([[0, 5]]), m)


class TestHeadGradients:
    def test_graph_head_with_cross_entropy(self):
        rng = np.random.default_rng(8)
        m = mlp(rng, 4, 3)
        x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        seg, y = np.array([0, 0, 1, 1, 1]), np.array([2, 0])
        f = lambda _: T.softmax_cross_entropy(graph_head(x, seg, m), y)  # noqa: E731
        for p in [x, m.first.W, m.second.W, m.second.b]:
            assert T.grad_check(f, p).passed

    def test_graph_head_with_l1(self):
        rng = np.random.default_rng(9)
        m = mlp(rng, 4, 1)
        x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        seg, y = np.array([0, 0, 1, 1, 1]), np.array([10.0, -10.0])
        f = lambda _: T.l1_loss(graph_head(x, seg, m), y)  # noqa: E731
        for p in [x, m.first.W, m.second.b]:
            assert T.grad_check(f, p).passed

    def test_node_and_edge_heads(self):
        rng = np.random.default_rng(10)
        m_node, m_edge = mlp(rng, 4, 3), mlp(rng, 8, 2)
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        edges = np.array([[0, 1], [1, 2], [3, 0]])
        f_node = lambda _: T.softmax_cross_entropy(node_head(x, m_node), np.array([0, 1, 2, 1]))  # noqa: E731
        f_edge = lambda _: T.softmax_cross_entropy(edge_head(x, edges, m_edge), np.array([1, 0, 1]))  # noqa: E731
        for f, m in ((f_node, m_node), (f_edge, m_edge)):
            for p in [x, m.first.W, m.first.b, m.second.W]:
                assert T.grad_check(f, p).passed


class TestAccuracy:
    def test_perfect(self):
        assert accuracy_weighted([0, 1, 2, 1], [0, 1, 2, 1], 3).value == 1.0

    def test_half(self):
        assert accuracy_weighted([0, 0, 0, 0], [0, 0, 1, 1], 2).value == 0.5

    def test_single_class(self):
        assert accuracy_weighted([2, 2], [2, 2], 3).value == 1.0

    def test_empty(self):
        with pytest.raises(MetricError):
            accuracy_weighted([], [], 2)

    @settings(max_examples=50)
    @given(st.integers(0, 10_000))
    def test_relabeling_invariance(self, seed):
        rng = np.random.default_rng(seed)
        C = 4
        true, pred = rng.integers(0, C, 30), rng.integers(0, C, 30)
        perm = rng.permutation(C)
        assert accuracy_weighted(perm[pred], perm[true], C).value == \
            pytest.approx(accuracy_weighted(pred, true, C).value, abs=1e-15)


class TestF1:
    def test_hand_example(self):
        assert f1_positive([1, 1, 0], [1, 0, 0]).value == pytest.approx(2 / 3, abs=1e-15)

    def test_degenerate(self):
        assert f1_positive([0, 0], [0, 0]).value == 0.0

    def test_perfect(self):
        assert f1_positive([1, 0, 1], [1, 0, 1]).value == 1.0


class TestHits:
    def test_clear_win(self):
        assert hits_at_k([10], [1, 2, 3], 1).value == 1.0

    def test_tie_is_a_miss(self):
        assert hits_at_k([2], [1, 2, 3], 2).value == 0.0

    def test_half(self):
        assert hits_at_k([5, 0], [1, 2, 3], 3).value == 0.5

    def test_k_too_large(self):
        with pytest.raises(MetricError):
            hits_at_k([1], [1, 2], 3)

    def test_no_negatives(self):
        with pytest.raises(MetricError):
            hits_at_k([1], [], 1)

    @settings(max_examples=100)
    @given(st.integers(0, 100_000))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n_pos, n_neg = int(rng.integers(0, 40)), int(rng.integers(1, 60))
        # small integer scores force plenty of ties
        pos, neg = rng.integers(0, 8, n_pos).astype(float), rng.integers(0, 8, n_neg).astype(float)
        k = int(rng.integers(1, n_neg + 1))
        assert hits_at_k(pos, neg, k).value == hits_brute_force(pos, neg, k)


class TestMAE:
    def test_identical(self):
        assert mae([1.5, 2], [1.5, 2]).value == 0

    def test_hand(self):
        assert mae([0, 0], [1, 3]).value == 2

    def test_single(self):
        assert mae([-2], [0]).value == 2

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.integers(0, 100))
    def test_symmetric(self, xs, seed):
        ys = np.random.default_rng(seed).normal(size=len(xs))
        assert mae(xs, ys).value == mae(ys, xs).value


@settings(max_examples=100)
@given(st.integers(0, 100_000))
def test_classification_metrics_match_confusion_matrix(seed):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(2, 6))
    n = int(rng.integers(1, 50))
    true, pred = rng.integers(0, C, n), rng.integers(0, C, n)
    assert accuracy_weighted(pred, true, C).value == balanced_from_confusion(confusion(pred, true, C))
    bt, bp = true % 2, pred % 2
    assert f1_positive(bp, bt).value == f1_from_confusion(confusion(bp, bt, 2))
