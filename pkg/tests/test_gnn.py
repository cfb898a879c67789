import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from snag import tensor as T
from snag.gnn import (GAT_KINDS, LayerAggregatorKind as L, NodeAggregatorKind as N, attention_weights, build_model,
                      forward, init_params, layer_aggregate, loss, metric, node_aggregate, node_param_schema,
                      layer_agg_param_schema)
from snag.graph import add_self_loops, from_edges
from snag.space import Genotype
from snag.tensor import finite_diff_check

ALL_NODE = list(N)
ALL_LAYER = list(L)


def random_graph(n, p, seed, d=3):
    rng = np.random.default_rng(seed)
    edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]
    g = from_edges(n, edges, rng.normal(size=(n, d)), rng.integers(0, 2, n))
    return add_self_loops(g)


def params_for(kind, d_in, d_out, seed=0, scale=1.0):
    p = init_params(node_param_schema(kind, d_in, d_out), np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for t in p.values():
        # non-zero biases so every parameter takes part
        t.data = t.data * scale + 0.1 * rng.normal(size=t.shape)
    return p


def identity_params(kind, d):
    p = init_params(node_param_schema(kind, d, d), np.random.default_rng(0))
    p["weight"].data = np.eye(d)
    p["bias"].data = np.zeros(d)
    return p


# ---------------------------------------------------------------- node aggregators

def test_gcn_two_node_path():
    g = add_self_loops(from_edges(2, [(0, 1)], [[1.0], [3.0]], [0, 0]))
    out = node_aggregate(N.GCN, g, T.tensor(g.features), identity_params(N.GCN, 1), activation=None)
    np.testing.assert_array_equal(out.data, [[2.0], [2.0]])


@pytest.mark.parametrize("kind", [N.SAGE_MEAN, N.SAGE_MAX, N.GCN])
def test_constant_features_pass_through_mean_like(kind):
    g = random_graph(7, 0.4, seed=1)
    if kind is N.GCN:
        # only a regular graph keeps constants under symmetric normalisation
        g = add_self_loops(from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)], np.zeros((4, 1)), np.zeros(4)))
    h = T.tensor(np.full((g.num_nodes, 2), 1.7))
    out = node_aggregate(kind, g, h, identity_params(kind, 2), activation=None)
    np.testing.assert_allclose(out.data, 1.7, rtol=1e-14)


@pytest.mark.parametrize("kind", sorted(GAT_KINDS))
def test_gat_with_constant_scores_equals_sage_mean(kind):
    g = random_graph(8, 0.3, seed=2)
    h = T.tensor(g.features)
    p = params_for(kind, 3, 4, seed=3)
    for name in ("att_l", "att_r", "att_g"):
        if name in p:
            p[name].data = np.zeros_like(p[name].data)
    mean_p = {"weight": p["weight"], "bias": p["bias"]}
    np.testing.assert_allclose(node_aggregate(kind, g, h, p).data,
                               node_aggregate(N.SAGE_MEAN, g, h, mean_p).data, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("kind", sorted(GAT_KINDS))
@pytest.mark.parametrize("seed", range(3))
def test_attention_weights_sum_to_one(kind, seed):
    g = random_graph(10, 0.3, seed=seed)
    alpha = attention_weights(kind, g, T.tensor(g.features), params_for(kind, 3, 5, seed=seed, scale=3.0)).data
    sums = np.zeros(g.num_nodes)
    np.add.at(sums, g.sources, alpha[:, 0])
    np.testing.assert_allclose(sums, 1.0, atol=1e-12, rtol=0)
    assert np.all(alpha >= 0)


def dense_reference(kind, g, h, p):
    """Independent per-node loop implementation of each aggregator (pre-activation)."""
    P = {k: v.data for k, v in p.items()}
    z = h @ P["weight"] if kind not in (N.SAGE_MAX, N.SAGE_LSTM, N.MLP) else None
    deg = g.degrees
    out = []
    for v in range(g.num_nodes):
        nb = list(g.neighbors(v))
        if kind is N.GCN:
            agg = sum(z[u] / math.sqrt(deg[v] * deg[u]) for u in nb)
        elif kind is N.SAGE_SUM:
            agg = sum(z[u] for u in nb)
        elif kind is N.SAGE_MEAN:
            agg = sum(z[u] for u in nb) / len(nb)
        elif kind is N.SAGE_MAX:
            agg = np.max(h[nb], axis=0) @ P["weight"]
        elif kind is N.SAGE_LSTM:
            agg = lstm_reference(h[sorted(nb)], P["lstm_wx"], P["lstm_wh"], P["lstm_b"]) @ P["weight"]
        elif kind is N.MLP:
            agg = np.maximum(h[v] @ P["hidden"] + P["hidden_bias"], 0) @ P["weight"]
        else:
            s = np.array([gat_score(kind, z[v], z[u], P) for u in nb])
            s = np.where(s > 0, s, 0.2 * s)
            a = np.exp(s - s.max())
            a /= a.sum()
            agg = sum(a_i * z[u] for a_i, u in zip(a, nb))
        out.append(agg + P["bias"])
    return np.array(out)


def gat_score(kind, zv, zu, P):
    al = P.get("att_l", np.zeros((1, 1)))[:, 0]
    ar = P.get("att_r", np.zeros((1, 1)))[:, 0]
    if kind is N.GAT:
        return al @ zv + ar @ zu
    if kind is N.GAT_SYM:
        return (al @ zv + ar @ zu) + (al @ zu + ar @ zv)
    if kind is N.GAT_COS:
        return np.dot(al * zv, ar * zu)
    if kind is N.GAT_LINEAR:
        return np.tanh(al @ zv) + np.tanh(ar @ zu)
    return np.tanh(zv @ P["att_wl"] + zu @ P["att_wr"]) @ P["att_g"][:, 0]


def lstm_reference(seq, wx, wh, b):
    hid = wh.shape[0]
    h = np.zeros(hid)
    c = np.zeros(hid)
    for x in seq:
        gates = x @ wx + h @ wh + b
        i, f, gg, o = (gates[k * hid:(k + 1) * hid] for k in range(4))
        c = expit(f) * c + expit(i) * np.tanh(gg)
        h = expit(o) * np.tanh(c)
    return h


@pytest.mark.parametrize("kind", ALL_NODE)
def test_node_aggregate_matches_per_node_reference(kind):
    g = random_graph(9, 0.35, seed=5)
    p = params_for(kind, 3, 4, seed=6)
    out = node_aggregate(kind, g, T.tensor(g.features), p, activation=None).data
    np.testing.assert_allclose(out, dense_reference(kind, g, g.features, p), rtol=1e-11, atol=1e-13)


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([k for k in ALL_NODE if k is not N.SAGE_LSTM]), st.integers(0, 10_000))
def test_permutation_equivariance(kind, seed):
    rng = np.random.default_rng(seed)
    n = 8
    edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < 0.35]
    feats = rng.normal(size=(n, 3))
    perm = rng.permutation(n)  # new id of old node i is perm[i]
    g = add_self_loops(from_edges(n, edges, feats, np.zeros(n)))
    pf = np.empty_like(feats)
    pf[perm] = feats
    gp = add_self_loops(from_edges(n, [(perm[u], perm[v]) for u, v in edges], pf, np.zeros(n)))
    p = params_for(kind, 3, 4, seed=seed)
    out = node_aggregate(kind, g, T.tensor(feats), p).data
    outp = node_aggregate(kind, gp, T.tensor(pf), p).data
    np.testing.assert_allclose(outp[perm], out, rtol=1e-10, atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_sage_lstm_follows_ascending_neighbour_order(seed):
    g = random_graph(8, 0.4, seed=seed)
    p = params_for(N.SAGE_LSTM, 3, 4, seed=seed)
    out = node_aggregate(N.SAGE_LSTM, g, T.tensor(g.features), p, activation=None).data
    np.testing.assert_allclose(out, dense_reference(N.SAGE_LSTM, g, g.features, p), rtol=1e-11, atol=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_mlp_ignores_edges(seed):
    g = random_graph(8, 0.5, seed=seed)
    p = params_for(N.MLP, 3, 4, seed=seed)
    base = node_aggregate(N.MLP, g, T.tensor(g.features), p).data
    edges = [(u, v) for u, v in g.edge_set() if u < v]
    keep = edges[1:]
    g2 = add_self_loops(from_edges(8, keep, g.features, g.labels))
    np.testing.assert_array_equal(node_aggregate(N.MLP, g2, T.tensor(g.features), p).data, base)


@pytest.mark.parametrize("kind", ALL_NODE)
def test_outputs_finite_for_large_inputs(kind):
    g = random_graph(8, 0.4, seed=0)
    h = T.tensor(g.features * 50)
    assert np.all(np.isfinite(node_aggregate(kind, g, h, params_for(kind, 3, 4)).data))


def test_node_aggregate_requires_self_loops_and_shapes():
    g = from_edges(3, [(0, 1)], np.ones((3, 2)), np.zeros(3))
    p = params_for(N.GCN, 2, 2)
    with pytest.raises(ValueError, match="self-loops"):
        node_aggregate(N.GCN, g, T.tensor(g.features), p)
    g = add_self_loops(g)
    with pytest.raises(ValueError, match="do not match"):
        node_aggregate(N.GCN, g, T.tensor(np.ones((4, 2))), p)
    with pytest.raises(ValueError, match="shape"):
        node_aggregate(N.GCN, g, T.tensor(np.ones((3, 5))), p)
    with pytest.raises(ValueError):
        node_aggregate("not-an-aggregator", g, T.tensor(g.features), p)


# ---------------------------------------------------------------- layer aggregators

def test_layer_max_examples():
    a, b = T.tensor([[1.0, 5.0]]), T.tensor([[3.0, 2.0]])
    np.testing.assert_array_equal(layer_aggregate(L.MAX, [a, b]).data, [[3.0, 5.0]])
    np.testing.assert_array_equal(layer_aggregate(L.MAX, [a, a]).data, a.data)


def test_layer_concat_widths():
    x = layer_aggregate(L.CONCAT, [T.tensor(np.ones((5, 4))), T.tensor(np.zeros((5, 8)))])
    assert x.shape == (5, 12)
    np.testing.assert_array_equal(x.data[:, :4], 1)


def test_layer_lstm_matches_reference():
    rng = np.random.default_rng(0)
    layers = [T.tensor(rng.normal(size=(4, 3))) for _ in range(3)]
    p = init_params(layer_agg_param_schema(L.LSTM, 3), rng)
    out = layer_aggregate(L.LSTM, layers, p).data
    ref = [lstm_reference([x.data[i] for x in layers], p["lstm_wx"].data, p["lstm_wh"].data, p["lstm_b"].data)
           for i in range(4)]
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_layer_aggregate_rejects_empty_and_mismatched():
    with pytest.raises(ValueError, match="no layers"):
        layer_aggregate(L.CONCAT, [])
    with pytest.raises(ValueError, match="shapes differ"):
        layer_aggregate(L.MAX, [T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 4)))])


# ---------------------------------------------------------------- full forward

def test_all_zero_skips_depend_only_on_last_layer():
    g = random_graph(8, 0.4, seed=3)
    geno = Genotype((N.GCN, N.SAGE_MEAN, N.GAT), (False, False), L.MAX)
    model = build_model(geno, 3, 2, hidden=4, rng=np.random.default_rng(1))
    h = T.tensor(g.features)
    for kind, p in zip(geno.node_aggs, model.layers):
        h = node_aggregate(kind, g, h, p)
    manual = h @ model.classifier["weight"] + model.classifier["bias"]
    np.testing.assert_array_equal(forward(model, g).data, manual.data)
    assert model.output_width == 4


def test_single_layer_model():
    g = random_graph(6, 0.5, seed=0)
    for agg in ALL_LAYER + [None]:
        geno = Genotype((N.GCN,), (), agg)
        model = build_model(geno, 3, 2, hidden=4)
        assert forward(model, g).shape == (6, 2)


@pytest.mark.parametrize("skips,width", [((False, False), 4), ((True, False), 8), ((True, True), 12)])
def test_concat_width_follows_skips(skips, width):
    model = build_model(Genotype((N.GCN,) * 3, skips, L.CONCAT), 3, 2, hidden=4)
    assert model.output_width == width


def test_gcn_jk_matches_hand_assembled_forward():
    g = random_graph(10, 0.3, seed=7)
    geno = Genotype((N.GCN,) * 3, (True, True), L.CONCAT)
    model = build_model(geno, 3, 2, hidden=5, rng=np.random.default_rng(2))
    # hand assembly from the same primitives: bit-exact
    h, outs = T.tensor(g.features), []
    for p in model.layers:
        h = node_aggregate(N.GCN, g, h, p)
        outs.append(h)
    hand = T.concat(outs, axis=1) @ model.classifier["weight"] + model.classifier["bias"]
    got = forward(model, g).data
    np.testing.assert_array_equal(got, hand.data)
    # dense normalised adjacency: independent of the sparse code path
    a = np.zeros((10, 10))
    for v, u in zip(g.sources, g.targets):
        a[v, u] = 1.0
    d = a.sum(1)
    a_hat = a / np.sqrt(np.outer(d, d))
    x, outs = g.features, []
    for p in model.layers:
        pre = a_hat @ (x @ p["weight"].data) + p["bias"].data
        x = np.where(pre > 0, pre, np.expm1(np.minimum(pre, 0)))
        outs.append(x)
    dense = np.concatenate(outs, axis=1) @ model.classifier["weight"].data + model.classifier["bias"].data
    np.testing.assert_allclose(got, dense, rtol=1e-12, atol=1e-14)


def test_forward_rejects_inconsistent_genotype():
    g = random_graph(6, 0.5, seed=0)
    geno = Genotype((N.GCN,) * 2, (True,), L.CONCAT)
    model = build_model(geno, 3, 2, hidden=4)
    with pytest.raises(ValueError, match="built for"):
        forward(model, g, Genotype((N.GAT,) * 2, (True,), L.CONCAT))
    with pytest.raises(ValueError, match="features"):
        forward(model, random_graph(6, 0.5, seed=0, d=4))


def test_forward_adds_self_loops_when_missing():
    rng = np.random.default_rng(0)
    g = from_edges(5, [(0, 1), (1, 2)], rng.normal(size=(5, 3)), np.zeros(5))
    model = build_model(Genotype((N.GCN,), (), L.CONCAT), 3, 2, hidden=4)
    np.testing.assert_array_equal(forward(model, g).data, forward(model, add_self_loops(g)).data)


def test_dropout_only_in_training():
    g = random_graph(8, 0.4, seed=0)
    model = build_model(Genotype((N.GCN,) * 2, (True,), L.CONCAT), 3, 2, hidden=4, dropout=0.5)
    a = forward(model, g).data
    np.testing.assert_array_equal(a, forward(model, g).data)
    b = forward(model, g, training=True, rng=np.random.default_rng(0)).data
    assert not np.array_equal(a, b)


TOY = random_graph(6, 0.5, seed=11)


@pytest.mark.parametrize("layer_agg", ALL_LAYER)
@pytest.mark.parametrize("kind", ALL_NODE)
def test_forward_loss_gradients(kind, layer_agg):
    geno = Genotype((kind, kind), (True,), layer_agg)
    model = build_model(geno, 3, 3, hidden=3, rng=np.random.default_rng(4))
    rng = np.random.default_rng(5)
    for p in model.parameters():
        p.data = p.data + 0.1 * rng.normal(size=p.shape)
    labels = np.array([0, 1, 2, 0, 1, 2])

    def fn(*_):
        return loss(forward(model, TOY), labels)

    report = finite_diff_check(fn, model.parameters(), tolerance=1e-5)
    assert report.passed, report.max_rel_error


# ---------------------------------------------------------------- loss and metric

def test_uniform_logits_loss_is_log_classes():
    assert loss(T.tensor(np.zeros((4, 7))), np.arange(4)).item() == pytest.approx(math.log(7), rel=1e-14)


def test_extreme_logits_loss_vanishes():
    logits = np.full((3, 4), -500.0)
    logits[np.arange(3), [0, 2, 3]] = 500.0
    assert loss(T.tensor(logits), np.array([0, 2, 3])).item() < 1e-300


def test_two_class_hand_example():
    value = loss(T.tensor([[2.0, 0.0]]), np.array([0])).item()
    assert value == pytest.approx(-math.log(math.exp(2) / (math.exp(2) + 1)), rel=1e-14)
    assert value == pytest.approx(0.1269, abs=5e-5)


def test_loss_mask_and_label_range():
    logits = T.tensor([[2.0, 0.0], [0.0, 0.0]])
    masked = loss(logits, np.array([0, 1]), np.array([True, False])).item()
    assert masked == pytest.approx(0.12692801104297263, rel=1e-14)
    with pytest.raises(ValueError):
        loss(logits, np.array([0, 2]))
    with pytest.raises(ValueError):
        loss(logits, np.array([0, 1]), task="regression")


def test_multilabel_loss_is_mean_bce():
    x = np.array([[0.3, -1.2], [2.0, 0.5]])
    y = np.array([[1, 0], [0, 1]])
    expected = -np.mean(y * np.log(expit(x)) + (1 - y) * np.log(1 - expit(x)))
    assert loss(T.tensor(x), y, task="multilabel").item() == pytest.approx(expected, rel=1e-13)


def test_accuracy_examples():
    labels = np.array([0, 1, 2])
    assert metric(np.eye(3), labels) == 1.0
    assert metric(np.eye(3)[[1, 2, 0]], labels) == 0.0
    # ties go to the lowest class index
    assert metric(np.zeros((3, 3)), np.array([0, 0, 1])) == pytest.approx(2 / 3)
    with pytest.raises(ValueError, match="empty"):
        metric(np.eye(3), labels, np.zeros(3, bool))


def test_micro_f1_hand_confusion_matrix():
    truth = np.array([[1, 1, 0], [1, 0, 0]])
    pred = np.array([[1, 1, 1], [0, 0, 0]])  # TP 2, FP 1, FN 1
    logits = np.where(pred, 5.0, -5.0)
    assert metric(logits, truth, kind="micro_f1") == pytest.approx(2 / 3, rel=1e-15)
    assert metric(np.where(truth, 3.0, -3.0), truth, kind="micro_f1") == 1.0
    assert metric(np.where(truth, -3.0, 3.0), truth, kind="micro_f1") == 0.0
