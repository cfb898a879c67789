import inspect
import math

import numpy as np
import pytest

from snag.gnn import LayerAggregatorKind as L, NodeAggregatorKind as N
from snag.graph import InductiveDataset, add_self_loops, from_edges
from snag.space import Genotype, SearchSpaceConfig, baseline_genotype, decode, enumerate_space, space_size
from snag.search import (ChildConfig, Controller, ControllerConfig, ParamDict, SearchTrace, TraceRecord, derive,
                         random_search, reinforce_update, search, seed_streams, surrogate_loss, train_child)
from snag.tensor import finite_diff_check

FAST = ChildConfig(hidden=8, max_epochs=40, patience=10)
TINY_SPACE = SearchSpaceConfig(num_layers=2, node_aggs=(N.GCN, N.SAGE_MEAN), layer_aggs=(L.CONCAT, L.MAX, L.LSTM))
BANDIT = SearchSpaceConfig(num_layers=1, node_aggs=(N.GCN, N.MLP), layer_aggs=(L.CONCAT,))


# ---------------------------------------------------------------- controller

def test_controller_slot_count_and_uniform_start():
    c = Controller(SearchSpaceConfig(num_layers=3))
    geno, ep = c.sample(np.random.default_rng(0))
    assert c.num_slots == 6 and len(ep.actions) == 6 and len(ep.log_probs) == 6
    for lp, n in zip(ep.log_probs, [11, 11, 11, 2, 2, 3]):
        assert lp.item() == pytest.approx(-math.log(n), abs=1e-15)
    assert ep.entropy.item() == pytest.approx(3 * math.log(11) + 2 * math.log(2) + math.log(3), rel=1e-13)
    assert geno in SearchSpaceConfig(num_layers=3)


def test_ablated_controller_has_only_node_slots():
    c = Controller(SearchSpaceConfig(num_layers=3, include_layer_aggregators=False))
    geno, _ = c.sample(np.random.default_rng(1))
    assert c.num_slots == 3
    assert geno.layer_agg is None and not any(geno.skips)


def test_controller_sampling_is_deterministic():
    space = SearchSpaceConfig()
    a = [Controller(space, seed=3).sample(np.random.default_rng(9))[0] for _ in range(2)]
    assert a[0] == a[1]


def test_slot_distributions_sum_to_one():
    c = Controller(SearchSpaceConfig(), seed=0)
    rng = np.random.default_rng(0)
    for p in c.heads:
        for t in p:
            t.data = rng.normal(size=t.shape)
    for probs in c.slot_distributions([3, 7, 1, 1, 0, 2]):
        assert abs(probs.sum() - 1.0) < 1e-12


def test_probability_of_fresh_controller():
    c = Controller(TINY_SPACE)
    assert c.probability(next(enumerate_space(TINY_SPACE))) == pytest.approx(1 / space_size(TINY_SPACE), rel=1e-12)


# ---------------------------------------------------------------- REINFORCE

def episodes_with(c, rewards, seed=0):
    rng = np.random.default_rng(seed)
    eps = []
    for r in rewards:
        _, ep = c.sample(rng)
        ep.reward = r
        eps.append(ep)
    return eps


def test_baseline_ema_arithmetic():
    c = Controller(BANDIT, ControllerConfig(baseline_decay=0.9))
    assert c.baseline == 0.0
    reinforce_update(c, episodes_with(c, [1.0]))
    assert c.baseline == pytest.approx(0.1, abs=1e-15)


def test_zero_advantage_leaves_parameters_unchanged():
    c = Controller(TINY_SPACE, seed=1)
    c.baseline = 0.6
    before = [p.data.copy() for p in c.parameters()]
    reinforce_update(c, episodes_with(c, [0.6, 0.6, 0.6]), entropy_beta=0.0)
    for a, p in zip(before, c.parameters()):
        np.testing.assert_array_equal(a, p.data)


def test_rewards_outside_unit_interval_rejected():
    c = Controller(BANDIT)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        reinforce_update(c, episodes_with(c, [1.5]))
    with pytest.raises(ValueError):
        reinforce_update(c, [])


def test_bandit_converges_to_rewarded_genotype():
    target = Genotype((N.MLP,), (), L.CONCAT)
    c = Controller(BANDIT, ControllerConfig(lr=0.01, entropy_beta=0.0), seed=0)
    rng = np.random.default_rng(0)
    for step in range(500):
        geno, ep = c.sample(rng)
        ep.reward = 1.0 if geno == target else 0.0
        reinforce_update(c, [ep])
        if c.probability(target) > 0.9:
            break
    assert c.probability(target) > 0.9, step


@pytest.mark.parametrize("beta", [0.0, 0.1])
def test_surrogate_gradient_matches_finite_differences(beta):
    c = Controller(TINY_SPACE, ControllerConfig(hidden=4, embed=3), seed=2)
    rng = np.random.default_rng(5)
    for p in c.parameters():
        p.data = p.data + 0.3 * rng.normal(size=p.shape)
    c.baseline = 0.4
    frozen = [(ep.actions, ep.reward) for ep in episodes_with(c, [0.9, 0.1, 0.55], seed=3)]

    def fn(*_):
        eps = []
        for actions, reward in frozen:
            ep = c.rollout(actions=actions)
            ep.reward = reward
            eps.append(ep)
        return surrogate_loss(c, eps, beta)

    report = finite_diff_check(fn, c.parameters(), tolerance=1e-5)
    assert report.passed, report.max_rel_error


def test_advantage_invariance_under_reward_shift():
    rewards = np.array([0.1, 0.5, 0.3, 0.2])
    shift = 0.4
    argmaxes = []
    for offset in (0.0, shift):
        c = Controller(TINY_SPACE, seed=4)
        eps = episodes_with(c, list(rewards + offset), seed=6)
        # baseline at its stationary value for these rewards
        c.baseline = float(np.mean(rewards + offset))
        reinforce_update(c, eps)
        argmaxes.append([int(np.argmax(p)) for p in c.slot_distributions(eps[0].actions)])
        params = [p.data.copy() for p in c.parameters()]
        if offset == 0.0:
            ref = params
    assert argmaxes[0] == argmaxes[1]
    for a, b in zip(ref, params):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------- child training

def test_train_child_on_separable_graph(separable):
    res = train_child(baseline_genotype("GCN"), separable, ChildConfig(hidden=16, max_epochs=200, patience=200))
    assert res.val_metric == 1.0
    assert not res.diverged and res.epochs <= 200


def test_max_epochs_zero_round_trips_shared_parameters(separable):
    geno = baseline_genotype("GCN", num_layers=2)
    shared = ParamDict()
    train_child(geno, separable, ChildConfig(hidden=8, max_epochs=5), shared, seed=1)
    snapshot = {k: shared.get(*k) for k in shared.keys()}
    res = train_child(geno, separable, ChildConfig(hidden=8, max_epochs=0), shared, seed=2)
    assert res.epochs == 0
    for key, entry in snapshot.items():
        for name, value in entry.items():
            np.testing.assert_array_equal(shared.get(*key)[name], value)
    again = train_child(geno, separable, ChildConfig(hidden=8, max_epochs=0), seed=3)
    assert 0.0 <= again.val_metric <= 1.0


def test_train_child_is_deterministic(noisy):
    geno = decode("node:gat,sage-max;skip:1;layer:max")
    a = train_child(geno, noisy, FAST, seed=7)
    b = train_child(geno, noisy, FAST, seed=7)
    assert (a.val_metric, a.test_metric, a.epochs) == (b.val_metric, b.test_metric, b.epochs)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_train_child_inductive_multilabel():
    def graph(seed):
        r = np.random.default_rng(seed)
        n = 12
        edges = [(u, v) for u in range(n) for v in range(u + 1, n) if r.random() < 0.3]
        labels = r.integers(0, 2, size=(n, 4))
        feats = labels + 0.1 * r.normal(size=labels.shape)
        return add_self_loops(from_edges(n, edges, feats, labels))

    data = InductiveDataset([graph(s) for s in range(3)], [graph(10)], [graph(11)])
    res = train_child(baseline_genotype("GCN-JK", 2), data, ChildConfig(hidden=8, max_epochs=60, patience=60))
    assert 0.5 < res.val_metric <= 1.0


# ---------------------------------------------------------------- weight sharing store

def test_param_dict_round_trip_and_absence():
    d = ParamDict()
    assert d.get(1, "gcn") is None
    x = {"weight": np.random.default_rng(0).normal(size=(3, 4)), "bias": np.arange(4.0)}
    d.put(1, "gcn", x)
    got = d.get(1, "gcn")
    for k in x:
        assert got[k].tobytes() == x[k].tobytes()
    got["weight"][0, 0] = 99.0
    assert d.get(1, "gcn")["weight"][0, 0] == x["weight"][0, 0]


def test_param_dict_keys_are_independent():
    d = ParamDict()
    d.put(1, "gcn", {"weight": np.zeros((2, 2))})
    d.put(2, "gcn", {"weight": np.ones((2, 2))})
    assert d.get(1, "gcn")["weight"].sum() == 0 and d.get(2, "gcn")["weight"].sum() == 4
    assert len(d) == 2 and (1, "gcn") in d and (3, "gcn") not in d


def test_param_dict_shape_mismatch():
    d = ParamDict()
    d.put(1, "gcn", {"weight": np.zeros((2, 2))})
    with pytest.raises(ValueError, match="shape mismatch"):
        d.put(1, "gcn", {"weight": np.zeros((3, 2))})
    with pytest.raises(ValueError, match="shape mismatch"):
        d.put(2, "gat", {"weight": np.zeros((3, 2))}, schema={"weight": (2, 2)})


def test_weight_sharing_populates_store(separable):
    shared = ParamDict()
    train_child(decode("node:gcn,gat;skip:1;layer:lstm"), separable, FAST, shared)
    assert set(shared.keys()) == {(1, "gcn"), (2, "gat"), (3, "lstm"), (3, "classifier-8")}


# ---------------------------------------------------------------- search loops

def test_budget_one_gives_one_record(separable):
    res = search(TINY_SPACE, separable, budget=1, child_cfg=FAST)
    assert len(res.trace) == 1


def test_search_trace_invariants(noisy):
    res = search(TINY_SPACE, noisy, budget=6, seed=1, child_cfg=FAST)
    best = res.trace.best_so_far()
    assert all(a <= b for a, b in zip(best, best[1:]))
    assert [r.iteration for r in res.trace] == list(range(1, 7))
    secs = [r.seconds for r in res.trace]
    assert secs == sorted(secs)
    for r in res.trace:
        assert decode(r.genotype) in TINY_SPACE


def test_ws_and_plain_identical_at_budget_one(noisy):
    a = search(TINY_SPACE, noisy, budget=1, ws=False, seed=3, child_cfg=FAST, record_timing=False)
    b = search(TINY_SPACE, noisy, budget=1, ws=True, seed=3, child_cfg=FAST, record_timing=False)
    assert a.trace.records == b.trace.records
    assert len(b.shared) > 0 and a.shared is None


@pytest.mark.parametrize("seed", range(5))
def test_guided_search_matches_fixed_baseline(separable, seed):
    cfg = ChildConfig(hidden=8, max_epochs=60, patience=20)
    fixed = train_child(baseline_genotype("GCN"), separable, cfg, seed=seed_streams(seed)[2])
    space = SearchSpaceConfig(num_layers=3, node_aggs=tuple(k for k in N if k is not N.SAGE_LSTM))
    res = search(space, separable, budget=20, seed=seed, child_cfg=cfg)
    assert res.trace.best().val_metric >= fixed.val_metric


def test_random_search_exhaustive_finds_argmax(noisy):
    space = SearchSpaceConfig(num_layers=2, node_aggs=(N.GCN, N.MLP))
    assert space_size(space) == 24
    trace = random_search(space, noisy, budget=24, seed=0, child_cfg=FAST, dedup=True)
    child_seed = seed_streams(0)[2]
    oracle = {g: train_child(g, noisy, FAST, seed=child_seed).val_metric for g in enumerate_space(space)}
    assert {decode(r.genotype) for r in trace} == set(oracle)
    assert trace.best().val_metric == max(oracle.values())
    assert oracle[decode(trace.best().genotype)] == max(oracle.values())


def test_random_search_seeds_differ(separable):
    cfg = ChildConfig(hidden=4, max_epochs=0)
    a = random_search(SearchSpaceConfig(), separable, budget=5, seed=0, child_cfg=cfg)
    b = random_search(SearchSpaceConfig(), separable, budget=5, seed=1, child_cfg=cfg)
    assert [r.genotype for r in a] != [r.genotype for r in b]
    assert len(a) == 5 and all(math.isnan(r.baseline) for r in a)


def test_budget_must_be_positive(separable):
    with pytest.raises(ValueError):
        search(TINY_SPACE, separable, budget=0)
    with pytest.raises(ValueError):
        random_search(TINY_SPACE, separable, budget=0)


# ---------------------------------------------------------------- derivation

def test_derive_defaults_to_ten_samples():
    assert inspect.signature(derive).parameters["n"].default == 10


def test_derive_returns_best_validation_candidate(noisy):
    c = Controller(BANDIT, seed=0)
    res = derive(c, noisy, child_cfg=FAST, lrs=(0.01, 0.005), hiddens=(8,))
    assert len(res.candidates) == 10
    assert all(res.val_metric >= cand["val_metric"] for cand in res.candidates)
    assert len(res.candidates[0]["grid"]) == 2
    assert res.to_json()["genotype"] == str(res.genotype)


def test_derive_single_shot(noisy):
    res = derive(Controller(BANDIT), noisy, n=1, child_cfg=FAST, lrs=(0.01,), hiddens=(8,))
    assert len(res.candidates) == 1
    assert res.val_metric == res.candidates[0]["val_metric"]


# ---------------------------------------------------------------- traces

def test_trace_csv_round_trip(tmp_path):
    trace = SearchTrace()
    trace.append(TraceRecord(1, 0.25, "node:gcn;skip:;layer:concat", 0.5, 0.025))
    trace.append(TraceRecord(2, 0.1 + 0.2, "node:gat;skip:;layer:max", 1 / 3, float("nan")))
    trace.write_csv(tmp_path / "t.csv")
    back = SearchTrace.read_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "iter,seconds,genotype,val_metric,baseline"
    for a, b in zip(trace, back):
        assert (a.iteration, a.seconds, a.genotype, a.val_metric) == (b.iteration, b.seconds, b.genotype, b.val_metric)
    assert math.isnan(back.records[1].baseline)


def test_trace_rejects_out_of_order_records():
    trace = SearchTrace()
    trace.append(TraceRecord(1, 1.0, "node:gcn;skip:;layer:concat", 0.5, 0.0))
    with pytest.raises(ValueError, match="increase"):
        trace.append(TraceRecord(1, 2.0, "node:gcn;skip:;layer:concat", 0.5, 0.0))
    with pytest.raises(ValueError, match="wall-clock"):
        trace.append(TraceRecord(2, 0.5, "node:gcn;skip:;layer:concat", 0.5, 0.0))
