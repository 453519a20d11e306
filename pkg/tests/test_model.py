import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import er_graph, hop_distance
from sea import autodiff as ad
from sea.checks import SEA_VARIANTS, sea_cases
from sea.graph import Graph, attention_support, batch
from sea.gtl import gtl_forward
from sea.model import (RoutingDecision, SeaConfig, SeaModel, build_model, expert_states,
                       expert_transform, model_forward, route)
from sea.train import task_loss


def cfg_(**kw):
    base = dict(num_heads=2, hidden_dim=4, lpe_dim=3, node_vocab=4, num_experts=3)
    base.update(kw)
    return SeaConfig(**base)


def graph_with_tokens(rng, n=8, p=0.35, **kw):
    return er_graph(rng, n, p, node_feat=rng.integers(0, 4, n), **kw)


class TestRoute:
    def test_zero_router(self):
        d = route(np.ones((5, 4)), np.zeros((4, 3)))
        assert np.allclose(d.probs, 1 / 3) and d.choice.tolist() == [0] * 5
        assert not d.explored.any()

    def test_softmax_example(self):
        d = route(np.array([[1.0]]), np.array([[0.0, 5.0, 0.0]]))
        assert d.choice.tolist() == [1]
        z = 2 + np.exp(5)
        assert np.allclose(d.probs[0], [1 / z, np.exp(5) / z, 1 / z], rtol=0, atol=1e-15)
        assert np.all(np.abs(d.probs[0] - [0.0067, 0.9867, 0.0067]) <= 1e-4)

    @pytest.mark.parametrize("n_exp", [4, 8])
    def test_uniform_exploration(self, n_exp):
        n = 10_000
        d = route(np.zeros((n, 2)), np.zeros((2, n_exp)), epsilon=1.0, seed=5)
        assert d.explored.all()
        freq = np.bincount(d.choice, minlength=n_exp) / n
        sigma = np.sqrt((1 / n_exp) * (1 - 1 / n_exp) / n)
        assert np.all(np.abs(freq - 1 / n_exp) <= 3 * sigma)

    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
    def test_probs_and_scale_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        h, w = rng.normal(size=(20, 4)), rng.normal(size=(4, 5))
        a, b = route(h, w), route(h, c * w)
        assert np.all(a.probs > 0) and np.all(np.abs(a.probs.sum(axis=1) - 1) <= 1e-9)
        assert np.array_equal(a.choice, b.choice)

    def test_ties_pick_lowest(self):
        d = route(np.array([[1.0, 0.0]]), np.array([[2.0, 2.0, 1.0], [0.0, 0.0, 0.0]]))
        assert d.choice.tolist() == [0]

    def test_seeded_and_batch_independent(self, rng):
        h, w = rng.normal(size=(30, 3)), rng.normal(size=(3, 4))
        keys = np.repeat([4, 9, 2], 10)
        a = route(h, w, 0.5, seed=3, keys=keys)
        b = route(h, w, 0.5, seed=3, keys=keys)
        assert np.array_equal(a.choice, b.choice)
        part = route(h[10:20], w, 0.5, seed=3, keys=keys[10:20])
        assert np.array_equal(part.choice, a.choice[10:20])

    def test_epsilon_range(self):
        with pytest.raises(ValueError):
            route(np.zeros((1, 1)), np.zeros((1, 2)), epsilon=1.5)


class TestExpertTransform:
    def test_identity_and_constant(self, rng):
        x = ad.Tensor(rng.normal(size=(3, 4)))
        assert np.array_equal(expert_transform(x, ad.Tensor(np.eye(4)), ad.Tensor(np.zeros(4))).data, x.data)
        c = rng.normal(size=4)
        out = expert_transform(x, ad.Tensor(np.zeros((4, 4))), ad.Tensor(c)).data
        assert np.array_equal(out, np.tile(c, (3, 1)))

    def test_matches_matvec(self, rng):
        x, w, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 4)), rng.normal(size=4)
        out = expert_transform(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)).data
        for i in range(5):
            assert np.max(np.abs(out[i] - (w.T @ x[i] + b))) <= 1e-12


class TestConfig:
    def test_epsilon_schedule(self):
        c = cfg_(epsilon0=0.5, epsilon_decay=0.9, epsilon_floor=0.1)
        assert c.epsilon(0) == 0.5 and abs(c.epsilon(1) - 0.45) < 1e-15 and c.epsilon(100) == 0.1

    @pytest.mark.parametrize("kw", [dict(variant="SEA_X"), dict(num_experts=0), dict(khop=0),
                                    dict(aggregate="median"), dict(node_vocab=0),
                                    dict(node_in_dim=3), dict(task="ranking")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            cfg_(**kw)

    def test_round_trip(self):
        c = cfg_(variant="SEA_KHOP", augmented=True)
        assert SeaConfig.from_dict(c.to_dict()) == c


class TestExperts:
    def test_single_expert_is_one_layer(self, rng):
        g = graph_with_tokens(rng)
        m = build_model(cfg_(num_experts=1), 0)
        b = batch([g])
        h0, tables = expert_states(b, m)
        want, _ = gtl_forward(h0, None, attention_support(g, 1), m.params, "gtl1", m.config.layer_config())
        assert len(tables) == 1 and np.array_equal(tables[0].data, want.data)

    @pytest.mark.parametrize("edges", [False, True])
    def test_khop1_equals_gnn(self, rng, edges):
        kw = dict(use_edge_features=edges, edge_vocab=3 if edges else 0)
        g = graph_with_tokens(rng, edge_feat=None)
        if edges:
            g = Graph.from_edges(g.num_nodes, g.edge_list(), node_feat=g.node_feat,
                                 edge_feat=rng.integers(0, 3, g.num_edges))
        a = build_model(cfg_(variant="SEA_GNN", **kw), 7)
        k = SeaModel(cfg_(variant="SEA_KHOP", khop=1, **kw), a.params)
        b = batch([g])
        pa, da = model_forward(b, a)
        pk, dk = model_forward(b, k)
        assert pa.data.tobytes() == pk.data.tobytes()
        assert np.array_equal(da.choice, dk.choice)

    def test_receptive_field(self, rng):
        for case in range(6):
            g = graph_with_tokens(rng, n=10, p=0.2)
            m = build_model(cfg_(num_experts=3, use_lpe=False), case)
            dist = hop_distance(g.adjacency(), 10)
            u = int(rng.integers(10))
            _, base = expert_states(batch([g]), m)
            for i in range(1, 4):
                far = np.flatnonzero((dist[u] > i) | (dist[u] < 0))
                if not len(far):
                    continue
                feat = g.node_feat.copy()
                feat[far] = (feat[far] + 1) % 4
                g2 = Graph.from_edges(10, g.edge_list(), node_feat=feat)
                _, pert = expert_states(batch([g2]), m)
                assert np.array_equal(pert[i - 1].data[u], base[i - 1].data[u])

    def test_experts_differ_on_path(self, rng):
        g = Graph.from_edges(5, [(i, i + 1) for i in range(4)], node_feat=[0, 1, 2, 3, 0])
        _, tables = expert_states(batch([g]), build_model(cfg_(num_experts=3), 1))
        assert not np.allclose(tables[0].data, tables[1].data)
        assert not np.allclose(tables[1].data, tables[2].data)


def identity_trunk(m):
    for k, t in m.params.items():
        if k.startswith("gtl1."):
            t.data[:] = 0.0
    return m


class TestAggregated:
    def model(self, **kw):
        return identity_trunk(build_model(cfg_(variant="SEA_AGGREGATED", use_lpe=False, **kw), 0))

    def test_regular_graph_constant(self):
        c4 = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3), (0, 3)], node_feat=[1, 1, 1, 1])
        m = self.model()
        _, t = expert_states(batch([c4]), m)
        c = m.params["embed.node"].data[1]
        assert np.allclose(t[1].data, 2 * c, atol=1e-14)
        assert np.allclose(t[2].data, 4 * c, atol=1e-14)

    def test_p3_center(self):
        p3 = Graph.from_edges(3, [(0, 1), (1, 2)], node_feat=[0, 1, 2])
        m = self.model()
        _, t = expert_states(batch([p3]), m)
        b = m.params["embed.node"].data[1]
        assert np.allclose(t[1].data[1], b, atol=1e-14)

    def test_isolated_zero(self):
        g = Graph.from_edges(3, [(0, 1)], node_feat=[0, 1, 2])
        _, t = expert_states(batch([g]), self.model())
        assert not t[1].data[2].any()

    def test_include_self_still_excludes_u(self):
        p3 = Graph.from_edges(3, [(0, 1), (1, 2)], node_feat=[0, 1, 2])
        a = self.model()
        b = SeaModel(cfg_(variant="SEA_AGGREGATED", use_lpe=False, include_self=True), a.params)
        _, ta = expert_states(batch([p3]), a)
        _, tb = expert_states(batch([p3]), b)
        assert np.array_equal(ta[0].data, tb[0].data)  # identity trunk, so self pairs are inert
        assert np.array_equal(ta[1].data, tb[1].data)


class TestForward:
    def test_single_expert_is_plain(self, rng):
        g = graph_with_tokens(rng, y_graph=0.0)
        m = build_model(cfg_(num_experts=1), 2)
        b = batch([g])
        pred, dec = model_forward(b, m, epsilon=0.9, seed=4)
        _, tables = expert_states(b, m)
        p = {k: v.data for k, v in m.params.items()}
        hn = tables[0].data @ p["expert0.W"] + p["expert0.b"]
        want = hn.sum(axis=0) @ p["head.W"] + p["head.b"]
        assert np.allclose(pred.data[0], want, atol=1e-12) and set(dec.choice.tolist()) == {0}

    def test_router_scale_invariance(self, rng):
        g = graph_with_tokens(rng)
        m = build_model(cfg_(), 3)
        b = batch([g])
        a, da = model_forward(b, m)
        m.params["router.W"].data *= 3.7
        c, dc = model_forward(b, m)
        assert np.array_equal(da.choice, dc.choice) and np.array_equal(a.data, c.data)

    def test_deterministic(self, rng):
        g = graph_with_tokens(rng)
        m = build_model(cfg_(), 3)
        b = batch([g])
        a, da = model_forward(b, m, epsilon=0.5, seed=9)
        c, dc = model_forward(b, m, epsilon=0.5, seed=9)
        assert a.data.tobytes() == c.data.tobytes() and np.array_equal(da.choice, dc.choice)

    def test_config_mismatch(self, rng):
        m = build_model(cfg_(), 0)
        with pytest.raises(ValueError, match="mismatch"):
            model_forward(batch([graph_with_tokens(rng)]), m, config=cfg_(num_experts=2))

    @pytest.mark.parametrize("variant,extra", SEA_VARIANTS)
    def test_batched_equals_single(self, rng, variant, extra):
        gs = [graph_with_tokens(rng, n=int(n), y_graph=0.0) for n in (4, 7, 5)]
        m = build_model(cfg_(variant=variant, **extra), 1)
        pb, _ = model_forward(batch(gs), m)
        for i, g in enumerate(gs):
            p1, _ = model_forward(batch([g]), m)
            assert np.max(np.abs(pb.data[i] - p1.data[0])) <= 1e-10

    def test_dense_node_features(self, rng):
        g = er_graph(rng, 6, 0.4, node_feat=rng.normal(size=(6, 3)), y_node=rng.integers(0, 2, 6))
        m = build_model(SeaConfig(node_in_dim=3, hidden_dim=4, num_heads=2, lpe_dim=2,
                                  task="node_classification"), 0)
        pred, _ = model_forward(batch([g]), m)
        assert pred.shape == (6, 2)


class TestGradientFlow:
    def test_isolation(self, rng):
        for case in range(10):
            g = graph_with_tokens(rng, y_node=rng.integers(0, 2, 8))
            m = build_model(cfg_(num_experts=4, task="node_classification"), case)
            b = batch([g])
            u = int(rng.integers(8))
            with ad.Tape() as tape:
                pred, dec = model_forward(b, m)
                loss = ad.sum_all(ad.gather_rows(pred, [u]))
            grads = ad.backward(tape, loss, wrt=list(m.params.values()))
            chosen = int(dec.choice[u])
            for i in range(4):
                gw, gb = (grads[m.params[f"expert{i}.{x}"]] for x in "Wb")
                if i == chosen:
                    assert gb.any()
                else:
                    assert not gw.any() and not gb.any()
            assert not grads[m.params["router.W"]].any()

    def test_end_to_end_gradcheck(self, rng):
        rows = [row for i in range(4) for row in sea_cases(rng, i)]
        assert max(e for _, e in rows) <= 1e-4


def test_task_loss_matches_targets(rng):
    g = graph_with_tokens(rng, y_graph=1.5)
    m = build_model(cfg_(), 0)
    b = batch([g])
    pred, _ = model_forward(b, m)
    assert abs(task_loss(pred, b, "graph_regression").item() - abs(pred.data[0, 0] - 1.5)) < 1e-12


def test_routing_pin(rng):
    g = graph_with_tokens(rng, y_graph=0.0)
    m = build_model(cfg_(), 0)
    b = batch([g])
    pinned = RoutingDecision(np.full((8, 3), 1 / 3), np.full(8, 2), np.zeros(8, bool))
    _, dec = model_forward(b, m, routing=pinned)
    assert dec is pinned
