import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sea.graph import Graph, SbmConfig, generate_sbm, random_tree_regression, save_jsonl_dataset
from sea.model import build_model
from sea.train import (EarlyStopper, PlateauScheduler, TrainConfig, accuracy, class_weights,
                       evaluate, expert_distribution_report, load_model, mae, mean_pairwise_cosine,
                       model_config_for, oversmoothing_diagnostic, predict, roc_auc, train)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestMetrics:
    def test_mae(self):
        assert mae([1, 2], [1, 4]) == 1.0

    def test_accuracy(self):
        assert accuracy([0, 1, 1], [0, 1, 1]) == 1.0
        assert accuracy([0, 0], [0, 1]) == 0.5

    def test_auc_examples(self):
        assert roc_auc([0.9, 0.1], [1, 0]) == 1.0
        assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_auc_single_class(self):
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2], [1, 1])

    def test_auc_random_50(self, rng):
        s = rng.normal(size=50)
        y = rng.integers(0, 2, 50)
        assert roc_auc(s, y) == pairwise_auc(s, y)

    @given(st.lists(st.tuples(st.integers(-5, 5), st.integers(0, 1)), min_size=2, max_size=100)
           .filter(lambda xs: len({y for _, y in xs}) == 2))
    def test_auc_oracle(self, items):
        s = [x / 2 for x, _ in items]  # coarse grid forces ties
        y = [t for _, t in items]
        assert abs(roc_auc(s, y) - pairwise_auc(s, y)) <= 1e-12

    def test_class_weights(self):
        w = class_weights(np.array([0, 0, 0, 1]), 2)
        assert np.allclose(w, [4 / 6, 4 / 2])


class TestDiagnostics:
    def test_collapse(self):
        r = expert_distribution_report([0] * 20, 4)
        assert r.frequencies.tolist() == [1.0, 0, 0, 0] and r.collapse
        assert r.shown == {0: 1.0}

    def test_threshold_and_sum(self, rng):
        ch = np.concatenate([np.zeros(995, int), np.ones(5, int)])
        r = expert_distribution_report(ch, 3)
        assert r.shown == {0: 0.995} and r.collapse
        r2 = expert_distribution_report(rng.integers(0, 5, 333), 5)
        assert abs(r2.frequencies.sum() - 1) <= 1e-12 and not r2.collapse

    def test_empty(self):
        with pytest.raises(ValueError):
            expert_distribution_report([], 2)

    def test_cosine(self):
        assert mean_pairwise_cosine(np.ones((4, 3)))[0] == pytest.approx(1.0)
        assert mean_pairwise_cosine(np.eye(3))[0] == 0.0
        m, used, excl = mean_pairwise_cosine(np.array([[1.0, 0], [0, 0], [2.0, 0]]))
        assert (m, used, excl) == (pytest.approx(1.0), 1, 2)

    def test_oversmoothing_table(self, rng):
        g = generate_sbm(SbmConfig(nodes_per_block=4))[0]
        cfg = TrainConfig(sbm={}, num_train=1, task="node_classification", hidden_dim=4,
                          num_heads=2, num_experts=3, lpe_dim=2)
        m = build_model(model_config_for(cfg, [g]), 0)
        rows = oversmoothing_diagnostic(m, g)
        assert [r["layer"] for r in rows] == [0, 1, 2, 3]
        assert all(r["pairs"] + r["excluded"] == 28 for r in rows)


class TestSchedules:
    def test_plateau_halves_at_epoch_6(self):
        s = PlateauScheduler(1e-3, 0.5, 5)
        lrs = [s.step(1.0) for _ in range(6)]
        assert lrs[:5] == [1e-3] * 5 and lrs[5] == 5e-4

    def test_small_gains_do_not_count(self):
        s = PlateauScheduler(1e-3, 0.5, 2, tol=1e-6)
        assert [s.step(v) for v in (1.0, 1.0 - 5e-7, 1.0 - 9e-7)] == [1e-3, 1e-3, 5e-4]

    @given(st.lists(st.floats(0, 10), min_size=1, max_size=60))
    def test_monotone(self, losses):
        s = PlateauScheduler(1e-3, 0.5, 5)
        lrs = [s.step(v) for v in losses]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))

    def test_early_stop_exactly_at_10(self):
        e = EarlyStopper(10, lower_is_better=False)
        assert not e.step(0.8)
        flags = [e.step(0.8) for _ in range(10)]
        assert flags == [False] * 9 + [True]

    @given(st.lists(st.integers(0, 5), min_size=1, max_size=40))
    def test_early_stop_matches_count(self, metrics):
        e = EarlyStopper(3, lower_is_better=True, tol=0)
        best, bad = np.inf, 0
        for v in metrics:
            if v < best:
                best, bad = v, 0
            else:
                bad += 1
            assert e.step(v) == (bad >= 3)


class TestConfig:
    def test_unknown_field(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"learning_rate": 1})

    def test_factor_range(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_reduce_factor=1.0)

    def test_file_round_trip(self, tmp_path):
        c = TrainConfig(sbm={"nodes_per_block": 3}, num_train=2, lr=0.01)
        p = tmp_path / "c.json"
        p.write_text(json.dumps(c.to_dict()))
        assert TrainConfig.from_file(p) == c


def small_cfg(tmp_path=None, **kw):
    base = dict(sbm={"nodes_per_block": 5, "p_intra": 0.6, "p_inter": 0.1, "seed": 1},
                num_train=6, num_val=2, num_test=2, variant="SEA_KHOP", khop=2,
                task="node_classification", hidden_dim=4, num_heads=2, num_experts=2, lpe_dim=2,
                batch_size=4, max_epochs=3, eval_every=1, seed=5,
                out_dir=None if tmp_path is None else str(tmp_path))
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_log_and_outputs(self, tmp_path):
        res = train(small_cfg(tmp_path))
        assert len(res.log) == 3 and res.stop_reason == "max_epochs"
        entry = json.loads(res.log[0])
        assert {"epoch", "lr", "epsilon", "train_loss", "val_loss", "val_metric", "test_loss",
                "test_metric", "expert_freq"} <= set(entry)
        assert (tmp_path / "train_log.jsonl").read_text().splitlines() == res.log
        for name in ("best.json", "last.json", "report.json"):
            assert (tmp_path / name).exists()
        model = load_model(tmp_path / "last.json")
        splits_test = generate_sbm(SbmConfig(num_graphs=10, nodes_per_block=5, p_intra=0.6,
                                             p_inter=0.1, seed=1))[8:]
        assert evaluate(model, splits_test).metric == res.test_report.metric

    def test_deterministic_logs(self):
        a, b = train(small_cfg()), train(small_cfg())
        assert a.log == b.log

    def test_min_lr_halts(self):
        # a huge tolerance makes every epoch after the first a plateau
        res = train(small_cfg(lr=1.5e-6, min_lr=1e-6, lr_patience=1, max_epochs=50,
                              improvement_tol=10.0))
        assert res.stop_reason == "min_lr" and len(res.log) == 2
        assert json.loads(res.log[-1])["lr"] == 7.5e-7

    def test_early_stop(self):
        res = train(small_cfg(lr=1e-9, min_lr=1e-12, early_stop_patience=2, max_epochs=50))
        assert res.stop_reason == "early_stop" and len(res.log) == 3

    def test_task_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            train(small_cfg(task="graph_regression"))

    def test_jsonl_regression(self, tmp_path):
        gs = random_tree_regression(seed=2)
        save_jsonl_dataset(gs[:6], tmp_path / "tr.jsonl")
        save_jsonl_dataset(gs[6:], tmp_path / "te.jsonl")
        cfg = TrainConfig(train_path=str(tmp_path / "tr.jsonl"), test_path=str(tmp_path / "te.jsonl"),
                          hidden_dim=4, num_heads=2, num_experts=2, lpe_dim=2, max_epochs=2)
        res = train(cfg)
        assert res.test_report.metric_name == "MAE"
        pred, _ = predict(res.model, gs[6:])
        assert res.test_report.metric == pytest.approx(np.mean(np.abs(pred[:, 0] - [g.y_graph for g in gs[6:]])))

    def test_evaluate_batching(self, rng):
        gs = generate_sbm(SbmConfig(num_graphs=5, nodes_per_block=4, seed=3))
        cfg = small_cfg()
        m = build_model(model_config_for(cfg, gs), 0)
        a = evaluate(m, gs, batch_size=64)
        b = evaluate(m, gs, batch_size=1)
        assert abs(a.loss - b.loss) <= 1e-10 and a.metric == b.metric
        assert a.metric_name == "accuracy"

    def test_evaluate_errors(self):
        gs = generate_sbm(SbmConfig(num_graphs=1, nodes_per_block=4))
        m = build_model(model_config_for(small_cfg(), gs), 0)
        with pytest.raises(ValueError):
            evaluate(m, [])
        with pytest.raises(ValueError):
            evaluate(m, [Graph.from_edges(2, [(0, 1)], y_graph=1.0)])
