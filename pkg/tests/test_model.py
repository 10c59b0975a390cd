import math

import numpy as np
import pytest

import storygraph.model as mdl
from storygraph.corpus import Split
from storygraph.issuegraph import HomoGraph, NodeType, type_erase
from storygraph.model import (
    Adam,
    BadLabel,
    ClassMap,
    EmptyMask,
    GcnNetwork,
    HgtConfig,
    HgtNetwork,
    NonFiniteLoss,
    ShapeMismatch,
    loss_ce,
    loss_l1,
    predict,
    train,
)

from conftest import FIVE_ISSUES, FIVE_ISSUE_SPLIT, make_issue, merge_issues

TINY = dict(layers=2, heads=2, hidden=8, input_dim=6, epochs=0, seed=7,
            dtype="float64")


def features_for(graph, dim, seed=3):
    rng = np.random.default_rng(seed)
    return {t: rng.normal(size=(len(ids), dim))
            for t, ids in graph.node_ids.items()}


@pytest.fixture(scope="module")
def five_graph():
    return merge_issues(FIVE_ISSUES, FIVE_ISSUE_SPLIT)


class TestHgtForward:
    def test_zero_weights_residual_identity(self, tiny_hetero):
        net = HgtNetwork(tiny_hetero, HgtConfig(**TINY))
        for arr in net.params.values():
            arr[...] = 0.0
        feats = features_for(tiny_hetero, 6)
        h0 = net._project_inputs(feats)
        h1, _ = net.layer_forward(0, h0)
        for t in h0:
            assert np.array_equal(h0[t], h1[t])
        assert np.array_equal(net.forward(feats), np.zeros(2))

    def test_singleton_neighborhood_softmax_is_one(self):
        graph = merge_issues([make_issue("A-1", "solo", ordinal=0)],
                             include_reverse=False)
        net = HgtNetwork(graph, HgtConfig(**TINY))
        feats = features_for(graph, 6)
        h0 = net._project_inputs(feats)
        _, cache = net.layer_forward(0, h0, with_cache=True)
        for group, (alpha, *_) in zip(net.plan.groups, cache.per_group):
            assert np.allclose(alpha, 1.0)

    def test_attention_sums_to_one(self, five_graph):
        net = HgtNetwork(five_graph, HgtConfig(**TINY))
        feats = features_for(five_graph, 6)
        h0 = net._project_inputs(feats)
        _, cache = net.layer_forward(0, h0, with_cache=True)
        for group, (alpha, *_) in zip(net.plan.groups, cache.per_group):
            sums = np.add.reduceat(alpha, group.seg_starts, axis=0)
            assert np.allclose(sums, 1.0, atol=1e-9)

    def test_prediction_vector_length(self, five_graph):
        net = HgtNetwork(five_graph, HgtConfig(**TINY))
        assert net.forward(features_for(five_graph, 6)).shape == (5,)

    def test_classification_logit_shape(self, five_graph):
        cfg = HgtConfig(**{**TINY, "task": mdl.CLASSIFICATION})
        net = HgtNetwork(five_graph, cfg, n_outputs=4)
        assert net.forward(features_for(five_graph, 6)).shape == (5, 4)

    def test_shape_mismatch(self, five_graph):
        net = HgtNetwork(five_graph, HgtConfig(**TINY))
        bad = features_for(five_graph, 5)
        with pytest.raises(ShapeMismatch):
            net.forward(bad)

    def test_permutation_equivariance(self, tiny_hetero):
        g = tiny_hetero
        perm = np.array([2, 0, 1])  # permute the three Sentence nodes
        node_ids = dict(g.node_ids)
        node_ids[NodeType.SENTENCE] = [g.node_ids[NodeType.SENTENCE][i] for i in perm]
        inv = np.argsort(perm)
        edges = {}
        for rel, arr in g.edges.items():
            src, dst = arr[0].copy(), arr[1].copy()
            if rel.src is NodeType.SENTENCE:
                src = inv[src]
            if rel.dst is NodeType.SENTENCE:
                dst = inv[dst]
            edges[rel] = np.vstack([src, dst])
        from storygraph.issuegraph import HeteroGraph

        permuted = HeteroGraph(node_ids, dict(g.node_tokens), edges,
                               list(g.doc_keys), g.labels.copy(), g.split.copy())
        cfg = HgtConfig(**TINY)
        feats = features_for(g, 6)
        feats_p = dict(feats)
        feats_p[NodeType.SENTENCE] = feats[NodeType.SENTENCE][perm]
        out = HgtNetwork(g, cfg).forward(feats)
        out_p = HgtNetwork(permuted, cfg).forward(feats_p)
        np.testing.assert_allclose(out, out_p, rtol=1e-10, atol=1e-12)

    def test_disjoint_copies_leave_predictions_unchanged(self):
        base = [
            make_issue("A-1", "alpha beta. gamma", "delta. {code} eps {code}", 2, ordinal=0),
            make_issue("A-2", "alpha gamma", "", 4, ordinal=1),
        ]
        extra = [
            make_issue("Z-1", "omega psi", "chi", 3, ordinal=2),
            make_issue("Z-2", "psi. omega", "", 6, ordinal=3),
        ]
        g_small = merge_issues(base)
        g_big = merge_issues(base + extra)
        cfg = HgtConfig(**TINY)
        rng = np.random.default_rng(0)
        vec = {}

        def feat_for(ident, dim=6):
            if ident not in vec:
                vec[ident] = rng.normal(size=dim)
            return vec[ident]

        feats_small = {
            t: np.array([feat_for(i) for i in ids])
            for t, ids in g_small.node_ids.items()
        }
        feats_big = {
            t: np.array([feat_for(i) for i in ids])
            for t, ids in g_big.node_ids.items()
        }
        out_small = HgtNetwork(g_small, cfg).forward(feats_small)
        out_big = HgtNetwork(g_big, cfg).forward(feats_big)
        for key in ("A-1", "A-2"):
            a = out_small[g_small.document_index(key)]
            b = out_big[g_big.document_index(key)]
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


class TestLosses:
    def test_l1_hand_values(self):
        loss, grad = loss_l1(np.array([2.0, 3.0]), np.array([1.0, 5.0]),
                             np.array([0, 1]))
        assert loss == pytest.approx(1.5)
        np.testing.assert_allclose(grad, [0.5, -0.5])

    def test_l1_zero_at_equality(self):
        pred = np.array([4.0, 4.0])
        loss, grad = loss_l1(pred, pred.copy(), np.array([0, 1]))
        assert loss == 0.0
        np.testing.assert_array_equal(grad, np.zeros(2))  # ties get 0

    def test_l1_masked_single_index(self):
        loss, grad = loss_l1(np.array([2.0, 3.0]), np.array([1.0, 5.0]),
                             np.array([0]))
        assert loss == pytest.approx(1.0)
        assert grad[1] == 0.0

    def test_l1_empty_mask(self):
        with pytest.raises(EmptyMask):
            loss_l1(np.zeros(2), np.zeros(2), np.array([], dtype=np.int64))

    def test_ce_uniform_logits(self):
        logits = np.zeros((3, 4))
        labels = np.array([0, 1, 2])
        loss, _ = loss_ce(logits, labels, np.arange(3))
        assert loss == pytest.approx(math.log(4))

    def test_ce_confident_correct_is_tiny(self):
        logits = np.full((2, 3), -50.0)
        logits[0, 1] = 50.0
        logits[1, 2] = 50.0
        loss, _ = loss_ce(logits, np.array([1, 2]), np.arange(2))
        assert loss < 1e-8

    def test_ce_gradient_rows_sum_to_zero(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(4, 5))
        labels = np.array([0, 2, 4, 1])
        _, grad = loss_ce(logits, labels, np.arange(4))
        np.testing.assert_allclose(grad.sum(axis=1), np.zeros(4), atol=1e-12)

    def test_ce_bad_label(self):
        with pytest.raises(BadLabel):
            loss_ce(np.zeros((2, 3)), np.array([0, 7]), np.arange(2))


class TestClassMap:
    def test_sorted_distinct(self):
        cm = ClassMap.from_labels(np.array([5.0, 1.0, 5.0, 8.0]))
        np.testing.assert_array_equal(cm.values, [1.0, 5.0, 8.0])
        assert cm.n_classes == 3

    def test_exact_index_raises_for_unknown(self):
        cm = ClassMap.from_labels(np.array([1.0, 5.0]))
        with pytest.raises(BadLabel):
            cm.exact_index(np.array([2.0]))

    def test_nearest_tie_breaks_low(self):
        cm = ClassMap.from_labels(np.array([1.0, 3.0]))
        np.testing.assert_array_equal(cm.nearest_index(np.array([2.0])), [0])

    def test_needs_two_classes(self):
        with pytest.raises(BadLabel):
            ClassMap.from_labels(np.array([3.0, 3.0]))


class TestTrain:
    def test_zero_epochs_keeps_initialization(self, five_graph):
        cfg = HgtConfig(**TINY)
        net = HgtNetwork(five_graph, cfg)
        before = {k: v.copy() for k, v in net.params.items()}
        feats = features_for(five_graph, 6)
        initial = net.forward(feats)
        result = train(net, feats, five_graph.labels, five_graph.split)
        assert len(result.trace) == 0
        for k in before:
            assert np.array_equal(before[k], net.params[k])
        np.testing.assert_array_equal(initial, net.forward(feats))

    def test_constant_labels_converge(self, five_graph):
        # the L1 subgradient never vanishes, so late training oscillates in
        # a small band; the band width scales with the step size
        cfg = HgtConfig(layers=2, heads=2, hidden=16, input_dim=6,
                        epochs=500, seed=3, learning_rate=0.002,
                        dtype="float64")
        net = HgtNetwork(five_graph, cfg)
        feats = features_for(five_graph, 6)
        labels = np.full(5, 7.0)
        split = np.zeros(5, dtype=np.int8)
        result = train(net, feats, labels, split)
        final = net.forward(feats)
        assert len(result.trace) == 500
        assert np.all(np.abs(final - 7.0) < 0.2)
        assert result.trace.losses[50] < result.trace.losses[0]

    def test_same_seed_identical_trace(self, five_graph):
        def run():
            cfg = HgtConfig(layers=1, heads=2, hidden=8, input_dim=6,
                            epochs=25, seed=3, dtype="float64")
            net = HgtNetwork(five_graph, cfg)
            feats = features_for(five_graph, 6)
            return train(net, feats, five_graph.labels, five_graph.split)

        a, b = run(), run()
        assert a.trace.losses == b.trace.losses
        assert a.trace.valid_maes == b.trace.valid_maes

    def test_non_finite_loss_aborts_with_epoch(self, five_graph):
        cfg = HgtConfig(**{**TINY, "epochs": 3})
        net = HgtNetwork(five_graph, cfg)
        feats = features_for(five_graph, 6)
        feats[NodeType.DOCUMENT][0, 0] = np.nan
        with pytest.raises(NonFiniteLoss) as err:
            train(net, feats, five_graph.labels, five_graph.split)
        assert err.value.epoch == 0

    def test_loss_never_sees_test_documents(self, five_graph, monkeypatch):
        seen = []
        original = mdl.loss_l1

        def spy(pred, target, mask_idx):
            seen.append(np.array(mask_idx))
            return original(pred, target, mask_idx)

        monkeypatch.setattr(mdl, "loss_l1", spy)
        cfg = HgtConfig(**{**TINY, "epochs": 4})
        net = HgtNetwork(five_graph, cfg)
        train(net, features_for(five_graph, 6), five_graph.labels,
              five_graph.split)
        test_idx = set(np.flatnonzero(five_graph.split == 2).tolist())
        valid_idx = set(np.flatnonzero(five_graph.split == 1).tolist())
        assert seen, "loss was never called"
        for mask in seen:
            assert not (set(mask.tolist()) & test_idx)
            assert not (set(mask.tolist()) & valid_idx)

    def test_best_valid_checkpoint_tracked(self, five_graph):
        cfg = HgtConfig(layers=1, heads=2, hidden=8, input_dim=6,
                        epochs=30, seed=0, dtype="float64")
        net = HgtNetwork(five_graph, cfg)
        result = train(net, features_for(five_graph, 6), five_graph.labels,
                       five_graph.split)
        assert result.best_valid_params is not None
        assert result.best_valid_mae == min(
            vm for vm in result.trace.valid_maes if vm is not None
        )

    def test_float32_mode_trains_deterministically(self, five_graph):
        def run():
            cfg = HgtConfig(layers=2, heads=2, hidden=16, input_dim=6,
                            epochs=40, seed=5, dtype="float32")
            net = HgtNetwork(five_graph, cfg)
            feats = features_for(five_graph, 6)
            result = train(net, feats, five_graph.labels, five_graph.split)
            return result.trace.losses, net.forward(feats)

        (loss_a, out_a), (loss_b, out_b) = run(), run()
        assert loss_a == loss_b
        assert out_a.dtype == np.float32
        np.testing.assert_array_equal(out_a, out_b)
        assert loss_a[-1] < loss_a[0]

    def test_empty_train_mask(self, five_graph):
        net = HgtNetwork(five_graph, HgtConfig(**TINY))
        with pytest.raises(EmptyMask):
            train(net, features_for(five_graph, 6), five_graph.labels,
                  np.full(5, 2, dtype=np.int8))


class TestPredict:
    def test_regression_outputs_are_raw(self, five_graph):
        cfg = HgtConfig(**TINY)
        net = HgtNetwork(five_graph, cfg)
        # bias the head negative: raw (possibly negative) values come back
        net.params["OUT_B"][...] = -3.0
        for name in net.params:
            if name != "OUT_B":
                net.params[name][...] = 0.0
        est = predict(net, features_for(five_graph, 6), np.array([0, 1]))
        np.testing.assert_allclose(est, [-3.0, -3.0])

    def test_classification_maps_argmax_to_value(self, five_graph):
        cm = ClassMap.from_labels(np.array([1.0, 5.0, 8.0]))
        cfg = HgtConfig(**{**TINY, "task": mdl.CLASSIFICATION})
        net = HgtNetwork(five_graph, cfg, n_outputs=3)
        for arr in net.params.values():
            arr[...] = 0.0
        net.params["OUT_B"][...] = np.array([0.0, 9.0, 0.0])
        est = predict(net, features_for(five_graph, 6), np.arange(5),
                      mdl.CLASSIFICATION, cm)
        np.testing.assert_array_equal(est, np.full(5, 5.0))

    def test_estimate_count_matches_mask(self, five_graph):
        net = HgtNetwork(five_graph, HgtConfig(**TINY))
        test_idx = five_graph.doc_indices_for(Split.TEST)
        est = predict(net, features_for(five_graph, 6), test_idx)
        assert len(est) == len(test_idx)


class TestGcn:
    def test_isolated_node_reduces_to_relu_linear(self):
        homo = HomoGraph(2, np.zeros((2, 0), dtype=np.int64),
                         np.array([0, 1]), {}, ["a/doc", "b/doc"])
        cfg = HgtConfig(layers=2, heads=1, hidden=4, input_dim=3, epochs=0,
                        seed=5, dtype="float64")
        net = GcnNetwork(homo, cfg)
        x = np.random.default_rng(0).normal(size=(2, 3))
        p = net.params
        h1 = np.maximum(x @ p["W1"], 0.0)
        h2 = np.maximum(h1 @ p["W2"], 0.0)
        expected = (h2 @ p["OUT_W"] + p["OUT_B"])[:, 0]
        np.testing.assert_allclose(net.forward(x), expected, rtol=1e-12)

    def test_zero_weights_zero_predictions(self, five_graph):
        homo = type_erase(five_graph)
        cfg = HgtConfig(layers=2, heads=1, hidden=4, input_dim=6, epochs=0,
                        dtype="float64")
        net = GcnNetwork(homo, cfg)
        for arr in net.params.values():
            arr[...] = 0.0
        x = np.random.default_rng(1).normal(size=(homo.n_nodes, 6))
        np.testing.assert_array_equal(net.forward(x), np.zeros(5))

    def test_propagation_matches_dense_normalized_adjacency(self, five_graph):
        homo = type_erase(five_graph)
        n = homo.n_nodes
        a = np.zeros((n, n))
        for s, d in homo.edges.T.tolist():
            a[s, d] = a[d, s] = 1.0
        a += np.eye(n)
        deg = a.sum(axis=1)
        norm = a / np.sqrt(np.outer(deg, deg))
        cfg = HgtConfig(layers=2, heads=1, hidden=4, input_dim=6, epochs=0,
                        dtype="float64")
        net = GcnNetwork(homo, cfg)
        x = np.random.default_rng(2).normal(size=(n, 6))
        np.testing.assert_allclose(net._prop(x), norm @ x, rtol=1e-9, atol=1e-12)

    def test_trains_with_shared_loop(self, five_graph):
        homo = type_erase(five_graph)
        cfg = HgtConfig(layers=2, heads=1, hidden=16, input_dim=6,
                        epochs=300, seed=2, dtype="float64")
        net = GcnNetwork(homo, cfg)
        x = np.random.default_rng(3).normal(size=(homo.n_nodes, 6))
        labels = np.full(5, 7.0)
        result = train(net, x, labels, np.zeros(5, dtype=np.int8))
        assert np.all(np.abs(net.forward(x) - 7.0) < 0.5)
        assert result.trace.losses[-1] < result.trace.losses[0]


class TestAdam:
    def test_single_step_matches_formula(self):
        params = {"w": np.array([1.0, -2.0])}
        grads = {"w": np.array([0.5, 0.5])}
        opt = Adam(params, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        opt.step(params, grads)
        m_hat = 0.1 * 0.5 / 0.1
        v_hat = 0.001 * 0.25 / 0.001
        expected = np.array([1.0, -2.0]) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(params["w"], expected, rtol=1e-12)


class TestCheckpoint:
    def test_params_round_trip(self, five_graph, tmp_path):
        cfg = HgtConfig(**TINY)
        net = HgtNetwork(five_graph, cfg)
        path = tmp_path / "params.bin"
        mdl.save_params(path, net.params, cfg, 1, "hgt",
                        class_values=np.array([1.0, 2.0]))
        kind, n_out, cfg2, params, class_values = mdl.load_params(path)
        assert (kind, n_out) == ("hgt", 1)
        assert cfg2.hidden == cfg.hidden
        np.testing.assert_array_equal(class_values, [1.0, 2.0])
        for name, arr in net.params.items():
            assert np.array_equal(params[name], arr)

    def test_trace_csv(self, tmp_path):
        trace = mdl.TrainTrace()
        trace.append(0, 1.5, None, 0.01)
        trace.append(1, 1.25, 0.5, 0.01)
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,loss,valid_mae,seconds"
        assert lines[1].startswith("0,1.5,")
        assert lines[2].startswith("1,1.25,0.5")
