"""Analytic gradients against central finite differences.

The graph is twelve nodes and touches every relation kind; every element
of every parameter tensor is perturbed. Points are checked away from the
L1 and relu kinks so the comparison is meaningful.
"""

import numpy as np
import pytest

from storygraph.issuegraph import type_erase
from storygraph.model import (
    CLASSIFICATION,
    ClassMap,
    GcnNetwork,
    HgtConfig,
    HgtNetwork,
    loss_ce,
    loss_l1,
)

from conftest import assert_grads_close, numeric_grads

RTOL = 1e-4
ATOL = 1e-8


@pytest.fixture(scope="module")
def setup(request):
    graph = request.getfixturevalue("tiny_hetero")
    return graph


@pytest.fixture(scope="module")
def tiny_hetero():
    # module-scoped copy of the conftest fixture
    from conftest import make_issue, merge_issues

    issues = [
        make_issue("S-1", "Alpha beta.", "Beta. {code} gamma {code}", 3, ordinal=0),
        make_issue("S-2", "Alpha.", "", 5, ordinal=1),
    ]
    return merge_issues(issues)


def make_features(graph, dim=6, seed=3):
    rng = np.random.default_rng(seed)
    return {t: rng.normal(size=(len(ids), dim))
            for t, ids in graph.node_ids.items()}


def test_hgt_l1_gradients_match_finite_differences(tiny_hetero):
    graph = tiny_hetero
    assert graph.total_nodes() == 12
    cfg = HgtConfig(layers=2, heads=2, hidden=8, input_dim=6, epochs=0,
                    seed=7, dtype="float64")
    net = HgtNetwork(graph, cfg)
    feats = make_features(graph)
    labels = graph.labels
    mask = np.arange(len(labels))

    out, cache = net.forward(feats, with_cache=True)
    assert np.min(np.abs(out - labels)) > 1e-3, "too close to an L1 kink"
    _, grad_pred = loss_l1(out, labels, mask)
    analytic = net.backward(cache, grad_pred)

    def loss_fn():
        return loss_l1(net.forward(feats), labels, mask)[0]

    numeric = numeric_grads(loss_fn, net.params)
    assert_grads_close(analytic, numeric, RTOL, ATOL)


def test_hgt_cross_entropy_gradients_match(tiny_hetero):
    graph = tiny_hetero
    cm = ClassMap(np.array([3.0, 5.0]))
    cfg = HgtConfig(layers=2, heads=2, hidden=8, input_dim=6, epochs=0,
                    seed=11, task=CLASSIFICATION, dtype="float64")
    net = HgtNetwork(graph, cfg, n_outputs=cm.n_classes)
    feats = make_features(graph, seed=5)
    labels_idx = cm.exact_index(graph.labels)
    mask = np.arange(len(labels_idx))

    logits, cache = net.forward(feats, with_cache=True)
    _, grad_logits = loss_ce(logits, labels_idx, mask)
    analytic = net.backward(cache, grad_logits)

    def loss_fn():
        return loss_ce(net.forward(feats), labels_idx, mask)[0]

    numeric = numeric_grads(loss_fn, net.params)
    assert_grads_close(analytic, numeric, RTOL, ATOL)


def test_gcn_gradients_match(tiny_hetero):
    homo = type_erase(tiny_hetero)
    cfg = HgtConfig(layers=2, heads=2, hidden=8, input_dim=6, epochs=0,
                    seed=0, dtype="float64")
    net = GcnNetwork(homo, cfg)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(homo.n_nodes, 6))
    labels = tiny_hetero.labels
    mask = np.arange(len(labels))

    out, cache = net.forward(x, with_cache=True)
    _, z1, _, z2, _, _ = cache
    assert np.min(np.abs(z1)) > 1e-3 and np.min(np.abs(z2)) > 1e-3, \
        "too close to a relu kink"
    _, grad_pred = loss_l1(out, labels, mask)
    analytic = net.backward(cache, grad_pred)

    def loss_fn():
        return loss_l1(net.forward(x), labels, mask)[0]

    numeric = numeric_grads(loss_fn, net.params)
    assert_grads_close(analytic, numeric, RTOL, ATOL)
