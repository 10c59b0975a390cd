import json
from pathlib import Path

import numpy as np
import pytest

from storygraph.corpus import Scenario, Split, SplitMasks
from storygraph.issuegraph import (
    ALL_RELATIONS,
    DuplicateIssue,
    EmptyIssue,
    HeteroGraph,
    MissingLabel,
    NodeType,
    TERMINAL_TYPES,
    UPWARD_RELATIONS,
    build_issue_graph,
    merge_hetero,
    relation_from_key,
    reverse_relation,
    type_erase,
)
from storygraph.textnorm import issue_parts

from conftest import FIVE_ISSUES, FIVE_ISSUE_SPLIT, build_graphs, make_issue, merge_issues

FIXTURE = json.loads(
    (Path(__file__).parent / "fixtures" / "graph_oracle.json").read_text()
)


def graph_of(issue):
    return build_issue_graph(issue, *issue_parts(issue.title, issue.description))


class TestBuildIssueGraph:
    def test_title_only_issue(self):
        g = graph_of(make_issue("A-1", "DataLoader crashed", ""))
        by_type = {t: g.nodes_of_type(t) for t in NodeType}
        assert len(by_type[NodeType.DOCUMENT]) == 1
        assert len(by_type[NodeType.TITLE]) == 1
        assert len(by_type[NodeType.SENTENCE]) == 1
        assert len(by_type[NodeType.WORD]) == 3
        assert len(by_type[NodeType.DESCRIPTION]) == 0
        assert len(g.edges[UPWARD_RELATIONS[0]]) == 1  # title_of
        assert len(g.edges[UPWARD_RELATIONS[2]]) == 1  # sent_of_title
        assert len(g.edges[UPWARD_RELATIONS[5]]) == 3  # word_in

    def test_word_and_code_token_are_distinct_nodes(self):
        g = graph_of(make_issue("A-1", "", "alpha beta. {code} alpha {code}"))
        words = {n.payload for n in g.nodes_of_type(NodeType.WORD)}
        code = {n.payload for n in g.nodes_of_type(NodeType.CODE_TOKEN)}
        assert "alpha" in words and "alpha" in code

    def test_structure_like_worked_example(self):
        # one title sentence, two description sentences, one code block
        issue = make_issue(
            "DM-X", "DataLoader crashed on startup",
            "It broke. {code} mapDriver.withInput(key) {code} Fails for the tester.",
        )
        g = graph_of(issue)
        assert len(g.nodes_of_type(NodeType.DOCUMENT)) == 1
        assert len(g.nodes_of_type(NodeType.TITLE)) == 1
        assert len(g.nodes_of_type(NodeType.DESCRIPTION)) == 1
        assert len(g.nodes_of_type(NodeType.SENTENCE)) == 3
        assert len(g.nodes_of_type(NodeType.CODE_PART)) == 1

    def test_repeated_token_single_node_no_parallel_edges(self):
        g = graph_of(make_issue("A-1", "crash crash crash", ""))
        assert len(g.nodes_of_type(NodeType.WORD)) == 1
        assert len(g.edges[UPWARD_RELATIONS[5]]) == 1

    def test_document_tokens_cover_title_then_description(self):
        g = graph_of(make_issue("A-1", "alpha beta", "gamma delta"))
        assert g.nodes["doc"].tokens == ("alpha", "beta", "gamma", "delta")

    def test_empty_issue_raises(self):
        with pytest.raises(EmptyIssue):
            build_issue_graph(make_issue("A-1", "...", "!!!"), [], [])

    def test_parent_child_type_pairs_restricted(self):
        issue = make_issue("A-1", "Fix parser. Again.",
                           "Broken. {code} parse(x) {code}")
        g = graph_of(issue)
        allowed = set(UPWARD_RELATIONS)
        for rel, pairs in g.edges.items():
            assert rel in allowed
            for child, parent in pairs:
                assert g.nodes[child].type is rel.src
                assert g.nodes[parent].type is rel.dst

    def test_internal_nodes_form_tree(self):
        issue = make_issue("A-1", "Fix parser. Again.",
                           "Broken. {code} parse(x) {code} Sad.")
        g = graph_of(issue)
        parents = {}
        for rel, pairs in g.edges.items():
            for child, parent in pairs:
                if g.nodes[child].type in TERMINAL_TYPES:
                    continue
                assert child not in parents, "internal node with two parents"
                parents[child] = parent
        assert parents["title"] == "doc" and parents["desc"] == "doc"


class TestMergeHetero:
    def test_matches_hand_enumerated_fixture(self, five_issue_graph):
        h = five_issue_graph
        got = json.loads(h.to_debug_json())
        assert got["issue_count"] == FIXTURE["issue_count"]
        assert got["node_types"] == FIXTURE["node_types"]
        for key, pairs in FIXTURE["relations"].items():
            assert got["relations"][key] == pairs, key
        assert got["labels"] == FIXTURE["labels"]
        assert got["split"] == FIXTURE["split"]

    def test_reverse_relations_are_exact_mirrors(self, five_issue_graph):
        h = five_issue_graph
        for rel in UPWARD_RELATIONS:
            if rel not in h.edges:
                continue
            rev = reverse_relation(rel)
            assert np.array_equal(h.edges[rel][::-1], h.edges[rev])

    def test_shared_word_connects_issues(self):
        issues = [
            make_issue("A-1", "crash on save", ordinal=0),
            make_issue("A-2", "crash on load", ordinal=1),
        ]
        h = merge_issues(issues)
        words = h.node_ids[NodeType.WORD]
        assert words.count("crash") == 1
        word_in = h.edges[UPWARD_RELATIONS[5]]
        crash_idx = words.index("crash")
        assert (word_in[0] == crash_idx).sum() == 2

    def test_disjoint_vocabularies_stay_disconnected(self):
        issues = [
            make_issue("A-1", "alpha beta", ordinal=0),
            make_issue("A-2", "gamma delta", ordinal=1),
        ]
        h = merge_issues(issues)
        # no terminal is reachable from both documents
        homo = type_erase(h)
        adj = {i: set() for i in range(homo.n_nodes)}
        for a, b in homo.edges.T.tolist():
            adj[a].add(b)
            adj[b].add(a)
        seen = set()
        stack = [int(homo.doc_indices[0])]
        while stack:
            node = stack.pop()
            if node in seen:
                continue
            seen.add(node)
            stack.extend(adj[node] - seen)
        assert int(homo.doc_indices[1]) not in seen

    def test_document_count_equals_issue_count(self, five_issue_graph):
        assert five_issue_graph.num_nodes(NodeType.DOCUMENT) == 5

    def test_duplicate_issue_rejected(self):
        g = graph_of(make_issue("A-1", "x y"))
        masks = SplitMasks({"A-1": Split.TRAIN}, Scenario.WITHIN_PROJECT)
        with pytest.raises(DuplicateIssue):
            merge_hetero([g, g], {"A-1": 1.0}, masks)

    def test_missing_label_rejected(self):
        g = graph_of(make_issue("A-1", "x y"))
        masks = SplitMasks({"A-1": Split.TRAIN}, Scenario.WITHIN_PROJECT)
        with pytest.raises(MissingLabel):
            merge_hetero([g], {}, masks)

    def test_missing_mask_rejected(self):
        g = graph_of(make_issue("A-1", "x y"))
        masks = SplitMasks({}, Scenario.WITHIN_PROJECT)
        with pytest.raises(MissingLabel):
            merge_hetero([g], {"A-1": 1.0}, masks)

    def test_merge_order_does_not_matter(self):
        a = merge_issues(FIVE_ISSUES, FIVE_ISSUE_SPLIT)
        graphs = build_graphs(FIVE_ISSUES)
        masks = SplitMasks(dict(FIVE_ISSUE_SPLIT), Scenario.WITHIN_PROJECT)
        labels = {i.issue_key: i.story_point for i in FIVE_ISSUES}
        b = merge_hetero(list(reversed(graphs)), labels, masks)
        assert a.node_ids == b.node_ids
        assert a.doc_keys == b.doc_keys
        for rel in a.edges:
            assert np.array_equal(a.edges[rel], b.edges[rel])

    def test_terminal_reachability_within_three_hops(self, five_issue_graph):
        h = five_issue_graph
        # climb child->parent through upward edges; every terminal must
        # reach some document in at most three hops
        parent_map: dict[tuple[NodeType, int], list[tuple[NodeType, int]]] = {}
        for rel in UPWARD_RELATIONS:
            if rel not in h.edges:
                continue
            for s, d in h.edges[rel].T.tolist():
                parent_map.setdefault((rel.src, s), []).append((rel.dst, d))
        for t in TERMINAL_TYPES:
            for i in range(h.num_nodes(t)):
                frontier = {(t, i)}
                reached = False
                for _ in range(3):
                    frontier = {
                        p for node in frontier
                        for p in parent_map.get(node, [])
                    }
                    if any(node_type is NodeType.DOCUMENT for node_type, _ in frontier):
                        reached = True
                        break
                assert reached, (t, i)

    def test_upward_only_flag(self):
        h = merge_issues(FIVE_ISSUES, FIVE_ISSUE_SPLIT, include_reverse=False)
        assert all(not rel.name.startswith("rev_") for rel in h.edges)

    def test_edge_count_conservation(self, five_issue_graph):
        h = five_issue_graph
        up = sum(h.edges[rel].shape[1] for rel in h.edges
                 if not rel.name.startswith("rev_"))
        down = sum(h.edges[rel].shape[1] for rel in h.edges
                   if rel.name.startswith("rev_"))
        assert up == down


class TestSerialization:
    def test_round_trip(self, five_issue_graph, tmp_path):
        path = tmp_path / "graph.bin"
        five_issue_graph.save(path)
        loaded = HeteroGraph.load(path)
        assert loaded.node_ids == five_issue_graph.node_ids
        assert loaded.node_tokens == five_issue_graph.node_tokens
        assert loaded.doc_keys == five_issue_graph.doc_keys
        assert np.array_equal(loaded.labels, five_issue_graph.labels)
        assert np.array_equal(loaded.split, five_issue_graph.split)
        assert set(loaded.edges) == set(five_issue_graph.edges)
        for rel in loaded.edges:
            assert np.array_equal(loaded.edges[rel], five_issue_graph.edges[rel])

    def test_bad_magic_rejected(self, five_issue_graph, tmp_path):
        from storygraph.binio import ContainerError

        path = tmp_path / "graph.bin"
        five_issue_graph.save(path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(ContainerError):
            HeteroGraph.load(path)


class TestTypeErase:
    def test_counts_and_mirror_collapse(self):
        h = merge_issues([make_issue("A-1", "alpha beta crash", ordinal=0)])
        homo = type_erase(h)
        # 1 doc + 1 title + 1 sentence + 3 words
        assert homo.n_nodes == 6
        up = sum(h.edges[rel].shape[1] for rel in h.edges
                 if not rel.name.startswith("rev_"))
        assert homo.edges.shape[1] == up

    def test_empty_graph(self):
        h = HeteroGraph({}, {}, {}, [], np.zeros(0), np.zeros(0, np.int8))
        homo = type_erase(h)
        assert homo.n_nodes == 0
        assert homo.edges.shape == (2, 0)

    def test_document_indices_map_back(self, five_issue_graph):
        homo = type_erase(five_issue_graph)
        for pos, key in enumerate(five_issue_graph.doc_keys):
            global_idx = homo.doc_indices[pos]
            assert homo.identities[global_idx] == f"{key}/doc"


def test_relation_round_trip_keys():
    for rel in ALL_RELATIONS:
        assert relation_from_key(rel.key) == rel
