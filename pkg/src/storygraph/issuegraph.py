"""Typed graphs over issues.

Each issue becomes a small tree: Document at the root, Title/Description
below it, their Sentence and CodePart children, and Word/CodeToken leaves.
Merging many issue graphs yields one heterogeneous graph in which leaves
are shared by token text (a token used by two issues is a single node),
while all internal nodes stay private to their issue.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import binio
from .corpus import Issue, Split, SplitMasks
from .textnorm import Part, PartKind

GRAPH_MAGIC = b"SGRF"
GRAPH_VERSION = 1


class GraphError(Exception):
    pass


class EmptyIssue(GraphError):
    pass


class DuplicateIssue(GraphError):
    pass


class MissingLabel(GraphError):
    pass


class NodeType(Enum):
    DOCUMENT = "Document"
    TITLE = "Title"
    DESCRIPTION = "Description"
    SENTENCE = "Sentence"
    CODE_PART = "CodePart"
    WORD = "Word"
    CODE_TOKEN = "CodeToken"


TERMINAL_TYPES = frozenset({NodeType.WORD, NodeType.CODE_TOKEN})


class Relation(NamedTuple):
    src: NodeType
    name: str
    dst: NodeType

    @property
    def key(self) -> str:
        return f"{self.src.value}:{self.name}:{self.dst.value}"


TITLE_OF = Relation(NodeType.TITLE, "title_of", NodeType.DOCUMENT)
DESC_OF = Relation(NodeType.DESCRIPTION, "desc_of", NodeType.DOCUMENT)
SENT_OF_TITLE = Relation(NodeType.SENTENCE, "sent_of_title", NodeType.TITLE)
SENT_OF_DESC = Relation(NodeType.SENTENCE, "sent_of_desc", NodeType.DESCRIPTION)
CODE_OF_DESC = Relation(NodeType.CODE_PART, "code_of_desc", NodeType.DESCRIPTION)
WORD_IN = Relation(NodeType.WORD, "word_in", NodeType.SENTENCE)
TOKEN_IN = Relation(NodeType.CODE_TOKEN, "token_in", NodeType.CODE_PART)

UPWARD_RELATIONS: tuple[Relation, ...] = (
    TITLE_OF, DESC_OF, SENT_OF_TITLE, SENT_OF_DESC, CODE_OF_DESC, WORD_IN, TOKEN_IN,
)


def reverse_relation(rel: Relation) -> Relation:
    return Relation(rel.dst, "rev_" + rel.name, rel.src)


ALL_RELATIONS: tuple[Relation, ...] = UPWARD_RELATIONS + tuple(
    reverse_relation(r) for r in UPWARD_RELATIONS
)

_RELATION_BY_KEY = {r.key: r for r in ALL_RELATIONS}


def relation_from_key(key: str) -> Relation:
    return _RELATION_BY_KEY[key]


@dataclass(frozen=True)
class GraphNode:
    local_id: str
    type: NodeType
    payload: str
    tokens: tuple[str, ...]


@dataclass
class IssueGraph:
    """Per-issue tree with deduplicated terminal nodes."""

    issue_key: str
    nodes: dict[str, GraphNode]
    edges: dict[Relation, tuple[tuple[str, str], ...]]

    def nodes_of_type(self, node_type: NodeType) -> list[GraphNode]:
        return [n for n in self.nodes.values() if n.type is node_type]

    def edge_count(self) -> int:
        return sum(len(pairs) for pairs in self.edges.values())


def _terminal_local_id(token: str, node_type: NodeType) -> str:
    prefix = "W" if node_type is NodeType.WORD else "C"
    return f"{prefix}:{token}"


def build_issue_graph(
    issue: Issue, parts_title: Sequence[Part], parts_desc: Sequence[Part]
) -> IssueGraph:
    """Assemble the typed tree for one issue from its text parts."""
    if not parts_title and not parts_desc:
        raise EmptyIssue(f"issue {issue.issue_key} has no usable text")

    nodes: dict[str, GraphNode] = {}
    edges: dict[Relation, list[tuple[str, str]]] = {}
    seen_edges: set[tuple[Relation, str, str]] = set()

    def add_node(local_id: str, node_type: NodeType, payload: str,
                 tokens: tuple[str, ...]) -> None:
        if local_id not in nodes:
            nodes[local_id] = GraphNode(local_id, node_type, payload, tokens)

    def add_edge(rel: Relation, child: str, parent: str) -> None:
        mark = (rel, child, parent)
        if mark not in seen_edges:
            seen_edges.add(mark)
            edges.setdefault(rel, []).append((child, parent))

    def attach_parts(parts: Sequence[Part], parent_id: str, sent_rel: Relation,
                     prefix: str) -> list[str]:
        collected: list[str] = []
        n_sent = n_code = 0
        for part in parts:
            texts = part.token_texts()
            collected.extend(texts)
            if part.kind is PartKind.SENTENCE:
                n_sent += 1
                pid = f"{prefix}-Sent-{n_sent}"
                add_node(pid, NodeType.SENTENCE, " ".join(texts), tuple(texts))
                add_edge(sent_rel, pid, parent_id)
                for tok in texts:
                    tid = _terminal_local_id(tok, NodeType.WORD)
                    add_node(tid, NodeType.WORD, tok, (tok,))
                    add_edge(WORD_IN, tid, pid)
            else:
                n_code += 1
                pid = f"{prefix}-Code-{n_code}"
                add_node(pid, NodeType.CODE_PART, " ".join(texts), tuple(texts))
                add_edge(CODE_OF_DESC, pid, parent_id)
                for tok in texts:
                    tid = _terminal_local_id(tok, NodeType.CODE_TOKEN)
                    add_node(tid, NodeType.CODE_TOKEN, tok, (tok,))
                    add_edge(TOKEN_IN, tid, pid)
        return collected

    title_tokens = attach_parts(parts_title, "title", SENT_OF_TITLE, "T")
    desc_tokens = attach_parts(parts_desc, "desc", SENT_OF_DESC, "D")

    if parts_title:
        add_node("title", NodeType.TITLE, issue.title, tuple(title_tokens))
    if parts_desc:
        add_node("desc", NodeType.DESCRIPTION, issue.description, tuple(desc_tokens))
    doc_payload = "\n".join(s for s in (issue.title, issue.description) if s)
    add_node("doc", NodeType.DOCUMENT, doc_payload, tuple(title_tokens + desc_tokens))
    if parts_title:
        add_edge(TITLE_OF, "title", "doc")
    if parts_desc:
        add_edge(DESC_OF, "desc", "doc")

    return IssueGraph(issue.issue_key, nodes,
                      {rel: tuple(pairs) for rel, pairs in edges.items()})


_SPLIT_CODE = {Split.TRAIN: 0, Split.VALID: 1, Split.TEST: 2}
_SPLIT_NAME = {0: "train", 1: "valid", 2: "test"}


@dataclass
class HeteroGraph:
    """Merged multi-issue graph with typed node tables and edge lists.

    Node identities are sorted strings per type: internal nodes are
    namespaced ``<issue_key>/<local_id>``, terminals are the bare token.
    ``labels``, ``split`` and ``doc_keys`` align with the Document table.
    """

    node_ids: dict[NodeType, list[str]]
    node_tokens: dict[NodeType, list[tuple[str, ...]]]
    edges: dict[Relation, np.ndarray]  # int64 (2, E): row 0 src, row 1 dst
    doc_keys: list[str]
    labels: np.ndarray  # float64 per Document
    split: np.ndarray  # int8 per Document, codes in _SPLIT_CODE

    def num_nodes(self, node_type: NodeType) -> int:
        return len(self.node_ids.get(node_type, []))

    def total_nodes(self) -> int:
        return sum(len(v) for v in self.node_ids.values())

    def document_index(self, issue_key: str) -> int:
        return self.doc_keys.index(issue_key)

    def doc_indices_for(self, split: Split) -> np.ndarray:
        return np.flatnonzero(self.split == _SPLIT_CODE[split])

    def to_debug_json(self) -> str:
        body = {
            "issue_count": len(self.doc_keys),
            "node_types": {
                t.value: list(ids)
                for t, ids in sorted(self.node_ids.items(), key=lambda kv: kv[0].value)
            },
            "relations": {
                rel.key: [
                    [self.node_ids[rel.src][s], self.node_ids[rel.dst][d]]
                    for s, d in self.edges[rel].T.tolist()
                ]
                for rel in sorted(self.edges, key=lambda r: r.key)
            },
            "labels": {k: float(self.labels[i]) for i, k in enumerate(self.doc_keys)},
            "split": {k: _SPLIT_NAME[int(self.split[i])]
                      for i, k in enumerate(self.doc_keys)},
        }
        return json.dumps(body, indent=2)

    def save(self, path: str | Path) -> None:
        meta = {
            "node_ids": {t.value: ids for t, ids in self.node_ids.items()},
            "node_tokens": {t.value: [list(tk) for tk in toks]
                            for t, toks in self.node_tokens.items()},
            "relation_keys": sorted(r.key for r in self.edges),
            "doc_keys": self.doc_keys,
        }
        arrays: dict[str, np.ndarray] = {
            "labels": self.labels,
            "split": self.split,
        }
        for key in meta["relation_keys"]:
            arrays["edges/" + key] = self.edges[relation_from_key(key)]
        binio.write_container(path, GRAPH_MAGIC, GRAPH_VERSION, meta, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "HeteroGraph":
        meta, arrays = binio.read_container(path, GRAPH_MAGIC, GRAPH_VERSION)
        node_ids = {NodeType(t): list(ids) for t, ids in meta["node_ids"].items()}
        node_tokens = {
            NodeType(t): [tuple(tk) for tk in toks]
            for t, toks in meta["node_tokens"].items()
        }
        edges = {
            relation_from_key(key): arrays["edges/" + key]
            for key in meta["relation_keys"]
        }
        return cls(node_ids, node_tokens, edges, list(meta["doc_keys"]),
                   arrays["labels"], arrays["split"])


def merge_hetero(
    graphs: Sequence[IssueGraph],
    labels: dict[str, float],
    masks: SplitMasks,
    include_reverse: bool = True,
) -> HeteroGraph:
    """Merge issue graphs, unifying terminals by (token, type).

    Node indices are assigned by sorted identity, and edges are sorted by
    identity pair, so the result is independent of input order.
    """
    seen_keys: set[str] = set()
    ids: dict[NodeType, set[str]] = {t: set() for t in NodeType}
    tokens_of: dict[NodeType, dict[str, tuple[str, ...]]] = {t: {} for t in NodeType}
    edge_sets: dict[Relation, set[tuple[str, str]]] = {}

    def identity(graph: IssueGraph, node: GraphNode) -> str:
        if node.type in TERMINAL_TYPES:
            return node.payload
        return f"{graph.issue_key}/{node.local_id}"

    for graph in graphs:
        if graph.issue_key in seen_keys:
            raise DuplicateIssue(graph.issue_key)
        seen_keys.add(graph.issue_key)
        if graph.issue_key not in labels:
            raise MissingLabel(f"no story point for issue {graph.issue_key}")
        if graph.issue_key not in masks.assignment:
            raise MissingLabel(f"no split assignment for issue {graph.issue_key}")
        for node in graph.nodes.values():
            ident = identity(graph, node)
            ids[node.type].add(ident)
            tokens_of[node.type][ident] = node.tokens
        for rel, pairs in graph.edges.items():
            bucket = edge_sets.setdefault(rel, set())
            for child, parent in pairs:
                bucket.add(
                    (identity(graph, graph.nodes[child]),
                     identity(graph, graph.nodes[parent]))
                )

    node_ids = {t: sorted(v) for t, v in ids.items() if v}
    node_tokens = {t: [tokens_of[t][i] for i in node_ids[t]] for t in node_ids}
    index = {t: {ident: i for i, ident in enumerate(v)} for t, v in node_ids.items()}

    edges: dict[Relation, np.ndarray] = {}
    for rel, pairs in edge_sets.items():
        ordered = sorted(pairs)
        src = np.array([index[rel.src][a] for a, _ in ordered], dtype=np.int64)
        dst = np.array([index[rel.dst][b] for _, b in ordered], dtype=np.int64)
        edges[rel] = np.vstack([src, dst])
        if include_reverse:
            edges[reverse_relation(rel)] = np.vstack([dst, src])

    doc_ids = node_ids.get(NodeType.DOCUMENT, [])
    doc_keys = [ident[: -len("/doc")] for ident in doc_ids]
    label_vec = np.array([labels[k] for k in doc_keys], dtype=np.float64)
    split_vec = np.array(
        [_SPLIT_CODE[masks.assignment[k]] for k in doc_keys], dtype=np.int8
    )
    return HeteroGraph(node_ids, node_tokens, edges, doc_keys, label_vec, split_vec)


@dataclass
class HomoGraph:
    """Type-erased view: one node table, one undirected edge list."""

    n_nodes: int
    edges: np.ndarray  # int64 (2, E), each undirected pair stored once
    doc_indices: np.ndarray
    type_offsets: dict[NodeType, int]
    identities: list[str]


def type_erase(h: HeteroGraph) -> HomoGraph:
    """Collapse node and edge types; mirror relations fold into one edge."""
    offsets: dict[NodeType, int] = {}
    identities: list[str] = []
    for t in NodeType:
        if t in h.node_ids:
            offsets[t] = len(identities)
            identities.extend(h.node_ids[t])
    chunks = []
    for rel, arr in h.edges.items():
        if rel.name.startswith("rev_"):
            continue
        a = arr[0] + offsets[rel.src]
        b = arr[1] + offsets[rel.dst]
        chunks.append(np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1))
    if chunks:
        edges = np.unique(np.vstack(chunks), axis=0).T.astype(np.int64)
    else:
        edges = np.zeros((2, 0), dtype=np.int64)
    n_doc = h.num_nodes(NodeType.DOCUMENT)
    doc_off = offsets.get(NodeType.DOCUMENT, 0)
    doc_indices = np.arange(doc_off, doc_off + n_doc, dtype=np.int64)
    return HomoGraph(len(identities), edges, doc_indices, offsets, identities)
