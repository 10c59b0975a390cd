"""Scikit-learn style estimators over the full pipeline.

``fit`` takes issues (``Issue`` objects, ``(title, description)`` pairs,
dicts, or bare title strings) plus story points, trains the embedding
tables and the graph network, and ``predict`` scores new issues. New
issues are merged into one graph with the training issues at prediction
time, so shared tokens connect them to what the model saw during fit.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.exceptions import NotFittedError

from . import embedding as emb
from . import model as mdl
from . import textnorm
from .corpus import Issue, Scenario, Split, SplitMasks
from .issuegraph import NodeType, build_issue_graph, merge_hetero, type_erase


def as_issues(X, prefix: str = "row") -> list[Issue]:
    """Coerce heterogeneous input rows into Issue records.

    Accepts Issue objects, (title, description) pairs, dicts with
    ``title``/``description`` (optionally ``issue_key``), or bare title
    strings. Rows without keys get positional ones.
    """
    issues: list[Issue] = []
    seen: set[str] = set()
    for i, row in enumerate(X):
        key = f"{prefix}-{i}"
        if isinstance(row, Issue):
            issue = Issue(row.issue_key, row.project, row.repository,
                          row.title, row.description, row.story_point, i)
        elif isinstance(row, dict):
            issue = Issue(str(row.get("issue_key", key)), "", "",
                          str(row.get("title", "")), str(row.get("description", "")),
                          1.0, i)
        elif isinstance(row, str):
            issue = Issue(key, "", "", row, "", 1.0, i)
        elif isinstance(row, (tuple, list)) and len(row) == 2:
            issue = Issue(key, "", "", str(row[0]), str(row[1]), 1.0, i)
        else:
            raise ValueError(
                f"row {i}: expected Issue, dict, str, or (title, description), "
                f"got {type(row).__name__}"
            )
        if issue.issue_key in seen:
            raise ValueError(f"duplicate issue key {issue.issue_key!r}")
        seen.add(issue.issue_key)
        issues.append(issue)
    return issues


def validate_story_points(y, n_rows: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(y) != n_rows:
        raise ValueError(f"y has {len(y)} entries for {n_rows} rows")
    if not np.isfinite(y).all() or (y <= 0).any():
        raise ValueError("story points must be positive finite numbers")
    return y


class _GraphEstimatorBase(BaseEstimator):
    def __init__(self, epochs=500, hidden_channels=128, attention_heads=4,
                 conv_layers=2, learning_rate=0.005, model="hgt",
                 embed_dim=100, embed_window=5, embed_negatives=5,
                 embed_epochs=5, embed_min_n=3, embed_max_n=6,
                 embed_buckets=100000, embed_learning_rate=0.05, seed=0):
        self.epochs = epochs
        self.hidden_channels = hidden_channels
        self.attention_heads = attention_heads
        self.conv_layers = conv_layers
        self.learning_rate = learning_rate
        self.model = model
        self.embed_dim = embed_dim
        self.embed_window = embed_window
        self.embed_negatives = embed_negatives
        self.embed_epochs = embed_epochs
        self.embed_min_n = embed_min_n
        self.embed_max_n = embed_max_n
        self.embed_buckets = embed_buckets
        self.embed_learning_rate = embed_learning_rate
        self.seed = seed

    _task = mdl.REGRESSION

    def _embed_cfg(self) -> emb.EmbeddingConfig:
        return emb.EmbeddingConfig(
            dim=self.embed_dim, window=self.embed_window,
            negatives=self.embed_negatives, epochs=self.embed_epochs,
            min_n=self.embed_min_n, max_n=self.embed_max_n,
            bucket_count=self.embed_buckets,
            learning_rate=self.embed_learning_rate, seed=self.seed,
        )

    def _model_cfg(self) -> mdl.HgtConfig:
        return mdl.HgtConfig(
            layers=self.conv_layers, heads=self.attention_heads,
            hidden=self.hidden_channels, epochs=self.epochs, task=self._task,
            learning_rate=self.learning_rate, input_dim=self.embed_dim,
            seed=self.seed,
        )

    def _parts_for(self, issues: list[Issue]) -> dict[str, tuple[list, list]]:
        return {
            i.issue_key: textnorm.issue_parts(i.title, i.description)
            for i in issues
        }

    def _build_graph(self, issues, parts, labels, assignment):
        graphs = []
        usable = []
        for issue in issues:
            pt, pd = parts[issue.issue_key]
            if not pt and not pd:
                continue
            graphs.append(build_issue_graph(issue, pt, pd))
            usable.append(issue.issue_key)
        masks = SplitMasks({k: assignment[k] for k in usable},
                           Scenario.WITHIN_PROJECT)
        graph = merge_hetero(graphs, {k: labels[k] for k in usable}, masks)
        return graph, usable

    def fit(self, X, y):
        issues = as_issues(X, prefix="fit")
        y = validate_story_points(y, len(issues))
        if self.model not in ("hgt", "gcn"):
            raise ValueError(f"model must be 'hgt' or 'gcn', got {self.model!r}")

        parts = self._parts_for(issues)
        sentences = []
        for issue in issues:
            pt, pd = parts[issue.issue_key]
            for part in pt + pd:
                sentences.append(part.token_texts())
        self.embedding_ = emb.train_cbow(sentences, self._embed_cfg())

        labels = {i.issue_key: float(v) for i, v in zip(issues, y)}
        assignment = {i.issue_key: Split.TRAIN for i in issues}
        graph, usable = self._build_graph(issues, parts, labels, assignment)
        if not usable:
            raise ValueError("no issue has usable text")

        self.class_map_ = None
        n_outputs = 1
        if self._task == mdl.CLASSIFICATION:
            self.class_map_ = mdl.ClassMap.from_labels(graph.labels)
            n_outputs = self.class_map_.n_classes

        cfg = self._model_cfg()
        features = emb.init_node_embeddings(graph, self.embedding_)
        if self.model == "hgt":
            network = mdl.HgtNetwork(graph, cfg, n_outputs)
            feats = features
        else:
            homo = type_erase(graph)
            network = mdl.GcnNetwork(homo, cfg, n_outputs)
            feats = np.vstack([features[t] for t in NodeType if t in graph.node_ids])
        mdl.train(network, feats, graph.labels, graph.split, self.class_map_)

        self.params_ = network.params
        self.n_outputs_ = n_outputs
        self.train_issues_ = issues
        self.train_labels_ = labels
        self.train_mean_ = float(np.mean(y))
        return self

    def _predict_values(self, X) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit before predict")
        new_issues = as_issues(X, prefix="new")
        fit_keys = {i.issue_key for i in self.train_issues_}
        renamed = []
        for issue in new_issues:
            key = issue.issue_key
            if key in fit_keys:
                key = f"new/{key}"
            renamed.append(Issue(key, issue.project, issue.repository,
                                 issue.title, issue.description,
                                 issue.story_point, issue.ordinal))
        new_issues = renamed

        parts = self._parts_for(self.train_issues_ + new_issues)
        labels = dict(self.train_labels_)
        assignment = {k: Split.TRAIN for k in labels}
        for issue in new_issues:
            labels[issue.issue_key] = 1.0  # placeholder, never read
            assignment[issue.issue_key] = Split.TEST
        graph, _ = self._build_graph(self.train_issues_ + new_issues, parts,
                                     labels, assignment)
        features = emb.init_node_embeddings(graph, self.embedding_)

        cfg = self._model_cfg()
        if self.model == "hgt":
            network = mdl.HgtNetwork(graph, cfg, self.n_outputs_, params=self.params_)
            feats = features
        else:
            homo = type_erase(graph)
            network = mdl.GcnNetwork(homo, cfg, self.n_outputs_, params=self.params_)
            feats = np.vstack([features[t] for t in NodeType if t in graph.node_ids])

        output = network.forward(feats)
        estimates = np.full(len(new_issues), self.train_mean_)
        doc_pos = {k: i for i, k in enumerate(graph.doc_keys)}
        test_rows = [doc_pos.get(i.issue_key) for i in new_issues]
        present = [j for j, r in enumerate(test_rows) if r is not None]
        idx = np.array([test_rows[j] for j in present], dtype=np.int64)
        if len(idx):
            est = mdl.estimates_from_output(output, idx, self._task, self.class_map_)
            for j, e in zip(present, est):
                estimates[j] = e
        return estimates


class StoryPointRegressor(_GraphEstimatorBase, RegressorMixin):
    """Issue-to-story-point regressor with the graph attention model.

    Parameters mirror the training configuration: ``epochs``,
    ``hidden_channels``, ``attention_heads``, ``conv_layers``,
    ``learning_rate``, the embedding knobs, ``model`` ("hgt" or "gcn"),
    and ``seed``. Rows whose text normalizes to nothing fall back to the
    training-mean estimate at predict time.
    """

    _task = mdl.REGRESSION

    def predict(self, X) -> np.ndarray:
        return self._predict_values(X)


class StoryPointClassifier(_GraphEstimatorBase, ClassifierMixin):
    """Story-point classifier over the values observed during fit."""

    _task = mdl.CLASSIFICATION

    def fit(self, X, y):
        super().fit(X, y)
        self.classes_ = self.class_map_.values
        return self

    def predict(self, X) -> np.ndarray:
        return self._predict_values(X)
