"""Scenario runners, metrics, and reports.

A scenario names the split protocol (within-project, or cross-project
pairs), the input mode, the model kind, and how many seeded repeats to
run. Each run builds parts, trains embeddings on the training text,
merges one transductive graph over all in-scope issues, trains with the
loss masked to training documents, and scores the test documents.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

from . import embedding as emb
from . import model as mdl
from . import textnorm
from .corpus import Issue, IssueSet, Scenario, Split, SplitMasks, split_cross, split_within_project
from .issuegraph import HeteroGraph, NodeType, build_issue_graph, merge_hetero, type_erase


class HarnessError(Exception):
    pass


class LengthMismatch(HarnessError):
    pass


class Empty(HarnessError):
    pass


def mae(pred: Sequence[float], actual: Sequence[float]) -> float:
    """Mean absolute error."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise LengthMismatch(f"{pred.shape} vs {actual.shape}")
    if pred.size == 0:
        raise Empty("mae of empty vectors")
    return float(np.abs(pred - actual).mean())


def accuracy(pred: Sequence[float], actual: Sequence[float]) -> float:
    """Fraction of exact matches."""
    pred = np.asarray(pred)
    actual = np.asarray(actual)
    if pred.shape != actual.shape:
        raise LengthMismatch(f"{pred.shape} vs {actual.shape}")
    if pred.size == 0:
        raise Empty("accuracy of empty vectors")
    return float((pred == actual).mean())


class InputMode(Enum):
    FULL = "full"
    TITLE_ONLY = "title-only"
    DESCRIPTION_ONLY = "description-only"


class ModelKind(Enum):
    HGT = "hgt"
    GCN = "gcn"


# Source -> target pairs used by the two cross-project protocols.
DEFAULT_CROSS_WITHIN_REPO_PAIRS: tuple[tuple[str, str], ...] = (
    ("AS", "AP"), ("AS", "TI"), ("AP", "TI"), ("ME", "UG"),
    ("MS", "MU"), ("MU", "MS"), ("TI", "AS"), ("UG", "ME"),
)
DEFAULT_CROSS_REPO_PAIRS: tuple[tuple[str, str], ...] = (
    ("AS", "MU"), ("AS", "MS"), ("CV", "UG"), ("MS", "TI"),
    ("MU", "TI"), ("TD", "AS"), ("TD", "AP"), ("TE", "ME"),
)


@dataclass
class ScenarioSpec:
    scenario: Scenario
    projects: list[str] | None = None
    pairs: list[tuple[str, str]] | None = None
    input_mode: InputMode = InputMode.FULL
    model_kind: ModelKind = ModelKind.HGT
    task: str = mdl.REGRESSION
    repeats: int = 10
    seeds: list[int] | None = None
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    valid_fraction: float = 0.0
    embed_scope: str = "train"  # or "all"
    include_reverse: bool = True

    def resolved_seeds(self) -> list[int]:
        return list(self.seeds) if self.seeds is not None else list(range(self.repeats))

    def units(self, issues: IssueSet) -> list[str | tuple[str, str]]:
        if self.scenario is Scenario.WITHIN_PROJECT:
            return list(self.projects) if self.projects else issues.projects()
        if self.pairs:
            return [tuple(p) for p in self.pairs]
        if self.scenario is Scenario.CROSS_WITHIN_REPO:
            return list(DEFAULT_CROSS_WITHIN_REPO_PAIRS)
        return list(DEFAULT_CROSS_REPO_PAIRS)


@dataclass
class RunRecord:
    unit: str
    seed: int
    mae: float
    accuracy: float | None
    n_train: int
    n_valid: int
    n_test: int
    dropped: int
    times: dict[str, float]
    predictions: list[tuple[str, float]] | None = None
    trace: mdl.TrainTrace | None = None


@dataclass
class EvalReport:
    scenario: str
    spec_echo: dict
    runs: list[RunRecord]
    per_unit_mean: dict[str, float]
    per_unit_std: dict[str, float]
    average_mae: float
    average_accuracy: float | None
    dataset_fingerprint: str
    config_echo: dict

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "scenario": self.scenario,
            "spec": self.spec_echo,
            "dataset_fingerprint": self.dataset_fingerprint,
            "config": self.config_echo,
            "average_mae": self.average_mae,
            "average_accuracy": self.average_accuracy,
            "per_unit_mean_mae": self.per_unit_mean,
            "per_unit_std_mae": self.per_unit_std,
            "runs": [
                {
                    "unit": r.unit,
                    "seed": r.seed,
                    "mae": r.mae,
                    "accuracy": r.accuracy,
                    "n_train": r.n_train,
                    "n_valid": r.n_valid,
                    "n_test": r.n_test,
                    "dropped": r.dropped,
                    "times": r.times,
                }
                for r in self.runs
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def dataset_fingerprint(issues: IssueSet) -> str:
    digest = hashlib.sha256()
    for issue in issues:
        record = f"{issue.issue_key}\x1f{issue.project}\x1f{issue.story_point!r}" \
                 f"\x1f{len(issue.title)}\x1f{len(issue.description)}\n"
        digest.update(record.encode("utf-8"))
    return digest.hexdigest()


def _apply_input_mode(issue: Issue, mode: InputMode) -> tuple[str, str]:
    if mode is InputMode.TITLE_ONLY:
        return issue.title, ""
    if mode is InputMode.DESCRIPTION_ONLY:
        return "", issue.description
    return issue.title, issue.description


@dataclass
class PreparedUnit:
    """Everything a model run needs for one (unit, seed) combination."""

    graph: HeteroGraph
    features: dict[NodeType, np.ndarray]
    embed_model: emb.EmbeddingModel
    dropped: int
    times: dict[str, float]


def prepare_unit(
    issues: IssueSet,
    masks: SplitMasks,
    embed_cfg: emb.EmbeddingConfig,
    input_mode: InputMode = InputMode.FULL,
    embed_scope: str = "train",
    include_reverse: bool = True,
    rules: textnorm.TagRules | None = None,
) -> PreparedUnit:
    """Parts, embedding model, merged graph, and initial features.

    Issues whose text is empty under the input mode are dropped from the
    run (counted in ``dropped``); the split masks shrink accordingly.
    """
    rules = rules or textnorm.DEFAULT_RULES
    scope_keys = set(masks.assignment)
    in_scope = [i for i in issues if i.issue_key in scope_keys]

    t0 = time.perf_counter()
    parts: dict[str, tuple[list, list]] = {}
    dropped = 0
    for issue in in_scope:
        title, desc = _apply_input_mode(issue, input_mode)
        pt, pd = textnorm.issue_parts(title, desc, rules)
        if not pt and not pd:
            dropped += 1
            continue
        parts[issue.issue_key] = (pt, pd)
    kept = [i for i in in_scope if i.issue_key in parts]
    if not kept:
        raise Empty("no issue has usable text under this input mode")

    graphs = [build_issue_graph(i, *parts[i.issue_key]) for i in kept]
    labels = {i.issue_key: i.story_point for i in kept}
    masks = SplitMasks(
        {k: s for k, s in masks.assignment.items() if k in parts},
        masks.scenario, masks.source_project, masks.target_project,
    )
    graph = merge_hetero(graphs, labels, masks, include_reverse=include_reverse)
    t_graph = time.perf_counter() - t0

    t0 = time.perf_counter()
    if embed_scope == "all":
        embed_issues = kept
    else:
        embed_issues = [i for i in kept if masks.assignment[i.issue_key] is Split.TRAIN]
    sentences = []
    for issue in embed_issues:
        pt, pd = parts[issue.issue_key]
        for part in pt + pd:
            sentences.append(part.token_texts())
    embed_model = emb.train_cbow(sentences, embed_cfg)
    t_embed = time.perf_counter() - t0

    t0 = time.perf_counter()
    features = emb.init_node_embeddings(graph, embed_model)
    t_feat = time.perf_counter() - t0

    return PreparedUnit(
        graph, features, embed_model, dropped,
        {"graph_build": t_graph, "embed_train": t_embed, "feature_init": t_feat},
    )


def _masks_for_unit(spec: ScenarioSpec, issues: IssueSet,
                    unit: str | tuple[str, str]) -> SplitMasks:
    if spec.scenario is Scenario.WITHIN_PROJECT:
        return split_within_project(issues, unit, spec.ratios)
    source, target = unit
    return split_cross(issues, source, target, spec.scenario, spec.valid_fraction)


@dataclass
class UnitArtifacts:
    """Trained pieces of a single run, for checkpointing."""

    network: object
    embed_model: emb.EmbeddingModel
    class_map: mdl.ClassMap | None
    graph: HeteroGraph
    model_cfg: mdl.HgtConfig
    train_mean: float


def run_one(
    spec: ScenarioSpec,
    issues: IssueSet,
    unit: str | tuple[str, str],
    seed: int,
    hgt_cfg: mdl.HgtConfig,
    embed_cfg: emb.EmbeddingConfig,
    keep_predictions: bool = False,
    keep_trace: bool = False,
    rules: textnorm.TagRules | None = None,
    return_artifacts: bool = False,
):
    masks = _masks_for_unit(spec, issues, unit)
    run_embed_cfg = replace(embed_cfg, seed=seed)
    prep = prepare_unit(issues, masks, run_embed_cfg, spec.input_mode,
                        spec.embed_scope, spec.include_reverse, rules)
    graph = prep.graph

    n_outputs = 1
    class_map = None
    train_idx = graph.doc_indices_for(Split.TRAIN)
    if spec.task == mdl.CLASSIFICATION:
        class_map = mdl.ClassMap.from_labels(graph.labels[train_idx])
        n_outputs = class_map.n_classes
    cfg = replace(hgt_cfg, task=spec.task, seed=seed,
                  input_dim=run_embed_cfg.dim)

    t0 = time.perf_counter()
    if spec.model_kind is ModelKind.HGT:
        network = mdl.HgtNetwork(graph, cfg, n_outputs)
        feats = prep.features
    else:
        homo = type_erase(graph)
        network = mdl.GcnNetwork(homo, cfg, n_outputs)
        feats = np.vstack([
            prep.features[t] for t in NodeType if t in graph.node_ids
        ])
    result = mdl.train(network, feats, graph.labels, graph.split, class_map)
    t_train = time.perf_counter() - t0

    t0 = time.perf_counter()
    test_idx = graph.doc_indices_for(Split.TEST)
    if len(test_idx) == 0:
        raise Empty(f"unit {unit!r} has no test documents")
    estimates = mdl.predict(network, feats, test_idx, spec.task, class_map)
    t_predict = time.perf_counter() - t0

    actual = graph.labels[test_idx]
    run_mae = mae(estimates, actual)
    run_acc = None
    if spec.task == mdl.CLASSIFICATION:
        target_values = class_map.value_of(class_map.nearest_index(actual))
        run_acc = accuracy(estimates, target_values)

    unit_label = unit if isinstance(unit, str) else f"{unit[0]}->{unit[1]}"
    times = dict(prep.times)
    times["model_train"] = t_train
    times["predict"] = t_predict
    predictions = None
    if keep_predictions:
        predictions = [
            (graph.doc_keys[i], float(e)) for i, e in zip(test_idx, estimates)
        ]
    record = RunRecord(
        unit_label, seed, run_mae, run_acc,
        int(len(train_idx)), int(len(graph.doc_indices_for(Split.VALID))),
        int(len(test_idx)), prep.dropped, times, predictions,
        result.trace if keep_trace else None,
    )
    if return_artifacts:
        artifacts = UnitArtifacts(
            network, prep.embed_model, class_map, graph, cfg,
            float(graph.labels[train_idx].mean()),
        )
        return record, artifacts
    return record


def run_scenario(
    spec: ScenarioSpec,
    issues: IssueSet,
    hgt_cfg: mdl.HgtConfig | None = None,
    embed_cfg: emb.EmbeddingConfig | None = None,
    keep_predictions: bool = False,
    keep_traces: bool = False,
    rules: textnorm.TagRules | None = None,
) -> EvalReport:
    """Run every (unit, seed) combination and aggregate the scores."""
    hgt_cfg = hgt_cfg or mdl.HgtConfig()
    embed_cfg = embed_cfg or emb.EmbeddingConfig()
    runs: list[RunRecord] = []
    units = spec.units(issues)
    if not units:
        raise Empty("scenario resolves to no units")
    for unit in units:
        for seed in spec.resolved_seeds():
            runs.append(
                run_one(spec, issues, unit, seed, hgt_cfg, embed_cfg,
                        keep_predictions, keep_traces, rules)
            )

    per_unit: dict[str, list[float]] = {}
    per_unit_acc: dict[str, list[float]] = {}
    for r in runs:
        per_unit.setdefault(r.unit, []).append(r.mae)
        if r.accuracy is not None:
            per_unit_acc.setdefault(r.unit, []).append(r.accuracy)
    unit_means = {u: float(np.mean(v)) for u, v in per_unit.items()}
    unit_stds = {u: float(np.std(v)) for u, v in per_unit.items()}
    avg = float(np.mean(list(unit_means.values())))
    avg_acc = None
    if per_unit_acc:
        avg_acc = float(np.mean([np.mean(v) for v in per_unit_acc.values()]))

    spec_echo = {
        "scenario": spec.scenario.value,
        "units": [u if isinstance(u, str) else f"{u[0]}->{u[1]}" for u in units],
        "input_mode": spec.input_mode.value,
        "model": spec.model_kind.value,
        "task": spec.task,
        "seeds": spec.resolved_seeds(),
        "embed_scope": spec.embed_scope,
        "valid_fraction": spec.valid_fraction,
    }
    config_echo = {
        "model": asdict(hgt_cfg),
        "embedding": asdict(embed_cfg),
    }
    return EvalReport(
        spec.scenario.value, spec_echo, runs, unit_means, unit_stds,
        avg, avg_acc, dataset_fingerprint(issues), config_echo,
    )


def write_predictions_csv(report: EvalReport, path) -> None:
    """Flatten kept per-run predictions into a CSV."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("unit,seed,issue_key,estimate\n")
        for r in report.runs:
            if not r.predictions:
                continue
            for key, est in r.predictions:
                fh.write(f"{r.unit},{r.seed},{key},{est!r}\n")


def write_traces_csv(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("unit,seed,epoch,loss,valid_mae\n")
        for r in report.runs:
            if r.trace is None:
                continue
            for line in r.trace.loss_lines():
                fh.write(f"{r.unit},{r.seed},{line}\n")
