"""Command line interface.

Subcommands:
    analyze      corpus statistics to JSON
    build-graph  merge issue CSVs into a graph checkpoint
    train-embed  train the embedding tables to a checkpoint
    run          run an evaluation scenario to a JSON report
    predict      score a new CSV with a saved model bundle

Common flags (``--seed``, ``--config``, ``--title-only``, ``--desc-only``,
``--task``, ``--model``, ``--out``) attach to every subcommand. Errors
print one machine-readable line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import binio, config as cfgmod
from . import embedding as emb
from . import harness
from . import model as mdl
from .corpus import (
    CorpusError,
    Scenario,
    Split,
    SplitMasks,
    corpus_stats,
    load_path,
)
from .embedding import EmbeddingModel
from .issuegraph import NodeType, build_issue_graph, merge_hetero
from .textnorm import issue_parts

BUNDLE_MAGIC = b"SGBN"
BUNDLE_VERSION = 1


def _common_flags(parser: argparse.ArgumentParser, model_task: bool = True) -> None:
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--config", default=None, help="key = value config file")
    parser.add_argument("--title-only", action="store_true")
    parser.add_argument("--desc-only", action="store_true")
    if model_task:
        parser.add_argument("--task", choices=["regression", "classification"],
                            default=None)
        parser.add_argument("--model", dest="model_kind", choices=["hgt", "gcn"],
                            default=None)
    parser.add_argument("--out", default=None, help="output path")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="storygraph")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="corpus statistics to JSON")
    p.add_argument("--input", required=True, help="csv file or directory")
    p.add_argument("--raw", action="store_true", help="skip token normalization")
    _common_flags(p)

    p = sub.add_parser("build-graph", help="merge issues into a graph checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--debug-json", default=None, help="also dump a readable JSON copy")
    _common_flags(p)

    p = sub.add_parser("train-embed", help="train embedding tables")
    p.add_argument("--input", required=True)
    _common_flags(p)

    p = sub.add_parser("run", help="run an evaluation scenario")
    p.add_argument("--input", required=True)
    p.add_argument("--scenario", required=True,
                   choices=[s.value for s in Scenario])
    p.add_argument("--projects", default=None, help="comma separated, within-project")
    p.add_argument("--pairs", default=None,
                   help="comma separated SRC:TGT pairs for cross scenarios")
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--seeds", default=None, help="comma separated seed list")
    p.add_argument("--pred-out", default=None, help="write per-issue predictions CSV")
    p.add_argument("--trace-out", default=None, help="write loss traces CSV")
    p.add_argument("--save-model", default=None,
                   help="save trained bundle (single unit, single seed only)")
    _common_flags(p)

    p = sub.add_parser("predict", help="score a new CSV with a saved bundle")
    p.add_argument("--model", dest="bundle", required=True, help="model bundle path")
    p.add_argument("--issues", required=True, help="csv of issues to score")
    _common_flags(p, model_task=False)  # kind and task live in the bundle

    return parser


def _settings_from(args: argparse.Namespace) -> dict:
    overrides: dict[str, object] = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "task", None):
        overrides["task"] = args.task
    if getattr(args, "model_kind", None):
        overrides["model"] = args.model_kind
    if getattr(args, "title_only", False):
        overrides["input_mode"] = "title-only"
    if getattr(args, "desc_only", False):
        overrides["input_mode"] = "description-only"
    if getattr(args, "repeats", None) is not None:
        overrides["repeats"] = args.repeats
    return cfgmod.resolve(args.config, overrides=overrides)


def _cmd_analyze(args, settings) -> int:
    issues = load_path(args.input)
    stats = corpus_stats(issues, normalized=not args.raw,
                         rules=cfgmod.tag_rules(settings))
    text = stats.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def _graph_from_issues(issues, input_mode: harness.InputMode, rules=None):
    graphs = []
    labels = {}
    assignment = {}
    for issue in issues:
        title, desc = harness._apply_input_mode(issue, input_mode)
        pt, pd = issue_parts(title, desc, rules) if rules else issue_parts(title, desc)
        if not pt and not pd:
            continue
        graphs.append(build_issue_graph(issue, pt, pd))
        labels[issue.issue_key] = issue.story_point
        assignment[issue.issue_key] = Split.TRAIN
    masks = SplitMasks(assignment, Scenario.WITHIN_PROJECT)
    return merge_hetero(graphs, labels, masks)


def _cmd_build_graph(args, settings) -> int:
    if not args.out:
        raise CliError("build-graph requires --out")
    issues = load_path(args.input)
    graph = _graph_from_issues(issues, harness.InputMode(settings["input_mode"]),
                               cfgmod.tag_rules(settings))
    graph.save(args.out)
    if args.debug_json:
        Path(args.debug_json).write_text(graph.to_debug_json() + "\n", encoding="utf-8")
    print(f"graph: {graph.total_nodes()} nodes, "
          f"{sum(a.shape[1] for a in graph.edges.values())} edges -> {args.out}")
    return 0


def _cmd_train_embed(args, settings) -> int:
    if not args.out:
        raise CliError("train-embed requires --out")
    issues = load_path(args.input)
    mode = harness.InputMode(settings["input_mode"])
    rules = cfgmod.tag_rules(settings)
    sentences = []
    for issue in issues:
        title, desc = harness._apply_input_mode(issue, mode)
        pt, pd = issue_parts(title, desc, rules)
        for part in pt + pd:
            sentences.append(part.token_texts())
    model = emb.train_cbow(sentences, cfgmod.embedding_config(settings))
    model.save(args.out)
    print(f"embedding: {len(model.vocab)} tokens, dim {model.dim} -> {args.out}")
    return 0


def save_bundle(path, artifacts: harness.UnitArtifacts, model_kind: str) -> None:
    embed_model = artifacts.embed_model
    meta = {
        "model_kind": model_kind,
        "task": artifacts.model_cfg.task,
        "n_outputs": artifacts.network.n_outputs,
        "train_mean": artifacts.train_mean,
        "class_values": (
            artifacts.class_map.values.tolist() if artifacts.class_map else None
        ),
        "model_config": asdict(artifacts.model_cfg),
        "embed_config": asdict(embed_model.config),
        "embed_vocab": sorted(embed_model.vocab, key=embed_model.vocab.get),
    }
    arrays = {"embed/word": embed_model.word_vectors,
              "embed/ngram": embed_model.ngram_vectors}
    for name, arr in artifacts.network.params.items():
        arrays["param/" + name] = arr
    binio.write_container(path, BUNDLE_MAGIC, BUNDLE_VERSION, meta, arrays)


def load_bundle(path):
    meta, arrays = binio.read_container(path, BUNDLE_MAGIC, BUNDLE_VERSION)
    embed_cfg = emb.EmbeddingConfig(**meta["embed_config"])
    vocab = {tok: i for i, tok in enumerate(meta["embed_vocab"])}
    embed_model = EmbeddingModel(embed_cfg, vocab,
                                 arrays["embed/word"], arrays["embed/ngram"])
    params = {
        name[len("param/"):]: arr
        for name, arr in arrays.items() if name.startswith("param/")
    }
    class_map = None
    if meta["class_values"]:
        class_map = mdl.ClassMap(np.asarray(meta["class_values"], dtype=np.float64))
    model_cfg = mdl.HgtConfig(**meta["model_config"])
    return meta, embed_model, params, class_map, model_cfg


def _cmd_run(args, settings) -> int:
    if not args.out:
        raise CliError("run requires --out")
    issues = load_path(args.input)
    scenario = Scenario(args.scenario)
    pairs = None
    if args.pairs:
        pairs = []
        for chunk in args.pairs.split(","):
            if ":" not in chunk:
                raise CliError(f"bad pair {chunk!r}, expected SRC:TGT")
            src, tgt = chunk.split(":", 1)
            pairs.append((src.strip(), tgt.strip()))
    projects = (
        [p.strip() for p in args.projects.split(",")] if args.projects else None
    )
    seeds = (
        [int(s) for s in args.seeds.split(",")] if args.seeds else None
    )
    spec = harness.ScenarioSpec(
        scenario=scenario,
        projects=projects,
        pairs=pairs,
        input_mode=harness.InputMode(settings["input_mode"]),
        model_kind=harness.ModelKind(settings["model"]),
        task=settings["task"],
        repeats=settings["repeats"],
        seeds=seeds,
        valid_fraction=settings["valid_fraction"],
        embed_scope=settings["embed_scope"],
        include_reverse=settings["reverse_edges"],
    )
    hgt_cfg = cfgmod.hgt_config(settings)
    embed_cfg = cfgmod.embedding_config(settings)
    rules = cfgmod.tag_rules(settings)

    if args.save_model:
        units = spec.units(issues)
        run_seeds = spec.resolved_seeds()
        if len(units) != 1 or len(run_seeds) != 1:
            raise CliError("--save-model needs exactly one unit and one seed")
        record, artifacts = harness.run_one(
            spec, issues, units[0], run_seeds[0], hgt_cfg, embed_cfg,
            keep_predictions=bool(args.pred_out), keep_trace=bool(args.trace_out),
            rules=rules, return_artifacts=True,
        )
        report = harness.EvalReport(
            spec.scenario.value,
            {"scenario": spec.scenario.value, "units": [record.unit],
             "input_mode": spec.input_mode.value, "model": spec.model_kind.value,
             "task": spec.task, "seeds": run_seeds,
             "embed_scope": spec.embed_scope, "valid_fraction": spec.valid_fraction},
            [record], {record.unit: record.mae}, {record.unit: 0.0},
            record.mae, record.accuracy,
            harness.dataset_fingerprint(issues),
            {"model": asdict(hgt_cfg), "embedding": asdict(embed_cfg)},
        )
        save_bundle(args.save_model, artifacts, spec.model_kind.value)
    else:
        report = harness.run_scenario(
            spec, issues, hgt_cfg, embed_cfg,
            keep_predictions=bool(args.pred_out),
            keep_traces=bool(args.trace_out),
            rules=rules,
        )
    Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    if args.pred_out:
        harness.write_predictions_csv(report, args.pred_out)
    if args.trace_out:
        harness.write_traces_csv(report, args.trace_out)
    print(f"average mae {report.average_mae:.4f} -> {args.out}")
    return 0


def _cmd_predict(args, settings) -> int:
    if not args.out:
        raise CliError("predict requires --out")
    meta, embed_model, params, class_map, model_cfg = load_bundle(args.bundle)
    issues = load_path(args.issues, require_labels=False)
    mode = harness.InputMode(settings["input_mode"])
    rules = cfgmod.tag_rules(settings)

    rows = []
    graphs = []
    labels = {}
    assignment = {}
    for issue in issues:
        title, desc = harness._apply_input_mode(issue, mode)
        pt, pd = issue_parts(title, desc, rules)
        if not pt and not pd:
            rows.append((issue.issue_key, None))
            continue
        graphs.append(build_issue_graph(issue, pt, pd))
        labels[issue.issue_key] = 1.0  # placeholder, predictions ignore labels
        assignment[issue.issue_key] = Split.TEST
        rows.append((issue.issue_key, "pending"))
    estimates: dict[str, float] = {}
    if graphs:
        masks = SplitMasks(assignment, Scenario.WITHIN_PROJECT)
        graph = merge_hetero(graphs, labels, masks)
        features = emb.init_node_embeddings(graph, embed_model)
        if meta["model_kind"] == "hgt":
            network = mdl.HgtNetwork(graph, model_cfg, meta["n_outputs"], params=params)
            feats = features
        else:
            from .issuegraph import type_erase

            homo = type_erase(graph)
            network = mdl.GcnNetwork(homo, model_cfg, meta["n_outputs"], params=params)
            feats = np.vstack([features[t] for t in NodeType if t in graph.node_ids])
        idx = np.arange(len(graph.doc_keys), dtype=np.int64)
        values = mdl.estimates_from_output(
            network.forward(feats), idx, model_cfg.task, class_map
        )
        estimates = {k: float(v) for k, v in zip(graph.doc_keys, values)}

    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("issue_key,estimate\n")
        for key, state in rows:
            value = estimates.get(key, meta["train_mean"])
            fh.write(f"{key},{value!r}\n")
    print(f"{len(rows)} estimates -> {args.out}")
    return 0


class CliError(Exception):
    pass


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        settings = _settings_from(args)
        if args.command == "analyze":
            return _cmd_analyze(args, settings)
        if args.command == "build-graph":
            return _cmd_build_graph(args, settings)
        if args.command == "train-embed":
            return _cmd_train_embed(args, settings)
        if args.command == "run":
            return _cmd_run(args, settings)
        if args.command == "predict":
            return _cmd_predict(args, settings)
        raise CliError(f"unknown command {args.command!r}")
    except (CliError, CorpusError, cfgmod.ConfigError, harness.HarnessError,
            mdl.ModelError, emb.EmbeddingError, binio.ContainerError,
            FileNotFoundError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
