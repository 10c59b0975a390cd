"""Story-point estimation from issue text via typed-graph attention."""

from .corpus import (
    Issue,
    IssueSet,
    Scenario,
    Split,
    SplitMasks,
    corpus_stats,
    load_csv,
    load_dir,
    load_path,
    split_cross,
    split_within_project,
    write_csv,
)
from .embedding import EmbeddingConfig, EmbeddingModel, init_node_embeddings, train_cbow
from .estimators import StoryPointClassifier, StoryPointRegressor
from .harness import (
    EvalReport,
    InputMode,
    ModelKind,
    ScenarioSpec,
    accuracy,
    mae,
    run_scenario,
)
from .issuegraph import (
    HeteroGraph,
    IssueGraph,
    NodeType,
    Relation,
    build_issue_graph,
    merge_hetero,
    type_erase,
)
from .model import (
    ClassMap,
    GcnNetwork,
    HgtConfig,
    HgtNetwork,
    loss_ce,
    loss_l1,
    predict,
    train,
)
from .textnorm import (
    NormalizedToken,
    Origin,
    Part,
    PartKind,
    SpecialTag,
    TagRules,
    TokenKind,
    detect_special_tags,
    normalize_token,
    split_to_parts,
)

__version__ = "0.1.0"

__all__ = [
    "Issue", "IssueSet", "Scenario", "Split", "SplitMasks",
    "corpus_stats", "load_csv", "load_dir", "load_path",
    "split_cross", "split_within_project", "write_csv",
    "EmbeddingConfig", "EmbeddingModel", "init_node_embeddings", "train_cbow",
    "StoryPointClassifier", "StoryPointRegressor",
    "EvalReport", "InputMode", "ModelKind", "ScenarioSpec",
    "accuracy", "mae", "run_scenario",
    "HeteroGraph", "IssueGraph", "NodeType", "Relation",
    "build_issue_graph", "merge_hetero", "type_erase",
    "ClassMap", "GcnNetwork", "HgtConfig", "HgtNetwork",
    "loss_ce", "loss_l1", "predict", "train",
    "NormalizedToken", "Origin", "Part", "PartKind", "SpecialTag",
    "TagRules", "TokenKind", "detect_special_tags", "normalize_token",
    "split_to_parts",
    "__version__",
]
