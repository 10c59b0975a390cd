"""Issue collections: CSV loading, split assignment, corpus statistics.

The expected input is one CSV export per project with at least key, title,
description, and story-point columns (RFC-4180 quoting, embedded newlines
allowed). A loaded :class:`IssueSet` is immutable and ordered; row order
stands in for chronology.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

from . import textnorm


class CorpusError(Exception):
    """Base for loading and split errors."""


class MissingColumn(CorpusError):
    def __init__(self, name: str):
        super().__init__(f"required column not found: {name!r}")
        self.name = name


class BadStoryPoint(CorpusError):
    def __init__(self, row: int, value: str):
        super().__init__(f"row {row}: story point {value!r} is not a positive number")
        self.row = row


class MalformedCsv(CorpusError):
    def __init__(self, row: int, reason: str):
        super().__init__(f"row {row}: {reason}")
        self.row = row


class UnknownProject(CorpusError):
    pass


class SameProject(CorpusError):
    pass


DEFAULT_COLUMNS: Mapping[str, str] = {
    "issue_key": "issuekey",
    "title": "title",
    "description": "description",
    "story_point": "storypoint",
}

# File stem -> (abbreviation, repository) for the standard per-project exports.
PROJECT_REGISTRY: Mapping[str, tuple[str, str]] = {
    "appceleratorstudio": ("AS", "Appcelerator"),
    "aptanastudio": ("AP", "Appcelerator"),
    "bamboo": ("BB", "Atlassian"),
    "clover": ("CV", "Atlassian"),
    "datamanagement": ("DM", "Lsstcorp"),
    "duracloud": ("DC", "DuraSpace"),
    "jirasoftware": ("JI", "Atlassian"),
    "mesos": ("ME", "Apache"),
    "moodle": ("MD", "Moodle"),
    "mule": ("MU", "Mulesoft"),
    "mulestudio": ("MS", "Mulesoft"),
    "springxd": ("XD", "Spring"),
    "talenddataquality": ("TD", "Talendforge"),
    "talendesb": ("TE", "Talendforge"),
    "titanium": ("TI", "Appcelerator"),
    "usergrid": ("UG", "Apache"),
}


@dataclass(frozen=True)
class Issue:
    issue_key: str
    project: str
    repository: str
    title: str
    description: str
    story_point: float
    ordinal: int


class IssueSet:
    """Ordered, immutable collection of issues with a project index."""

    def __init__(self, issues: Sequence[Issue]):
        self.issues: tuple[Issue, ...] = tuple(issues)
        index: dict[str, list[int]] = {}
        seen: set[str] = set()
        for i, issue in enumerate(self.issues):
            if issue.issue_key in seen:
                raise MalformedCsv(i + 1, f"duplicate issue key {issue.issue_key!r}")
            seen.add(issue.issue_key)
            index.setdefault(issue.project, []).append(i)
        self.project_index: dict[str, tuple[int, ...]] = {
            p: tuple(v) for p, v in index.items()
        }

    def __len__(self) -> int:
        return len(self.issues)

    def __iter__(self) -> Iterator[Issue]:
        return iter(self.issues)

    def projects(self) -> list[str]:
        return sorted(self.project_index)

    def for_project(self, project: str) -> list[Issue]:
        if project not in self.project_index:
            raise UnknownProject(f"no issues for project {project!r}")
        return [self.issues[i] for i in self.project_index[project]]

    def subset(self, keys: set[str]) -> "IssueSet":
        return IssueSet([i for i in self.issues if i.issue_key in keys])


class Split(Enum):
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"


class Scenario(Enum):
    WITHIN_PROJECT = "within-project"
    CROSS_WITHIN_REPO = "cross-within-repo"
    CROSS_REPO = "cross-repo"


@dataclass
class SplitMasks:
    assignment: dict[str, Split]
    scenario: Scenario
    source_project: str | None = None
    target_project: str | None = None

    def keys_for(self, split: Split) -> list[str]:
        return [k for k, s in self.assignment.items() if s is split]


def _resolve_columns(
    header: Sequence[str], column_map: Mapping[str, str] | None,
    require_labels: bool = True,
) -> dict[str, int]:
    names = dict(DEFAULT_COLUMNS)
    if column_map:
        names.update(column_map)
    lowered = [h.strip().lower() for h in header]
    out = {}
    for fieldname, col in names.items():
        try:
            out[fieldname] = lowered.index(col.lower())
        except ValueError:
            if fieldname == "story_point" and not require_labels:
                out[fieldname] = -1
            else:
                raise MissingColumn(col) from None
    return out


def load_csv(
    path: str | Path,
    column_map: Mapping[str, str] | None = None,
    project: str | None = None,
    repository: str | None = None,
    start_ordinal: int = 0,
    require_labels: bool = True,
) -> IssueSet:
    """Load one CSV export into an IssueSet, ordinals in row order.

    ``require_labels=False`` admits files without a story-point column
    (issues to be scored); such rows carry a placeholder label of 1.
    """
    path = Path(path)
    stem = path.stem.lower()
    if project is None:
        project, default_repo = PROJECT_REGISTRY.get(stem, (stem, ""))
    else:
        _, default_repo = PROJECT_REGISTRY.get(stem, (project, ""))
    if repository is None:
        repository = default_repo

    issues: list[Issue] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedCsv(0, "empty file") from None
        cols = _resolve_columns(header, column_map, require_labels)
        width = len(header)
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != width:
                raise MalformedCsv(row_no, f"expected {width} fields, got {len(row)}")
            key = row[cols["issue_key"]].strip()
            title = row[cols["title"]]
            desc = row[cols["description"]]
            if cols["story_point"] < 0:
                sp = 1.0
            else:
                sp_raw = row[cols["story_point"]].strip()
                try:
                    sp = float(sp_raw)
                except ValueError:
                    raise BadStoryPoint(row_no, sp_raw) from None
                if not sp > 0:
                    raise BadStoryPoint(row_no, sp_raw)
            if not key:
                raise MalformedCsv(row_no, "empty issue key")
            if not title and not desc:
                raise MalformedCsv(row_no, "both title and description empty")
            issues.append(
                Issue(key, project, repository, title, desc, sp,
                      start_ordinal + len(issues))
            )
    return IssueSet(issues)


def load_dir(path: str | Path, column_map: Mapping[str, str] | None = None,
             require_labels: bool = True) -> IssueSet:
    """Load every ``*.csv`` in a directory (sorted by name) into one set."""
    path = Path(path)
    files = sorted(path.glob("*.csv"))
    if not files:
        raise MalformedCsv(0, f"no csv files in {path}")
    issues: list[Issue] = []
    for f in files:
        part = load_csv(f, column_map=column_map, start_ordinal=len(issues),
                        require_labels=require_labels)
        issues.extend(part.issues)
    return IssueSet(issues)


def load_path(path: str | Path, column_map: Mapping[str, str] | None = None,
              require_labels: bool = True) -> IssueSet:
    path = Path(path)
    if path.is_dir():
        return load_dir(path, column_map, require_labels)
    return load_csv(path, column_map, require_labels=require_labels)


def write_csv(issue_set: IssueSet | Sequence[Issue], path: str | Path) -> None:
    """Serialize issues back to the standard four-column CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["issuekey", "title", "description", "storypoint"])
        for issue in issue_set:
            sp = issue.story_point
            sp_text = str(int(sp)) if sp == int(sp) else repr(sp)
            writer.writerow([issue.issue_key, issue.title, issue.description, sp_text])


def split_within_project(
    issue_set: IssueSet,
    project: str,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> SplitMasks:
    """Chronological train/valid/test split inside one project.

    Earlier issues (by ordinal) train; the first ``floor(r_train * n)`` go
    to train, the next ``floor(r_valid * n)`` to valid, the rest to test.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    issues = sorted(issue_set.for_project(project), key=lambda i: i.ordinal)
    n = len(issues)
    n_train = int(ratios[0] * n)
    n_valid = int(ratios[1] * n)
    assignment: dict[str, Split] = {}
    for pos, issue in enumerate(issues):
        if pos < n_train:
            assignment[issue.issue_key] = Split.TRAIN
        elif pos < n_train + n_valid:
            assignment[issue.issue_key] = Split.VALID
        else:
            assignment[issue.issue_key] = Split.TEST
    return SplitMasks(assignment, Scenario.WITHIN_PROJECT,
                      source_project=project, target_project=project)


def split_cross(
    issue_set: IssueSet,
    source: str,
    target: str,
    scenario: Scenario = Scenario.CROSS_REPO,
    valid_fraction: float = 0.0,
) -> SplitMasks:
    """All source-project issues train, all target-project issues test.

    ``valid_fraction`` > 0 reserves that trailing share of the source
    issues as a validation split (off by default).
    """
    if source == target:
        raise SameProject(f"source and target are both {source!r}")
    src_issues = sorted(issue_set.for_project(source), key=lambda i: i.ordinal)
    tgt_issues = issue_set.for_project(target)
    n_valid = int(len(src_issues) * valid_fraction)
    assignment: dict[str, Split] = {}
    cut = len(src_issues) - n_valid
    for pos, issue in enumerate(src_issues):
        assignment[issue.issue_key] = Split.TRAIN if pos < cut else Split.VALID
    for issue in tgt_issues:
        assignment[issue.issue_key] = Split.TEST
    return SplitMasks(assignment, scenario,
                      source_project=source, target_project=target)


@dataclass
class ProjectStats:
    vocab_size: int
    avg_appearance: float


@dataclass
class CorpusStats:
    per_project: dict[str, ProjectStats]
    tag_counts: dict[str, int]
    total_issues: int

    def to_json(self) -> str:
        body = {
            "total_issues": self.total_issues,
            "per_project": {
                p: {"vocab_size": s.vocab_size, "avg_appearance": s.avg_appearance}
                for p, s in sorted(self.per_project.items())
            },
            "tag_counts": dict(
                sorted(self.tag_counts.items(), key=lambda kv: (-kv[1], kv[0]))
            ),
        }
        return json.dumps(body, indent=2)


def _normalized_issue_tokens(issue: Issue, rules: textnorm.TagRules) -> list[str]:
    title_parts, desc_parts = textnorm.issue_parts(issue.title, issue.description, rules)
    toks: list[str] = []
    for part in title_parts + desc_parts:
        toks.extend(part.token_texts())
    return toks


def corpus_stats(
    issue_set: IssueSet,
    normalized: bool = True,
    tokenizer: Callable[[Issue], list[str]] | None = None,
    rules: textnorm.TagRules | None = None,
) -> CorpusStats:
    """Per-project vocabulary size and average appearance, plus tag counts.

    Average appearance of a token is the number of issues containing it,
    averaged over the project vocabulary. Tag counts count issues, not
    occurrences.
    """
    rules = rules or textnorm.DEFAULT_RULES
    if tokenizer is None:
        if normalized:
            tokenizer = lambda issue: _normalized_issue_tokens(issue, rules)
        else:
            tokenizer = lambda issue: (
                textnorm.raw_tokens(issue.title) + textnorm.raw_tokens(issue.description)
            )

    doc_freq: dict[str, dict[str, int]] = {}
    tag_issues: dict[str, int] = {}
    for issue in issue_set:
        per_proj = doc_freq.setdefault(issue.project, {})
        for tok in set(tokenizer(issue)):
            per_proj[tok] = per_proj.get(tok, 0) + 1
        text = issue.title + "\n" + issue.description
        seen = {t.literal for t in textnorm.detect_special_tags(text, rules)}
        for literal in seen:
            tag_issues[literal] = tag_issues.get(literal, 0) + 1

    per_project = {}
    for proj, freqs in doc_freq.items():
        vocab = len(freqs)
        avg = sum(freqs.values()) / vocab if vocab else 0.0
        per_project[proj] = ProjectStats(vocab, avg)
    return CorpusStats(per_project, tag_issues, len(issue_set))
