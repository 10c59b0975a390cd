"""Split issue text into sentence and code parts, and normalize tokens.

Descriptions are segmented at markup tags such as ``{code}`` and
``{noformat}``; the text enclosed by a matching tag pair becomes a code
part, everything else is cut into sentences at delimiting punctuation.
Tokens are camel-case split, split at digit and punctuation boundaries,
lowercased, and stemmed.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum

from .porter import stem

logger = logging.getLogger(__name__)


class Origin(Enum):
    TITLE = "title"
    DESCRIPTION = "description"


class PartKind(Enum):
    SENTENCE = "sentence"
    CODE_PART = "code_part"


class TokenKind(Enum):
    WORD = "word"
    CODE_TOKEN = "code_token"


@dataclass(frozen=True)
class NormalizedToken:
    text: str
    kind: TokenKind


@dataclass(frozen=True)
class SpecialTag:
    """One markup tag occurrence: matched literal, family, character span."""

    literal: str
    family: str
    span: tuple[int, int]


@dataclass(frozen=True)
class Part:
    kind: PartKind
    tokens: tuple[NormalizedToken, ...]
    origin: Origin
    span: tuple[int, int]

    def token_texts(self) -> list[str]:
        return [t.text for t in self.tokens]


# Tag families: members of a code family open/close code spans inside
# descriptions; other families (redacted) only delimit sentences.
DEFAULT_TAG_PATTERNS: tuple[tuple[str, str], ...] = (
    ("code", r"\{code(?::[^}\s]*)?\}"),
    ("noformat", r"\{noformat\}"),
    ("quote", r"\{quote\}"),
    ("redacted", r"<redacted>"),
)
DEFAULT_CODE_FAMILIES = frozenset({"code", "noformat", "quote"})
DEFAULT_DELIMITERS = ".!?;"

_PUNCT = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~"


@dataclass(frozen=True)
class TagRules:
    """Configurable tag patterns and sentence delimiters."""

    tag_patterns: tuple[tuple[str, str], ...] = DEFAULT_TAG_PATTERNS
    code_families: frozenset[str] = DEFAULT_CODE_FAMILIES
    delimiters: str = DEFAULT_DELIMITERS

    def tag_regex(self) -> re.Pattern:
        alts = [f"(?P<f{i}>{pat})" for i, (_, pat) in enumerate(self.tag_patterns)]
        return re.compile("|".join(alts), re.IGNORECASE)

    def family_of_group(self, group_name: str) -> str:
        return self.tag_patterns[int(group_name[1:])][0]

    def sentence_regex(self) -> re.Pattern:
        cls = re.escape(self.delimiters)
        return re.compile(rf"[{cls}]+(?=\s|$)|[\r\n]+")


DEFAULT_RULES = TagRules()


def detect_special_tags(text: str, rules: TagRules = DEFAULT_RULES) -> list[SpecialTag]:
    """All non-overlapping tag matches, left to right."""
    out = []
    for m in rules.tag_regex().finditer(text):
        out.append(
            SpecialTag(
                literal=m.group(0).lower(),
                family=rules.family_of_group(m.lastgroup),
                span=(m.start(), m.end()),
            )
        )
    return out


_NON_ALNUM = re.compile(r"[\W_]+", re.UNICODE)


def _camel_digit_split(chunk: str) -> list[str]:
    pieces = []
    start = 0
    for i in range(1, len(chunk)):
        a, b = chunk[i - 1], chunk[i]
        if (a.islower() and b.isupper()) or (a.isdigit() != b.isdigit()):
            pieces.append(chunk[start:i])
            start = i
    pieces.append(chunk[start:])
    return pieces


def normalize_token(raw: str, kind: TokenKind = TokenKind.WORD) -> list[NormalizedToken]:
    """Split a raw whitespace token into normalized subtokens.

    Splits at non-alphanumeric separators, camel humps, and digit/letter
    boundaries; lowercases and stems each piece. May return an empty list
    (pure punctuation reduces to nothing).
    """
    out = []
    for chunk in _NON_ALNUM.split(raw):
        if not chunk:
            continue
        for piece in _camel_digit_split(chunk):
            out.append(NormalizedToken(stem(piece.lower()), kind))
    return out


def _tokenize_span(text: str, kind: TokenKind) -> tuple[NormalizedToken, ...]:
    tokens: list[NormalizedToken] = []
    for raw in text.split():
        tokens.extend(normalize_token(raw, kind))
    return tuple(tokens)


def _code_spans(
    text: str, tags: list[SpecialTag], rules: TagRules
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Pair code-family tags into enclosed spans.

    Returns (code spans, removed tag spans). An opening tag is closed by
    the next tag of the same family; an unclosed opener swallows the rest
    of the text (warned, not fatal). Tags of other families inside an open
    span stay part of the code text.
    """
    code: list[tuple[int, int]] = []
    removed: list[tuple[int, int]] = []
    open_tag: SpecialTag | None = None
    for tag in tags:
        if open_tag is not None:
            if tag.family == open_tag.family:
                code.append((open_tag.span[1], tag.span[0]))
                removed.extend([open_tag.span, tag.span])
                open_tag = None
        elif tag.family in rules.code_families:
            open_tag = tag
        else:
            removed.append(tag.span)
    if open_tag is not None:
        logger.warning(
            "unbalanced %s tag at offset %d; treating remainder as code",
            open_tag.literal,
            open_tag.span[0],
        )
        code.append((open_tag.span[1], len(text)))
        removed.append(open_tag.span)
    return code, removed


def _sentence_spans(
    text: str, lo: int, hi: int, rules: TagRules
) -> list[tuple[int, int]]:
    region = text[lo:hi]
    spans = []
    pos = 0
    for m in rules.sentence_regex().finditer(region):
        if m.start() > pos:
            spans.append((lo + pos, lo + m.start()))
        pos = m.end()
    if pos < len(region):
        spans.append((lo + pos, hi))
    return spans


def split_to_parts(
    text: str, origin: Origin, rules: TagRules = DEFAULT_RULES
) -> list[Part]:
    """Segment issue text into ordered sentence and code parts.

    Only descriptions may produce code parts; tags occurring in a title
    are stripped and act as sentence boundaries. Parts with no surviving
    tokens are dropped.
    """
    if not text:
        return []
    tags = detect_special_tags(text, rules)
    if origin is Origin.DESCRIPTION:
        code, removed = _code_spans(text, tags, rules)
    else:
        code, removed = [], [t.span for t in tags]

    blocked = sorted(
        [(lo, hi, True) for lo, hi in code] + [(lo, hi, False) for lo, hi in removed]
    )

    parts: list[Part] = []

    def emit_sentences(lo: int, hi: int) -> None:
        for slo, shi in _sentence_spans(text, lo, hi, rules):
            tokens = _tokenize_span(text[slo:shi], TokenKind.WORD)
            if tokens:
                parts.append(Part(PartKind.SENTENCE, tokens, origin, (slo, shi)))

    cursor = 0
    for lo, hi, is_code in blocked:
        if lo > cursor:
            emit_sentences(cursor, lo)
        if is_code:
            tokens = _tokenize_span(text[lo:hi], TokenKind.CODE_TOKEN)
            if tokens:
                parts.append(Part(PartKind.CODE_PART, tokens, origin, (lo, hi)))
        cursor = max(cursor, hi)
    if cursor < len(text):
        emit_sentences(cursor, len(text))
    return parts


def issue_parts(
    title: str, description: str, rules: TagRules = DEFAULT_RULES
) -> tuple[list[Part], list[Part]]:
    """Title and description parts for one issue."""
    return (
        split_to_parts(title, Origin.TITLE, rules),
        split_to_parts(description, Origin.DESCRIPTION, rules),
    )


def raw_tokens(text: str) -> list[str]:
    """Whitespace tokens with boundary punctuation stripped, lowercased.

    The before-normalization tokenization used for corpus statistics.
    """
    out = []
    for tok in text.split():
        t = tok.strip(_PUNCT).lower()
        if t:
            out.append(t)
    return out
