"""Keyword constraints: tokenization, membership tests and compound-split detection."""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

# Letters and digits (plus combining marks so decomposed accents stay inside a
# word). Apostrophes are word characters only between two such characters.
_WORD = r"[^\W_]|[\u0300-\u036f]"
_TOKEN_RE = re.compile(rf"(?:{_WORD})+(?:['’](?:{_WORD})+)*")

_SEP = "\x00"  # never part of a token

MORPH_SUFFIXES = ("s", "es", "ed", "ing", "ly")
MIN_STEM = 3
MIN_COMPOUND_PART = 3


@dataclass(frozen=True)
class MatchPolicy:
    case_fold: bool = True
    unicode_normalize: bool = True
    morphological: bool = False

    def normalize_token(self, token: str) -> str:
        if self.unicode_normalize:
            token = unicodedata.normalize("NFC", token)
        token = token.replace("’", "'")
        if self.case_fold:
            token = token.casefold()
        return token


EXACT = MatchPolicy()


@dataclass(frozen=True)
class TokenizedText:
    raw: str
    tokens: tuple[str, ...]
    spans: tuple[tuple[int, int], ...]
    policy: MatchPolicy = EXACT

    def __len__(self) -> int:
        return len(self.tokens)

    @cached_property
    def _joined(self) -> str:
        return _SEP + _SEP.join(self.tokens) + _SEP

    def gaps(self) -> list[str]:
        """Separator text before each token, plus the trailing remainder."""
        out, prev = [], 0
        for start, end in self.spans:
            out.append(self.raw[prev:start])
            prev = end
        out.append(self.raw[prev:])
        return out


def normalize_and_tokenize(raw: str, policy: MatchPolicy = EXACT) -> TokenizedText:
    tokens, spans = [], []
    for m in _TOKEN_RE.finditer(raw):
        tokens.append(policy.normalize_token(m.group()))
        spans.append(m.span())
    return TokenizedText(raw, tuple(tokens), tuple(spans), policy)


@dataclass(frozen=True)
class Keyword:
    surface: str
    parts: tuple[str, ...]

    @classmethod
    def parse(cls, surface: str, policy: MatchPolicy = EXACT) -> "Keyword":
        text = surface.strip()
        if not text:
            raise ValueError("keyword surface is empty")
        parts = normalize_and_tokenize(text, policy).tokens
        if not parts:
            raise ValueError(f"keyword {surface!r} contains no word characters")
        return cls(text, parts)

    @property
    def is_single_token(self) -> bool:
        return len(self.parts) == 1

    def __str__(self) -> str:
        return self.surface


@dataclass(frozen=True)
class KeywordSet:
    """Ordered constraint keywords; order is the position in the prompt."""

    keywords: tuple[Keyword, ...] = ()
    policy: MatchPolicy = EXACT

    def __post_init__(self):
        seen = set()
        for kw in self.keywords:
            if kw.parts in seen:
                raise ValueError(f"duplicate keyword under normalization: {kw.surface!r}")
            seen.add(kw.parts)

    @classmethod
    def of(cls, surfaces: Iterable[str], policy: MatchPolicy = EXACT) -> "KeywordSet":
        return cls(tuple(Keyword.parse(s, policy) for s in surfaces), policy)

    def __len__(self) -> int:
        return len(self.keywords)

    def __iter__(self) -> Iterator[Keyword]:
        return iter(self.keywords)

    def __getitem__(self, i: int) -> Keyword:
        return self.keywords[i]

    def __bool__(self) -> bool:
        return bool(self.keywords)

    @property
    def surfaces(self) -> list[str]:
        return [kw.surface for kw in self.keywords]

    def subset(self, keep: Iterable[Keyword]) -> "KeywordSet":
        keep = set(keep)
        return KeywordSet(tuple(kw for kw in self.keywords if kw in keep), self.policy)


def _stem_candidates(token: str) -> frozenset[str]:
    out = {token}
    for suffix in MORPH_SUFFIXES:
        if token.endswith(suffix) and len(token) - len(suffix) >= MIN_STEM:
            out.add(token[: -len(suffix)])
    return frozenset(out)


def tokens_match(token: str, part: str, policy: MatchPolicy) -> bool:
    """Whether one text token satisfies one keyword part.

    Exact equality by default. With ``morphological`` on, two tokens also match
    when stripping one of ``s/es/ed/ing/ly`` (stem of at least three characters)
    from either side yields a common form, e.g. ``leaps``/``leap``,
    ``boxes``/``box``, ``leaves``/``leave``.
    """
    if token == part:
        return True
    if not policy.morphological:
        return False
    return not _stem_candidates(token).isdisjoint(_stem_candidates(part))


def contains_keyword(text: TokenizedText, kw: Keyword, policy: Optional[MatchPolicy] = None) -> bool:
    policy = policy or text.policy
    if not policy.morphological:
        return (_SEP + _SEP.join(kw.parts) + _SEP) in text._joined
    parts, tokens = kw.parts, text.tokens
    n = len(parts)
    if n > len(tokens):
        return False
    first = parts[0]
    for start in range(len(tokens) - n + 1):
        if not tokens_match(tokens[start], first, policy):
            continue
        if all(tokens_match(tokens[start + j], parts[j], policy) for j in range(1, n)):
            return True
    return False


def satisfied_flags(X: KeywordSet, text: TokenizedText) -> list[bool]:
    return [contains_keyword(text, kw, X.policy) for kw in X]


def missing_keywords(X: KeywordSet, text: TokenizedText) -> KeywordSet:
    return KeywordSet(
        tuple(kw for kw in X if not contains_keyword(text, kw, X.policy)), X.policy
    )


def detect_compound_split(
    kw: Keyword, text: TokenizedText, lexicon: Sequence[str] | set[str] = ()
) -> Optional[tuple[str, str]]:
    """Find the first left-to-right split of a single-token keyword whose halves
    both occur as separate tokens in ``text``.

    Both halves need at least three characters. A non-empty ``lexicon`` must
    also contain both halves. Returns ``None`` for multi-word keywords or when
    the keyword itself is present.
    """
    if not kw.is_single_token:
        return None
    policy = text.policy
    if contains_keyword(text, kw, policy):
        return None
    word = kw.parts[0]
    lex = {policy.normalize_token(w) for w in lexicon}
    present = set(text.tokens)
    for cut in range(MIN_COMPOUND_PART, len(word) - MIN_COMPOUND_PART + 1):
        left, right = word[:cut], word[cut:]
        if lex and (left not in lex or right not in lex):
            continue
        if left in present and right in present:
            return left, right
    return None


def load_lexicon(path: str | Path) -> list[str]:
    """One word per line; blank lines and ``#`` comments are skipped."""
    words = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.append(line)
    return words
