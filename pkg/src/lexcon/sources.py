"""Keyword-set inputs: JSONL set files, word pools, CommonGen files, compound lists."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

from .constraints import EXACT, MatchPolicy, load_lexicon

SOURCE_KINDS = ("file_sets", "sampled_pool", "commongen_file")


class SourceError(ValueError):
    pass


def bundled(name: str) -> Path:
    """Path to a file shipped in ``lexcon/data``."""
    return Path(str(resources.files("lexcon") / "data" / name))


BUNDLED = {
    "concepts": "concepts.txt",
    "control_words": "control_words.txt",
    "compounds": "compounds.tsv",
    "ingredients": "ingredients.txt",
    "tables": "tables.jsonl",
    "clients": "clients.jsonl",
    "commongen_sample": "commongen_sample.jsonl",
}


def resolve_path(path: str | Path) -> Path:
    """``bundled:<name>`` refers to shipped data; anything else is a filesystem path."""
    s = str(path)
    if s.startswith("bundled:"):
        key = s.split(":", 1)[1]
        return bundled(BUNDLED.get(key, key))
    return Path(path)


@dataclass(frozen=True)
class KeywordItem:
    keywords: tuple[str, ...]
    context: str = ""


def _dedupe(words, policy: MatchPolicy) -> list[str]:
    seen, out = set(), []
    for w in words:
        key = policy.normalize_token(w.strip())
        if key and key not in seen:
            seen.add(key)
            out.append(w.strip())
    return out


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(resolve_path(path), encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except ValueError as e:
                raise SourceError(f"{path}:{lineno}: invalid JSON ({e})") from None
    return rows


def load_keyword_sets(path: str | Path) -> list[KeywordItem]:
    """Rows of ``{"keywords": [...], "context": "..."}``; ``context`` is optional."""
    items = []
    for i, row in enumerate(read_jsonl(path)):
        kws = row.get("keywords")
        if not isinstance(kws, list) or not all(isinstance(k, str) for k in kws):
            raise SourceError(f"{path}: row {i} lacks a 'keywords' string list")
        items.append(KeywordItem(tuple(kws), str(row.get("context", ""))))
    return items


def load_commongen(path: str | Path) -> list[KeywordItem]:
    """CommonGen-shaped JSONL: ``concepts`` list or ``#``-joined ``concept_set``.

    Reference sentences, if present, are ignored.
    """
    items = []
    for i, row in enumerate(read_jsonl(path)):
        if isinstance(row.get("concepts"), list):
            concepts = row["concepts"]
        elif isinstance(row.get("concept_set"), str):
            concepts = row["concept_set"].split("#")
        else:
            raise SourceError(f"{path}: row {i} has neither 'concepts' nor 'concept_set'")
        items.append(KeywordItem(tuple(c.strip() for c in concepts if c.strip())))
    return items


def load_compounds(path: str | Path) -> list[tuple[str, str, str]]:
    """Tab-separated ``word  part1  part2`` lines; the parts must concatenate to the word."""
    out = []
    for lineno, line in enumerate(resolve_path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = [c.strip() for c in line.split("\t")]
        if len(cols) != 3:
            raise SourceError(f"{path}:{lineno}: expected word<TAB>part1<TAB>part2")
        word, left, right = cols
        if (left + right).lower() != word.lower():
            raise SourceError(f"{path}:{lineno}: {left!r} + {right!r} does not spell {word!r}")
        out.append((word, left, right))
    return out


def load_pool(path: str | Path, policy: MatchPolicy = EXACT) -> list[str]:
    return _dedupe(load_lexicon(resolve_path(path)), policy)


@dataclass(frozen=True)
class KeywordSource:
    """Where keyword sets come from.

    - ``file_sets``: JSONL rows; rows with more than ``n`` keywords are
      subsampled (seeded, file order kept).
    - ``sampled_pool``: one word per line; each set draws ``n`` distinct words.
    - ``commongen_file``: rows with exactly ``n`` concepts when there are
      enough of them, otherwise sets drawn from the pooled concept vocabulary.
    """

    kind: str
    path: str
    seed: int = 0
    sample_n: Optional[int] = None
    n_sets: Optional[int] = None

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise SourceError(f"unknown source kind {self.kind!r}; expected one of {SOURCE_KINDS}")

    def _rng(self, *key) -> random.Random:
        return random.Random("/".join(str(k) for k in (self.seed, self.kind) + key))

    def sets(self, n: Optional[int] = None, n_sets: Optional[int] = None,
             policy: MatchPolicy = EXACT) -> list[KeywordItem]:
        n = n if n is not None else self.sample_n
        n_sets = n_sets if n_sets is not None else self.n_sets
        if n is None or n < 1:
            raise SourceError("keyword count per set must be >= 1")
        if n_sets is None or n_sets < 1:
            raise SourceError("number of sets must be >= 1")
        if self.kind == "sampled_pool":
            return self._from_pool(load_pool(self.path, policy), n, n_sets)
        if self.kind == "file_sets":
            return self._from_rows(load_keyword_sets(resolve_path(self.path)), n, n_sets, policy)
        rows = load_commongen(resolve_path(self.path))
        exact = [r for r in rows if len(_dedupe(r.keywords, policy)) == n]
        if len(exact) >= n_sets:
            order = self._rng("rows", n).sample(range(len(exact)), n_sets)
            return [KeywordItem(tuple(_dedupe(exact[i].keywords, policy))) for i in order]
        pool = _dedupe((c for r in rows for c in r.keywords), policy)
        return self._from_pool(pool, n, n_sets)

    def _from_pool(self, pool: list[str], n: int, n_sets: int) -> list[KeywordItem]:
        if n > len(pool):
            raise SourceError(f"pool {self.path} has {len(pool)} distinct words, cannot draw {n}")
        return [KeywordItem(tuple(self._rng("set", n, j).sample(pool, n))) for j in range(n_sets)]

    def _from_rows(self, rows: list[KeywordItem], n: int, n_sets: int,
                   policy: MatchPolicy) -> list[KeywordItem]:
        usable = [r for r in rows if len(_dedupe(r.keywords, policy)) >= n]
        if len(usable) < n_sets:
            raise SourceError(f"{self.path}: only {len(usable)} sets with >= {n} keywords, need {n_sets}")
        out = []
        for j, row in enumerate(usable[:n_sets]):
            kws = _dedupe(row.keywords, policy)
            keep = sorted(self._rng("sub", n, j).sample(range(len(kws)), n))
            out.append(KeywordItem(tuple(kws[i] for i in keep), row.context))
        return out
