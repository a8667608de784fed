import pytest
from hypothesis import given, settings, strategies as st

from lexcon.constraints import (
    EXACT,
    Keyword,
    KeywordSet,
    MatchPolicy,
    contains_keyword,
    detect_compound_split,
    load_lexicon,
    missing_keywords,
    normalize_and_tokenize,
)
from oracles import window_contains

MORPH = MatchPolicy(morphological=True)


def has(text, kw, policy=EXACT):
    return contains_keyword(normalize_and_tokenize(text, policy), Keyword.parse(kw, policy), policy)


class TestTokenize:
    def test_basic(self):
        assert normalize_and_tokenize("The CAT sat.").tokens == ("the", "cat", "sat")

    def test_empty(self):
        assert normalize_and_tokenize("").tokens == ()

    def test_apostrophe_inside_word(self):
        assert normalize_and_tokenize("don't stop").tokens == ("don't", "stop")

    def test_curly_apostrophe_normalized(self):
        assert normalize_and_tokenize("don’t").tokens == ("don't",)

    def test_quotes_are_separators(self):
        assert normalize_and_tokenize("'cat' dogs'").tokens == ("cat", "dogs")

    def test_spans_index_raw_text(self):
        raw = "Ice-cream, NOW!"
        t = normalize_and_tokenize(raw)
        assert [raw[a:b] for a, b in t.spans] == ["Ice", "cream", "NOW"]

    def test_unicode_composed_and_decomposed_agree(self):
        assert normalize_and_tokenize("café").tokens == normalize_and_tokenize("café").tokens

    def test_case_fold_off(self):
        pol = MatchPolicy(case_fold=False)
        assert normalize_and_tokenize("Cat", pol).tokens == ("Cat",)

    def test_digits_are_word_chars(self):
        assert normalize_and_tokenize("FICO 780, age 29").tokens == ("fico", "780", "age", "29")

    @given(st.text(max_size=40))
    def test_deterministic(self, raw):
        assert normalize_and_tokenize(raw) == normalize_and_tokenize(raw)


class TestContains:
    def test_direct(self):
        assert has("the cat sat", "cat")

    def test_inflection_not_matched_by_default(self):
        assert not has("the cats sat", "cat")

    def test_split_compound_not_matched(self):
        assert not has("the court built beside his house", "courthouse")

    def test_multiword_contiguous(self):
        assert has("add the ice cream now", "ice cream")
        assert not has("ice and cream", "ice cream")

    def test_case_insensitive(self):
        assert has("SUNNY day", "sunny")

    def test_morphological_opt_in(self):
        assert has("the cats sat", "cat", MORPH)
        assert has("she jumped", "jumping", MORPH)
        assert not has("the category", "cat", MORPH)

    def test_morphological_short_stems_stay_exact(self):
        # "is" would strip to "i"; stems under three characters are not used
        assert not has("i saw", "is", MORPH)

    def test_missing_keywords(self):
        X = KeywordSet.of(["cat", "leaves", "sunny", "leaps", "energy"])
        miss = missing_keywords(X, normalize_and_tokenize("Sunny cat leaps."))
        assert miss.surfaces == ["leaves", "energy"]

    def test_missing_of_empty_set(self):
        assert not missing_keywords(KeywordSet(), normalize_and_tokenize("anything"))

    def test_missing_subset(self):
        X = KeywordSet.of(["a1", "b1", "c1"])
        assert missing_keywords(X, normalize_and_tokenize("a1 then c1")).surfaces == ["b1"]


class TestKeywords:
    def test_duplicate_rejected(self):
        with pytest.raises(ValueError):
            KeywordSet.of(["Cat", "cat"])

    def test_no_word_chars_rejected(self):
        with pytest.raises(ValueError):
            Keyword.parse("!!")

    def test_subset_keeps_order(self):
        X = KeywordSet.of(["x1", "y1", "z1"])
        assert X.subset([X[2], X[0]]).surfaces == ["x1", "z1"]


class TestCompoundSplit:
    def split(self, kw, text, lexicon=()):
        return detect_compound_split(Keyword.parse(kw), normalize_and_tokenize(text), lexicon)

    def test_jellyfish(self):
        assert self.split("jellyfish", "a jelly fish swims") == ("jelly", "fish")

    def test_anymore(self):
        assert self.split("anymore", "any more time now") == ("any", "more")

    def test_short_word(self):
        assert self.split("cat", "ca t c at") is None

    def test_present_keyword_is_not_split(self):
        assert self.split("jellyfish", "jellyfish and jelly fish") is None

    def test_lexicon_filters(self):
        assert self.split("anymore", "any more", ["jelly", "fish"]) is None
        assert self.split("anymore", "any more", ["any", "more"]) == ("any", "more")

    def test_multiword_keyword(self):
        assert self.split("ice cream", "ice cream") is None

    def test_lexicon_file(self, tmp_path):
        p = tmp_path / "lex.txt"
        p.write_text("# parts\njelly\n\nfish\n", encoding="utf-8")
        assert load_lexicon(p) == ["jelly", "fish"]

    @given(st.text("abcdefgh", min_size=1, max_size=10), st.lists(st.text("abcdefgh", min_size=1, max_size=6),
                                                                max_size=8))
    def test_split_concatenates_to_keyword(self, word, words):
        kw = Keyword.parse(word)
        res = detect_compound_split(kw, normalize_and_tokenize(" ".join(words)))
        if res is not None:
            assert res[0] + res[1] == kw.parts[0]
            assert min(map(len, res)) >= 3


ALPHABET = ["ab", "cd", "ef", "gh", "ij"]
token_lists = st.lists(st.sampled_from(ALPHABET), max_size=30)
keyword_lists = st.lists(st.lists(st.sampled_from(ALPHABET), min_size=1, max_size=3), min_size=1, max_size=6)


@settings(max_examples=300)
@given(token_lists, keyword_lists)
def test_agrees_with_window_scan(tokens, kw_parts):
    text = normalize_and_tokenize(" ".join(tokens))
    for parts in kw_parts:
        assert contains_keyword(text, Keyword.parse(" ".join(parts))) == window_contains(tokens, parts)


@given(token_lists, token_lists, st.lists(st.sampled_from(ALPHABET), min_size=1, max_size=6, unique=True))
def test_appending_never_adds_missing(t1, extra, surfaces):
    X = KeywordSet.of(surfaces)
    m1 = set(missing_keywords(X, normalize_and_tokenize(" ".join(t1))).surfaces)
    m2 = set(missing_keywords(X, normalize_and_tokenize(" ".join(t1 + extra))).surfaces)
    assert m2 <= m1


@given(st.text(st.sampled_from("abcXYZ ."), max_size=30), st.sampled_from(["abc", "xyz", "ab c", "Zc"]))
def test_case_change_invariant(raw, kw):
    assert has(raw, kw) == has(raw.swapcase(), kw) == has(raw.upper(), kw)
