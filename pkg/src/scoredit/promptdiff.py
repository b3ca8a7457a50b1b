"""Prompt comparison: find the edited span and pick its noun words.

The target prompt is assumed to expand on the source prompt or alter details
within it. The differing span is found by removing the longest common word
suffix and then the longest common word prefix of the remainders; nouns in
that span (expanded rightward until a noun is reached, when the span ends in
a content word) drive the attention mask.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from typing import Protocol, Sequence

NOUN = "NOUN"
ARTICLE = "ARTICLE"
PREPOSITION = "PREPOSITION"
OTHER = "OTHER"


class PromptDiffError(ValueError):
    """Prompt pair cannot be processed; pass explicit noun tokens instead."""


@dataclass(frozen=True)
class WordSpan:
    word: str
    start: int
    end: int


@dataclass(frozen=True)
class TokenSpan:
    """One backend tokenizer token with character offsets into the prompt."""

    text: str
    start: int
    end: int


@dataclass(frozen=True)
class DiffResult:
    differing_substring: list[str]
    noun_words: list[str]
    token_indices: list[int]


class PosTagger(Protocol):
    def tag(self, word: str, context: Sequence[str]) -> str:
        """Return NOUN, ARTICLE, PREPOSITION, or OTHER for a word."""
        ...


_ARTICLES = {"a", "an", "the"}

_PREPOSITIONS = {
    "aboard", "about", "above", "across", "after", "against", "along", "amid",
    "among", "around", "as", "at", "atop", "before", "behind", "below",
    "beneath", "beside", "besides", "between", "beyond", "by", "despite",
    "down", "during", "except", "for", "from", "in", "inside", "into", "near",
    "of", "off", "on", "onto", "out", "outside", "over", "past", "per",
    "through", "throughout", "to", "toward", "towards", "under", "underneath",
    "until", "unto", "up", "upon", "via", "with", "within", "without",
}

_FUNCTION_WORDS = {
    # pronouns
    "i", "you", "he", "she", "it", "we", "they", "me", "him", "her", "us",
    "them", "my", "your", "his", "its", "our", "their", "mine", "yours",
    "hers", "ours", "theirs", "myself", "yourself", "himself", "herself",
    "itself", "ourselves", "themselves", "this", "that", "these", "those",
    "who", "whom", "whose", "which", "what", "someone", "anyone", "everyone",
    "something", "anything", "everything", "nothing", "nobody", "somebody",
    # conjunctions and determiners
    "and", "or", "but", "nor", "so", "yet", "if", "while", "when", "where",
    "because", "although", "though", "whereas", "some", "any", "each",
    "every", "all", "both", "few", "many", "much", "more", "most", "several",
    "such", "no", "none", "either", "neither", "another", "other", "same",
    "own",
    # auxiliaries and copulas
    "is", "are", "was", "were", "be", "been", "being", "am", "has", "have",
    "had", "do", "does", "did", "will", "would", "shall", "should", "can",
    "could", "may", "might", "must", "not",
    # common adverbs
    "very", "really", "quite", "too", "also", "just", "only", "here",
    "there", "now", "then", "always", "never", "often", "sometimes",
    "again", "once", "twice",
    # numbers
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    "ten", "eleven", "twelve", "dozen", "hundred", "thousand", "million",
    "first", "second", "third",
}

_COMMON_VERBS = {
    "wear", "wears", "wore", "worn", "sit", "sits", "sat", "stand", "stands",
    "stood", "hold", "holds", "held", "make", "makes", "made", "take",
    "takes", "took", "taken", "put", "puts", "go", "goes", "went", "gone",
    "come", "comes", "came", "get", "gets", "got", "see", "sees", "saw",
    "seen", "eat", "eats", "ate", "eaten", "drink", "drinks", "drank",
    "float", "floats", "hang", "hangs", "hung", "lie", "lies", "lay", "lying",
    "perch", "perches", "perched", "rest", "rests", "lean", "leans", "leaned",
    "placed", "kept", "surrounded", "covered", "filled", "topped",
}

_COMMON_ADJECTIVES = {
    "big", "small", "little", "large", "huge", "tiny", "giant", "tall",
    "short", "long", "wide", "narrow", "thick", "thin", "old", "young",
    "new", "ancient", "modern", "beautiful", "pretty", "ugly", "cute",
    "lovely", "nice", "good", "bad", "great", "happy", "sad", "angry",
    "bright", "dark", "light", "pale", "deep", "shallow", "hot", "cold",
    "warm", "cool", "wet", "dry", "clean", "dirty", "soft", "hard", "smooth",
    "rough", "sharp", "dull", "heavy", "fast", "slow", "quiet", "loud",
    "empty", "full", "open", "closed", "round", "square", "flat", "fluffy",
    "furry", "shiny", "sparkly", "colorful", "wooden", "metallic", "plastic",
    "glassy", "stone", "sunny", "cloudy", "rainy", "snowy", "foggy", "windy",
    # color words act as modifiers in editing prompts
    "white", "black", "gray", "grey", "red", "yellow", "green", "blue",
    "purple", "pink", "magenta", "cyan", "turquoise", "teal", "maroon",
    "crimson", "scarlet", "burgundy", "beige", "tan", "khaki", "brown",
    "navy", "azure",
}

_NOUN_SUFFIXES = (
    "tion", "sion", "ment", "ness", "ity", "ship", "hood", "ism", "ist",
    "ette", "let", "dom", "ery", "logy", "graph", "scape",
)
_NON_NOUN_SUFFIXES = ("ing", "ly", "ful", "ous", "ive", "able", "ible", "ish")


def _load_lexicon() -> frozenset[str]:
    text = resources.files("scoredit").joinpath("data/nouns.txt").read_text("utf-8")
    return frozenset(text.split())


class RuleTagger:
    """Lexicon-and-suffix part-of-speech tagger over a small label set.

    Closed lists catch function words and frequent verbs/adjectives; a
    bundled lexicon (with plural backoff) catches common nouns; remaining
    content words default to NOUN, since prompt vocabulary is noun-heavy.
    """

    def __init__(self) -> None:
        self._nouns = _load_lexicon()

    def tag(self, word: str, context: Sequence[str] = ()) -> str:
        w = word.lower()
        if w in _ARTICLES:
            return ARTICLE
        if w in _PREPOSITIONS:
            return PREPOSITION
        if w in _FUNCTION_WORDS or w in _COMMON_VERBS or w in _COMMON_ADJECTIVES:
            return OTHER
        if w in self._nouns:
            return NOUN
        stem = self._plural_stem(w)
        if stem is not None and stem in self._nouns:
            return NOUN
        if w.endswith(_NOUN_SUFFIXES):
            return NOUN
        if w.endswith(_NON_NOUN_SUFFIXES) and len(w) > 5:
            return OTHER
        return NOUN

    @staticmethod
    def _plural_stem(w: str) -> str | None:
        if len(w) < 4 or not w.endswith("s"):
            return None
        if w.endswith("ies"):
            return w[:-3] + "y"
        if w.endswith(("ses", "xes", "zes", "ches", "shes")):
            return w[:-2]
        if not w.endswith("ss"):
            return w[:-1]
        return None


_WORD_RE = re.compile(r"\S+")
_EDGE_PUNCT = ".,;:!?\"'()[]{}<>`"


def tokenize_words(text: str) -> list[WordSpan]:
    """Whitespace-split words, lowercased, with edge punctuation stripped."""
    spans = []
    for m in _WORD_RE.finditer(text):
        raw, start, end = m.group(), m.start(), m.end()
        lead = len(raw) - len(raw.lstrip(_EDGE_PUNCT))
        word = raw.strip(_EDGE_PUNCT)
        if not word:
            continue
        spans.append(WordSpan(word.lower(), start + lead, start + lead + len(word)))
    return spans


def _common_suffix_len(a: Sequence[str], b: Sequence[str]) -> int:
    n = 0
    while n < len(a) and n < len(b) and a[len(a) - 1 - n] == b[len(b) - 1 - n]:
        n += 1
    return n


def _common_prefix_len(a: Sequence[str], b: Sequence[str]) -> int:
    n = 0
    while n < len(a) and n < len(b) and a[n] == b[n]:
        n += 1
    return n


def _diff_bounds(src_words: Sequence[str], tgt_words: Sequence[str]) -> tuple[int, int]:
    """Bounds of the differing span in the target word list.

    The longest common suffix is removed first, then the longest common
    prefix of what remains, so the two removals can never overlap.
    """
    suffix = _common_suffix_len(src_words, tgt_words)
    prefix = _common_prefix_len(src_words[: len(src_words) - suffix], tgt_words[: len(tgt_words) - suffix])
    return prefix, len(tgt_words) - suffix


def strip_common_affixes(src_words: Sequence[str], tgt_words: Sequence[str]) -> list[str]:
    """Leftover target words once shared suffix and prefix are removed."""
    start, end = _diff_bounds(src_words, tgt_words)
    return list(tgt_words[start:end])


def select_nouns(
    remaining: Sequence[str],
    full_tgt_words: Sequence[str],
    tagger: PosTagger,
    span_start: int | None = None,
) -> list[str]:
    """Noun words of the differing span, expanded rightward when needed.

    When the span's last word is neither a noun, an article, nor a
    preposition, following words of the target prompt are appended until a
    noun is appended (or the prompt ends), so truncated noun phrases get
    completed.
    """
    if not remaining:
        return []
    if span_start is None:
        span_start = _find_subsequence(full_tgt_words, remaining)
    span_end = span_start + len(remaining)
    expanded = list(remaining)
    last_tag = tagger.tag(expanded[-1], full_tgt_words)
    if last_tag not in (NOUN, ARTICLE, PREPOSITION):
        for word in full_tgt_words[span_end:]:
            expanded.append(word)
            if tagger.tag(word, full_tgt_words) == NOUN:
                break
    return [w for w in expanded if tagger.tag(w, full_tgt_words) == NOUN]


def _find_subsequence(haystack: Sequence[str], needle: Sequence[str]) -> int:
    for i in range(len(haystack) - len(needle) + 1):
        if list(haystack[i : i + len(needle)]) == list(needle):
            return i
    raise PromptDiffError("differing span is not contiguous in the target prompt")


def align_tokens(noun_spans: Sequence[WordSpan], tokens: Sequence[TokenSpan]) -> list[int]:
    """Indices of backend tokens whose character span overlaps a noun word."""
    indices: list[int] = []
    for span in noun_spans:
        hits = [
            i
            for i, tok in enumerate(tokens)
            if tok.start < span.end and tok.end > span.start
        ]
        if not hits:
            raise PromptDiffError(
                f"noun word {span.word!r} has no matching token in the backend tokenization"
            )
        indices.extend(hits)
    return sorted(set(indices))


def diff_prompts(
    y_src: str,
    y_tgt: str,
    tagger: PosTagger,
    tokens: Sequence[TokenSpan] | None = None,
) -> DiffResult:
    """Full pipeline: affix stripping, noun selection, token alignment.

    ``tokens`` is the backend tokenization of the target prompt; without it
    the token index list is left empty.
    """
    src_spans = tokenize_words(y_src)
    tgt_spans = tokenize_words(y_tgt)
    src_words = [s.word for s in src_spans]
    tgt_words = [s.word for s in tgt_spans]
    start, end = _diff_bounds(src_words, tgt_words)
    remaining = tgt_words[start:end]
    if not remaining:
        return DiffResult([], [], [])

    # expand the span the same way select_nouns does, to locate noun spans
    expanded_end = end
    last_tag = tagger.tag(remaining[-1], tgt_words)
    if last_tag not in (NOUN, ARTICLE, PREPOSITION):
        for i in range(end, len(tgt_words)):
            expanded_end = i + 1
            if tagger.tag(tgt_words[i], tgt_words) == NOUN:
                break
    expanded_words = tgt_words[start:expanded_end]
    noun_positions = [
        i for i in range(start, expanded_end) if tagger.tag(tgt_words[i], tgt_words) == NOUN
    ]
    noun_words = [tgt_words[i] for i in noun_positions]
    token_indices: list[int] = []
    if tokens is not None and noun_positions:
        token_indices = align_tokens([tgt_spans[i] for i in noun_positions], tokens)
    return DiffResult(expanded_words, noun_words, token_indices)
