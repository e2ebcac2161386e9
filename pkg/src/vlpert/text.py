"""Tokenization, sub-word segmentation, and rule-based POS tagging.

The tagger is deliberately tiny: an exact-match lexicon shipped with the
package, followed by a fixed list of suffix heuristics, with OTHER as the
fallback. That is enough to tag the report grammar this package generates,
and it is fully deterministic.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from importlib import resources

POS_TAGS = ("NOUN", "VERB", "ADJ", "OTHER")

_NOUN_SUFFIXES = ("tion", "sion", "sis", "oma")
_ADJ_SUFFIXES = ("ous", "al", "ic", "ar")
_VERB_SUFFIXES = ("ed", "ing")
_VERB_WORDS = frozenset({"is", "are", "was", "were"})

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


@dataclass(frozen=True)
class TokenizedReport:
    """Lowercased word tokens with optional POS tags and sub-word pieces."""

    tokens: tuple[str, ...]
    pos: tuple[str, ...] | None = None
    subword_spans: tuple[tuple[str, ...], ...] | None = None

    def __post_init__(self):
        if self.pos is not None and len(self.pos) != len(self.tokens):
            raise ValueError("pos tags must align one-to-one with tokens")
        if self.subword_spans is not None:
            if len(self.subword_spans) != len(self.tokens):
                raise ValueError("sub-word spans must align one-to-one with tokens")
            if any(len(span) == 0 for span in self.subword_spans):
                raise ValueError("every token needs at least one sub-word")

    def text(self) -> str:
        return " ".join(self.tokens)

    def subword_count(self) -> int:
        if self.subword_spans is None:
            raise ValueError("sub-word spans are not set")
        return sum(len(span) for span in self.subword_spans)


class SubwordVocabulary:
    """Greedy longest-match sub-word splitter over a fixed piece inventory.

    Continuation pieces carry a '##' prefix. Single characters (and their
    '##' forms) are always present, so splitting falls back to characters
    instead of failing.
    """

    def __init__(self, pieces):
        self._pieces = set(pieces)
        for c in string.ascii_lowercase + string.digits:
            self._pieces.add(c)
            self._pieces.add("##" + c)
        self._cache: dict[str, tuple[str, ...]] = {}
        self.pieces = tuple(sorted(self._pieces))

    def __contains__(self, piece: str) -> bool:
        return piece in self._pieces

    def __len__(self) -> int:
        return len(self._pieces)

    def split(self, word: str) -> tuple[str, ...]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        pieces = []
        start = 0
        while start < len(word):
            end = len(word)
            match = None
            while end > start:
                candidate = word[start:end]
                if start > 0:
                    candidate = "##" + candidate
                if candidate in self._pieces:
                    match = candidate
                    break
                end -= 1
            if match is None:  # character not in the inventory (e.g. unicode)
                match = word[start] if start == 0 else "##" + word[start]
                end = start + 1
            pieces.append(match)
            start = end
        result = tuple(pieces)
        self._cache[word] = result
        return result


@dataclass(frozen=True)
class PosLexicon:
    """Exact-match word tags plus suffix heuristics."""

    entries: dict[str, str] = field(default_factory=dict)

    def tag(self, word: str) -> str:
        known = self.entries.get(word)
        if known is not None:
            return known
        if word.endswith(_NOUN_SUFFIXES):
            return "NOUN"
        if word.endswith(_ADJ_SUFFIXES):
            return "ADJ"
        if word.endswith(_VERB_SUFFIXES) or word in _VERB_WORDS:
            return "VERB"
        return "OTHER"


def _data_text(name: str) -> str:
    return resources.files("vlpert.data").joinpath(name).read_text(encoding="utf-8")


def load_subword_vocabulary() -> SubwordVocabulary:
    lines = [ln.strip() for ln in _data_text("subwords.txt").splitlines()]
    return SubwordVocabulary(ln for ln in lines if ln)


def load_pos_lexicon() -> PosLexicon:
    entries = {}
    for line in _data_text("lexicon.tsv").splitlines():
        line = line.strip()
        if not line:
            continue
        word, tag = line.split("\t")
        if tag not in POS_TAGS:
            raise ValueError(f"unknown tag {tag!r} in lexicon for {word!r}")
        entries[word] = tag
    return PosLexicon(entries)


def load_antonyms() -> dict[str, str]:
    pairs = {}
    for line in _data_text("antonyms.tsv").splitlines():
        line = line.strip()
        if not line:
            continue
        word, antonym = line.split("\t")
        pairs[word] = antonym
    return pairs


_default_vocab: SubwordVocabulary | None = None
_default_lexicon: PosLexicon | None = None


def default_vocabulary() -> SubwordVocabulary:
    global _default_vocab
    if _default_vocab is None:
        _default_vocab = load_subword_vocabulary()
    return _default_vocab


def default_lexicon() -> PosLexicon:
    global _default_lexicon
    if _default_lexicon is None:
        _default_lexicon = load_pos_lexicon()
    return _default_lexicon


def tokenize(text: str, vocab: SubwordVocabulary | None = None) -> TokenizedReport:
    """Lowercase, drop punctuation, split on whitespace, attach sub-words."""
    if not text.strip():
        raise ValueError("empty report")
    vocab = vocab or default_vocabulary()
    tokens = text.lower().translate(_PUNCT_TABLE).split()
    if not tokens:
        raise ValueError("empty report")
    spans = tuple(vocab.split(tok) for tok in tokens)
    return TokenizedReport(tokens=tuple(tokens), subword_spans=spans)


def pos_tag(report: TokenizedReport, lexicon: PosLexicon | None = None) -> TokenizedReport:
    """Return a copy of the report with POS tags filled in."""
    if not report.tokens:
        raise ValueError("cannot tag an empty report")
    lexicon = lexicon or default_lexicon()
    tags = tuple(lexicon.tag(tok) for tok in report.tokens)
    return TokenizedReport(tokens=report.tokens, pos=tags, subword_spans=report.subword_spans)


def report_from_tokens(tokens, vocab: SubwordVocabulary | None = None) -> TokenizedReport:
    """Wrap an already-tokenized word list, attaching sub-word spans."""
    tokens = tuple(tokens)
    if not tokens:
        raise ValueError("empty report")
    vocab = vocab or default_vocabulary()
    return TokenizedReport(tokens=tokens, subword_spans=tuple(vocab.split(t) for t in tokens))
