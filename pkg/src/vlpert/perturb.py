"""The nine report perturbation rules.

Each rule rewrites a tagged report into a hard negative that keeps the
word multiset intact (antonym replacement is the one exception, which
swaps adjectives for their lexicon antonyms). Seeded rules are
deterministic given (tokens, rule, seed); when a draw lands back on the
original and an alternative arrangement exists, the rule redraws up to 16
times before flagging the variant degenerate.
"""

from __future__ import annotations

from dataclasses import dataclass

from .rng import SplitMix, derive_seed
from .text import TokenizedReport, load_antonyms

RULE_SHUFFLE_ALL = "shuffle_all_words"
RULE_SWAP_ADJACENT = "swap_adjacent"
RULE_REVERSE = "reverse_sentence"
RULE_SHUFFLE_WITHIN_TRIGRAMS = "shuffle_within_trigrams"
RULE_SHUFFLE_TRIGRAMS = "shuffle_trigrams"
RULE_SHUFFLE_NOUNS_ADJS = "shuffle_nouns_adjs"
RULE_SHUFFLE_ALL_BUT_NOUNS_ADJS = "shuffle_all_but_nouns_adjs"
RULE_SHUFFLE_NOUNS_VERBS_ADJS = "shuffle_nouns_verbs_adjs"
RULE_REPLACE_ADJ_ANTONYMS = "replace_adj_antonyms"

# Fixed output order of generate_set.
RULES = (
    RULE_SHUFFLE_ALL,
    RULE_SWAP_ADJACENT,
    RULE_REVERSE,
    RULE_SHUFFLE_WITHIN_TRIGRAMS,
    RULE_SHUFFLE_TRIGRAMS,
    RULE_SHUFFLE_NOUNS_ADJS,
    RULE_SHUFFLE_ALL_BUT_NOUNS_ADJS,
    RULE_SHUFFLE_NOUNS_VERBS_ADJS,
    RULE_REPLACE_ADJ_ANTONYMS,
)

_POS_RULE_TAGS = {
    RULE_SHUFFLE_NOUNS_ADJS: frozenset({"NOUN", "ADJ"}),
    RULE_SHUFFLE_ALL_BUT_NOUNS_ADJS: frozenset({"NOUN", "ADJ"}),  # complement positions
    RULE_SHUFFLE_NOUNS_VERBS_ADJS: frozenset({"NOUN", "VERB", "ADJ"}),
}

_MAX_REDRAWS = 16

_antonyms: dict[str, str] | None = None


def _antonym_table() -> dict[str, str]:
    global _antonyms
    if _antonyms is None:
        _antonyms = load_antonyms()
    return _antonyms


@dataclass(frozen=True)
class PerturbedVariant:
    """One perturbed rendering of a report."""

    rule: str
    tokens: tuple[str, ...]
    degenerate: bool = False  # could not be made to differ from the original
    partial: bool = False  # antonym rule only: some adjective had no antonym

    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class PerturbationSet:
    """All nine variants of one report, in fixed rule order."""

    original: TokenizedReport
    variants: tuple[PerturbedVariant, ...]
    seed: int

    def __post_init__(self):
        if tuple(v.rule for v in self.variants) != RULES:
            raise ValueError("variants must cover the nine rules exactly once, in order")

    def active(self) -> tuple[PerturbedVariant, ...]:
        """Variants usable as negatives (non-degenerate)."""
        return tuple(v for v in self.variants if not v.degenerate)


def _trigram_groups(n: int) -> list[range]:
    """Consecutive groups of three; a trailing 1-2 tokens form their own group."""
    groups = [range(s, min(s + 3, n)) for s in range(0, n, 3)]
    return groups


def _shuffled_selection(tokens, positions, rng) -> tuple[str, ...]:
    chosen = [tokens[i] for i in positions]
    rng.shuffle(chosen)
    out = list(tokens)
    for i, tok in zip(positions, chosen):
        out[i] = tok
    return tuple(out)


def _draw_until_changed(tokens, draw, has_alternative: bool):
    """Run a seeded draw, redrawing if it reproduces the original."""
    if not has_alternative:
        return tuple(tokens), True
    for _ in range(_MAX_REDRAWS):
        candidate = draw()
        if candidate != tuple(tokens):
            return candidate, False
    return tuple(tokens), True


def _positions_distinct(tokens, positions) -> bool:
    return len(positions) >= 2 and len({tokens[i] for i in positions}) >= 2


def perturb(report: TokenizedReport, rule: str, seed: int) -> PerturbedVariant:
    """Apply one rule. POS-dependent rules require tags to be set."""
    if rule not in RULES:
        raise ValueError(f"unknown perturbation rule {rule!r}")
    if not report.tokens:
        raise ValueError("cannot perturb an empty report")
    tokens = report.tokens
    n = len(tokens)
    rng = SplitMix(seed)

    if rule == RULE_SWAP_ADJACENT:
        out = list(tokens)
        for i in range(0, n - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        out = tuple(out)
        return PerturbedVariant(rule, out, degenerate=out == tokens)

    if rule == RULE_REVERSE:
        out = tuple(reversed(tokens))
        return PerturbedVariant(rule, out, degenerate=out == tokens)

    if rule == RULE_REPLACE_ADJ_ANTONYMS:
        if report.pos is None:
            raise ValueError(f"rule {rule!r} requires POS tags")
        table = _antonym_table()
        out = []
        partial = False
        for tok, tag in zip(tokens, report.pos):
            if tag == "ADJ":
                antonym = table.get(tok)
                if antonym is None:
                    partial = True
                    out.append(tok)
                else:
                    out.append(antonym)
            else:
                out.append(tok)
        out = tuple(out)
        return PerturbedVariant(rule, out, degenerate=out == tokens, partial=partial)

    if rule == RULE_SHUFFLE_ALL:
        def draw():
            shuffled = list(tokens)
            rng.shuffle(shuffled)
            return tuple(shuffled)

        out, degenerate = _draw_until_changed(tokens, draw, _positions_distinct(tokens, range(n)))
        return PerturbedVariant(rule, out, degenerate=degenerate)

    if rule == RULE_SHUFFLE_WITHIN_TRIGRAMS:
        groups = _trigram_groups(n)
        alternative = any(_positions_distinct(tokens, g) for g in groups)

        def draw():
            out = list(tokens)
            for g in groups:
                chunk = [tokens[i] for i in g]
                rng.shuffle(chunk)
                out[g.start : g.stop] = chunk
            return tuple(out)

        out, degenerate = _draw_until_changed(tokens, draw, alternative)
        return PerturbedVariant(rule, out, degenerate=degenerate)

    if rule == RULE_SHUFFLE_TRIGRAMS:
        groups = _trigram_groups(n)
        chunks = [tuple(tokens[i] for i in g) for g in groups]
        alternative = len(chunks) >= 2 and len(set(chunks)) >= 2

        def draw():
            order = chunks[:]
            rng.shuffle(order)
            return tuple(tok for chunk in order for tok in chunk)

        out, degenerate = _draw_until_changed(tokens, draw, alternative)
        return PerturbedVariant(rule, out, degenerate=degenerate)

    # POS-restricted shuffles.
    if report.pos is None:
        raise ValueError(f"rule {rule!r} requires POS tags")
    tags = _POS_RULE_TAGS[rule]
    if rule == RULE_SHUFFLE_ALL_BUT_NOUNS_ADJS:
        positions = [i for i, t in enumerate(report.pos) if t not in tags]
    else:
        positions = [i for i, t in enumerate(report.pos) if t in tags]

    out, degenerate = _draw_until_changed(
        tokens,
        lambda: _shuffled_selection(tokens, positions, rng),
        _positions_distinct(tokens, positions),
    )
    return PerturbedVariant(rule, out, degenerate=degenerate)


def generate_set(report: TokenizedReport, seed: int) -> PerturbationSet:
    """All nine perturbations with per-rule sub-seeds derived from `seed`."""
    if report.pos is None:
        raise ValueError("generate_set requires POS tags")
    variants = tuple(
        perturb(report, rule, derive_seed(seed, index)) for index, rule in enumerate(RULES)
    )
    return PerturbationSet(original=report, variants=variants, seed=seed)
