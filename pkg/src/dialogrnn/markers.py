"""Surface detection of deixis, anaphora and logical-consequence markers.

Matching is whole-token and case-insensitive on normalized utterances, so
"therefore" never fires the deixis word "there". Logical consequence only
fires when the utterance *starts* with a cue phrase; multi-word cues must
match consecutively from the first token, longest match first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

from .corpus import ConversationFragment, Utterance, Vocabulary
from .model import ModelParameters

DEIXIS_WORDS = ("here", "there", "then", "now", "later", "this", "that")
ANAPHORA_WORDS = ("she", "her", "hers", "he", "him", "his", "they", "them", "their", "theirs")
CUE_PHRASES = (
    "so",
    "after all",
    "in addition",
    "furthermore",
    "therefore",
    "thus",
    "also",
    "but",
    "however",
    "otherwise",
    "although",
    "if",
    "then",
)

CATEGORIES = ("deixis", "anaphora", "logical_consequence")


@dataclass(frozen=True)
class MarkerLexicon:
    deixis: frozenset[str]
    anaphora: frozenset[str]
    cue_phrases: tuple[tuple[str, ...], ...]  # token tuples, longest first

    @classmethod
    def default(cls) -> "MarkerLexicon":
        return cls.from_entries(DEIXIS_WORDS, ANAPHORA_WORDS, CUE_PHRASES)

    @classmethod
    def from_entries(
        cls, deixis: Iterable[str], anaphora: Iterable[str], cue_phrases: Iterable[str]
    ) -> "MarkerLexicon":
        cues = sorted(
            {tuple(p.lower().split()) for p in cue_phrases}, key=len, reverse=True
        )
        return cls(
            deixis=frozenset(w.lower() for w in deixis),
            anaphora=frozenset(w.lower() for w in anaphora),
            cue_phrases=tuple(cues),
        )

    @classmethod
    def from_file(cls, path) -> "MarkerLexicon":
        """Override file: [deixis] / [anaphora] / [cue_phrases] sections, one entry per line."""
        sections: dict[str, list[str]] = {"deixis": [], "anaphora": [], "cue_phrases": []}
        current: list[str] | None = None
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                entry = line.strip()
                if not entry or entry.startswith("#"):
                    continue
                if entry.startswith("[") and entry.endswith("]"):
                    name = entry[1:-1].strip().lower()
                    if name not in sections:
                        raise ValueError(f"{path}:{line_no}: unknown section {name!r}")
                    current = sections[name]
                    continue
                if current is None:
                    raise ValueError(f"{path}:{line_no}: entry before any section header")
                current.append(entry)
        return cls.from_entries(sections["deixis"], sections["anaphora"], sections["cue_phrases"])


@dataclass(frozen=True)
class MarkerFlags:
    deixis: bool
    anaphora: bool
    logical_consequence: bool


def detect(utterance: Utterance | Sequence[str], lexicon: MarkerLexicon | None = None) -> MarkerFlags:
    """Flag one tokenized utterance against all three marker categories."""
    if lexicon is None:
        lexicon = MarkerLexicon.default()
    tokens = utterance.tokens if isinstance(utterance, Utterance) else tuple(utterance)
    lowered = tuple(t.lower() for t in tokens)
    token_set = set(lowered)
    logical = False
    for cue in lexicon.cue_phrases:
        if lowered[: len(cue)] == cue:
            logical = True
            break
    return MarkerFlags(
        deixis=not token_set.isdisjoint(lexicon.deixis),
        anaphora=not token_set.isdisjoint(lexicon.anaphora),
        logical_consequence=logical,
    )


@dataclass
class MarkerReport:
    """Per-category marker counts over a sample of utterances.

    Categories are independent: one utterance may count in several.
    """

    context_turns: int
    sample_size: int
    counts: dict[str, int]

    def percentage(self, category: str) -> float:
        return 100.0 * self.counts[category] / self.sample_size


def report(
    utterances: Iterable[Utterance | Sequence[str]],
    lexicon: MarkerLexicon | None = None,
    context_turns: int = 0,
) -> MarkerReport:
    if lexicon is None:
        lexicon = MarkerLexicon.default()
    counts = {category: 0 for category in CATEGORIES}
    sample = 0
    for utterance in utterances:
        flags = detect(utterance, lexicon)
        sample += 1
        counts["deixis"] += flags.deixis
        counts["anaphora"] += flags.anaphora
        counts["logical_consequence"] += flags.logical_consequence
    if sample == 0:
        raise ValueError("cannot report over an empty utterance stream")
    return MarkerReport(context_turns=context_turns, sample_size=sample, counts=counts)


def analyze_model(
    params: ModelParameters,
    vocab: Vocabulary,
    fragments: Sequence[ConversationFragment],
    sample_size: int,
    lexicon: MarkerLexicon | None = None,
    context_turns: int = 0,
    max_len: int = 50,
) -> MarkerReport:
    """Greedy-generate responses for a fragment sample and scan them for markers."""
    from .evaluate import generate_greedy

    if not fragments:
        raise ValueError("no fragments to analyze")
    outputs = []
    for fragment in fragments[:sample_size]:
        response = generate_greedy(params, vocab, fragment.context, max_len=max_len)
        outputs.append(response.tokens)
    return report(outputs, lexicon, context_turns)


def write_marker_report(rep: MarkerReport, out: TextIO) -> None:
    """Tab-separated report: category, count, sample, percentage."""
    out.write(f"# N={rep.context_turns}\n")
    out.write("category\tcount\tsample\tpercentage\n")
    for category in CATEGORIES:
        out.write(
            f"{category}\t{rep.counts[category]}\t{rep.sample_size}\t"
            f"{rep.percentage(category)!r}\n"
        )
