"""Dialog corpus ingestion: tokenization, vocabularies, fragments, batches.

A corpus file is UTF-8 text with one utterance per line; a blank line ends
the current conversation. Normalization lowercases, splits punctuation into
standalone tokens and masks every digit run to an equal-length run of '0'.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD_TOKEN = "PAD"
GO_TOKEN = "GO"
EOS_TOKEN = "EOS"
UNK_TOKEN = "UNK"
RESERVED_TOKENS = (PAD_TOKEN, GO_TOKEN, EOS_TOKEN, UNK_TOKEN)
PAD_ID, GO_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

_DIGIT_RUN = re.compile(r"\d+")
_PUNCT = re.compile(r"([^\w\s])")


@dataclass(frozen=True)
class Utterance:
    """One conversational turn as a tuple of normalized tokens."""

    tokens: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class ConversationFragment:
    """N context turns (oldest first) plus the following target turn."""

    context: tuple[Utterance, ...]
    target: Utterance


def normalize(raw_line: str) -> Utterance | None:
    """Normalize one raw line; returns None when nothing survives.

    "Can't see plate 27, even." -> can ' t see plate 00 , even .
    """
    s = raw_line.lower()
    s = _DIGIT_RUN.sub(lambda m: "0" * len(m.group()), s)
    s = _PUNCT.sub(r" \1 ", s)
    tokens = tuple(s.split())
    if not tokens:
        return None
    return Utterance(tokens)


def parse_conversations(lines: Iterable[str]) -> list[list[Utterance]]:
    """Group normalized utterances into conversations at blank lines."""
    conversations: list[list[Utterance]] = []
    current: list[Utterance] = []
    for line in lines:
        if line.strip() == "":
            if current:
                conversations.append(current)
                current = []
            continue
        utt = normalize(line)
        if utt is not None:
            current.append(utt)
    if current:
        conversations.append(current)
    return conversations


def read_conversations(path) -> list[list[Utterance]]:
    with open(path, encoding="utf-8") as f:
        return parse_conversations(f)


class Vocabulary:
    """Bidirectional token<->id map with PAD, GO, EOS, UNK at ids 0..3.

    Non-reserved tokens are ordered by descending corpus frequency, ties
    broken lexicographically. Tokens outside the map encode to UNK.
    """

    def __init__(self, tokens: Sequence[str]) -> None:
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            raise ValueError(f"first four tokens must be {RESERVED_TOKENS}, got {tokens[:4]}")
        self.id_to_token: list[str] = list(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")

    @classmethod
    def build(cls, utterances: Iterable[Utterance], max_size: int) -> "Vocabulary":
        if max_size <= len(RESERVED_TOKENS):
            raise ValueError(f"max_size must exceed {len(RESERVED_TOKENS)}, got {max_size}")
        counts: dict[str, int] = {}
        seen_any = False
        for utt in utterances:
            seen_any = True
            for tok in utt.tokens:
                counts[tok] = counts.get(tok, 0) + 1
        if not seen_any:
            raise ValueError("cannot build a vocabulary from an empty corpus")
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        keep = [tok for tok, _ in ranked[: max_size - len(RESERVED_TOKENS)]]
        return cls(list(RESERVED_TOKENS) + keep)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_for(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_for(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.id_to_token):
            raise ValueError(f"token id {token_id} out of range for vocabulary of {len(self)}")
        return self.id_to_token[token_id]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_for(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.token_for(i) for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.id_to_token:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)


def extract_fragments(
    conversations: Iterable[Sequence[Utterance]],
    context_turns: int,
    max_context: int = 10,
) -> Iterator[ConversationFragment]:
    """Emit (N preceding turns -> next turn) fragments, never across conversations."""
    if not 1 <= context_turns <= max_context:
        raise ValueError(f"context_turns must be in [1, {max_context}], got {context_turns}")
    for conversation in conversations:
        for t in range(context_turns, len(conversation)):
            yield ConversationFragment(
                context=tuple(conversation[t - context_turns : t]),
                target=conversation[t],
            )


def _reversed_ids(utt: Utterance, vocab: Vocabulary, max_utterance_len: int) -> list[int]:
    # keep the most recent max_utterance_len words, then reverse
    tokens = utt.tokens[-max_utterance_len:]
    return vocab.encode(reversed(tokens))


def encode_flat(
    context: Sequence[Utterance], vocab: Vocabulary, max_utterance_len: int = 50
) -> list[int]:
    """Single encoder sequence: per-utterance reversal, EOS after each utterance."""
    if not context:
        raise ValueError("cannot encode an empty context")
    ids: list[int] = []
    for utt in context:
        ids.extend(_reversed_ids(utt, vocab, max_utterance_len))
        ids.append(EOS_ID)
    return ids


def encode_hierarchical(
    context: Sequence[Utterance], vocab: Vocabulary, max_utterance_len: int = 50
) -> list[list[int]]:
    """One reversed, EOS-terminated id sequence per context utterance."""
    if not context:
        raise ValueError("cannot encode an empty context")
    return [_reversed_ids(u, vocab, max_utterance_len) + [EOS_ID] for u in context]


def encode_target(
    target: Utterance, vocab: Vocabulary, max_utterance_len: int = 50
) -> tuple[list[int], list[int]]:
    """Teacher-forcing pair: decoder input GO+tokens, labels tokens+EOS."""
    ids = vocab.encode(target.tokens[-max_utterance_len:])
    return [GO_ID] + ids, ids + [EOS_ID]


FLAT = "flat"
HIERARCHICAL = "hierarchical"
ARCHITECTURES = (FLAT, HIERARCHICAL)


@dataclass
class EncodedFragment:
    """A fragment encoded for one architecture, ready for the model."""

    architecture: str
    context: list  # list[int] for flat, list[list[int]] for hierarchical
    decoder_input: list[int]
    labels: list[int]


def encode_fragment(
    fragment: ConversationFragment,
    vocab: Vocabulary,
    architecture: str,
    max_utterance_len: int = 50,
) -> EncodedFragment:
    if architecture == FLAT:
        context = encode_flat(fragment.context, vocab, max_utterance_len)
    elif architecture == HIERARCHICAL:
        context = encode_hierarchical(fragment.context, vocab, max_utterance_len)
    else:
        raise ValueError(f"unknown architecture {architecture!r}")
    decoder_input, labels = encode_target(fragment.target, vocab, max_utterance_len)
    return EncodedFragment(architecture, context, decoder_input, labels)


def _pad_to(rows: list[list[int]]) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


@dataclass
class Batch:
    """A group of encoded fragments padded to per-batch maxima with PAD.

    The unpadded fragments are retained so consumers can take loss only over
    real tokens; the padded arrays and lengths describe the same content.
    """

    fragments: list[EncodedFragment]
    context_padded: object = field(init=False)
    context_lengths: list = field(init=False)
    decoder_input_padded: np.ndarray = field(init=False)
    labels_padded: np.ndarray = field(init=False)
    target_lengths: list[int] = field(init=False)

    def __post_init__(self) -> None:
        if not self.fragments:
            raise ValueError("empty batch")
        archs = {f.architecture for f in self.fragments}
        if len(archs) != 1:
            raise ValueError(f"mixed architectures in one batch: {sorted(archs)}")
        if self.fragments[0].architecture == FLAT:
            self.context_lengths = [len(f.context) for f in self.fragments]
            self.context_padded = _pad_to([f.context for f in self.fragments])
        else:
            n_turns = {len(f.context) for f in self.fragments}
            if len(n_turns) != 1:
                raise ValueError(f"mixed context depths in one batch: {sorted(n_turns)}")
            self.context_lengths = [[len(u) for u in f.context] for f in self.fragments]
            self.context_padded = [
                _pad_to([f.context[k] for f in self.fragments]) for k in range(n_turns.pop())
            ]
        self.target_lengths = [len(f.labels) for f in self.fragments]
        self.decoder_input_padded = _pad_to([f.decoder_input for f in self.fragments])
        self.labels_padded = _pad_to([f.labels for f in self.fragments])

    def __len__(self) -> int:
        return len(self.fragments)


def make_batches(
    fragments: Sequence[EncodedFragment], batch_size: int, seed: int
) -> list[Batch]:
    """Shuffle with the given seed and group into padded batches."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(len(fragments))
    shuffled = [fragments[i] for i in order]
    return [
        Batch(shuffled[i : i + batch_size]) for i in range(0, len(shuffled), batch_size)
    ]


def write_fragments(fragments: Iterable[ConversationFragment], path) -> None:
    """Fragment cache: one per line, utterances tab-joined, target last."""
    with open(path, "w", encoding="utf-8") as f:
        for frag in fragments:
            cells = [u.text() for u in frag.context] + [frag.target.text()]
            f.write("\t".join(cells) + "\n")


def read_fragments(path) -> list[ConversationFragment]:
    fragments = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cells = line.split("\t")
            if len(cells) < 2:
                raise ValueError(f"{path}:{line_no}: fragment needs >= 2 utterances")
            utts = [Utterance(tuple(c.split())) for c in cells]
            fragments.append(ConversationFragment(tuple(utts[:-1]), utts[-1]))
    return fragments
