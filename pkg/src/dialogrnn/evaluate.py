"""Perplexity evaluation, greedy generation and the context-size sweep."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .corpus import (
    EOS_ID,
    FLAT,
    GO_ID,
    PAD_ID,
    EncodedFragment,
    Utterance,
    Vocabulary,
    encode_flat,
    encode_fragment,
    encode_hierarchical,
    extract_fragments,
)
from .model import (
    ModelConfig,
    ModelParameters,
    decode_step,
    encode_flat_sequence,
    encode_hierarchical as encode_hierarchical_states,
    forward_loss,
    init_parameters,
    project_sources,
)
from .tensor import zeros
from .trainer import TrainConfig, train


@dataclass
class EvalReport:
    """Perplexity of one model over one fragment set."""

    dataset_id: str
    context_turns: int
    fragment_count: int
    mean_loss: float
    perplexity: float
    stderr: float

    @classmethod
    def from_fragment_stats(
        cls, dataset_id: str, context_turns: int, stats: Sequence[tuple[float, int]]
    ) -> "EvalReport":
        """Aggregate (loss sum, token count) pairs, one per fragment.

        Perplexity is exp of the token-weighted mean loss; the standard error
        is over the per-fragment mean losses.
        """
        if not stats:
            raise ValueError("cannot evaluate an empty fragment set")
        total = sum(s for s, _ in stats)
        tokens = sum(n for _, n in stats)
        mean_loss = total / tokens
        per_fragment = np.array([s / n for s, n in stats])
        stderr = float(per_fragment.std(ddof=1) / math.sqrt(len(stats))) if len(stats) > 1 else 0.0
        return cls(
            dataset_id=dataset_id,
            context_turns=context_turns,
            fragment_count=len(stats),
            mean_loss=mean_loss,
            perplexity=math.exp(mean_loss),
            stderr=stderr,
        )


def perplexity(
    params: ModelParameters,
    fragments: Sequence[EncodedFragment],
    context_turns: int,
    dataset_id: str = "eval",
) -> EvalReport:
    stats = []
    for fragment in fragments:
        result = forward_loss(params, fragment)
        stats.append((result.loss.item(), result.token_count))
    return EvalReport.from_fragment_stats(dataset_id, context_turns, stats)


@dataclass
class GeneratedResponse:
    """Greedy decoder output with its per-step attention weights."""

    context: tuple[Utterance, ...]
    token_ids: list[int]
    tokens: list[str]
    attention: list[np.ndarray]


def generate_greedy(
    params: ModelParameters,
    vocab: Vocabulary,
    context: Sequence[Utterance],
    max_len: int = 50,
    max_utterance_len: int = 50,
) -> GeneratedResponse:
    """Decode by argmax until EOS or the length cap.

    PAD and GO are excluded from the argmax; ties go to the lowest token id.
    """
    if not context:
        raise ValueError("cannot generate from an empty context")
    if params.architecture == FLAT:
        hs = encode_flat_sequence(params, encode_flat(context, vocab, max_utterance_len))
    else:
        hs = encode_hierarchical_states(params, encode_hierarchical(context, vocab, max_utterance_len))
    projected = project_sources(params.attention, hs)
    d = hs[-1]
    c = zeros(params.config.hidden_dim)
    token_ids: list[int] = []
    attention: list[np.ndarray] = []
    prev = GO_ID
    for _ in range(max_len):
        d, state, logits = decode_step(params, hs, projected, d, c, prev)
        c = state.context
        masked = logits.array.copy()
        masked[PAD_ID] = -np.inf
        masked[GO_ID] = -np.inf
        prev = int(np.argmax(masked))
        token_ids.append(prev)
        attention.append(state.weights.array.copy())
        if prev == EOS_ID:
            break
    return GeneratedResponse(
        context=tuple(context),
        token_ids=token_ids,
        tokens=vocab.decode(token_ids),
        attention=attention,
    )


@dataclass
class SweepCell:
    """One (architecture, N) cell of the context-size sweep."""

    architecture: str
    context_turns: int
    report: EvalReport | None = None
    skip_reason: str | None = None


def sensitivity_sweep(
    train_conversations: Sequence[Sequence[Utterance]],
    eval_conversations: Sequence[Sequence[Utterance]],
    architectures: Sequence[str],
    n_values: Sequence[int],
    train_config: TrainConfig,
    vocab: Vocabulary | None = None,
    vocab_cap: int = 40000,
    emb_dim: int = 32,
    hidden_dim: int = 32,
    attn_dim: int = 32,
    max_context: int = 10,
    max_utterance_len: int = 50,
    final_target_only: bool = False,
) -> list[SweepCell]:
    """Train one fresh model per (architecture, N) cell and evaluate held out.

    Every cell uses the same configuration and seed so cells differ only in
    architecture and context depth. Cells without enough context depth are
    skipped with a reason. ``final_target_only`` keeps only fragments whose
    target is the last utterance of its conversation, which pins the target
    population across different N.
    """
    if vocab is None:
        vocab = Vocabulary.build(
            (u for conv in train_conversations for u in conv), vocab_cap
        )
    cells: list[SweepCell] = []
    for arch in architectures:
        for n in n_values:
            cell = SweepCell(architecture=arch, context_turns=n)
            cells.append(cell)
            train_frags = list(extract_fragments(train_conversations, n, max_context))
            eval_frags = list(extract_fragments(eval_conversations, n, max_context))
            if final_target_only:
                train_frags = [
                    f
                    for conv in train_conversations
                    for f in extract_fragments([conv], n, max_context)
                    if f.target is conv[-1]
                ]
                eval_frags = [
                    f
                    for conv in eval_conversations
                    for f in extract_fragments([conv], n, max_context)
                    if f.target is conv[-1]
                ]
            if not train_frags:
                cell.skip_reason = f"no training fragments with {n} context turns"
                continue
            if not eval_frags:
                cell.skip_reason = f"no evaluation fragments with {n} context turns"
                continue
            config = ModelConfig(
                architecture=arch,
                vocab_size=len(vocab),
                emb_dim=emb_dim,
                hidden_dim=hidden_dim,
                attn_dim=attn_dim,
            )
            params = init_parameters(config, train_config.seed)
            train_enc = [encode_fragment(f, vocab, arch, max_utterance_len) for f in train_frags]
            eval_enc = [encode_fragment(f, vocab, arch, max_utterance_len) for f in eval_frags]
            train(train_config, params, train_enc, eval_enc)
            cell.report = perplexity(params, eval_enc, n, dataset_id=f"{arch}-n{n}")
    return cells


def write_sweep_table(cells: Iterable[SweepCell], out: TextIO) -> None:
    """Tab-separated sweep table, one row per (architecture, N) cell."""
    out.write("architecture\tN\tperplexity\tstderr\tnote\n")
    for cell in cells:
        if cell.report is not None:
            out.write(
                f"{cell.architecture}\t{cell.context_turns}\t"
                f"{cell.report.perplexity!r}\t{cell.report.stderr!r}\t\n"
            )
        else:
            out.write(f"{cell.architecture}\t{cell.context_turns}\tNA\tNA\t{cell.skip_reason}\n")


def write_eval_report(report: EvalReport, out: TextIO) -> None:
    out.write("dataset\tN\tfragments\tmean_loss\tperplexity\tstderr\n")
    out.write(
        f"{report.dataset_id}\t{report.context_turns}\t{report.fragment_count}\t"
        f"{report.mean_loss!r}\t{report.perplexity!r}\t{report.stderr!r}\n"
    )
