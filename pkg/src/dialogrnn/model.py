"""GRU encoder-decoder architectures with additive attention.

Two variants share one decoder and attention mechanism:

* flat: the context turns are joined into a single token sequence and the
  decoder attends over every encoder hidden state (word-level attention);
* hierarchical: each turn is encoded separately, the per-turn final states
  drive a second, turn-level GRU, and the decoder attends over that GRU's
  states (utterance-level attention).

The attention score for source state h_i given decoder state d is
v . tanh(W_1 h_i + W_2 d); the weights are the softmax of the scores and
the context vector is the weighted sum of the source states.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import ARCHITECTURES, FLAT, HIERARCHICAL, PAD_ID, EncodedFragment
from .tensor import (
    ContractError,
    DomainError,
    Tape,
    Tensor,
    add,
    concat,
    cross_entropy,
    dot,
    hadamard,
    matmul,
    one_minus,
    row,
    sigmoid,
    softmax,
    stack,
    tanh,
    weighted_sum,
    zeros,
)

INIT_SCALE = 0.08


@dataclass
class ModelConfig:
    architecture: str
    vocab_size: int
    emb_dim: int = 32
    hidden_dim: int = 32
    attn_dim: int = 32

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.vocab_size < 5:
            raise ValueError(f"vocab_size must cover the 4 reserved ids, got {self.vocab_size}")
        if min(self.emb_dim, self.hidden_dim, self.attn_dim) < 1:
            raise ValueError("all dimensions must be positive")


@dataclass
class GruCellParams:
    """Gate parameters of one GRU cell.

    The step computes z = sigmoid(W_z x + U_z h + b_z),
    r = sigmoid(W_r x + U_r h + b_r),
    h~ = tanh(W_h x + U_h (r*h) + b_h) and h' = (1-z)*h + z*h~.
    """

    W_z: Tensor
    U_z: Tensor
    b_z: Tensor
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_h: Tensor
    U_h: Tensor
    b_h: Tensor

    def named(self, prefix: str):
        for name in ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class AttentionParams:
    v: Tensor
    W_1: Tensor
    W_2: Tensor

    def named(self, prefix: str = "attention"):
        for name in ("v", "W_1", "W_2"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class AttentionState:
    """Scores, softmax weights and context vector of one attention query."""

    scores: Tensor
    weights: Tensor
    context: Tensor


@dataclass
class ModelParameters:
    """All learnable tensors of one architecture."""

    config: ModelConfig
    encoder_embedding: Tensor
    decoder_embedding: Tensor
    encoder: GruCellParams
    discourse: GruCellParams | None
    decoder: GruCellParams
    attention: AttentionParams
    W_out: Tensor
    b_out: Tensor

    @property
    def architecture(self) -> str:
        return self.config.architecture

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        pairs = [
            ("encoder_embedding", self.encoder_embedding),
            ("decoder_embedding", self.decoder_embedding),
        ]
        pairs.extend(self.encoder.named("encoder"))
        if self.discourse is not None:
            pairs.extend(self.discourse.named("discourse"))
        pairs.extend(self.decoder.named("decoder"))
        pairs.extend(self.attention.named())
        pairs.append(("W_out", self.W_out))
        pairs.append(("b_out", self.b_out))
        return pairs

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self.named_tensors())


def _gru_params(make, input_dim: int, hidden_dim: int) -> GruCellParams:
    return GruCellParams(
        W_z=make((hidden_dim, input_dim)),
        U_z=make((hidden_dim, hidden_dim)),
        b_z=make((hidden_dim,)),
        W_r=make((hidden_dim, input_dim)),
        U_r=make((hidden_dim, hidden_dim)),
        b_r=make((hidden_dim,)),
        W_h=make((hidden_dim, input_dim)),
        U_h=make((hidden_dim, hidden_dim)),
        b_h=make((hidden_dim,)),
    )


def _build(config: ModelConfig, make) -> ModelParameters:
    emb, hid, attn = config.emb_dim, config.hidden_dim, config.attn_dim
    return ModelParameters(
        config=config,
        encoder_embedding=make((config.vocab_size, emb)),
        decoder_embedding=make((config.vocab_size, emb)),
        encoder=_gru_params(make, emb, hid),
        discourse=_gru_params(make, hid, hid) if config.architecture == HIERARCHICAL else None,
        decoder=_gru_params(make, emb + hid, hid),
        attention=AttentionParams(v=make((attn,)), W_1=make((attn, hid)), W_2=make((attn, hid))),
        W_out=make((config.vocab_size, 2 * hid)),
        b_out=make((config.vocab_size,)),
    )


def init_parameters(config: ModelConfig, seed: int) -> ModelParameters:
    """Fresh parameters, uniform in [-0.08, 0.08], deterministic per seed."""
    rng = np.random.default_rng(seed)
    return _build(config, lambda shape: Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, shape)))


def zero_parameters(config: ModelConfig) -> ModelParameters:
    return _build(config, lambda shape: zeros(shape))


def gru_step(p: GruCellParams, x: Tensor, h_prev: Tensor, tape: Tape | None = None) -> Tensor:
    """One GRU update; with all-zero parameters this returns 0.5 * h_prev."""
    z = sigmoid(add(add(matmul(p.W_z, x, tape), matmul(p.U_z, h_prev, tape), tape), p.b_z, tape), tape)
    r = sigmoid(add(add(matmul(p.W_r, x, tape), matmul(p.U_r, h_prev, tape), tape), p.b_r, tape), tape)
    gated = hadamard(r, h_prev, tape)
    h_tilde = tanh(add(add(matmul(p.W_h, x, tape), matmul(p.U_h, gated, tape), tape), p.b_h, tape), tape)
    return add(hadamard(one_minus(z, tape), h_prev, tape), hadamard(z, h_tilde, tape), tape)


def project_sources(p: AttentionParams, hs: Sequence[Tensor], tape: Tape | None = None) -> list[Tensor]:
    """W_1 h_i for every source state; query-independent, computed once."""
    return [matmul(p.W_1, h, tape) for h in hs]


def attend(
    p: AttentionParams,
    hs: Sequence[Tensor],
    d_t: Tensor,
    tape: Tape | None = None,
    projected: Sequence[Tensor] | None = None,
) -> AttentionState:
    """Score every source state against the decoder state d_t."""
    if not hs:
        raise DomainError("attention needs at least one source state")
    if projected is None:
        projected = project_sources(p, hs, tape)
    query = matmul(p.W_2, d_t, tape)
    scores = stack([dot(p.v, tanh(add(proj, query, tape), tape), tape) for proj in projected], tape)
    weights = softmax(scores, tape)
    context = weighted_sum(weights, hs, tape)
    return AttentionState(scores=scores, weights=weights, context=context)


def encode_flat_sequence(
    params: ModelParameters, ids: Sequence[int], tape: Tape | None = None
) -> list[Tensor]:
    """All encoder hidden states over one token id sequence, from a zero state."""
    if not ids:
        raise DomainError("cannot encode an empty sequence")
    h = zeros(params.config.hidden_dim)
    states = []
    for token_id in ids:
        x = row(params.encoder_embedding, token_id, tape)
        h = gru_step(params.encoder, x, h, tape)
        states.append(h)
    return states


def encode_utterance(params: ModelParameters, ids: Sequence[int], tape: Tape | None = None) -> Tensor:
    """Final encoder state of one utterance, started from a fresh zero state."""
    return encode_flat_sequence(params, ids, tape)[-1]


def encode_hierarchical(
    params: ModelParameters, utterances: Sequence[Sequence[int]], tape: Tape | None = None
) -> list[Tensor]:
    """Turn-level states: encode each utterance independently, then run the
    turn-level GRU over the N final encoder states from a zero state."""
    if not utterances:
        raise DomainError("cannot encode an empty context")
    if params.discourse is None:
        raise ContractError("parameters lack the turn-level GRU required here")
    finals = [encode_utterance(params, ids, tape) for ids in utterances]
    h = zeros(params.config.hidden_dim)
    states = []
    for e in finals:
        h = gru_step(params.discourse, e, h, tape)
        states.append(h)
    return states


def decode_step(
    params: ModelParameters,
    hs: Sequence[Tensor],
    projected: Sequence[Tensor],
    d_prev: Tensor,
    c_prev: Tensor,
    input_id: int,
    tape: Tape | None = None,
) -> tuple[Tensor, AttentionState, Tensor]:
    """One decoder step: new state, attention over hs, output logits.

    The previous context vector is concatenated to the input embedding, the
    new state queries attention and logits come from W_out [d_t; c_t] + b_out.
    """
    emb = row(params.decoder_embedding, input_id, tape)
    x = concat(emb, c_prev, tape)
    d_t = gru_step(params.decoder, x, d_prev, tape)
    state = attend(params.attention, hs, d_t, tape, projected=projected)
    logits = add(matmul(params.W_out, concat(d_t, state.context, tape), tape), params.b_out, tape)
    return d_t, state, logits


@dataclass
class DecodeResult:
    loss: Tensor  # summed cross-entropy over non-PAD labels
    token_count: int
    per_token_losses: list[float]
    attention_weights: list[np.ndarray]


def decode_train(
    params: ModelParameters,
    hs: Sequence[Tensor],
    decoder_input: Sequence[int],
    labels: Sequence[int],
    tape: Tape | None = None,
) -> DecodeResult:
    """Teacher-forced decoding; PAD labels step the decoder but add no loss.

    The decoder starts from the last source state with a zero context vector.
    """
    if not labels:
        raise DomainError("cannot decode an empty target")
    if len(decoder_input) != len(labels):
        raise ContractError(
            f"decoder input length {len(decoder_input)} != label length {len(labels)}"
        )
    projected = project_sources(params.attention, hs, tape)
    d = hs[-1]
    c = zeros(params.config.hidden_dim)
    total: Tensor | None = None
    per_token: list[float] = []
    attention: list[np.ndarray] = []
    for input_id, label in zip(decoder_input, labels):
        d, state, logits = decode_step(params, hs, projected, d, c, input_id, tape)
        c = state.context
        attention.append(state.weights.array.copy())
        if label == PAD_ID:
            continue
        ce = cross_entropy(logits, label, tape)
        per_token.append(ce.item())
        total = ce if total is None else add(total, ce, tape)
    if total is None:
        raise DomainError("target contained only PAD labels")
    return DecodeResult(
        loss=total,
        token_count=len(per_token),
        per_token_losses=per_token,
        attention_weights=attention,
    )


def grad_check_forward(params: ModelParameters, fragment: EncodedFragment):
    """Loss closure over one fragment, in the shape tensor.grad_check expects."""

    def forward(tape: Tape | None) -> Tensor:
        return forward_loss(params, fragment, tape).loss

    return forward


def forward_loss(
    params: ModelParameters, fragment: EncodedFragment, tape: Tape | None = None
) -> DecodeResult:
    """Full forward pass of one encoded fragment, loss summed over target tokens."""
    if fragment.architecture != params.architecture:
        raise ContractError(
            f"fragment encoded for {fragment.architecture!r} fed to a {params.architecture!r} model"
        )
    if params.architecture == FLAT:
        hs = encode_flat_sequence(params, fragment.context, tape)
    else:
        hs = encode_hierarchical(params, fragment.context, tape)
    return decode_train(params, hs, fragment.decoder_input, fragment.labels, tape)
