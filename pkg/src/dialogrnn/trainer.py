"""SGD training loop: gradient clipping, plateau-triggered lr decay, logging.

The optimized quantity is the mean loss per target token of each mini-batch.
Validation runs every ``checkpoint_interval`` steps; when it fails to improve
on the best value for ``patience_steps`` consecutive evaluations the learning
rate is multiplied by ``decay_factor``. One worker mutates the parameters, so
fixed seeds reproduce the loss history bit for bit.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .corpus import EncodedFragment, make_batches
from .model import ModelParameters, forward_loss
from .tensor import ContractError, Tape, add, scale

logger = logging.getLogger(__name__)

VAL_WINDOW = 10
STATE_FORMAT_VERSION = 1

MODEL_BEST = "model_best.ckpt"
MODEL_FINAL = "model_final.ckpt"
TRAIN_STATE = "train_state.bin"
LOSS_LOG = "loss_log.tsv"


class TrainingError(RuntimeError):
    """Training hit a non-finite value or another unrecoverable condition."""


@dataclass
class TrainConfig:
    batch_size: int = 64
    initial_lr: float = 0.5
    decay_factor: float = 0.99
    clip_norm: float = 5.0
    max_epochs: int = 10
    patience_steps: int = 3
    seed: int = 0
    checkpoint_interval: int = 50
    max_steps: int | None = None
    target_train_loss: float | None = None

    def __post_init__(self) -> None:
        if min(self.batch_size, self.max_epochs, self.patience_steps, self.checkpoint_interval) < 1:
            raise ValueError("batch_size, max_epochs, patience_steps, checkpoint_interval must be >= 1")
        if self.initial_lr <= 0 or self.clip_norm <= 0:
            raise ValueError("initial_lr and clip_norm must be positive")
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError(f"decay_factor must be in (0, 1), got {self.decay_factor}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1 when set")


@dataclass
class TrainState:
    lr: float
    step: int = 0
    epoch: int = 0
    best_val_loss: float = math.inf
    recent_val_losses: list[float] = field(default_factory=list)
    bad_evals: int = 0
    decay_events: int = 0


@dataclass
class EvalRecord:
    step: int
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_perplexity: float

    def line(self) -> str:
        return "\t".join(
            [
                str(self.step),
                str(self.epoch),
                repr(self.lr),
                repr(self.train_loss),
                repr(self.val_loss),
                repr(self.val_perplexity),
            ]
        )


@dataclass
class TrainResult:
    params: ModelParameters
    state: TrainState
    history: list[EvalRecord]
    step_losses: list[float]
    clip_norms: list[float]  # global norms before clipping
    post_clip_norms: list[float]  # recomputed from the applied gradients
    stop_reason: str


def clip_gradients(
    grads: dict[str, np.ndarray], clip_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients down to a global L2 norm of ``clip_norm`` if above it."""
    if clip_norm <= 0:
        raise ValueError(f"clip_norm must be positive, got {clip_norm}")
    sq = 0.0
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name!r}")
        sq += float((g * g).sum())
    norm = math.sqrt(sq)
    if norm > clip_norm:
        factor = clip_norm / norm
        for g in grads.values():
            g *= factor
    return grads, norm


def sgd_step(params: ModelParameters, grads: dict[str, np.ndarray], lr: float) -> None:
    """In-place update: every tensor moves against its gradient by lr."""
    for name, tensor in params.named_tensors():
        g = grads[name]
        if g.shape != tensor.array.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, tensor {tensor.array.shape}")
        tensor.array -= lr * g


def maybe_decay(state: TrainState, val_loss: float, config: TrainConfig) -> TrainState:
    """Decay lr after ``patience_steps`` consecutive non-improving evaluations."""
    state.recent_val_losses.append(val_loss)
    del state.recent_val_losses[:-VAL_WINDOW]
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.bad_evals = 0
    else:
        state.bad_evals += 1
        if state.bad_evals >= config.patience_steps:
            state.lr *= config.decay_factor
            state.decay_events += 1
            state.bad_evals = 0
    return state


def batch_loss(
    params: ModelParameters, fragments: Sequence[EncodedFragment], tape: Tape | None = None
):
    """Mean per-token loss tensor over a group of fragments, plus token count."""
    total = None
    tokens = 0
    for fragment in fragments:
        result = forward_loss(params, fragment, tape)
        tokens += result.token_count
        total = result.loss if total is None else add(total, result.loss, tape)
    if total is None:
        raise ValueError("no fragments to compute a loss over")
    return scale(total, 1.0 / tokens, tape), tokens


def validation_loss(
    params: ModelParameters, fragments: Sequence[EncodedFragment]
) -> tuple[float, list[float]]:
    """Mean per-token loss over fragments and the per-fragment means."""
    total = 0.0
    tokens = 0
    per_fragment = []
    for fragment in fragments:
        result = forward_loss(params, fragment)
        total += result.loss.item()
        tokens += result.token_count
        per_fragment.append(result.loss.item() / result.token_count)
    if tokens == 0:
        raise ValueError("no fragments to validate on")
    return total / tokens, per_fragment


def train(
    config: TrainConfig,
    params: ModelParameters,
    train_fragments: Sequence[EncodedFragment],
    val_fragments: Sequence[EncodedFragment],
    out_dir=None,
) -> TrainResult:
    """Run SGD until an epoch/step budget or the target train loss is reached.

    When ``out_dir`` is given, writes the loss log there plus checkpoints of
    the best-validation model, the final model and the trainer state.
    """
    if not train_fragments:
        raise ValueError("training set is empty")
    have_validation = bool(val_fragments)
    if not have_validation:
        logger.warning("empty validation set: lr decay and best-model tracking disabled")

    out_path = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_file = open(out_path / LOSS_LOG, "a", encoding="utf-8")

    state = TrainState(lr=config.initial_lr)
    history: list[EvalRecord] = []
    step_losses: list[float] = []
    clip_norms: list[float] = []
    post_clip_norms: list[float] = []
    named = params.named_tensors()
    stop_reason = "max_epochs"
    last_eval_step = -1

    def evaluate(train_loss: float) -> None:
        nonlocal last_eval_step
        val_loss, _ = validation_loss(params, val_fragments)
        improved = val_loss < state.best_val_loss
        record = EvalRecord(
            step=state.step,
            epoch=state.epoch,
            lr=state.lr,
            train_loss=train_loss,
            val_loss=val_loss,
            val_perplexity=math.exp(val_loss),
        )
        history.append(record)
        last_eval_step = state.step
        if log_file is not None:
            log_file.write(record.line() + "\n")
            log_file.flush()
        maybe_decay(state, val_loss, config)
        if improved and out_path is not None:
            checkpoint.save_model(out_path / MODEL_BEST, params)

    try:
        done = False
        for epoch in range(config.max_epochs):
            state.epoch = epoch
            for batch in make_batches(train_fragments, config.batch_size, config.seed + epoch):
                tape = Tape()
                mean_loss, _ = batch_loss(params, batch.fragments, tape)
                loss_value = mean_loss.item()
                if not math.isfinite(loss_value):
                    raise TrainingError(
                        f"non-finite training loss {loss_value!r} at step {state.step} "
                        f"(epoch {epoch}, lr {state.lr!r})"
                    )
                adjoints = tape.backward(mean_loss)
                grads = {name: adjoints[tensor] for name, tensor in named}
                try:
                    grads, norm = clip_gradients(grads, config.clip_norm)
                except TrainingError as err:
                    raise TrainingError(f"{err} at step {state.step} (epoch {epoch})") from None
                post_clip_norms.append(math.sqrt(sum(float((g * g).sum()) for g in grads.values())))
                sgd_step(params, grads, state.lr)
                state.step += 1
                step_losses.append(loss_value)
                clip_norms.append(norm)
                if have_validation and state.step % config.checkpoint_interval == 0:
                    evaluate(loss_value)
                if config.target_train_loss is not None and loss_value < config.target_train_loss:
                    stop_reason = "target_train_loss"
                    done = True
                elif config.max_steps is not None and state.step >= config.max_steps:
                    stop_reason = "max_steps"
                    done = True
                if done:
                    break
            if done:
                break
        if have_validation and state.step != last_eval_step and step_losses:
            evaluate(step_losses[-1])
    finally:
        if log_file is not None:
            log_file.close()

    if out_path is not None:
        checkpoint.save_model(out_path / MODEL_FINAL, params)
        save_train_state(out_path / TRAIN_STATE, state)

    return TrainResult(
        params=params,
        state=state,
        history=history,
        step_losses=step_losses,
        clip_norms=clip_norms,
        post_clip_norms=post_clip_norms,
        stop_reason=stop_reason,
    )


def save_train_state(path, state: TrainState) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<I", STATE_FORMAT_VERSION))
        f.write(struct.pack("<dQQd", state.lr, state.step, state.epoch, state.best_val_loss))
        f.write(struct.pack("<II", state.decay_events, state.bad_evals))
        f.write(struct.pack("<I", len(state.recent_val_losses)))
        for loss in state.recent_val_losses:
            f.write(struct.pack("<d", loss))


def load_train_state(path) -> TrainState:
    with open(path, "rb") as f:
        (version,) = struct.unpack("<I", f.read(4))
        if version != STATE_FORMAT_VERSION:
            raise ValueError(f"unsupported train state format version {version}")
        lr, step, epoch, best = struct.unpack("<dQQd", f.read(32))
        decay_events, bad_evals = struct.unpack("<II", f.read(8))
        (n,) = struct.unpack("<I", f.read(4))
        recent = [struct.unpack("<d", f.read(8))[0] for _ in range(n)]
    return TrainState(
        lr=lr,
        step=step,
        epoch=epoch,
        best_val_loss=best,
        recent_val_losses=recent,
        bad_evals=bad_evals,
        decay_events=decay_events,
    )
