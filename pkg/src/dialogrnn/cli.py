"""Command line entry point for the whole pipeline.

Every command materializes its full configuration into a run manifest
written atomically next to its outputs, including SHA-256 checksums of every
artifact, so a run can be replayed from the manifest alone. All randomness
flows from the single global --seed flag.

Exit codes: 0 success, 2 usage or unreadable/invalid input, 3 training
divergence (non-finite loss or gradients).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import checkpoint, evaluate, markers
from .corpus import (
    ARCHITECTURES,
    ConversationFragment,
    Utterance,
    Vocabulary,
    encode_fragment,
    extract_fragments,
    read_conversations,
    read_fragments,
    write_fragments,
)
from .model import ModelConfig, init_parameters
from .trainer import LOSS_LOG, MODEL_BEST, MODEL_FINAL, TRAIN_STATE, TrainConfig, TrainingError, train

TRAIN_FLAGS = (
    ("--batch-size", int, 64),
    ("--initial-lr", float, 0.5),
    ("--decay-factor", float, 0.99),
    ("--clip-norm", float, 5.0),
    ("--max-epochs", int, 10),
    ("--patience-steps", int, 3),
    ("--checkpoint-interval", int, 50),
    ("--max-steps", int, None),
    ("--target-train-loss", float, None),
)

DIM_FLAGS = (
    ("--emb-dim", int, 64),
    ("--hidden-dim", int, 64),
    ("--attn-dim", int, 64),
)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for flag, ftype, default in TRAIN_FLAGS + DIM_FLAGS:
        p.add_argument(flag, type=ftype, default=default)


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size,
        initial_lr=args.initial_lr,
        decay_factor=args.decay_factor,
        clip_norm=args.clip_norm,
        max_epochs=args.max_epochs,
        patience_steps=args.patience_steps,
        seed=args.seed,
        checkpoint_interval=args.checkpoint_interval,
        max_steps=args.max_steps,
        target_train_loss=args.target_train_loss,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dialogrnn", description=__doc__.split("\n")[0])
    parser.add_argument("--seed", type=int, default=0, help="single source of all randomness")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    parser.add_argument(
        "--manifest-only",
        action="store_true",
        help="resolve the configuration and write the manifest without running",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="count tokens and write a vocabulary file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-size", type=int, default=40000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("extract-fragments", help="write the fragment cache for one context depth")
    p.add_argument("--corpus", required=True)
    p.add_argument("--context-turns", type=int, required=True)
    p.add_argument("--max-context", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_fragments)

    p = sub.add_parser("train", help="train one architecture on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--arch", required=True, choices=ARCHITECTURES)
    p.add_argument("--context-turns", type=int, default=1)
    p.add_argument("--max-context", type=int, default=10)
    p.add_argument("--val-corpus", default=None)
    p.add_argument("--holdout-fraction", type=float, default=0.1)
    p.add_argument("--out-dir", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--context-turns", type=int, required=True)
    p.add_argument("--max-context", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="greedy responses for a fragment file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--fragments", required=True)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze", help="discourse-marker report for text or a model")
    p.add_argument("--utterances", default=None, help="file of utterances, one per line")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--vocab", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--context-turns", type=int, default=1)
    p.add_argument("--max-context", type=int, default=10)
    p.add_argument("--sample-size", type=int, default=100000)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--lexicon", default=None, help="lexicon override file")
    p.add_argument("--per-line", default=None, help="also write per-utterance flags here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="perplexity vs. context depth for each architecture")
    p.add_argument("--corpus", required=True)
    p.add_argument("--eval-corpus", default=None)
    p.add_argument("--holdout-fraction", type=float, default=0.2)
    p.add_argument("--architectures", default="flat,hierarchical")
    p.add_argument("--n-values", default="1,2,3")
    p.add_argument("--max-context", type=int, default=10)
    p.add_argument("--vocab-cap", type=int, default=40000)
    p.add_argument("--final-target-only", action="store_true")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message, file=sys.stderr)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(65536), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _resolved_config(args: argparse.Namespace) -> dict:
    skip = {"func", "manifest_only", "quiet"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def write_manifest(
    args: argparse.Namespace,
    outputs: list[Path],
    started_at: str,
    manifest_path: Path,
    dry_run: bool = False,
) -> None:
    manifest = {
        "command": args.command,
        "seed": args.seed,
        "config": _resolved_config(args),
        "outputs": [str(p) for p in outputs],
        "checksums": {str(p): _sha256(p) for p in outputs},
        "started_at": started_at,
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "dry_run": dry_run,
    }
    _atomic_write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _split_holdout(conversations, fraction: float, seed: int):
    """Deterministic conversation-level split; returns (train, heldout)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"holdout fraction must be in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(len(conversations))
    n_eval = max(1, int(round(fraction * len(conversations))))
    if n_eval >= len(conversations):
        raise ValueError("corpus too small to hold out a validation split")
    eval_idx = set(order[:n_eval].tolist())
    train = [c for i, c in enumerate(conversations) if i not in eval_idx]
    heldout = [c for i, c in enumerate(conversations) if i in eval_idx]
    return train, heldout


def cmd_build_vocab(args) -> list[Path]:
    conversations = read_conversations(args.corpus)
    utterances = (u for conv in conversations for u in conv)
    vocab = Vocabulary.build(utterances, args.max_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    _say(args, f"wrote {len(vocab)} tokens to {out}")
    return [out]


def cmd_extract_fragments(args) -> list[Path]:
    conversations = read_conversations(args.corpus)
    fragments = list(extract_fragments(conversations, args.context_turns, args.max_context))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_fragments(fragments, out)
    _say(args, f"wrote {len(fragments)} fragments to {out}")
    return [out]


def _load_fragments_for(args, conversations) -> list[ConversationFragment]:
    return list(extract_fragments(conversations, args.context_turns, args.max_context))


def cmd_train(args) -> list[Path]:
    vocab = Vocabulary.load(args.vocab)
    conversations = read_conversations(args.corpus)
    if args.val_corpus is not None:
        train_convs = conversations
        val_convs = read_conversations(args.val_corpus)
    else:
        train_convs, val_convs = _split_holdout(conversations, args.holdout_fraction, args.seed)
    train_frags = _load_fragments_for(args, train_convs)
    val_frags = _load_fragments_for(args, val_convs)
    if not train_frags:
        raise ValueError(f"no training fragments with {args.context_turns} context turns")
    model_config = ModelConfig(
        architecture=args.arch,
        vocab_size=len(vocab),
        emb_dim=args.emb_dim,
        hidden_dim=args.hidden_dim,
        attn_dim=args.attn_dim,
    )
    params = init_parameters(model_config, args.seed)
    train_enc = [encode_fragment(f, vocab, args.arch) for f in train_frags]
    val_enc = [encode_fragment(f, vocab, args.arch) for f in val_frags]
    out_dir = Path(args.out_dir)
    result = train(_train_config(args), params, train_enc, val_enc, out_dir=out_dir)
    _say(
        args,
        f"trained {result.state.step} steps ({result.stop_reason}); "
        f"best val loss {result.state.best_val_loss!r}",
    )
    outputs = [out_dir / MODEL_FINAL, out_dir / TRAIN_STATE, out_dir / LOSS_LOG]
    if (out_dir / MODEL_BEST).exists():
        outputs.insert(0, out_dir / MODEL_BEST)
    return outputs


def cmd_eval(args) -> list[Path]:
    params = checkpoint.load_model(args.checkpoint)
    vocab = Vocabulary.load(args.vocab)
    conversations = read_conversations(args.corpus)
    fragments = _load_fragments_for(args, conversations)
    encoded = [encode_fragment(f, vocab, params.architecture) for f in fragments]
    report = evaluate.perplexity(
        params, encoded, args.context_turns, dataset_id=Path(args.corpus).name
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        evaluate.write_eval_report(report, f)
    _say(args, f"perplexity {report.perplexity:.4f} over {report.fragment_count} fragments")
    return [out]


def cmd_generate(args) -> list[Path]:
    params = checkpoint.load_model(args.checkpoint)
    vocab = Vocabulary.load(args.vocab)
    fragments = read_fragments(args.fragments)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for fragment in fragments:
            response = evaluate.generate_greedy(params, vocab, fragment.context, args.max_len)
            f.write(" ".join(response.tokens) + "\n")
    _say(args, f"wrote {len(fragments)} responses to {out}")
    return [out]


def cmd_analyze(args) -> list[Path]:
    from .corpus import normalize

    lexicon = markers.MarkerLexicon.from_file(args.lexicon) if args.lexicon else None
    if (args.utterances is None) == (args.checkpoint is None):
        raise ValueError("analyze needs exactly one of --utterances or --checkpoint")
    if args.utterances is not None:
        with open(args.utterances, encoding="utf-8") as f:
            utterances = [u for u in (normalize(line) for line in f) if u is not None]
        context_turns = args.context_turns
    else:
        if args.vocab is None or args.corpus is None:
            raise ValueError("--checkpoint analysis needs --vocab and --corpus")
        params = checkpoint.load_model(args.checkpoint)
        vocab = Vocabulary.load(args.vocab)
        conversations = read_conversations(args.corpus)
        fragments = _load_fragments_for(args, conversations)
        if not fragments:
            raise ValueError(f"no fragments with {args.context_turns} context turns")
        utterances = []
        for fragment in fragments[: args.sample_size]:
            response = evaluate.generate_greedy(params, vocab, fragment.context, args.max_len)
            utterances.append(Utterance(tuple(response.tokens)))
        context_turns = args.context_turns
    rep = markers.report(utterances, lexicon, context_turns)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        markers.write_marker_report(rep, f)
    outputs = [out]
    if args.per_line is not None:
        per_line = Path(args.per_line)
        with open(per_line, "w", encoding="utf-8") as f:
            f.write("utterance\tdeixis\tanaphora\tlogical_consequence\n")
            for utterance in utterances:
                flags = markers.detect(utterance, lexicon)
                f.write(
                    f"{utterance.text()}\t{int(flags.deixis)}\t{int(flags.anaphora)}\t"
                    f"{int(flags.logical_consequence)}\n"
                )
        outputs.append(per_line)
    _say(args, f"analyzed {rep.sample_size} utterances")
    return outputs


def cmd_sweep(args) -> list[Path]:
    conversations = read_conversations(args.corpus)
    if args.eval_corpus is not None:
        train_convs = conversations
        eval_convs = read_conversations(args.eval_corpus)
    else:
        train_convs, eval_convs = _split_holdout(conversations, args.holdout_fraction, args.seed)
    architectures = [a.strip() for a in args.architectures.split(",") if a.strip()]
    for arch in architectures:
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}")
    n_values = [int(n) for n in args.n_values.split(",") if n.strip()]
    cells = evaluate.sensitivity_sweep(
        train_convs,
        eval_convs,
        architectures,
        n_values,
        _train_config(args),
        vocab_cap=args.vocab_cap,
        emb_dim=args.emb_dim,
        hidden_dim=args.hidden_dim,
        attn_dim=args.attn_dim,
        max_context=args.max_context,
        final_target_only=args.final_target_only,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        evaluate.write_sweep_table(cells, f)
    done = sum(1 for c in cells if c.report is not None)
    _say(args, f"swept {done}/{len(cells)} cells into {out}")
    return [out]


def _manifest_path(args: argparse.Namespace) -> Path:
    if getattr(args, "out_dir", None) is not None:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        return out_dir / "manifest.json"
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out.with_name(out.name + ".manifest.json")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started_at = datetime.now(timezone.utc).isoformat()
    try:
        manifest_path = _manifest_path(args)
        if args.manifest_only:
            write_manifest(args, [], started_at, manifest_path, dry_run=True)
            _say(args, f"wrote manifest {manifest_path}")
            return 0
        outputs = args.func(args)
        write_manifest(args, outputs, started_at, manifest_path)
        return 0
    except TrainingError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
