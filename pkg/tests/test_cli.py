"""End-to-end command line runs in temp directories."""

import json
import math

import pytest

from dialogrnn import checkpoint
from dialogrnn.cli import main
from dialogrnn.corpus import Vocabulary, read_fragments
from dialogrnn.model import ModelConfig, zero_parameters

CORPUS = """\
hello there friend
hi hello
good morning

what time is it
noon already
time flies
see you later
"""


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text(CORPUS, encoding="utf-8")
    return path


def run(*argv):
    return main([str(a) for a in argv])


class TestBuildVocab:
    def test_tiny_corpus_line_count(self, tmp_path):
        corpus = tmp_path / "tiny.txt"
        corpus.write_text("aa bb\ncc aa\n", encoding="utf-8")
        out = tmp_path / "vocab.txt"
        assert run("build-vocab", "--corpus", corpus, "--out", out) == 0
        lines = out.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 7  # 4 reserved + 3 tokens
        assert lines[:4] == ["PAD", "GO", "EOS", "UNK"]
        assert lines[4] == "aa"  # most frequent first

    def test_max_size_truncates(self, tmp_path, corpus_file):
        out = tmp_path / "vocab.txt"
        assert run("build-vocab", "--corpus", corpus_file, "--max-size", 6, "--out", out) == 0
        assert len(out.read_text(encoding="utf-8").splitlines()) == 6

    def test_rerun_byte_identical(self, tmp_path, corpus_file):
        out1, out2 = tmp_path / "v1.txt", tmp_path / "v2.txt"
        run("build-vocab", "--corpus", corpus_file, "--out", out1)
        run("build-vocab", "--corpus", corpus_file, "--out", out2)
        assert out1.read_bytes() == out2.read_bytes()

    def test_manifest_written_with_checksums(self, tmp_path, corpus_file):
        out = tmp_path / "vocab.txt"
        run("--quiet", "build-vocab", "--corpus", corpus_file, "--out", out)
        manifest = json.loads((tmp_path / "vocab.txt.manifest.json").read_text())
        assert manifest["command"] == "build-vocab"
        assert manifest["seed"] == 0
        assert str(out) in manifest["checksums"]
        assert manifest["checksums"][str(out)].startswith("sha256:")
        assert manifest["config"]["max_size"] == 40000

    def test_unreadable_corpus_exits_2(self, tmp_path, capsys):
        code = run("build-vocab", "--corpus", tmp_path / "missing.txt", "--out", tmp_path / "v")
        assert code == 2
        assert "error" in capsys.readouterr().err


class TestExtractFragments:
    def test_writes_fragment_file(self, tmp_path, corpus_file):
        out = tmp_path / "frags.tsv"
        assert run("extract-fragments", "--corpus", corpus_file, "--context-turns", 1, "--out", out) == 0
        frags = read_fragments(out)
        # 3-line and 4-line conversations with N=1: 2 + 3 fragments
        assert len(frags) == 5
        assert all(len(f.context) == 1 for f in frags)

    def test_boundary_not_crossed(self, tmp_path, corpus_file):
        out = tmp_path / "frags.tsv"
        run("extract-fragments", "--corpus", corpus_file, "--context-turns", 2, "--out", out)
        for frag in read_fragments(out):
            assert frag.context[0].tokens[0] != "good" or frag.target.tokens[0] != "what"


class TestMissingArgs:
    def test_missing_arch_usage_error(self, tmp_path, corpus_file):
        with pytest.raises(SystemExit) as exc:
            run("train", "--corpus", corpus_file, "--vocab", "v", "--out-dir", tmp_path)
        assert exc.value.code == 2

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            run("frobnicate")
        assert exc.value.code == 2


class TestTrainCommand:
    def test_smoke_train_writes_artifacts(self, tmp_path, corpus_file):
        vocab_path = tmp_path / "vocab.txt"
        run("build-vocab", "--corpus", corpus_file, "--out", vocab_path)
        out_dir = tmp_path / "run"
        code = run(
            "--quiet", "train",
            "--corpus", corpus_file,
            "--vocab", vocab_path,
            "--arch", "flat",
            "--context-turns", 1,
            "--holdout-fraction", 0.3,
            "--out-dir", out_dir,
            "--max-epochs", 2,
            "--checkpoint-interval", 1,
            "--emb-dim", 8, "--hidden-dim", 8, "--attn-dim", 8,
            "--batch-size", 2,
        )
        assert code == 0
        assert (out_dir / "model_final.ckpt").exists()
        assert (out_dir / "loss_log.tsv").exists()
        assert (out_dir / "train_state.bin").exists()
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["config"]["initial_lr"] == 0.5
        log_lines = (out_dir / "loss_log.tsv").read_text().splitlines()
        assert all(len(line.split("\t")) == 6 for line in log_lines)

    def test_same_seed_identical_loss_log(self, tmp_path, corpus_file):
        vocab_path = tmp_path / "vocab.txt"
        run("build-vocab", "--corpus", corpus_file, "--out", vocab_path)
        logs = []
        for name in ("r1", "r2"):
            out_dir = tmp_path / name
            run(
                "--quiet", "--seed", 9, "train",
                "--corpus", corpus_file, "--vocab", vocab_path,
                "--arch", "hierarchical", "--context-turns", 1,
                "--holdout-fraction", 0.3, "--out-dir", out_dir,
                "--max-epochs", 2, "--checkpoint-interval", 2,
                "--emb-dim", 6, "--hidden-dim", 6, "--attn-dim", 6,
            )
            logs.append((out_dir / "loss_log.tsv").read_bytes())
        assert logs[0] == logs[1]


class TestEvalCommand:
    def test_zero_checkpoint_perplexity_is_vocab_size(self, tmp_path, corpus_file):
        vocab_path = tmp_path / "vocab.txt"
        run("build-vocab", "--corpus", corpus_file, "--out", vocab_path)
        vocab = Vocabulary.load(vocab_path)
        ckpt = tmp_path / "zero.ckpt"
        checkpoint.save_model(ckpt, zero_parameters(ModelConfig("flat", len(vocab), 8, 8, 8)))
        out = tmp_path / "eval.tsv"
        code = run(
            "eval", "--checkpoint", ckpt, "--vocab", vocab_path,
            "--corpus", corpus_file, "--context-turns", 1, "--out", out,
        )
        assert code == 0
        header, row = out.read_text().splitlines()
        ppl = float(row.split("\t")[4])
        assert ppl == pytest.approx(len(vocab), abs=1e-6)


class TestGenerateCommand:
    def test_one_response_per_fragment(self, tmp_path, corpus_file):
        vocab_path = tmp_path / "vocab.txt"
        run("build-vocab", "--corpus", corpus_file, "--out", vocab_path)
        frags_path = tmp_path / "frags.tsv"
        run("extract-fragments", "--corpus", corpus_file, "--context-turns", 1, "--out", frags_path)
        vocab = Vocabulary.load(vocab_path)
        ckpt = tmp_path / "zero.ckpt"
        checkpoint.save_model(ckpt, zero_parameters(ModelConfig("flat", len(vocab), 8, 8, 8)))
        out = tmp_path / "responses.txt"
        code = run(
            "generate", "--checkpoint", ckpt, "--vocab", vocab_path,
            "--fragments", frags_path, "--max-len", 5, "--out", out,
        )
        assert code == 0
        lines = out.read_text().splitlines()
        assert len(lines) == len(read_fragments(frags_path))


class TestAnalyzeCommand:
    def test_utterance_file_report_and_per_line(self, tmp_path):
        utterances = tmp_path / "utts.txt"
        utterances.write_text(
            "we're not going to get rid of him.\nI'm sorry.\nso that is it\n",
            encoding="utf-8",
        )
        out = tmp_path / "report.tsv"
        per_line = tmp_path / "flags.tsv"
        code = run(
            "analyze", "--utterances", utterances, "--out", out, "--per-line", per_line
        )
        assert code == 0
        report_lines = out.read_text().splitlines()
        assert report_lines[1] == "category\tcount\tsample\tpercentage"
        flags = per_line.read_text().splitlines()[1:]
        assert flags[0].split("\t")[1:] == ["0", "1", "0"]  # him
        assert flags[1].split("\t")[1:] == ["0", "0", "0"]
        assert flags[2].split("\t")[1:] == ["1", "0", "1"]  # that + so

    def test_needs_exactly_one_source(self, tmp_path):
        out = tmp_path / "r.tsv"
        assert run("analyze", "--out", out) == 2


class TestManifestOnly:
    def test_dry_run_writes_manifest_only(self, tmp_path, corpus_file):
        out = tmp_path / "vocab.txt"
        code = run("--manifest-only", "build-vocab", "--corpus", corpus_file, "--out", out)
        assert code == 0
        assert not out.exists()
        manifest = json.loads((tmp_path / "vocab.txt.manifest.json").read_text())
        assert manifest["dry_run"] is True
        assert manifest["outputs"] == []


class TestManifestReplay:
    def test_recorded_config_replays_to_identical_artifact(self, tmp_path, corpus_file):
        out = tmp_path / "vocab.txt"
        run("--quiet", "--seed", 3, "build-vocab", "--corpus", corpus_file,
            "--max-size", 9, "--out", out)
        manifest = json.loads((tmp_path / "vocab.txt.manifest.json").read_text())
        cfg = manifest["config"]
        replay_out = tmp_path / "replay.txt"
        code = run(
            "--seed", manifest["seed"], cfg["command"],
            "--corpus", cfg["corpus"], "--max-size", cfg["max_size"], "--out", replay_out,
        )
        assert code == 0
        assert replay_out.read_bytes() == out.read_bytes()


class TestSweepCommand:
    def test_one_cell_sweep(self, tmp_path):
        corpus = tmp_path / "c.txt"
        words = ["ca", "cb", "cc"]
        blocks = []
        for w1 in words:
            for w2 in words:
                blocks.append(f"{w1}\n{w2}\n{w2}\n")
        corpus.write_text("\n".join(blocks), encoding="utf-8")
        out = tmp_path / "sweep.tsv"
        code = run(
            "--quiet", "sweep", "--corpus", corpus, "--architectures", "flat",
            "--n-values", "1", "--holdout-fraction", 0.25, "--out", out,
            "--max-steps", 5, "--emb-dim", 6, "--hidden-dim", 6, "--attn-dim", 6,
            "--checkpoint-interval", 2,
        )
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "architecture\tN\tperplexity\tstderr\tnote"
        assert len(lines) == 2

    def test_unknown_architecture_exits_2(self, tmp_path, corpus_file):
        code = run(
            "sweep", "--corpus", corpus_file, "--architectures", "quantum",
            "--n-values", "1", "--out", tmp_path / "s.tsv",
        )
        assert code == 2
