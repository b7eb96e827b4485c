"""Marker detection rules, fixture annotations and reports."""

import io
from pathlib import Path

import pytest

from dialogrnn.corpus import ConversationFragment, Utterance, Vocabulary, encode_fragment
from dialogrnn.markers import (
    CATEGORIES,
    MarkerFlags,
    MarkerLexicon,
    analyze_model,
    detect,
    report,
    write_marker_report,
)
from dialogrnn.model import ModelConfig, init_parameters

FIXTURES = Path(__file__).parent / "data" / "marker_fixtures.tsv"


def load_fixtures():
    rows = []
    for line in FIXTURES.read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        block, text, deixis, anaphora, logical = line.split("\t")
        rows.append((block, text, bool(int(deixis)), bool(int(anaphora)), bool(int(logical))))
    return rows


class TestDetectFixtures:
    def test_fixture_is_complete(self):
        rows = load_fixtures()
        blocks = {r[0] for r in rows}
        assert blocks == {f"out{i}" for i in range(1, 7)} | {f"in{i}" for i in range(1, 7)}

    @pytest.mark.parametrize("block,text,deixis,anaphora,logical", load_fixtures())
    def test_hand_annotations(self, block, text, deixis, anaphora, logical):
        flags = detect(text.split())
        assert flags == MarkerFlags(deixis, anaphora, logical), text


class TestDetectRules:
    def test_whole_token_matching_only(self):
        # "there" inside "therefore" must not fire deixis
        flags = detect("therefore we go".split())
        assert flags.deixis is False
        assert flags.logical_consequence is True

    def test_substrings_do_not_fire(self):
        assert detect("the other one".split()) == MarkerFlags(False, False, False)
        assert detect("thistle in otherwise2".split()) == MarkerFlags(False, False, False)

    def test_they_fires_but_the_does_not(self):
        flags = detect("they said the thesis".split())
        assert flags.anaphora is True
        assert flags.deixis is False
        assert flags.logical_consequence is False

    def test_cue_phrase_only_at_position_zero(self):
        assert detect("i think , but maybe".split()).logical_consequence is False
        assert detect("but i think".split()).logical_consequence is True

    def test_multiword_cue_longest_match(self):
        assert detect("after all is lost".split()).logical_consequence is True
        # "after" alone is not a cue phrase
        assert detect("after the war".split()).logical_consequence is False
        assert detect("in addition we won".split()).logical_consequence is True
        assert detect("in the house".split()).logical_consequence is False

    def test_then_fires_both_categories(self):
        flags = detect("then we left".split())
        assert flags.deixis is True
        assert flags.logical_consequence is True

    def test_so_fires_logical_and_that_fires_deixis(self):
        flags = detect("so that is it".split())
        assert flags.logical_consequence is True
        assert flags.deixis is True

    def test_case_insensitive(self):
        assert detect(["However", "yes"]).logical_consequence is True
        assert detect(["HIM"]).anaphora is True

    def test_accepts_utterance_objects(self):
        assert detect(Utterance(("him",))).anaphora is True


class TestReport:
    def test_percentages(self):
        utterances = [["here"], ["nothing"], ["words"], ["more"]]
        rep = report(utterances)
        assert rep.sample_size == 4
        assert rep.counts["deixis"] == 1
        assert rep.percentage("deixis") == 25.0

    def test_degenerate_all_anaphora(self):
        rep = report([["him"]] * 5)
        assert rep.percentage("anaphora") == 100.0
        assert rep.percentage("deixis") == 0.0
        assert rep.percentage("logical_consequence") == 0.0

    def test_categories_independent(self):
        rep = report([["then", "him"]])
        assert rep.counts["deixis"] == 1
        assert rep.counts["anaphora"] == 1
        assert rep.counts["logical_consequence"] == 1

    def test_counts_recompute_to_percentages(self):
        rows = load_fixtures()
        rep = report([text.split() for _, text, *_ in rows])
        for category in CATEGORIES:
            assert rep.percentage(category) == 100.0 * rep.counts[category] / rep.sample_size

    def test_empty_stream_rejected(self):
        with pytest.raises(ValueError):
            report([])

    def test_sample_size_one_is_zero_or_hundred(self):
        rep = report([["then"]])
        for category in CATEGORIES:
            assert rep.percentage(category) in (0.0, 100.0)


class TestLexiconFile:
    def test_override_roundtrip(self, tmp_path):
        path = tmp_path / "lexicon.txt"
        path.write_text(
            "[deixis]\nyonder\n[anaphora]\nit\n[cue_phrases]\nhence\nas a result\n",
            encoding="utf-8",
        )
        lex = MarkerLexicon.from_file(path)
        assert detect(["yonder"], lex).deixis is True
        assert detect(["it"], lex).anaphora is True
        assert detect("as a result yes".split(), lex).logical_consequence is True
        assert detect(["here"], lex).deixis is False  # defaults replaced

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "lexicon.txt"
        path.write_text("[nouns]\ncat\n", encoding="utf-8")
        with pytest.raises(ValueError):
            MarkerLexicon.from_file(path)

    def test_entry_before_section_rejected(self, tmp_path):
        path = tmp_path / "lexicon.txt"
        path.write_text("cat\n", encoding="utf-8")
        with pytest.raises(ValueError):
            MarkerLexicon.from_file(path)

    def test_default_lists(self):
        lex = MarkerLexicon.default()
        assert "here" in lex.deixis and "that" in lex.deixis
        assert "theirs" in lex.anaphora
        assert ("after", "all") in lex.cue_phrases
        assert ("then",) in lex.cue_phrases  # in both cue_phrases and deixis


class TestAnalyzeModel:
    def test_untrained_rates_near_random_token_strings(self):
        """Untrained outputs hit the lexicon at roughly the rate of random
        token strings over the same vocabulary (sanity band, not exact)."""
        import numpy as np

        from dialogrnn.evaluate import generate_greedy

        words = ["him", "there", "alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"]
        vocab = Vocabulary.build([Utterance(tuple(words))], 20)
        contexts = [(Utterance((words[i % 10], words[(i * 3) % 10])),) for i in range(10)]
        outputs = []
        for seed in range(64):
            params = init_parameters(ModelConfig("flat", len(vocab), 8, 8, 8), seed)
            for ctx in contexts:
                outputs.append(generate_greedy(params, vocab, ctx, max_len=3).tokens)
        model_rep = report(outputs)

        rng = np.random.default_rng(99)
        content = vocab.id_to_token[4:]
        mc_rep = report([list(rng.choice(content, size=len(o))) for o in outputs])
        for category in CATEGORIES:
            delta = abs(model_rep.percentage(category) - mc_rep.percentage(category))
            assert delta <= 25.0, (category, model_rep.counts, mc_rep.counts)

    def test_deterministic_and_bounded(self):
        vocab = Vocabulary.build([Utterance(("him", "there", "ok"))], 10)
        params = init_parameters(ModelConfig("flat", len(vocab), 4, 4, 4), 9)
        frag = ConversationFragment((Utterance(("ok",)),), Utterance(("him",)))
        rep1 = analyze_model(params, vocab, [frag] * 3, sample_size=2)
        rep2 = analyze_model(params, vocab, [frag] * 3, sample_size=2)
        assert rep1 == rep2
        assert rep1.sample_size == 2

    def test_empty_fragments_rejected(self):
        vocab = Vocabulary.build([Utterance(("a",))], 10)
        params = init_parameters(ModelConfig("flat", len(vocab), 4, 4, 4), 9)
        with pytest.raises(ValueError):
            analyze_model(params, vocab, [], sample_size=5)


class TestReportFile:
    def test_format(self):
        rep = report([["then", "him"], ["nothing"]], context_turns=3)
        out = io.StringIO()
        write_marker_report(rep, out)
        lines = out.getvalue().splitlines()
        assert lines[0] == "# N=3"
        assert lines[1] == "category\tcount\tsample\tpercentage"
        assert lines[2].split("\t")[0] == "deixis"
        assert float(lines[2].split("\t")[3]) == 50.0
