"""Attribute metrics against hand-computed values, loader formats, and the
score CSV round trip."""

import numpy as np
import pytest

from degenlab import corpus as C
from degenlab.clustering import ClusterAssignment
from degenlab.errors import (
    ContractViolation,
    DataFormatError,
    EmptyInput,
    MissingCount,
    TooShort,
)


class TestAvgFrequency:
    def test_single_token(self):
        assert C.avg_frequency(["a"], {"a": 7}) == 7.0

    def test_hand_mean(self):
        assert C.avg_frequency(["a", "b"], {"a": 10, "b": 2}) == 6.0

    def test_hand_mean_with_repeats(self):
        assert C.avg_frequency(["a", "a", "b"], {"a": 10, "b": 2}) == pytest.approx(22 / 3)

    def test_unseen_token(self):
        with pytest.raises(MissingCount):
            C.avg_frequency(["a", "z"], {"a": 1})


class TestRepetition:
    def test_all_unique(self):
        assert C.repetition_attr(["a", "b", "c"]) == 0.0

    def test_hand_value(self):
        assert C.repetition_attr(["a", "b", "a", "a"]) == 0.5

    def test_constant_sequence(self):
        assert C.repetition_attr(["a"] * 4) == 0.75

    def test_empty_rejected(self):
        with pytest.raises(EmptyInput):
            C.repetition_attr([])

    def test_multiset_bound(self):
        """Rep never exceeds (len - distinct) / len; equality when duplicates trail."""
        rng = np.random.default_rng(0)
        for _ in range(200):
            seq = list(rng.integers(0, 6, size=rng.integers(1, 15)))
            bound = (len(seq) - len(set(seq))) / len(seq)
            assert C.repetition_attr(seq) <= bound + 1e-12
            trailing = sorted(seq)
            assert C.repetition_attr(trailing) == pytest.approx(bound)


class TestContextOverlap:
    def test_hand_bigram_sets(self):
        assert C.context_overlap("a b c".split(), "a b d".split()) == 0.5

    def test_subset_is_one(self):
        assert C.context_overlap("x a b c y".split(), "a b c".split()) == 1.0

    def test_disjoint_is_zero(self):
        assert C.context_overlap("a b".split(), "c d".split()) == 0.0

    def test_too_short_rejected(self):
        with pytest.raises(TooShort):
            C.context_overlap(["a", "b"], ["a"], n=2)

    def test_contiguous_substring_property(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            x = list(rng.integers(0, 9, size=rng.integers(4, 12)))
            start = rng.integers(0, len(x) - 3)
            y = x[start:start + 3]
            assert C.context_overlap(x, y, n=2) == 1.0


class TestSourceEntropy:
    def test_single_context_cluster_is_zero(self):
        ctx = ClusterAssignment({"a": 0, "b": 0, "c": 0})
        resp = ClusterAssignment({"a": 1, "b": 1, "c": 2})
        ent = C.source_entropy(["a", "b", "c"], ctx, resp)
        assert ent == {"a": 0.0, "b": 0.0, "c": 0.0}

    def test_two_equal_context_clusters_is_one_bit(self):
        ctx = ClusterAssignment({"a": 0, "b": 1})
        resp = ClusterAssignment({"a": 5, "b": 5})
        ent = C.source_entropy(["a", "b"], ctx, resp)
        assert ent["a"] == pytest.approx(1.0)

    def test_four_uniform_context_clusters_is_two_bits(self):
        ids = ["e1", "e2", "e3", "e4"]
        ctx = ClusterAssignment({i: k for k, i in enumerate(ids)})
        resp = ClusterAssignment({i: 0 for i in ids})
        ent = C.source_entropy(ids, ctx, resp)
        assert all(v == pytest.approx(2.0) for v in ent.values())

    def test_bounded_by_log2_context_clusters(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(2, 20))
            ids = [f"e{i}" for i in range(n)]
            n_ctx = int(rng.integers(1, 6))
            ctx = ClusterAssignment({i: int(rng.integers(n_ctx)) for i in ids})
            resp = ClusterAssignment({i: int(rng.integers(3)) for i in ids})
            ent = C.source_entropy(ids, ctx, resp)
            assert max(ent.values()) <= np.log2(n_ctx) + 1e-12

    def test_missing_membership_rejected(self):
        with pytest.raises(ContractViolation):
            C.source_entropy(["a"], ClusterAssignment({}), ClusterAssignment({"a": 0}))


class TestSplitByAttribute:
    def _scores(self, pairs):
        return [C.AttributeScore(i, "m", v) for i, v in pairs]

    def test_basic_split(self):
        top, bottom = C.split_by_attribute(
            self._scores([("a", 1), ("b", 2), ("c", 3), ("d", 4)]), 1)
        assert top == {"d"} and bottom == {"a"}

    def test_tie_break_by_id(self):
        top, bottom = C.split_by_attribute(
            self._scores([("a", 1), ("b", 1), ("c", 1), ("d", 1)]), 2)
        assert bottom == {"a", "b"} and top == {"c", "d"}

    def test_half_split_partitions(self):
        scores = self._scores([(f"x{i}", i) for i in range(10)])
        top, bottom = C.split_by_attribute(scores, 5)
        assert len(top) == len(bottom) == 5 and not top & bottom

    def test_oversized_n_rejected(self):
        with pytest.raises(ContractViolation):
            C.split_by_attribute(self._scores([("a", 1), ("b", 2)]), 2)

    def test_disjoint_property(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            count = int(rng.integers(2, 30))
            scores = self._scores(
                [(f"e{i}", float(rng.integers(0, 4))) for i in range(count)])
            n = int(rng.integers(1, count // 2 + 1))
            top, bottom = C.split_by_attribute(scores, n)
            assert len(top) == len(bottom) == n and not top & bottom


class TestLoaders:
    def test_lm_blocks(self, tmp_path):
        p = tmp_path / "lm.txt"
        p.write_text("a b c\nd e\n\nf g\n\n\nh\n")
        docs = C.read_lm_documents(p)
        assert docs == [["a", "b", "c", "d", "e"], ["f", "g"], ["h"]]

    def test_dialogue_records_and_length_cap(self, tmp_path):
        p = tmp_path / "d.tsv"
        long_resp = " ".join(["x"] * 101)
        p.write_text(f"hi there __eou__ how are you\tfine thanks\nhello\t{long_resp}\n")
        recs = C.read_dialogue_records(p, max_len=100)
        assert len(recs) == 1
        assert recs[0][0] == "hi there __eou__ how are you".split()

    def test_malformed_dialogue_line_number(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("ok line\tresp\nno tabs here\n")
        with pytest.raises(DataFormatError, match="line 2"):
            C.read_dialogue_records(p)

    def test_summarization_records(self, tmp_path):
        p = tmp_path / "s.tsv"
        p.write_text("the article body\tthe summary\n")
        recs = C.read_summarization_records(p)
        assert recs == [(["the", "article", "body"], ["the", "summary"])]

    def test_char_tokenizer(self):
        assert C.tokenize("ab c", level="char") == ["a", "b", "c"]


class TestVocabAndExamples:
    def test_vocab_round_trip(self):
        v = C.Vocab.from_sequences([["b", "a", "b"]])
        ids = v.encode(["b", "a", "zzz"])
        assert list(ids[:2]) == [v.index["b"], v.index["a"]]
        assert ids[2] == C.Vocab.UNK
        assert v.decode(ids)[:2] == ["b", "a"]

    def test_dialogue_examples_append_eos(self):
        v = C.Vocab.from_sequences([["hi", "yes"]])
        ex = C.build_examples_dialogue([(["hi"], ["yes"])], v)[0]
        assert ex.y[-1] == C.Vocab.EOS

    def test_empty_target_rejected(self):
        with pytest.raises(ContractViolation):
            C.Example(id="e", x=np.array([]), y=np.array([]))

    def test_batches_cover_everything_deterministically(self):
        v = C.Vocab.from_sequences([["a"]])
        exs = [C.Example(id=f"e{i}", x=np.array([]), y=np.array([2])) for i in range(10)]
        def order(seed):
            rng = np.random.default_rng(seed)
            return [ex.id for b in C.iter_batches(exs, 3, rng) for ex in b]
        assert sorted(order(0)) == sorted(ex.id for ex in exs)
        assert order(5) == order(5)
        assert order(5) != order(6)


class TestScoresCsv:
    def test_round_trip(self, tmp_path):
        scores = [C.AttributeScore("e1", "repetition", 0.25),
                  C.AttributeScore("e2", "avg_frequency", 7.5)]
        path = tmp_path / "attrs.csv"
        C.write_scores_csv(path, scores)
        back = C.read_scores_csv(path)
        assert back == scores

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("nope,nope,nope\n")
        with pytest.raises(DataFormatError):
            C.read_scores_csv(path)
