import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asrfuse.core import Hypothesis
from asrfuse.metrics import (
    EditBreakdown,
    ReportAccumulator,
    cer_pair,
    corpus_report,
    edit_distance,
    levenshtein,
    wer,
)

from .oracles import oracle_edit_distance

words = st.lists(st.sampled_from(["a", "b", "c", "dd"]), max_size=7)


class TestLevenshtein:
    def test_known_values(self):
        assert levenshtein([], []) == 0
        assert levenshtein(list("kitten"), list("sitting")) == 3
        assert levenshtein(["a", "b"], ["a", "b"]) == 0
        assert levenshtein(["a"], []) == 1

    @given(words, words)
    def test_matches_exhaustive_oracle(self, a, b):
        assert levenshtein(a, b) == oracle_edit_distance(a, b)

    @given(words, words)
    def test_symmetric(self, a, b):
        assert levenshtein(a, b) == levenshtein(b, a)

    @given(words, words, words)
    @settings(max_examples=60)
    def test_triangle_inequality(self, a, b, c):
        assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)

    @given(words)
    def test_identity(self, a):
        assert levenshtein(a, a) == 0


class TestEditDistance:
    def test_breakdown_sums(self):
        bd = edit_distance(["a", "b", "c"], ["a", "x", "c", "y"])
        assert bd == EditBreakdown(
            hits=2, substitutions=1, deletions=0, insertions=1, ref_len=3
        )
        assert bd.distance == 2

    def test_invariant_enforced(self):
        with pytest.raises(ValueError):
            EditBreakdown(hits=1, substitutions=1, deletions=0, insertions=0, ref_len=5)
        with pytest.raises(ValueError):
            EditBreakdown(hits=-1, substitutions=1, deletions=0, insertions=0, ref_len=0)

    @given(words, words)
    def test_distance_matches_levenshtein(self, a, b):
        bd = edit_distance(a, b)
        assert bd.distance == levenshtein(a, b)
        assert bd.hits + bd.substitutions + bd.deletions == len(a)
        assert bd.hits + bd.substitutions + bd.insertions == len(b)


class TestWer:
    def test_simple(self):
        res = wer(["the", "cat", "sat"], ["the", "bat", "sat", "down"])
        assert res.value == pytest.approx(2 / 3)
        assert not res.undefined_ref

    def test_empty_ref_nonempty_hyp_is_undefined(self):
        res = wer([], ["word"])
        assert math.isinf(res.value)
        assert res.undefined_ref

    def test_empty_both_is_zero(self):
        res = wer([], [])
        assert res.value == 0.0
        assert not res.undefined_ref

    def test_float_conversion(self):
        assert float(wer(["a", "b"], ["a", "b"])) == 0.0


class TestCerPair:
    def test_identical_after_normalization_is_zero(self):
        assert cer_pair("Hello, World!", "hello world") == 0.0

    def test_empty_both(self):
        assert cer_pair("", "") == 0.0
        assert cer_pair("...", "!?") == 0.0

    def test_max_norm_is_symmetric(self):
        assert cer_pair("abcd", "abc") == cer_pair("abc", "abcd")
        assert cer_pair("abcd", "abc") == pytest.approx(1 / 4)

    def test_ref_first_norm_is_asymmetric(self):
        assert cer_pair("abc", "abcd", norm="ref_first") == pytest.approx(1 / 3)
        assert cer_pair("abcd", "abc", norm="ref_first") == pytest.approx(1 / 4)

    def test_unknown_norm_rejected(self):
        with pytest.raises(ValueError):
            cer_pair("a", "b", norm="min")

    def test_accepts_hypotheses(self):
        a = Hypothesis.from_raw("x", "all right")
        b = Hypothesis.from_raw("y", "all bright")
        assert cer_pair(a, b) > 0.0
        assert cer_pair(a, a) == 0.0

    def test_spacing_is_canonical(self):
        assert cer_pair("a   b", "a b") == 0.0

    @given(st.text(max_size=20), st.text(max_size=20))
    def test_bounded_and_symmetric(self, a, b):
        v = cer_pair(a, b)
        assert 0.0 <= v <= 1.0
        assert v == cer_pair(b, a)


def _acc(pairs, dataset="d", system="s"):
    acc = ReportAccumulator()
    for ref, hyp in pairs:
        acc.add(
            dataset,
            system,
            ref.split() if ref is not None else None,
            hyp.split() if hyp is not None else None,
        )
    return acc


class TestReportAccumulator:
    def test_micro_average(self):
        acc = _acc([("a b c d", "a b c d"), ("x y", "x z")])
        row = acc.report().rows[0]
        assert row.wer_pct == "16.67"
        assert row.errors == 1
        assert row.ref_len == 6
        assert row.utts == 2

    def test_missing_hypothesis_counted(self):
        acc = _acc([("a b", None)])
        row = acc.report().rows[0]
        assert row.missing == 1
        assert row.utts == 0
        assert row.wer_pct == "0.00"

    def test_empty_reference_skipped(self):
        acc = _acc([("", "something"), (None, "more"), ("a", "a")])
        rep = acc.report()
        assert rep.skipped_no_ref == 2
        assert rep.rows[0].utts == 1

    def test_empty_report(self):
        assert ReportAccumulator().report().rows == ()

    def test_merge_equals_whole(self):
        pairs = [(f"tok{i} tok{i + 1}", f"tok{i} tok{i + 2}") for i in range(20)]
        whole = _acc(pairs)
        left = _acc(pairs[:7])
        right = _acc(pairs[7:])
        left.merge(right)
        assert left.report().to_csv() == whole.report().to_csv()

    @given(
        st.lists(
            st.tuples(
                st.sampled_from(["d1", "d2"]),
                st.sampled_from(["s1", "s2"]),
                st.lists(st.sampled_from(["a", "b"]), max_size=5),
                st.one_of(st.none(), st.lists(st.sampled_from(["a", "b"]), max_size=5)),
            ),
            max_size=24,
        ),
        st.integers(min_value=0, max_value=24),
    )
    @settings(max_examples=60)
    def test_merge_is_exact_at_any_split(self, items, cut):
        cut = min(cut, len(items))
        whole = ReportAccumulator()
        left = ReportAccumulator()
        right = ReportAccumulator()
        for i, (d, s, ref, hyp) in enumerate(items):
            whole.add(d, s, ref, hyp)
            (left if i < cut else right).add(d, s, ref, hyp)
        left.merge(right)
        assert left.report().to_csv() == whole.report().to_csv()
        assert left.skipped_no_ref == whole.skipped_no_ref

    def test_csv_header(self):
        text = _acc([("a", "a")]).report().to_csv()
        assert text.splitlines()[0] == "dataset,system,wer_pct,errors,ref_len,utts,missing"

    def test_totals_row_only_with_multiple_datasets(self):
        one = _acc([("a", "a")]).report(totals=True)
        assert all(r.dataset != "TOTAL" for r in one.rows)
        acc = _acc([("a", "a")], dataset="d1")
        acc.add("d2", "s", ["a", "b"], ["a", "c"])
        acc.add("d2", "s", ["a", "b"], ["a", "b"])
        rows = acc.report(totals=True).rows
        total = [r for r in rows if r.dataset == "TOTAL"]
        assert len(total) == 1
        assert total[0].ref_len == 5
        assert total[0].errors == 1
        assert total[0].wer_pct == "20.00"

    def test_markdown_table_shape(self):
        acc = _acc([("a b", "a b")], dataset="dev")
        acc.add("dev", "other", ["a", "b"], ["a", "c"])
        md = acc.report().to_markdown()
        lines = md.splitlines()
        assert lines[0] == "| dataset | other | s |"
        assert lines[2] == "| dev | 50.00 | 0.00 |"

    def test_two_decimal_cells(self):
        acc = _acc([("a b c", "a b x")])
        assert acc.report().rows[0].wer_pct == "33.33"


class TestCorpusReport:
    def test_one_shot_helper(self):
        rep = corpus_report(
            [
                ("d", "s", ["a", "b"], ["a", "b"]),
                ("d", "s", ["c"], None),
                ("d", "s", [], ["x"]),
            ]
        )
        row = rep.rows[0]
        assert (row.utts, row.missing) == (1, 1)
        assert rep.skipped_no_ref == 1
