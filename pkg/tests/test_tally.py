import math
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from modestop.tally import VoteTally, distribution_stats, mode, normalize_answer, top_two


@pytest.mark.parametrize(
    "raw,expected",
    [
        ("127", "127"),
        ("  127\n", "127"),
        ("0127", "127"),
        ("127.0", "127"),
        ("127.50", "127.5"),
        ("+5", "5"),
        ("-0.0", "0"),
        (".5", "0.5"),
        ("1e3", "1e3"),
        ("99/28", "99/28"),
        ("  The   Answer ", "the answer"),
        ("B", "b"),
        ("", ""),
    ],
)
def test_normalize_answer(raw, expected):
    assert normalize_answer(raw) == expected


@given(st.text(max_size=30))
def test_normalize_is_idempotent(raw):
    once = normalize_answer(raw)
    assert normalize_answer(once) == once


@given(st.integers(-(10**12), 10**12))
def test_integers_render_canonically(n):
    assert normalize_answer(str(n)) == str(n)
    assert normalize_answer(f"{n}.000") == str(n)


class TestVoteTally:
    def test_counts_and_first_seen(self):
        t = VoteTally(["b", "a", "b", "c"])
        assert t.counts == {"b": 2, "a": 1, "c": 1}
        assert t.first_seen == {"b": 0, "a": 1, "c": 3}
        assert t.total == 4
        assert len(t) == 3 and "a" in t and "z" not in t

    def test_empty(self):
        t = VoteTally()
        assert t.top_two() == top_two(t)
        top = t.top_two()
        assert (top.first_key, top.n_first, top.second_key, top.n_second) == (None, 0, None, 0)
        assert t.mode() is None

    def test_single_answer_has_no_runner_up(self):
        top = VoteTally(["x", "x"]).top_two()
        assert (top.first_key, top.n_first, top.second_key, top.n_second) == ("x", 2, None, 0)

    def test_tie_goes_to_earliest(self):
        t = VoteTally(["b", "a", "a", "b"])
        top = t.top_two()
        assert top.first_key == "b" and top.second_key == "a"
        assert mode(t) == "b"

    def test_ranked(self):
        t = VoteTally(["c", "a", "b", "a", "b", "d"])
        assert t.ranked() == [("a", 2), ("b", 2), ("c", 1), ("d", 1)]

    @given(st.lists(st.sampled_from("abcde"), max_size=60))
    def test_top_two_agrees_with_sorting(self, answers):
        t = VoteTally(answers)
        top = t.top_two()
        ranked = t.ranked()
        if not ranked:
            assert top.first_key is None
            return
        assert (top.first_key, top.n_first) == ranked[0]
        if len(ranked) > 1:
            assert (top.second_key, top.n_second) == ranked[1]
        assert top.n_first >= top.n_second
        assert sum(t.counts.values()) == t.total == len(answers)

    @given(st.lists(st.sampled_from("abc"), min_size=1, max_size=40))
    def test_matches_counter(self, answers):
        assert VoteTally(answers).counts == dict(Counter(answers))


class TestDistributionStats:
    def test_basic(self):
        s = distribution_stats(VoteTally(["a"] * 6 + ["b"] * 3 + ["c"]))
        assert (s.n_first, s.n_second, s.total, s.n_distinct) == (6, 3, 10, 3)
        assert s.p1 == 0.6 and s.p2 == 0.3
        assert s.p1_over_p2 == pytest.approx(2.0)
        assert s.p1_share == pytest.approx(6 / 9)
        expected = -(0.6 * math.log(0.6) + 0.3 * math.log(0.3) + 0.1 * math.log(0.1))
        assert s.entropy_nats == pytest.approx(expected)

    def test_unanimous(self):
        s = distribution_stats(VoteTally(["z"] * 5))
        assert s.p1_over_p2 == math.inf
        assert s.entropy_nats == 0.0 and math.copysign(1.0, s.entropy_nats) == 1.0

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            distribution_stats(VoteTally())

    @given(st.lists(st.sampled_from("abcdef"), min_size=1, max_size=50))
    def test_entropy_bounds(self, answers):
        s = distribution_stats(VoteTally(answers))
        assert 0.0 <= s.entropy_nats <= math.log(s.n_distinct) + 1e-12
        assert s.p1 >= s.p2
