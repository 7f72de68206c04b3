import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _cider_oracle import FIXTURE, oracle_cider_d
from dualvision.errors import ContractError
from dualvision.metrics import (
    NGramProfile,
    cider_d,
    cider_d_scores,
    evaluate_captions,
    length_stats,
    recall_proxy,
    recall_windows,
    tokenize,
)


def test_cider_matches_bruteforce_oracle():
    cands = [c for c, _ in FIXTURE]
    refs = [[r] for _, r in FIXTURE]
    got = cider_d_scores(cands, refs)
    expected = oracle_cider_d(cands, refs)
    np.testing.assert_allclose(got, expected, atol=1e-4)
    assert cider_d(cands, refs) == pytest.approx(np.mean(expected), abs=1e-4)
    assert (got >= 0).all() and (got <= 10).all()


def test_cider_multi_reference_matches_oracle():
    cands = [c for c, _ in FIXTURE[:6]]
    refs = [[r, FIXTURE[(i + 7) % 20][1]] for i, (_, r) in enumerate(FIXTURE[:6])]
    np.testing.assert_allclose(cider_d_scores(cands, refs), oracle_cider_d(cands, refs), atol=1e-4)


def test_identity_pair_scores_ten():
    cands = ["the red fox jumps high", "a blue whale swims deep below"]
    refs = [["the red fox jumps high"], ["completely other words here now"]]
    assert cider_d_scores(cands, refs)[0] == pytest.approx(10.0, abs=1e-9)


def test_disjoint_pair_scores_zero():
    cands = ["alpha beta gamma delta", "red fox"]
    refs = [["one two three four"], ["red fox"]]
    assert cider_d_scores(cands, refs)[0] == 0.0


def test_three_token_identity_lacks_four_grams():
    cands = ["dawn ring red", "noon square blue"]
    refs = [["dawn ring red"], ["noon square blue"]]
    np.testing.assert_allclose(cider_d_scores(cands, refs), [7.5, 7.5])


def test_empty_candidate_warns_and_scores_zero():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        scores = cider_d_scores(["", "a b"], [["a b c"], ["a b"]])
    assert scores[0] == 0.0 and caught


def test_cider_contract_errors():
    with pytest.raises(ContractError):
        cider_d_scores(["a"], [])
    with pytest.raises(ContractError):
        cider_d_scores(["a"], [[]])


def test_document_frequency_bounded():
    refs = [[r] for _, r in FIXTURE]
    profile = NGramProfile.build(refs)
    assert max(profile.document_frequency.values()) <= profile.n_docs == 20
    assert all(c > 0 for group in profile.references for counts in group for c in counts.values())


def test_cider_symmetric_under_corpus_reordering():
    cands = [c for c, _ in FIXTURE]
    refs = [[r] for _, r in FIXTURE]
    perm = np.random.default_rng(0).permutation(20)
    a = cider_d_scores(cands, refs)
    b = cider_d_scores([cands[i] for i in perm], [refs[i] for i in perm])
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_tokenizer():
    assert tokenize("He said: 'Hello,' to_the WORLD!") == ["he", "said", "hello", "to", "the", "world"]


# -- recall proxy -------------------------------------------------------------------------
@pytest.mark.parametrize("k", range(1, 6))
def test_identical_candidates_give_k_over_n(k):
    gold = [f"sentence number {i}" for i in range(10)]
    assert recall_proxy(["same words"] * 10, gold, k=k) == pytest.approx(k / 5)


def test_perfect_matches_give_one():
    gold = [f"clip {w} happens" for w in "abcdefghijk"]
    assert recall_proxy(gold, gold, k=1, groups=["f"] * 6 + ["g"] * 5) == 1.0


def test_k_larger_than_window_is_error():
    with pytest.raises(ContractError):
        recall_proxy(["a", "b", "c"], ["a", "b", "c"], k=4)
    with pytest.raises(ContractError):
        recall_proxy(["a"], ["a"], k=0)


def test_windows_cover_every_item_once():
    groups = ["a"] * 7 + ["b"] * 3 + ["c"] * 10
    windows = recall_windows(groups)
    scored = sorted(i for _, s in windows for i in s)
    assert scored == list(range(20))
    for members, s in windows:
        assert len(members) == min(5, groups.count(groups[members[0]]))
        assert set(s) <= set(members)
        assert len({groups[i] for i in members}) == 1


def test_random_strings_recall_near_chance():
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(40)]
    n, k = 5000, 2

    def sentence():
        return " ".join(rng.choice(words, size=8))

    gold = [sentence() for _ in range(n)]
    cands = [sentence() for _ in range(n)]
    p = k / 5
    sigma = math.sqrt(p * (1 - p) / n)
    value = recall_proxy(cands, gold, k=k, groups=[str(i // 5) for i in range(n)])
    assert abs(value - p) < 3 * sigma


# -- length statistics --------------------------------------------------------------------
def test_length_stats_examples(tmp_path):
    empty = length_stats([])
    assert empty.histogram == {} and empty.count == 0 and math.isnan(empty.mean)
    two = length_stats(["a b c", "a b c d e"])
    assert two.mean == 4.0 and two.median == 4.0
    assert two.rows() == [(3, 1), (4, 0), (5, 1)]
    two.to_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text() == "token_length,count\n3,1\n4,0\n5,1\n"


@given(st.lists(st.lists(st.sampled_from(["a", "b", "c"]), max_size=12).map(" ".join), max_size=30))
def test_histogram_mass_equals_count(captions):
    stats = length_stats(captions)
    assert sum(stats.histogram.values()) == stats.count == len(captions)
    assert sum(c for _, c in stats.rows()) == len(captions)


def test_evaluate_captions_report(tmp_path):
    refs = [c for c, _ in FIXTURE]
    preds = [r for _, r in FIXTURE]
    report = evaluate_captions([f"c{i}" for i in range(20)], preds, refs, groups=["f"] * 20, k=1)
    assert report.cider >= 0 and report.lengths.count == 20
    report.write(tmp_path)
    with (tmp_path / "per_clip.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["clip_id"] for r in rows] == [f"c{i}" for i in range(20)]
    assert (tmp_path / "length_histogram.csv").read_text().startswith("token_length,count\n")
    summary = dict(line.split(",", 1) for line in (tmp_path / "report.csv").read_text().splitlines()[1:])
    assert "recall_proxy@1" in summary and "cider" in summary
