import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdse.metrics import average_precision, cider, mean_average_precision, recall_at_k, relevance_from_scores


def brute_cider(corpus, max_n=4):
    """Dense-vector TF-IDF CIDEr written independently of the library code."""
    toks = lambda s: "".join(ch if ch.isalnum() or ch.isspace() else " " for ch in s.lower()).split()
    grams = lambda t, n: [tuple(t[i:i + n]) for i in range(len(t) - n + 1)]
    n_img = len(corpus)
    per_image = [0.0] * n_img
    for n in range(1, max_n + 1):
        universe = sorted({g for c, rs in corpus for s in [c, *rs] for g in grams(toks(s), n)})
        idf = []
        for g in universe:
            df = sum(any(g in grams(toks(r), n) for r in rs) for _, rs in corpus)
            idf.append(math.log(n_img / max(1, df)))
        for i, (cand, refs) in enumerate(corpus):
            cg = grams(toks(cand), n)
            if not cg:
                continue
            total = 0.0
            for ref in refs:
                rg = grams(toks(ref), n)
                vc = [min(cg.count(g), rg.count(g)) / len(cg) * w for g, w in zip(universe, idf)]
                vr = [rg.count(g) / max(1, len(rg)) * w for g, w in zip(universe, idf)]
                nc = math.sqrt(sum(x * x for x in vc))
                nr = math.sqrt(sum(x * x for x in vr))
                total += 0.0 if nc == 0 or nr == 0 else sum(a * b for a, b in zip(vc, vr)) / (nc * nr)
            per_image[i] += total / len(refs) / max_n
    return per_image


TOY = [
    ("a red circle on the left", ["a red circle on the left", "red circle at left side"]),
    ("a blue square", ["a blue square on the top", "blue box on top", "the top has a blue square"]),
    ("green triangle on the right and a red circle", ["a green triangle on the right", "green triangle right"]),
]


class TestCider:
    def test_matches_brute_force(self):
        got = cider(TOY)
        want = brute_cider(TOY)
        assert np.max(np.abs(np.array(got["per_image"]) - want)) <= 1e-9
        assert abs(got["cider"] - np.mean(want)) <= 1e-9
        assert got["cider_x10"] == pytest.approx(10 * got["cider"], abs=1e-12)

    def test_self_similarity(self):
        corpus = [("a red circle on the left", ["a red circle on the left"]),
                  ("two blue squares at top", ["two blue squares at top"])]
        assert cider(corpus)["per_image"] == pytest.approx([1.0, 1.0], abs=1e-12)

    def test_no_overlap_is_zero(self):
        corpus = [("green fish", ["a red circle"]), ("x", ["two blue squares"])]
        assert cider(corpus)["per_image"][0] == 0.0

    def test_empty_candidate_scores_zero(self):
        assert cider([("", ["a b"]), ("c", ["c d"])])["per_image"][0] == 0.0

    def test_reference_order_and_case(self):
        shuffled = [(c.upper(), list(reversed(rs))) for c, rs in TOY]
        assert np.allclose(cider(shuffled)["per_image"], cider(TOY)["per_image"], atol=1e-12)


class TestRecall:
    def test_hand_counted(self):
        assert recall_at_k([1, 2, 6, 11], 5) == 0.5

    def test_all_first(self):
        assert recall_at_k([1] * 7, 1) == 1.0

    def test_k_past_max(self):
        assert recall_at_k([3, 9, 2], 9) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 30), min_size=1, max_size=20), st.integers(1, 29))
    def test_monotone_in_k(self, ranks, k):
        assert recall_at_k(ranks, k) <= recall_at_k(ranks, k + 1)

    def test_rejects_zero_rank(self):
        with pytest.raises(ValueError):
            recall_at_k([0, 1], 1)


class TestAP:
    def test_five_sixths(self):
        assert average_precision([1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)

    def test_first_of_ten(self):
        assert average_precision([1] + [0] * 9) == 1.0

    @pytest.mark.parametrize("n", [1, 4, 10])
    def test_worst_placement(self, n):
        assert average_precision([0] * (n - 1) + [1]) == pytest.approx(1 / n, abs=1e-15)

    def test_map_excludes_empty_class_with_warning(self):
        with pytest.warns(UserWarning):
            m = mean_average_precision([[1, 0, 1], [0, 0, 0], [1]])
        assert m == pytest.approx((5 / 6 + 1) / 2, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.integers(0, 1), min_size=1, max_size=8), min_size=1, max_size=5))
    def test_map_range_and_class_order(self, classes):
        if not any(any(c) for c in classes):
            return
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a = mean_average_precision(classes)
            b = mean_average_precision(list(reversed(classes)))
        assert 0.0 <= a <= 1.0 and a == pytest.approx(b, abs=1e-12)

    def test_relevance_from_scores(self):
        scores = np.array([[0.1, 0.9], [0.8, 0.2], [0.5, 0.6]])
        labels = np.array([[1, 0], [0, 1], [1, 0]])
        assert relevance_from_scores(scores, labels) == [[0, 1, 1], [0, 0, 1]]
