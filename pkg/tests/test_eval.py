import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmgan import eval as E
from cmgan.errors import ShapeError, UndefinedAPError, UndefinedSimilarityError


# --- independent reference implementations ---------------------------------

def brute_ap(rel):
    """Enumerate (1/R) * sum_k (R_k / k) * rel_k term by term."""
    R = sum(1 for r in rel if r)
    total, seen = 0.0, 0
    for k, r in enumerate(rel, start=1):
        if r:
            seen += 1
            total += seen / k
    return total / R


def brute_cos(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


def brute_map(queries, q_labels, cands, c_labels, exclude=None):
    aps = []
    for q, (vec, lab) in enumerate(zip(queries, q_labels)):
        scored = []
        for j, (cv, cl) in enumerate(zip(cands, c_labels)):
            if exclude is not None and exclude[q] == j:
                continue
            scored.append((-brute_cos(vec, cv), j, cl == lab))
        scored.sort()
        rel = [r for _, _, r in scored]
        if any(rel):
            aps.append(brute_ap(rel))
    return sum(aps) / len(aps)


class TestCosine:
    def test_identity(self):
        assert E.cosine_similarity([3.0, -4.0], [3.0, -4.0]) == 1.0

    def test_orthogonal(self):
        assert E.cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_value(self):
        assert E.cosine_similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(0.7071067812, abs=1e-10)

    def test_zero_vector(self):
        with pytest.raises(UndefinedSimilarityError):
            E.cosine_similarity([0.0, 0.0], [1.0, 2.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            E.cosine_similarity([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_tiny_vector_is_not_zero(self):
        # squared norm underflows here; the value must still be defined
        assert E.cosine_similarity([0.0, 0.0, 1.0], [0.0, 0.0, 2.3e-232]) == 1.0
        s = E.similarity_matrix(np.array([[1e-300, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert s.tolist() == [[1.0, 0.0]]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3),
           st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
    def test_range(self, a, b):
        if not any(a) or not any(b):
            return
        assert -1.0 <= E.cosine_similarity(a, b) <= 1.0


class TestAveragePrecision:
    def test_perfect(self):
        assert E.average_precision([1, 1, 1, 0, 0]) == 1.0

    def test_scripted_value(self):
        assert E.average_precision([1, 0, 1, 0], 2) == pytest.approx(0.8333333333, abs=1e-10)
        assert E.average_precision([1, 0, 1, 0]) == pytest.approx((1 / 1 + 2 / 3) / 2, abs=1e-15)

    @pytest.mark.parametrize("k", [1, 2, 5, 17])
    def test_single_relevant_at_rank_k(self, k):
        rel = np.zeros(20, dtype=bool)
        rel[k - 1] = True
        assert E.average_precision(rel) == pytest.approx(1 / k, rel=1e-15)

    def test_no_relevant(self):
        with pytest.raises(UndefinedAPError):
            E.average_precision([0, 0, 0])

    def test_inconsistent_r(self):
        with pytest.raises(ValueError):
            E.average_precision([1, 0, 1], 3)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 1001))
            rel = rng.random(n) < rng.uniform(0.01, 0.9)
            if not rel.any():
                rel[rng.integers(n)] = True
            assert abs(E.average_precision(rel) - brute_ap(rel.tolist())) <= 1e-12


class TestMap:
    def test_mean(self):
        assert E.map_score([[1, 0], [0, 1]]) == 0.75

    def test_skipped_queries_counted(self):
        res = E.map_with_diagnostics([[1, 0], [0, 0], [0, 1], [0, 0, 0]])
        assert res.value == 0.75 and res.n_queries == 2 and res.n_skipped == 2

    def test_no_valid_query(self):
        with pytest.raises(UndefinedAPError):
            E.map_score([[0, 0]])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.booleans(), min_size=1, max_size=30), min_size=1, max_size=10))
    def test_bounds(self, lists):
        if not any(any(l) for l in lists):
            return
        assert 0.0 <= E.map_score(lists) <= 1.0

    def test_concentrates_at_permutation_chance(self):
        rng = np.random.default_rng(3)
        n = 600
        labels = rng.integers(0, 10, size=n)
        s_img, s_txt = rng.normal(size=(n, 16)), rng.normal(size=(n, 16))
        i2t, t2i = E.bimodal_map(s_img, s_txt, labels)
        chance = E.bimodal_chance(labels, n_shuffles=50, seed=1)
        assert abs(i2t.map - chance) <= 0.02
        assert abs(t2i.map - chance) <= 0.02
        assert 0.08 <= chance <= 0.14


class TestRanking:
    def test_tie_break_by_ascending_id(self):
        sims = np.array([0.5, 0.9, 0.5, 0.9, 0.1])
        assert E.rank_order(sims).tolist() == [1, 3, 0, 2, 4]

    def test_ties_resolved_with_explicit_ids(self):
        sims = np.array([0.2, 0.2, 0.2])
        assert E.rank_order(sims, np.array([7, 3, 5])).tolist() == [1, 2, 0]

    def test_per_query_positive_rescaling(self):
        rng = np.random.default_rng(1)
        q, c = rng.normal(size=(10, 4)), rng.normal(size=(25, 4))
        ql, cl = rng.integers(0, 3, 10), rng.integers(0, 3, 25)
        base = E.rank_queries(q, ql, c, cl)
        scaled = E.rank_queries(q * rng.uniform(0.1, 10, size=(10, 1)), ql, c * rng.uniform(0.1, 10, size=(25, 1)), cl)
        for a, b in zip(base, scaled):
            assert np.array_equal(a.candidates, b.candidates)

    def test_zero_row_ranks_last_against_positive(self):
        sims = E.similarity_matrix(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]))
        assert sims.tolist() == [[0.0, 1.0, -1.0]]


def separable_representations(n_per=5, c=4, d=6):
    centres = np.eye(d)[:c] * 3
    labels = np.repeat(np.arange(c), n_per)
    return centres[labels].copy(), centres[labels].copy(), labels


class TestDrivers:
    def test_separable_gives_one(self):
        s_img, s_txt, labels = separable_representations()
        report = E.evaluate_representations(s_img, s_txt, labels)
        assert report.values() == (1.0,) * 6

    def test_brute_force_bimodal_and_allmodal(self):
        rng = np.random.default_rng(7)
        n = 50
        labels = rng.integers(0, 5, size=n)
        s_img = rng.normal(size=(n, 8)) + labels[:, None] * 0.3
        s_txt = rng.normal(size=(n, 8)) + labels[:, None] * 0.3
        i2t, t2i = E.bimodal_map(s_img, s_txt, labels)
        assert abs(i2t.map - brute_map(s_img.tolist(), labels, s_txt.tolist(), labels)) <= 1e-12
        assert abs(t2i.map - brute_map(s_txt.tolist(), labels, s_img.tolist(), labels)) <= 1e-12
        pool = np.vstack([s_img, s_txt]).tolist()
        pool_labels = np.concatenate([labels, labels])
        i2a, t2a = E.allmodal_map(s_img, s_txt, labels)
        assert abs(i2a.map - brute_map(s_img.tolist(), labels, pool, pool_labels, list(range(n)))) <= 1e-12
        assert abs(t2a.map - brute_map(s_txt.tolist(), labels, pool, pool_labels, list(range(n, 2 * n)))) <= 1e-12

    def test_allmodal_pool_size(self):
        rng = np.random.default_rng(2)
        s_img, s_txt = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        labels = np.array([0, 1, 0, 1, 2, 2])
        pool = np.vstack([s_img, s_txt])
        ranked = E.rank_queries(s_img, labels, pool, np.concatenate([labels, labels]), np.arange(6))
        assert all(r.candidates.size == 11 for r in ranked)
        assert all(q not in r.candidates for q, r in enumerate(ranked))
        assert all(q + 6 in r.candidates for q, r in enumerate(ranked))

    def test_single_category_warns_and_scores_one(self):
        rng = np.random.default_rng(0)
        s = rng.normal(size=(4, 3))
        with pytest.warns(E.DegenerateTestsetWarning):
            i2t, t2i = E.bimodal_map(s, s[::-1], np.zeros(4, dtype=int))
        assert i2t.map == 1.0 and t2i.map == 1.0

    def test_queries_without_relevant_candidates_skipped(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0]])
        c = np.array([[1.0, 0.1], [0.9, 0.0]])
        res = E._task(q, [0, 1], c, [0, 0])
        assert res.map == 1.0 and res.n_skipped == 1
        assert np.isnan(res.per_query[1])

    def test_no_valid_queries_raises(self):
        with pytest.raises(UndefinedAPError):
            E._task(np.eye(2), [0, 0], np.eye(2), [1, 1])


class TestReport:
    def _report(self):
        rng = np.random.default_rng(5)
        labels = np.repeat(np.arange(3), 4)
        return E.evaluate_representations(rng.normal(size=(12, 5)), rng.normal(size=(12, 5)), labels,
                                          ("a", "b", "c"))

    def test_averages_are_exact_means(self):
        r = self._report()
        assert r.map_bi_avg == (r.map_i2t + r.map_t2i) / 2
        assert r.map_all_avg == (r.map_i2all + r.map_t2all) / 2
        assert all(0 <= v <= 1 for v in r.values())

    def test_markdown_columns(self):
        md = self._report().to_markdown()
        header = [line for line in md.splitlines() if line.startswith("| ")][0]
        assert [h.strip() for h in header.strip("|").split("|")] == list(E.TABLE_COLUMNS)

    def test_csv_and_per_category(self):
        r = self._report()
        rows = r.to_csv().splitlines()
        assert rows[0].split(",")[:6] == list(E.REPORT_FIELDS)
        assert float(rows[1].split(",")[2]) == pytest.approx(r.map_bi_avg, abs=1e-6)
        per = r.per_category_csv().splitlines()
        assert per[0] == "category,i2t,t2i,i2all,t2all"
        assert [line.split(",")[0] for line in per[1:]] == ["a", "b", "c"]

    def test_per_category_mean_recovers_map(self):
        r = self._report()
        # balanced labels: mean of per-category MAP equals overall MAP
        assert np.mean(r.per_category["i2t"]) == pytest.approx(r.map_i2t, abs=1e-12)

    def test_reports_reproducible(self):
        assert self._report().to_csv() == self._report().to_csv()
        assert self._report().to_markdown() == self._report().to_markdown()


class TestModelRetrieval:
    def test_evaluate_matches_retrieval_drivers(self, tiny_model):
        from cmgan.data import FeatureDataset

        rng = np.random.default_rng(0)
        labels = np.repeat(np.arange(3), 4)
        img = rng.normal(size=(3, 8))[labels]
        txt = rng.normal(size=(3, 12))[labels]
        ds = FeatureDataset(img, txt, labels)
        i2a, t2a = E.allmodal_retrieval(tiny_model, ds)
        assert 0 <= i2a <= 1 and 0 <= t2a <= 1
        i2t, t2i = E.bimodal_retrieval(tiny_model, ds)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            rep = E.evaluate(tiny_model, ds)
        assert rep.map_i2t == i2t and rep.map_t2i == t2i
