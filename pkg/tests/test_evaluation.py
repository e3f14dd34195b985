import math

import numpy as np
import pytest
import scipy.stats

from sbmoe.data import EmbeddingStore
from sbmoe.errors import (DataError, DegenerateVarianceError, NumericError,
                          ShapeError)
from sbmoe.evaluation import (bonferroni, compare_runs, evaluate_run,
                              ndcg_at_k, paired_ttest, recall_at_k, retrieve)
from sbmoe.numerics import SeededRng

from reference_eval import reference_ndcg, reference_recall


def store_of(vectors, prefix):
    vectors = np.asarray(vectors, dtype=np.float64)
    ids = [f"{prefix}{i}" for i in range(len(vectors))]
    return EmbeddingStore(vectors.shape[1], ids, vectors)


class TestRetrieve:
    def test_self_retrieval(self):
        docs = store_of([[1, 0], [0, 1], [0.6, 0.8]], "d")
        queries = EmbeddingStore(2, ["q0"], np.array([[0.6, 0.8]]))
        run = retrieve(queries, docs, k=3)
        assert run["q0"][0][0] == "d2"
        assert run["q0"][0][1] == pytest.approx(1.0, abs=1e-12)

    def test_k_covers_whole_corpus(self):
        docs = store_of(SeededRng(0).gaussian_array((5, 4)), "d")
        queries = store_of(SeededRng(1).gaussian_array((2, 4)), "q")
        run = retrieve(queries, docs, k=50)
        for ranked in run.values():
            assert len(ranked) == 5
            assert {d for d, _ in ranked} == set(docs.ids)

    def test_tie_breaks_by_ascending_doc_id(self):
        queries = EmbeddingStore(2, ["q"], np.array([[1.0, 0.0]]))
        docs = EmbeddingStore(2, ["d2", "d1", "d3"],
                              np.array([[0.9, 0.43589], [0.9, 0.43589], [0.1, 0.995]]))
        run = retrieve(queries, docs, k=2)
        assert [d for d, _ in run["q"]] == ["d1", "d2"]

    def test_scores_non_increasing(self):
        docs = store_of(SeededRng(2).gaussian_array((20, 6)), "d")
        queries = store_of(SeededRng(3).gaussian_array((4, 6)), "q")
        run = retrieve(queries, docs, k=20)
        for ranked in run.values():
            scores = [s for _, s in ranked]
            assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_repeated_calls_identical(self):
        docs = store_of(SeededRng(4).gaussian_array((10, 4)), "d")
        queries = store_of(SeededRng(5).gaussian_array((3, 4)), "q")
        assert retrieve(queries, docs, k=10) == retrieve(queries, docs, k=10)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            retrieve(store_of(np.ones((1, 3)), "q"), store_of(np.ones((1, 4)), "d"))

    def test_zero_vector_under_cosine(self):
        queries = EmbeddingStore(2, ["q"], np.array([[0.0, 0.0]]))
        docs = store_of([[1.0, 0.0]], "d")
        with pytest.raises(NumericError):
            retrieve(queries, docs)

    def test_head_dimension_checked(self):
        from sbmoe.head import HeadConfig, init_head

        head = init_head(HeadConfig(8, 2), SeededRng(0))
        with pytest.raises(ShapeError):
            retrieve(store_of(np.ones((1, 4)), "q"), store_of(np.ones((1, 4)), "d"),
                     head=head)


class TestNdcg:
    def test_single_relevant_at_rank_one(self):
        run = {"q": [("d1", 0.9), ("d2", 0.8)]}
        qrels = {"q": {"d1": 1}}
        assert ndcg_at_k(run, qrels, 10)["q"] == pytest.approx(1.0)

    def test_single_relevant_at_rank_two(self):
        run = {"q": [("d2", 0.9), ("d1", 0.8)]}
        qrels = {"q": {"d1": 1}}
        assert ndcg_at_k(run, qrels, 10)["q"] == \
            pytest.approx(1 / math.log2(3), abs=1e-9)

    def test_two_relevant_ranks_one_and_three(self):
        run = {"q": [("d1", 0.9), ("x", 0.8), ("d2", 0.7)]}
        qrels = {"q": {"d1": 1, "d2": 1}}
        expected = (1.0 + 0.5) / (1.0 + 1 / math.log2(3))
        assert ndcg_at_k(run, qrels, 10)["q"] == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.9197207, abs=1e-7)

    def test_queries_without_relevant_docs_excluded(self):
        run = {"q1": [("d1", 1.0)], "q2": [("d2", 1.0)]}
        qrels = {"q1": {"d1": 1}, "q2": {"d2": 0}}
        report = ndcg_at_k(run, qrels, 10)
        assert set(report) == {"q1"}

    def test_query_missing_from_run_scores_zero(self):
        qrels = {"q1": {"d1": 1}}
        assert ndcg_at_k({}, qrels, 10)["q1"] == 0.0

    def test_exponential_gain_option(self):
        run = {"q": [("d2", 0.9), ("d1", 0.8)]}
        qrels = {"q": {"d1": 3, "d2": 1}}
        linear = ndcg_at_k(run, qrels, 10)["q"]
        exponential = ndcg_at_k(run, qrels, 10, exponential=True)["q"]
        assert linear != exponential
        # binary relevance: conventions coincide
        run_b = {"q": [("d2", 0.9), ("d1", 0.8)]}
        qrels_b = {"q": {"d1": 1, "d2": 1}}
        assert ndcg_at_k(run_b, qrels_b, 10)["q"] == \
            ndcg_at_k(run_b, qrels_b, 10, exponential=True)["q"]


class TestRecall:
    def test_all_relevant_in_top_k(self):
        run = {"q": [("d1", 0.9), ("d2", 0.8)]}
        qrels = {"q": {"d1": 1, "d2": 2}}
        assert recall_at_k(run, qrels, 100)["q"] == 1.0

    def test_none_retrieved(self):
        run = {"q": [("x1", 0.9), ("x2", 0.8)]}
        qrels = {"q": {"d1": 1}}
        assert recall_at_k(run, qrels, 100)["q"] == 0.0

    def test_three_of_four(self):
        run = {"q": [("d1", 0.9), ("d2", 0.8), ("d3", 0.7)]}
        qrels = {"q": {"d1": 1, "d2": 1, "d3": 1, "d4": 1}}
        assert recall_at_k(run, qrels, 100)["q"] == 0.75


class TestAgainstReference:
    def test_randomized_instances_match_brute_force(self):
        rng = SeededRng(123)
        for _ in range(60):
            n_docs = 1 + rng.below(20)
            n_queries = 1 + rng.below(5)
            doc_ids = [f"d{i}" for i in range(n_docs)]
            qrels, run = {}, {}
            for qi in range(n_queries):
                qid = f"q{qi}"
                qrels[qid] = {d: rng.below(4) for d in doc_ids if rng.below(3) > 0}
                scored = sorted(((d, rng.uniform()) for d in doc_ids
                                 if rng.below(4) > 0),
                                key=lambda item: (-item[1], item[0]))
                run[qid] = scored
            for k in (1, 5, 10):
                mine = ndcg_at_k(run, qrels, k)
                ref = reference_ndcg(run, qrels, k)
                assert set(mine) == set(ref)
                for q in mine:
                    assert mine[q] == pytest.approx(ref[q], abs=1e-9)
            mine_r = recall_at_k(run, qrels, 100)
            ref_r = reference_recall(run, qrels, 100)
            for q in mine_r:
                assert mine_r[q] == pytest.approx(ref_r[q], abs=1e-9)

    def test_unjudged_doc_below_k_changes_nothing(self):
        run = {"q": [("d1", 0.9), ("d2", 0.8)]}
        qrels = {"q": {"d1": 1}}
        before = (ndcg_at_k(run, qrels, 2)["q"], recall_at_k(run, qrels, 2)["q"])
        run_padded = {"q": run["q"] + [("zzz", 0.1)]}
        after = (ndcg_at_k(run_padded, qrels, 2)["q"], recall_at_k(run_padded, qrels, 2)["q"])
        assert before == after

    def test_ideal_ranking_scores_one(self):
        qrels = {"q": {"d1": 3, "d2": 2, "d3": 1, "d4": 0}}
        ideal = {"q": [("d1", 0.9), ("d2", 0.8), ("d3", 0.7), ("d4", 0.6)]}
        assert ndcg_at_k(ideal, qrels, 10)["q"] == pytest.approx(1.0, abs=1e-12)


class TestPairedTTest:
    def test_zero_variance_raises(self):
        with pytest.raises(DegenerateVarianceError):
            paired_ttest([0.5, 0.6, 0.7], [0.4, 0.5, 0.6])

    def test_hand_computed_example(self):
        t, df, p = paired_ttest([0.1, 0.1, 0.1, -0.1], [0.0, 0.0, 0.0, 0.0])
        assert t == pytest.approx(1.0, abs=1e-9)
        assert df == 3
        assert p == pytest.approx(0.3910, abs=1e-3)
        # cross-check the incomplete-beta route against scipy.stats
        assert p == pytest.approx(2 * scipy.stats.t.sf(1.0, 3), abs=1e-12)

    def test_antisymmetry(self):
        a = [0.4, 0.6, 0.55, 0.3]
        b = [0.35, 0.62, 0.5, 0.28]
        t1, _, p1 = paired_ttest(a, b)
        t2, _, p2 = paired_ttest(b, a)
        assert t1 == pytest.approx(-t2, abs=1e-12)
        assert p1 == pytest.approx(p2, abs=1e-12)

    def test_matches_scipy_on_random_inputs(self):
        rng = SeededRng(77)
        for _ in range(20):
            n = 2 + rng.below(30)
            a = rng.gaussian_array((n,))
            b = rng.gaussian_array((n,))
            t, df, p = paired_ttest(a, b)
            t_ref, p_ref = scipy.stats.ttest_rel(a, b)
            assert t == pytest.approx(float(t_ref), rel=1e-10)
            assert p == pytest.approx(float(p_ref), rel=1e-10)

    def test_too_few_pairs(self):
        with pytest.raises(DataError):
            paired_ttest([0.1], [0.2])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            paired_ttest([0.1, 0.2], [0.3])


class TestBonferroni:
    def test_identity_for_single_comparison(self):
        assert bonferroni(0.03, 1) == 0.03

    def test_doubles_and_caps(self):
        assert bonferroni(0.03, 2) == pytest.approx(0.06)
        assert bonferroni(0.7, 2) == 1.0

    def test_rejects_bad_family_size(self):
        with pytest.raises(DataError):
            bonferroni(0.05, 0)


class TestCompareRuns:
    def build_runs(self):
        # per-query metric diffs [1, 1, 1, -1]: t = 1.0 at df 3 for both metrics
        qrels = {f"q{i}": {f"d{i}": 1} for i in range(4)}
        run_a, run_b = {}, {}
        for i in range(4):
            hit = [(f"d{i}", 0.9), (f"x{i}", 0.8)]
            miss = [(f"x{i}", 0.9)]
            if i < 3:
                run_a[f"q{i}"], run_b[f"q{i}"] = hit, miss
            else:
                run_a[f"q{i}"], run_b[f"q{i}"] = miss, hit
        return run_a, run_b, qrels

    def test_self_comparison_degenerate(self):
        run_a, _, qrels = self.build_runs()
        with pytest.raises(DegenerateVarianceError):
            compare_runs(run_a, run_a, qrels, m=1)

    def test_report_fields_and_correction(self):
        run_a, run_b, qrels = self.build_runs()
        reports = compare_runs(run_a, run_b, qrels, m=2)
        ndcg_report = reports[0]
        assert ndcg_report.metric == "ndcg@10"
        assert ndcg_report.df == 3
        assert ndcg_report.t == pytest.approx(1.0, abs=1e-9)
        assert ndcg_report.p_corrected == pytest.approx(min(1.0, 2 * ndcg_report.p_raw))
        assert ndcg_report.comparisons == 2
        assert not ndcg_report.significant
        # recall diffs mirror the ndcg flips here
        assert reports[1].metric == "recall@100"

    def test_disjoint_runs_is_data_error(self):
        run_a = {"q0": [("d0", 1.0)]}
        run_b = {"q1": [("d1", 1.0)]}
        qrels = {"q0": {"d0": 1}, "q1": {"d1": 1}}
        with pytest.raises(DataError):
            compare_runs(run_a, run_b, qrels, m=1)


class TestEvaluateRun:
    def test_report_shape(self):
        run = {"q0": [("d0", 1.0)], "q1": [("x", 1.0)]}
        qrels = {"q0": {"d0": 1}, "q1": {"d1": 1}, "q2": {"d9": 0}}
        report = evaluate_run(run, qrels)
        assert report.query_count == 2  # q2 has no relevant docs
        payload = report.to_json_dict()
        assert payload["evaluated_queries"] == 2
        assert payload["means"]["ndcg@10"] == pytest.approx(0.5)
        assert set(payload["per_query"]["ndcg@10"]) == {"q0", "q1"}
