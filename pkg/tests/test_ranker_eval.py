import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from esci_rank.dataset import QueryProductRecord
from esci_rank.labels import DEFAULT_GAINS, EsciLabel
from esci_rank.ranker_eval import (
    KeyMismatchError,
    Prediction,
    PredictionSet,
    dcg,
    evaluate,
    load_predictions,
    ndcg_query,
    oracle_predictions,
    parse_gains,
    rank_query,
    save_eval_report,
    save_predictions,
    save_submission,
    score,
)

E, S, C, I = EsciLabel.EXACT, EsciLabel.SUBSTITUTE, EsciLabel.COMPLEMENT, EsciLabel.IRRELEVANT
labels_st = st.lists(st.sampled_from(list(EsciLabel)), min_size=1, max_size=12)


def truth_of(groups):
    """``{qid: [label, ...]}`` -> records with product ids p0, p1, ..."""
    return [QueryProductRecord(q, f"p{i}", "q", label=l) for q, ls in groups.items() for i, l in enumerate(ls)]


def preds_from_scores(groups):
    """``{qid: [score, ...]}`` -> a prediction set whose scores are given directly."""
    return PredictionSet(Prediction(q, f"p{i}", (1.0, 0.0, 0.0, 0.0), s) for q, ss in groups.items() for i, s in enumerate(ss))


def brute_force_best_dcg(labels, gains=DEFAULT_GAINS):
    return max(dcg([gains[l.index] for l in perm]) for perm in itertools.permutations(labels))


class TestScore:
    @pytest.mark.parametrize("p,expected", [((1, 0, 0, 0), 1.0), ((0.7, 0.2, 0.05, 0.05), 0.7205), ((0.25,) * 4, 0.2775)])
    def test_examples(self, p, expected):
        assert abs(score(p) - expected) < 1e-12


class TestRankQuery:
    def entries(self, pairs):
        return [Prediction("q", pid, (0.25,) * 4, s) for pid, s in pairs]

    def test_descending(self):
        assert rank_query(self.entries([("a", 0.1), ("b", 0.9)])) == ["b", "a"]

    def test_ties_by_product_id(self):
        assert rank_query(self.entries([("B01", 0.5), ("A02", 0.5)])) == ["A02", "B01"]

    def test_singleton_and_empty(self):
        assert rank_query(self.entries([("x", 0.3)])) == ["x"]
        with pytest.raises(ValueError):
            rank_query([])

    # integer scores keep the transform exactly order-preserving in floating point
    @given(st.lists(st.integers(-50, 50), min_size=1, max_size=10))
    def test_invariant_under_increasing_transform(self, scores):
        pairs = [(f"p{i}", float(s)) for i, s in enumerate(scores)]
        transformed = [(pid, s**3 + 2.0 * s + 7.0) for pid, s in pairs]
        assert rank_query(self.entries(pairs)) == rank_query(self.entries(transformed))


class TestNdcg:
    def test_hand_example(self):
        dcg_value = 0.1 + 1.0 / math.log2(3)
        idcg = 1.0 + 0.1 / math.log2(3)
        assert abs(dcg_value - 0.730930) < 1e-6 and abs(idcg - 1.063093) < 1e-6
        assert abs(ndcg_query([S, E, I]) - 0.687550) < 1e-6

    def test_ideal_and_irrelevant(self):
        assert ndcg_query([E, S, C, I]) == 1.0
        assert ndcg_query([I, I, I]) == 1.0

    def test_permutation_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 7))
            labels = [EsciLabel.from_index(int(i)) for i in rng.integers(0, 4, size=n)]
            best = brute_force_best_dcg(labels)
            ideal = sorted(labels, key=lambda l: l.index)
            assert dcg([DEFAULT_GAINS[l.index] for l in ideal]) == best
            assert ndcg_query(ideal) == 1.0
            # ranking by true gains recovers the ideal ordering
            entries = [Prediction("q", f"p{i}", (0.25,) * 4, DEFAULT_GAINS[l.index]) for i, l in enumerate(labels)]
            order = rank_query(entries)
            assert ndcg_query([labels[int(pid[1:])] for pid in order]) == 1.0

    @given(labels_st)
    def test_bounded(self, labels):
        assert 0.0 <= ndcg_query(labels) <= 1.0 + 1e-12

    def test_reversal_strictly_lowers(self):
        assert ndcg_query([I, C, S, E]) < 1.0


class TestEvaluate:
    def test_oracle(self):
        truth = truth_of({"a": [S, E, I, C], "b": [I, E]})
        assert evaluate(oracle_predictions(truth), truth).mean_ndcg == 1.0

    def test_unweighted_mean(self):
        truth = truth_of({"a": [E, I], "b": [E, E, I]})
        # query b ranked [I, E, E] has a non-trivial score; query a perfect
        preds = preds_from_scores({"a": [1.0, 0.0], "b": [0.0, 0.5, 1.0]})
        result = evaluate(preds, truth)
        expected_b = ndcg_query([I, E, E])
        assert result.per_query == {"a": 1.0, "b": expected_b}
        assert result.mean_ndcg == (1.0 + expected_b) / 2

    def test_half_and_one(self):
        # I ranked above E in a two-item query: DCG = 1/log2(3), IDCG = 1
        truth = truth_of({"a": [E], "b": [E, I]})
        preds = preds_from_scores({"a": [0.3], "b": [0.0, 1.0]})
        result = evaluate(preds, truth)
        assert abs(result.per_query["b"] - 1 / math.log2(3)) < 1e-15
        truth = truth_of({"x": [E, I], "y": [E, I]})
        two = evaluate(preds_from_scores({"x": [1.0, 0.0], "y": [0.0, 1.0]}), truth).mean_ndcg
        assert abs(two - (1.0 + 1 / math.log2(3)) / 2) < 1e-15

    def test_row_order_invariant(self):
        truth = truth_of({"a": [S, E, I, C], "b": [I, E, S]})
        rng = np.random.default_rng(1)
        preds = PredictionSet.from_arrays([r.key for r in truth], rng.dirichlet(np.ones(4), size=len(truth)))
        shuffled = PredictionSet(preds.entries[i] for i in rng.permutation(len(preds)))
        assert evaluate(preds, truth).mean_ndcg == evaluate(shuffled, truth[::-1]).mean_ndcg

    def test_key_mismatch(self):
        truth = truth_of({"a": [E, S]})
        preds = preds_from_scores({"a": [1.0], "z": [0.2]})
        with pytest.raises(KeyMismatchError) as err:
            evaluate(preds, truth)
        assert err.value.missing == [("a", "p1")] and err.value.extra == [("z", "p0")]

    def test_duplicate_prediction(self):
        ps = preds_from_scores({"a": [1.0]})
        with pytest.raises(ValueError, match="duplicate"):
            ps.add(Prediction("a", "p0", (1, 0, 0, 0), 1.0))


class TestFiles:
    def test_predictions_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        keys = [("q1", "a"), ("q1", "b"), ("q2", "c")]
        ps = PredictionSet.from_arrays(keys, rng.dirichlet(np.ones(4), size=3))
        save_predictions(ps, tmp_path / "p.tsv")
        back = load_predictions(tmp_path / "p.tsv")
        assert back.entries == ps.entries

    def test_bad_prediction_row(self, tmp_path):
        path = tmp_path / "p.tsv"
        path.write_text("query_id\tproduct_id\tp_e\tp_s\tp_c\tp_i\tscore\nq\tp\t0.5\t0.6\t0\t0\t0.56\n")
        with pytest.raises(ValueError, match="line 2"):
            load_predictions(path)

    def test_submission_and_report(self, tmp_path):
        truth = truth_of({"b": [I, E], "a": [E]})
        preds = PredictionSet.from_arrays([r.key for r in truth], [[0, 0, 0, 1], [1, 0, 0, 0], [0.5, 0.5, 0, 0]])
        save_submission(preds, tmp_path / "s.tsv")
        assert (tmp_path / "s.tsv").read_text() == "query_id\tproduct_id\na\tp0\nb\tp1\nb\tp0\n"
        save_eval_report(evaluate(preds, truth), tmp_path / "r.tsv")
        lines = (tmp_path / "r.tsv").read_text().splitlines()
        assert lines[0] == "query_id\tndcg\tn_products"
        assert lines[-1] == "mean_ndcg\t1.0\t2"

    def test_parse_gains(self):
        np.testing.assert_array_equal(parse_gains("1, 0.1 0.01 0"), DEFAULT_GAINS)
        with pytest.raises(ValueError):
            parse_gains("0 1 0 0")
