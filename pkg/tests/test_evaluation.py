import json
import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmfgcl.config import TrainConfig
from hmfgcl.data import InteractionMatrix, build_matrix
from hmfgcl.errors import ConfigError
from hmfgcl.evaluation import (
    MetricsReport,
    RankingEvaluator,
    ablate,
    evaluate,
    expand_grid,
    ndcg_at_k,
    rank_items,
    recall_at_k,
    sweep,
    write_runs_csv,
)
from hmfgcl.model import Checkpoint, init_embeddings

from conftest import random_interactions


class TestRankItems:
    def test_ties_identity_order(self):
        assert rank_items(np.ones(2), np.ones((5, 2))).tolist() == [0, 1, 2, 3, 4]

    def test_three_items(self):
        items = np.array([[0.9], [0.1], [0.5]])
        assert rank_items(np.array([1.0]), items).tolist() == [0, 2, 1]

    def test_mask(self):
        rng = np.random.default_rng(0)
        items = rng.normal(size=(20, 3))
        mask = [0, 5, 7]
        out = rank_items(rng.normal(size=3), items, mask)
        assert len(out) == 17 and not set(mask) & set(out[:10].tolist())


class TestMetrics:
    def test_recall_examples(self):
        assert recall_at_k([3, 1, 2], {3}, 10) == 1.0
        assert recall_at_k(list(range(20)), {10}, 10) == 0.0
        assert recall_at_k(list(range(20)), {2, 15}, 10) == 0.5

    def test_ndcg_examples(self):
        assert ndcg_at_k([4, 1], {4}, 10) == 1.0
        assert ndcg_at_k([1, 4], {4}, 10) == pytest.approx(1 / math.log2(3))
        assert ndcg_at_k([1, 2, 3], {9}, 3) == 0.0

    def test_empty_relevant_is_nan(self):
        assert math.isnan(recall_at_k([1], set(), 10)) and math.isnan(ndcg_at_k([1], set(), 10))

    def test_bad_k(self):
        with pytest.raises(ValueError):
            recall_at_k([1], {1}, 0)

    @given(st.permutations(list(range(30))), st.sets(st.integers(0, 29), min_size=1, max_size=10),
           st.integers(1, 30))
    @settings(max_examples=80)
    def test_bounds_and_monotone(self, ranking, relevant, k):
        r, n = recall_at_k(ranking, relevant, k), ndcg_at_k(ranking, relevant, k)
        assert 0 <= r <= 1 and 0 <= n <= 1 + 1e-12
        assert recall_at_k(ranking, relevant, min(k + 10, 30)) >= r
        ideal = sorted(relevant) + [x for x in ranking if x not in relevant]
        assert ndcg_at_k(ideal, relevant, k) == pytest.approx(1.0)

    def test_random_embeddings_monte_carlo(self):
        # one relevant item among 100 candidates: expected R@10 = 0.1
        hits = []
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            ranking = rank_items(rng.normal(size=8), rng.normal(size=(101, 8)), mask=[100])
            hits.append(recall_at_k(ranking, {int(rng.integers(100))}, 10))
        assert abs(np.mean(hits) - 0.1) <= 0.02


def matrix_from(train, valid, test, n_users, n_items):
    pairs = [(u, i, 0) for u, i in train] + [(u, i, 1) for u, i in valid] + [(u, i, 2) for u, i in test]
    u, i, s = (np.array(x) for x in zip(*pairs))
    return InteractionMatrix(n_users, n_items, u, i, s.astype(np.uint8),
                             tuple(f"u{k}" for k in range(n_users)), tuple(f"i{k}" for k in range(n_items)))


class TestEvaluator:
    def test_perfect_oracle(self):
        m = matrix_from([(0, 0), (1, 1), (2, 2)], [], [(0, 3), (0, 4), (1, 5), (2, 3)], 3, 6)
        rel = np.zeros((3, 6))
        rel[[0, 0, 1, 2], [3, 4, 5, 3]] = 1.0
        rep = RankingEvaluator(m, "test").evaluate_embeddings(rel, np.eye(6), (1, 2, 10))
        assert rep.recall[10] == 1.0 and rep.ndcg[10] == 1.0 and rep.ndcg[1] == 1.0
        assert rep.recall[1] == pytest.approx((0.5 + 1 + 1) / 3)

    def test_matches_reference_loop(self, toy_matrix):
        rng = np.random.default_rng(0)
        eu, ei = rng.normal(size=(toy_matrix.num_users, 4)), rng.normal(size=(toy_matrix.num_items, 4))
        for split in ("valid", "test"):
            rep = RankingEvaluator(toy_matrix, split, chunk=7).evaluate_embeddings(eu, ei, (5, 10, 20),
                                                                                    per_user=True)
            masked = {"valid": ["train"], "test": ["train", "valid"]}[split]
            recalls, ndcgs = [], []
            per_split = {s: toy_matrix.user_items(s) for s in ("train", "valid", "test")}
            for u in range(toy_matrix.num_users):
                rel = set(per_split[split][u].tolist())
                if not rel:
                    continue
                mask = np.concatenate([per_split[s][u] for s in masked])
                ranking = rank_items(eu[u], ei, mask)
                assert not set(mask.tolist()) & set(ranking.tolist())
                recalls.append(recall_at_k(ranking, rel, 10))
                ndcgs.append(ndcg_at_k(ranking, rel, 10))
            assert rep.n_users == len(recalls)
            assert rep.recall[10] == pytest.approx(np.mean(recalls), abs=1e-12)
            assert rep.ndcg[10] == pytest.approx(np.mean(ndcgs), abs=1e-12)
            assert all(a >= b for a, b in zip(rep.per_user["recall@20"], rep.per_user["recall@10"]))

    def test_users_without_relevant_excluded(self):
        m = matrix_from([(0, 0), (1, 1)], [], [(0, 1)], 2, 3)
        rep = RankingEvaluator(m, "test").evaluate_embeddings(np.ones((2, 1)), np.ones((3, 1)), (10,))
        assert rep.n_users == 1 and rep.recall[10] == 1.0

    def test_bad_split(self, toy_matrix):
        with pytest.raises(ConfigError):
            RankingEvaluator(toy_matrix, "train")


class TestEvaluate:
    def _checkpoint(self, m, **cfg):
        s = init_embeddings(m.num_users, m.num_items, 8, seed=1)
        return Checkpoint(s.user_emb, s.item_emb, TrainConfig(embedding_size=8, **cfg).to_dict())

    def test_deterministic_json(self, toy_matrix):
        ck = self._checkpoint(toy_matrix)
        a = evaluate(ck, toy_matrix, "test", (10, 20), dataset_id="toy").to_json()
        b = evaluate(ck, toy_matrix, "test", (10, 20), dataset_id="toy").to_json()
        assert a == b
        body = json.loads(a)
        assert set(body["metrics"]) == {"recall@10", "recall@20", "ndcg@10", "ndcg@20"}
        assert body["dataset"] == "toy" and body["split"] == "test"

    def test_exact_ks(self, toy_matrix):
        rep = evaluate(self._checkpoint(toy_matrix), toy_matrix, "valid", (5,))
        assert list(rep.metrics()) == ["recall@5", "ndcg@5"]

    def test_dimension_mismatch(self, toy_matrix):
        other = build_matrix(random_interactions(10, 10, 0.5, seed=1))
        with pytest.raises(ConfigError):
            evaluate(self._checkpoint(other), toy_matrix)


@dataclass
class FakeResult:
    report: MetricsReport
    best_epoch: int = 1
    runtime_s: float = 0.0


def fake_train(calls):
    def fn(matrix, config):
        calls.append(config)
        score = {"full": 0.3, "mf-only": 0.2, "svd-only": 0.25, "none": 0.1}[config.variant]
        return FakeResult(MetricsReport({10: score, 20: score}, {10: score, 20: score}, 5, "test"))
    return fn


class TestGrids:
    def test_ablate_four_rows(self, toy_matrix, tmp_path):
        calls = []
        rows = ablate(toy_matrix, TrainConfig(), train_fn=fake_train(calls))
        assert [r.label for r in rows] == ["HMFGCL", "HMFGCL-M", "HMFGCL-S", "HMFGCL-R"]
        assert len({r.split_hash for r in rows}) == 1
        write_runs_csv(rows, tmp_path / "a.csv")
        assert len((tmp_path / "a.csv").read_text().splitlines()) == 5

    def test_ablate_seeds(self, toy_matrix):
        calls = []
        rows = ablate(toy_matrix, TrainConfig(), seeds=[0, 1, 2], train_fn=fake_train(calls))
        assert len(rows) == 12 and sorted({c.seed for c in calls}) == [0, 1, 2]

    def test_expand(self):
        assert expand_grid({}) == [{}]
        assert len(expand_grid({"k": [5, 10, 15, 20]})) == 4
        assert len(expand_grid({"k": [5, 20], "q": [5, 20]})) == 4
        assert len(expand_grid({"k": [5, 20], "q": [5, 20, 30]}, "cartesian")) == 6

    def test_unknown_parameter(self):
        with pytest.raises(ConfigError):
            expand_grid({"bogus": [1]})

    def test_sweep_counts(self, toy_matrix, tmp_path):
        calls = []
        assert len(sweep(toy_matrix, TrainConfig(), {}, train_fn=fake_train(calls))) == 1
        rows = sweep(toy_matrix, TrainConfig(), {"layers": [1, 2, 3, 4]}, train_fn=fake_train(calls))
        assert len(rows) == 4
        write_runs_csv(rows, tmp_path / "s.csv")
        header = (tmp_path / "s.csv").read_text().splitlines()[0].split(",")
        assert "n_layers" in header and "recall@10" in header

    def test_sweep_reuses_identical_configs(self, toy_matrix):
        calls = []
        # k=5 is the default, so the two axes share the base configuration
        rows = sweep(toy_matrix, TrainConfig(), {"k": [5, 20], "q": [5, 20]}, train_fn=fake_train(calls))
        assert len(rows) == 4 and len(calls) == 3
