import numpy as np
import pytest

from writerid.encoding import GlobalDescriptor
from writerid.retrieval import (
    RankedList,
    average_precision,
    cosine_distance,
    evaluate,
    hard_top_k,
    rank_all,
)


def descriptor(vec, doc, writer):
    return GlobalDescriptor(vector=np.asarray(vec, dtype=float), doc_id=doc, writer_id=writer)


def rank_bruteforce(descriptors):
    """O(n^2) pairwise oracle with explicit cosine and (distance, doc_id) sort."""
    out = {}
    for q in descriptors:
        rows = []
        for c in descriptors:
            if c.doc_id == q.doc_id:
                continue
            rows.append((cosine_distance(q.vector, c.vector), c.doc_id))
        rows.sort()
        out[q.doc_id] = [doc for _, doc in rows]
    return out


class TestCosine:
    def test_identical_direction(self):
        assert cosine_distance([1.0, 2.0], [2.0, 4.0]) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine_distance([1.0, 0.0], [0.0, 3.0]) == pytest.approx(1.0, abs=1e-12)

    def test_opposite(self):
        assert cosine_distance([1.0, -1.0], [-2.0, 2.0]) == pytest.approx(2.0, abs=1e-12)

    def test_zero_vector_defined_as_one(self):
        assert cosine_distance([0.0, 0.0], [1.0, 1.0]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            cosine_distance([1.0], [1.0, 2.0])


class TestRankAll:
    def test_two_documents(self):
        rankings = rank_all(
            [descriptor([1, 0], "a", "w1"), descriptor([0, 1], "b", "w2")]
        )
        assert len(rankings) == 2
        assert [r.query_doc_id for r in rankings] == ["a", "b"]
        assert rankings[0].entries[0][0] == "b"
        assert len(rankings[0].entries) == 1

    def test_planted_duplicates_rank_first(self):
        rng = np.random.default_rng(0)
        descriptors = []
        for w in range(5):
            proto = rng.normal(size=16)
            for d in range(4):
                descriptors.append(descriptor(proto, f"w{w}_{d}", f"w{w}"))
        for ranked in rank_all(descriptors):
            assert all(ranked.relevance[:3])

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            n = int(rng.integers(3, 50))
            descriptors = [
                descriptor(rng.normal(size=8), f"d{i:02d}", f"w{i % 4}") for i in range(n)
            ]
            got = {r.query_doc_id: [doc for doc, _ in r.entries] for r in rank_all(descriptors)}
            assert got == rank_bruteforce(descriptors)

    def test_distance_ties_break_by_doc_id(self):
        descriptors = [
            descriptor([1.0, 0.0], "q", "w0"),
            descriptor([2.0, 0.0], "z", "w1"),
            descriptor([3.0, 0.0], "a", "w2"),
        ]
        ranked = rank_all(descriptors)[0]
        assert [doc for doc, _ in ranked.entries] == ["a", "z"]

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        descriptors = [
            descriptor(rng.normal(size=6), f"d{i}", f"w{i % 3}") for i in range(9)
        ]
        scaled = [
            GlobalDescriptor(vector=d.vector * 37.5, doc_id=d.doc_id, writer_id=d.writer_id)
            for d in descriptors
        ]
        a = evaluate(descriptors)
        b = evaluate(scaled)
        assert a.mean_ap == pytest.approx(b.mean_ap, abs=1e-12)
        assert a.hard_top_k == b.hard_top_k

    def test_needs_two_documents(self):
        with pytest.raises(ValueError):
            rank_all([descriptor([1.0], "a", "w")])


def ranked(query, writer, rel_flags):
    return RankedList(
        query_doc_id=query,
        query_writer_id=writer,
        entries=[(f"d{i}", i * 0.1) for i in range(len(rel_flags))],
        relevance=list(rel_flags),
    )


class TestAveragePrecision:
    def test_hand_value_ranks_1_3_4(self):
        r = ranked("q", "w", [True, False, True, True, False])
        # (1/1 + 2/3 + 3/4) / 3 = 29/36
        assert average_precision(r) == pytest.approx(29 / 36, abs=1e-9)
        assert average_precision(r) == pytest.approx(0.80556, abs=1e-5)

    def test_perfect_ranking(self):
        assert average_precision(ranked("q", "w", [True, True, False])) == 1.0

    def test_single_relevant_at_rank_two(self):
        assert average_precision(ranked("q", "w", [False, True])) == 0.5

    def test_no_relevant_rejected(self):
        with pytest.raises(ValueError):
            average_precision(ranked("q", "w", [False, False]))


class TestHardTopK:
    def test_counts_only_all_relevant_prefixes(self):
        rankings = [
            ranked("q1", "w", [True, False, True]),  # top-1 yes, top-2 no
            ranked("q2", "w", [True, True, False]),
        ]
        assert hard_top_k(rankings, 1) == 1.0
        assert hard_top_k(rankings, 2) == 0.5

    def test_queries_without_enough_relevant_excluded(self):
        rankings = [
            ranked("q1", "w", [True, False, False]),  # 1 relevant
            ranked("q2", "w", [True, True, False]),  # 2 relevant
        ]
        assert hard_top_k(rankings, 2) == 1.0  # only q2 eligible
        with pytest.raises(ValueError):
            hard_top_k(rankings, 3)


class TestEvaluate:
    def test_planted_duplicates_perfect(self):
        rng = np.random.default_rng(3)
        descriptors = []
        for w in range(4):
            proto = rng.normal(size=12)
            for d in range(4):
                descriptors.append(descriptor(proto, f"w{w}_{d}", f"w{w}"))
        report = evaluate(descriptors)
        assert report.mean_ap == pytest.approx(1.0, abs=1e-12)
        assert report.hard_top_k == {1: 1.0, 2: 1.0, 3: 1.0}
        assert report.n_queries == 16

    def test_top_k_non_increasing_and_map_is_mean(self):
        rng = np.random.default_rng(4)
        descriptors = [
            descriptor(rng.normal(size=8), f"w{i % 5}_{i // 5}", f"w{i % 5}")
            for i in range(20)
        ]
        report = evaluate(descriptors)
        scores = [report.hard_top_k[k] for k in sorted(report.hard_top_k)]
        assert all(a >= b for a, b in zip(scores, scores[1:]))
        assert report.mean_ap == pytest.approx(
            np.mean([ap for _, ap in report.per_query_ap]), abs=1e-12
        )
        assert 0.0 <= report.mean_ap <= 1.0
        assert all(0.0 <= s <= 1.0 for s in scores)

    def test_isolated_writer_excluded_from_map(self, caplog):
        rng = np.random.default_rng(5)
        descriptors = [
            descriptor(rng.normal(size=4), "w0_1", "w0"),
            descriptor(rng.normal(size=4), "w0_2", "w0"),
            descriptor(rng.normal(size=4), "lone_1", "lone"),
        ]
        report = evaluate(descriptors)
        assert report.n_queries == 2
        assert {q for q, _ in report.per_query_ap} == {"w0_1", "w0_2"}
