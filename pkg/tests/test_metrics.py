import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modapt.dataio import EmbeddingRecord, InvalidConfigError
from modapt.metrics import (
    IdMismatchError,
    ZeroPositivesError,
    average_precision,
    ensemble_scores,
    mean_ap,
)


def bruteforce_average_precision(scores, truths):
    """Independent AP oracle: explicit rank loop with the stable tie rule
    (descending score, ascending index), no numpy sorting."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(1 for t in truths if t > 0)
    total = 0.0
    hits = 0
    for rank, i in enumerate(order, start=1):
        if truths[i] > 0:
            hits += 1
            total += hits / rank
    return total / n_pos


def truth_record(i, marks):
    return EmbeddingRecord(f"image-{i:06d}", np.zeros(1, dtype=np.float32), np.asarray(marks, dtype=np.int8), "image")


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.1], [1, 0]) == 1.0

    def test_positive_at_rank_two(self):
        assert average_precision([0.1, 0.9], [1, 0]) == 0.5

    def test_hand_ranked_three_samples(self):
        # positives at ranks 1 and 3: (1/1 + 2/3) / 2 = 5/6
        assert average_precision([0.9, 0.8, 0.1], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)

    def test_zero_positives_raises(self):
        with pytest.raises(ZeroPositivesError):
            average_precision([0.5, 0.5], [0, 0])

    def test_tie_broken_by_ascending_index(self):
        # Equal scores: sample 0 outranks sample 1.
        assert average_precision([0.5, 0.5], [1, 0]) == 1.0
        assert average_precision([0.5, 0.5], [0, 1]) == 0.5

    def test_in_unit_interval_and_one_iff_separated(self):
        assert average_precision([0.3, 0.7, 0.1], [0, 1, 1]) < 1.0
        assert average_precision([0.3, 0.7, 0.9], [0, 1, 1]) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=2, max_size=30))
    def test_matches_bruteforce_property(self, rows):
        scores = [s for s, _ in rows]
        truths = [int(t) for _, t in rows]
        if sum(truths) == 0:
            truths[0] = 1
        got = average_precision(scores, truths)
        assert got == pytest.approx(bruteforce_average_precision(scores, truths), abs=1e-12)
        assert 0.0 <= got <= 1.0

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), scale=st.floats(0.5, 10.0), shiftv=st.floats(-5, 5))
    def test_invariant_under_strictly_increasing_transform(self, seed, scale, shiftv):
        rng = np.random.Generator(np.random.PCG64(seed))
        scores = rng.random(20)
        truths = (rng.random(20) < 0.4).astype(int)
        if truths.sum() == 0:
            truths[3] = 1
        base = average_precision(scores, truths)
        transformed = average_precision(scale * scores + shiftv, truths)
        assert transformed == pytest.approx(base, abs=1e-12)


class TestMeanAp:
    def make_instance(self, seed, n_samples=100, n_labels=10):
        rng = np.random.Generator(np.random.PCG64(seed))
        scores = rng.random((n_samples, n_labels))
        marks = (rng.random((n_samples, n_labels)) < 0.3).astype(np.int8)
        truth = [truth_record(i, marks[i]) for i in range(n_samples)]
        scored = [(truth[i].source_id, scores[i]) for i in range(n_samples)]
        return scored, truth, scores, marks

    def test_perfect_ranking_gives_map_one(self):
        truth = [truth_record(0, [1, 0]), truth_record(1, [0, 1])]
        scored = [("image-000000", np.array([0.9, 0.2])), ("image-000001", np.array([0.1, 0.8]))]
        report = mean_ap(scored, truth)
        assert report.map == 1.0

    def test_matches_bruteforce_on_random_instances(self):
        for seed in range(10):
            scored, truth, scores, marks = self.make_instance(seed)
            report = mean_ap(scored, truth)
            aps = []
            for j in range(marks.shape[1]):
                if marks[:, j].sum() == 0:
                    continue
                aps.append(bruteforce_average_precision(list(scores[:, j]), list(marks[:, j])))
            assert report.map == pytest.approx(sum(aps) / len(aps), abs=1e-12)

    def test_zero_positive_label_excluded(self):
        truth = [truth_record(0, [1, 0]), truth_record(1, [1, 0])]
        scored = [("image-000000", np.array([0.9, 0.5])), ("image-000001", np.array([0.7, 0.5]))]
        report = mean_ap(scored, truth)
        assert report.per_label_ap[1] is None
        assert report.positives == [2, 0]
        assert report.map == report.per_label_ap[0] == 1.0

    def test_id_mismatch_rejected(self):
        truth = [truth_record(0, [1, 0])]
        with pytest.raises(IdMismatchError):
            mean_ap([("nope", np.array([0.5, 0.5]))], truth)

    def test_partial_truth_rejected(self):
        truth = [truth_record(0, [1, -1])]
        with pytest.raises(InvalidConfigError):
            mean_ap([("image-000000", np.array([0.5, 0.5]))], truth)

    def test_report_map_is_mean_of_present_aps(self):
        scored, truth, _, _ = self.make_instance(3)
        report = mean_ap(scored, truth)
        present = [ap for ap in report.per_label_ap if ap is not None]
        assert report.map == pytest.approx(float(np.mean(present)), abs=1e-15)


class TestEnsemble:
    def test_minmax_column_mapping(self):
        a = [("r0", np.array([2.0])), ("r1", np.array([3.0])), ("r2", np.array([4.0]))]
        out = ensemble_scores(a, a)
        np.testing.assert_allclose([s[0] for _, s in out], [0.0, 0.5, 1.0])

    def test_constant_column_maps_to_half(self):
        a = [("r0", np.array([0.7, 0.1])), ("r1", np.array([0.7, 0.9]))]
        out = ensemble_scores(a, a)
        np.testing.assert_allclose([s[0] for _, s in out], [0.5, 0.5])

    def test_identical_inputs_preserve_ranking(self):
        rng = np.random.Generator(np.random.PCG64(0))
        scores = rng.random((20, 3))
        a = [(f"r{i}", scores[i]) for i in range(20)]
        out = ensemble_scores(a, a)
        merged = np.stack([s for _, s in out])
        for j in range(3):
            np.testing.assert_array_equal(np.argsort(-merged[:, j]), np.argsort(-scores[:, j]))

    def test_symmetric(self):
        rng = np.random.Generator(np.random.PCG64(1))
        a = [(f"r{i}", rng.random(4)) for i in range(10)]
        b = [(f"r{i}", rng.random(4)) for i in range(10)]
        ab = np.stack([s for _, s in ensemble_scores(a, b)])
        ba = np.stack([s for _, s in ensemble_scores(b, a)])
        np.testing.assert_allclose(ab, ba, atol=1e-15)

    def test_id_order_mismatch_rejected(self):
        a = [("r0", np.array([0.1])), ("r1", np.array([0.2]))]
        b = [("r1", np.array([0.1])), ("r0", np.array([0.2]))]
        with pytest.raises(IdMismatchError):
            ensemble_scores(a, b)

    def test_per_file_scaling(self):
        a = [("r0", np.array([0.0, 2.0])), ("r1", np.array([4.0, 2.0]))]
        out = ensemble_scores(a, a, per_file=True)
        np.testing.assert_allclose(out[0][1], [0.0, 0.5])
        np.testing.assert_allclose(out[1][1], [1.0, 0.5])
