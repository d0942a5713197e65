import json
import math
import numpy as np
import pytest
from numpy.testing import assert_allclose
from abxgap.losses import (
    BatchPair, LossConfig, check_gradients, combined_loss, contrastive_av, cosine_similarity_matrix,
    coordinate_error, grad_contrastive_av, grad_masked_ce, masked_ce, numeric_gradient, random_batch, relative_error,
    retrieval_recall)
from abxgap.typealiases import ContractViolation, DataError


class TestMaskedCrossEntropy:
    def test_uniform_logits(self):
        logits = np.zeros((6, 50))
        assert masked_ce(logits, np.arange(6), np.ones(6, dtype=bool)) == pytest.approx(math.log(50), abs=1e-9)

    def test_loss_shrinks_with_margin(self):
        losses = []
        for margin in (0.0, 1.0, 2.0, 4.0, 8.0, 16.0):
            logits = np.zeros((1, 5))
            logits[0, 3] = margin
            losses.append(masked_ce(logits, [3], [True]))
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-6

    def test_matches_direct_formula(self, rng):
        logits = rng.standard_normal((4, 5))
        labels = np.array([0, 4, 2, 2])
        mask = np.array([True, False, True, True])
        direct = [-math.log(math.exp(logits[m, labels[m]]) / sum(math.exp(v) for v in logits[m])) for m in (0, 2, 3)]
        assert masked_ce(logits, labels, mask) == pytest.approx(sum(direct) / 3, abs=1e-12)

    def test_full_mask_is_row_average(self, rng):
        logits = rng.standard_normal((5, 7)) * 4
        labels = rng.integers(0, 7, size=5)
        per_row = [masked_ce(logits[i:i + 1], labels[i:i + 1], [True]) for i in range(5)]
        assert masked_ce(logits, labels, np.ones(5, dtype=bool)) == pytest.approx(np.mean(per_row), abs=1e-12)

    def test_unmasked_labels_are_ignored(self):
        assert masked_ce(np.zeros((2, 3)), [0, 99], [True, False]) == pytest.approx(math.log(3))

    def test_errors(self):
        with pytest.raises(DataError, match='no position'):
            masked_ce(np.zeros((2, 3)), [0, 1], [False, False])
        with pytest.raises(DataError, match='out of range'):
            masked_ce(np.zeros((2, 3)), [0, 3], [True, True])
        with pytest.raises(DataError):
            masked_ce(np.zeros((2, 3)), [0], [True, True])

    def test_gradient(self, rng):
        logits = rng.standard_normal((4, 6)) * 2
        labels = rng.integers(0, 6, size=4)
        mask = np.array([True, True, False, True])
        analytic = grad_masked_ce(logits, labels, mask)
        assert (analytic[2] == 0).all()
        numeric = numeric_gradient(lambda z: masked_ce(z, labels, mask), logits)
        assert relative_error(analytic, numeric) <= 1e-5
        assert coordinate_error(analytic, numeric) <= 1e-5


class TestContrastive:
    def test_single_pair(self, rng):
        batch = BatchPair(rng.standard_normal((1, 4)), rng.standard_normal((1, 4)))
        assert contrastive_av(batch) == 0.0
        assert math.copysign(1.0, contrastive_av(batch)) == 1.0
        assert json.dumps(contrastive_av(batch)) == '0.0'
        g_audio, g_image = grad_contrastive_av(batch)
        assert not g_audio.any() and not g_image.any()

    def test_two_orthogonal_pairs(self):
        batch = BatchPair(np.eye(2), np.eye(2))
        assert contrastive_av(batch, 1.0) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
        assert contrastive_av(batch, 1.0) == pytest.approx(0.3133, abs=5e-5)

    def test_loss_falls_with_temperature_on_matched_pairs(self):
        batch = BatchPair(np.eye(4), np.eye(4))
        losses = [contrastive_av(batch, tau) for tau in (1.0, 0.5, 0.2, 0.1, 0.07, 0.05)]
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-6

    def test_loss_falls_as_negatives_move_apart(self):
        losses = []
        for c in (0.9, 0.5, 0.0, -0.3):
            s = np.full((3, 3), c)
            np.fill_diagonal(s, 1.0)
            # Rows with unit norm whose Gram matrix is s.
            audio = np.linalg.cholesky(s)
            losses.append(contrastive_av(BatchPair(audio, audio), 0.5))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_row_rescaling_invariance(self, rng):
        batch = random_batch(rng, 5, 6)
        scaled = BatchPair(batch.audio_embeddings * rng.uniform(0.1, 10, size=(5, 1)),
                           batch.image_embeddings * rng.uniform(0.1, 10, size=(5, 1)))
        assert contrastive_av(scaled) == pytest.approx(contrastive_av(batch), abs=1e-12)

    def test_non_negative(self, rng):
        for _ in range(20):
            assert contrastive_av(random_batch(rng, int(rng.integers(1, 9)), 3), 0.07) >= 0.0

    def test_gradient_random_batch(self, rng):
        batch = random_batch(rng, 3, 4)
        for tau in (0.05, 0.07, 1.0):
            g_audio, g_image = grad_contrastive_av(batch, tau)
            n_audio = numeric_gradient(lambda a: contrastive_av(BatchPair(a, batch.image_embeddings), tau),
                                       batch.audio_embeddings)
            n_image = numeric_gradient(lambda b: contrastive_av(BatchPair(batch.audio_embeddings, b), tau),
                                       batch.image_embeddings)
            assert relative_error(g_audio, n_audio) <= 1e-4
            assert coordinate_error(g_audio, n_audio) <= 1e-3
            assert relative_error(g_image, n_image) <= 1e-4
            assert coordinate_error(g_image, n_image) <= 1e-3

    def test_randomized_gradient_check(self):
        check = check_gradients(trials=100, seed=0)
        assert check.trials == 100
        assert check.max_relative_error <= check.tolerance
        assert check.max_coordinate_error <= check.coordinate_tolerance
        assert check.passed
        assert check.to_dict()['passed'] is True

    def test_batch_validation(self):
        with pytest.raises(DataError, match='Zero-norm row 1'):
            BatchPair([[1.0, 0.0], [0.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(DataError, match='equal shape'):
            BatchPair(np.eye(2), np.eye(3))
        with pytest.raises(DataError, match='Non-finite'):
            BatchPair([[np.nan, 1.0]], [[1.0, 0.0]])
        with pytest.raises(ContractViolation):
            contrastive_av(BatchPair(np.eye(2), np.eye(2)), 0.0)

    def test_similarity_matrix(self):
        s = cosine_similarity_matrix([[2.0, 0.0], [1.0, 1.0]], [[0.0, 3.0]])
        assert_allclose(s, [[0.0], [math.sqrt(0.5)]], atol=1e-15)


class TestCombined:
    def test_fixed_point_and_endpoints(self):
        assert combined_loss(1.25, 1.25) == 1.25
        assert combined_loss(3.0, 7.0, alpha=0.0) == 3.0
        assert combined_loss(3.0, 7.0, alpha=1.0) == 7.0

    def test_equal_weights_is_the_mean(self, rng):
        for l_a, l_av in rng.uniform(0, 10, size=(50, 2)):
            assert combined_loss(l_a, l_av, 0.5) == (l_a + l_av) / 2

    def test_typical_values(self):
        assert combined_loss(3.9120, 0.3133) == pytest.approx(2.1127, abs=1e-4)
        assert LossConfig().combine(3.9120, 0.3133) == combined_loss(3.9120, 0.3133, 0.5)

    def test_validation(self):
        with pytest.raises(ContractViolation):
            LossConfig(alpha=1.5)
        with pytest.raises(ContractViolation):
            LossConfig(temperature=0.0)
        with pytest.raises(ContractViolation):
            combined_loss(float('nan'), 1.0)


class TestRetrieval:
    def test_dominant_diagonal(self, rng):
        audio = np.eye(5) + 0.01 * rng.random((5, 5))
        recall = retrieval_recall(BatchPair(audio, np.eye(5)), ks=(1, 5))
        assert recall == {'audio_to_image': {1: 1.0, 5: 1.0}, 'image_to_audio': {1: 1.0, 5: 1.0}}

    def test_reversed_pairing(self):
        recall = retrieval_recall(BatchPair(np.eye(4), np.eye(4)[::-1]), ks=(1,))
        assert recall == {'audio_to_image': {1: 0.0}, 'image_to_audio': {1: 0.0}}

    def test_matches_sort_based_ranking(self, rng):
        batch = random_batch(rng, 5, 3)
        s = cosine_similarity_matrix(batch.audio_embeddings, batch.image_embeddings)

        def recall(sim, k):
            hits = 0
            for i in range(5):
                order = sorted(range(5), key=lambda j: (-sim[i, j], j))
                hits += order.index(i) < k
            return hits / 5

        got = retrieval_recall(batch, ks=(1, 2, 3, 5))
        for k in (1, 2, 3, 5):
            assert got['audio_to_image'][k] == recall(s, k)
            assert got['image_to_audio'][k] == recall(s.T, k)

    def test_ties_count_against_later_rows(self):
        recall = retrieval_recall(BatchPair(np.ones((3, 2)), np.ones((3, 2))), ks=(1, 2, 3))
        assert recall['audio_to_image'] == {1: pytest.approx(1 / 3), 2: pytest.approx(2 / 3), 3: 1.0}

    def test_cutoff_bounds(self):
        with pytest.raises(DataError, match='k=5'):
            retrieval_recall(BatchPair(np.eye(4), np.eye(4)), ks=(1, 5))
        with pytest.raises(DataError):
            retrieval_recall(BatchPair(np.eye(4), np.eye(4)), ks=(0,))


class TestGradientCheck:
    def test_central_difference_step(self):
        # (1 + h)^3 - (1 - h)^3 over 2h is 3 + h^2.
        g = numeric_gradient(lambda x: float((x ** 3).sum()), np.ones((1, 2)))
        assert_allclose(g, 3.0 + 1e-8, rtol=0, atol=1e-10)

    def test_small_entries_are_not_hidden_by_large_ones(self):
        analytic, numeric = np.array([[100.0, 0.5]]), np.array([[100.0, 0.501]])
        assert relative_error(analytic, numeric) == pytest.approx(1e-5)
        assert coordinate_error(analytic, numeric) == pytest.approx(0.001 / 0.501)

    def test_floor_near_zero(self):
        analytic, numeric = np.array([[1.0, 0.0]]), np.array([[1.0, 1e-9]])
        assert coordinate_error(analytic, numeric) == pytest.approx(1e-7)
        assert coordinate_error(analytic, numeric, floor=1e-12) == pytest.approx(1.0)
        assert coordinate_error(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0

    def test_coordinate_failure_fails_the_check(self):
        check = check_gradients(trials=3, seed=0)
        assert check.worst_coordinate
        strict = check_gradients(trials=3, seed=0, coordinate_tolerance=0.0)
        assert strict.max_relative_error == check.max_relative_error
        assert not strict.passed
        assert set(check.to_dict()) == {'trials', 'max_relative_error', 'worst', 'tolerance', 'max_coordinate_error',
                                        'worst_coordinate', 'coordinate_tolerance', 'passed'}
