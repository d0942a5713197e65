import io
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from abxgap.abx import run_language_abx
from abxgap.featstore import FeatureMatrix, read_archive, write_archive
from abxgap.itemfile import UtteranceRecord
from abxgap.quantize import (
    Codebook, UnitSequence, assign_units, fit_kmeans, load_codebook, quantize_archive, read_units, sample_frames,
    save_codebook, units_to_features, write_units, CODEBOOK_HEADER)
from abxgap.typealiases import DataError


def _two_clouds(rng, n=50, dim=2, separation=20.0):
    centers = np.zeros((2, dim))
    centers[1, 0] = separation
    planted = np.repeat([0, 1], n)
    frames = centers[planted] + rng.standard_normal((2 * n, dim))
    return frames, planted


def _non_increasing(trace):
    return all(b <= a * (1 + 1e-12) for a, b in zip(trace, trace[1:]))


class TestFit:
    def test_single_centroid_is_the_mean(self, rng):
        frames = rng.standard_normal((200, 5)) + 3.0
        cb = fit_kmeans(frames, k=1)
        assert_allclose(cb.centroids[0], frames.mean(axis=0), rtol=0, atol=1e-12)
        assert cb.inertia == pytest.approx(((frames - frames.mean(axis=0)) ** 2).sum(), rel=1e-12)

    def test_planted_partition(self, rng):
        frames, planted = _two_clouds(rng)
        cb = fit_kmeans(frames, k=2, seed=1)
        labels = np.array(assign_units(FeatureMatrix('u', frames, 100), cb).units)
        if labels[0] != 0:
            labels = 1 - labels
        assert_array_equal(labels, planted)
        means = np.stack([frames[planted == j].mean(axis=0) for j in (0, 1)])
        order = np.argsort(cb.centroids[:, 0])
        assert_allclose(cb.centroids[order], means, atol=1e-12)

    def test_one_centroid_per_point(self, rng):
        frames = rng.standard_normal((12, 3))
        cb = fit_kmeans(frames, k=12)
        assert cb.inertia == 0.0
        assert sorted(map(tuple, cb.centroids)) == sorted(map(tuple, frames))

    @pytest.mark.parametrize('seed', range(5))
    def test_inertia_trace_never_increases(self, rng, seed):
        frames = rng.standard_normal((300, 4))
        cb = fit_kmeans(frames, k=6, seed=seed)
        assert len(cb.inertia_trace) == cb.iterations_run + 1
        assert _non_increasing(cb.inertia_trace)
        assert cb.inertia == cb.inertia_trace[-1]

    def test_reproducible_across_runs_and_threads(self, rng):
        frames = rng.standard_normal((40000, 3))
        first = fit_kmeans(frames, k=4, max_iter=15, seed=2, threads=1)
        again = fit_kmeans(frames, k=4, max_iter=15, seed=2, threads=1)
        threaded = fit_kmeans(frames, k=4, max_iter=15, seed=2, threads=4)
        for other in (again, threaded):
            assert_array_equal(other.centroids, first.centroids)
            assert other.inertia_trace == first.inertia_trace

    def test_sample_smaller_than_k(self, rng):
        with pytest.raises(DataError, match='sample < k'):
            fit_kmeans(rng.standard_normal((100, 2)), k=1000)

    def test_non_finite_sample(self):
        with pytest.raises(DataError):
            fit_kmeans(np.array([[0.0, np.nan], [1.0, 1.0]]), k=1)


class TestUnits:
    def test_frame_on_centroid(self, rng):
        cb = Codebook(rng.standard_normal((4, 3)), 0.0, 0, 0)
        m = FeatureMatrix('u', cb.centroids[[3, 1, 1]], 100)
        assert assign_units(m, cb).units == (3, 1, 1)

    def test_tie_goes_to_lowest_index(self):
        centroids = np.array([[10, 10], [-10, 10], [1, 0], [10, -10], [-10, -10], [-1, 0]], dtype=float)
        cb = Codebook(centroids, 0.0, 0, 0)
        assert assign_units(FeatureMatrix('u', [[0.0, 0.0]], 100), cb).units == (2,)

    def test_matches_nearest_centroid_loop(self, rng):
        cb = Codebook(rng.standard_normal((7, 4)), 0.0, 0, 0)
        m = FeatureMatrix('u', rng.standard_normal((30, 4)), 100)
        expected = tuple(min(range(7), key=lambda j: (np.sum((row - cb.centroids[j]) ** 2), j)) for row in m.values)
        assert assign_units(m, cb).units == expected

    def test_dimension_mismatch(self, rng):
        cb = Codebook(rng.standard_normal((3, 4)), 0.0, 0, 0)
        with pytest.raises(DataError, match='does not match'):
            assign_units(FeatureMatrix('u', rng.standard_normal((2, 3)), 100), cb)

    def test_one_hot(self):
        cb = Codebook(np.eye(2), 0.0, 0, 0)
        m = units_to_features(UnitSequence('u', (0, 0, 1), 50.0), cb)
        assert_array_equal(m.data, [[1, 0], [1, 0], [0, 1]])
        assert m.frame_rate == 50.0

    def test_centroid_encoding_is_idempotent(self, rng):
        cb = Codebook(rng.standard_normal((5, 3)), 0.0, 0, 0)
        u = UnitSequence('u', tuple(int(i) for i in rng.integers(5, size=20)), 100.0)
        assert assign_units(units_to_features(u, cb, 'centroid'), cb) == u

    def test_unit_out_of_range(self):
        cb = Codebook(np.eye(2), 0.0, 0, 0)
        with pytest.raises(DataError, match='out of range'):
            units_to_features(UnitSequence('u', (0, 2)), cb)
        with pytest.raises(DataError):
            units_to_features(UnitSequence('u', (0,)), cb, 'binary')

    def test_one_hot_units_are_perfectly_discriminable(self):
        cb = Codebook(np.eye(3), 0.0, 0, 0)
        features, records = {}, []
        for lang, unit in (('EN', 0), ('FR', 2)):
            for r in range(3):
                m = units_to_features(UnitSequence(f'{lang}{r}', (unit,) * (r + 2), 100.0), cb)
                features[m.utterance_id] = m
                records.append(UtteranceRecord(m.utterance_id, 's1', lang))
        assert run_language_abx(features, records).final_error_percent == 0.0

    def test_text_export(self):
        sequences = [UnitSequence('utt1', (3, 3, 0)), UnitSequence('utt2', (1,))]
        stream = io.StringIO()
        write_units(sequences, stream)
        assert stream.getvalue() == 'utt1 3 3 0\nutt2 1\n'
        assert read_units(io.StringIO(stream.getvalue())) == sequences
        with pytest.raises(DataError, match='Line 1'):
            read_units(io.StringIO('utt1 a b\n'))


class TestFiles:
    def test_codebook_roundtrip(self, tmp_path, rng):
        cb = fit_kmeans(rng.standard_normal((50, 3)), k=4, seed=11)
        path = save_codebook(cb, tmp_path / 'cb.kmb')
        assert path.stat().st_size == CODEBOOK_HEADER.size + 4 * 3 * 4
        back = load_codebook(path)
        assert (back.k, back.dim, back.seed, back.inertia) == (4, 3, 11, cb.inertia)
        assert_array_equal(back.centroids, cb.centroids.astype(np.float32))

    def test_corrupt_codebook(self, tmp_path, rng):
        path = save_codebook(Codebook(rng.standard_normal((2, 2)), 0.0, 0, 0), tmp_path / 'cb.kmb')
        raw = path.read_bytes()
        path.write_bytes(raw[:-1])
        with pytest.raises(DataError, match='expected'):
            load_codebook(path)
        path.write_bytes(b'XXXX' + raw[4:])
        with pytest.raises(DataError, match='KMB1'):
            load_codebook(path)

    def test_sample_frames(self, tmp_path, rng):
        matrices = [FeatureMatrix(f'u{i}', rng.standard_normal((n, 2)), 100) for i, n in enumerate((3, 5, 4))]
        write_archive(matrices, tmp_path / 'a')
        archive = read_archive(tmp_path / 'a')
        every = np.concatenate([m.values for m in matrices])
        assert_array_equal(sample_frames(archive, 100), every)
        picked = sample_frames(archive, 5, seed=4)
        assert picked.shape == (5, 2)
        assert_array_equal(picked, sample_frames(archive, 5, seed=4))
        assert all(any((row == e).all() for e in every) for row in picked)

    def test_quantize_archive(self, tmp_path, corpus_dir):
        archive = read_archive(corpus_dir / 'features')
        cb = fit_kmeans(sample_frames(archive, 500), k=3)
        manifest, sequences = quantize_archive(archive, cb, tmp_path / 'units')
        assert [e.utterance_id for e in manifest.entries] == list(archive)
        units = read_archive(tmp_path / 'units')
        assert units.dim == 3
        with open(tmp_path / 'units' / 'units.txt', encoding='utf-8') as f:
            assert read_units(f) == [UnitSequence(s.utterance_id, s.units) for s in sequences]
        for s in sequences:
            assert units[s.utterance_id].frames == len(s.units) == archive[s.utterance_id].frames
