import pytest
import numpy as np
from abxgap.abx import (
    AbxCondition, CellScore, CellScorer, aggregate, build_language_cells, build_phonetic_cells, cell_scores_csv,
    load_report, run_language_abx, run_phonetic_abx, score_cell, score_triplet)
from abxgap.featstore import FeatureMatrix
from abxgap.itemfile import UtteranceRecord
from abxgap.kernels import DistanceSpec
from abxgap.syngen import SynSpec, generate
from abxgap.typealiases import ContractViolation, DataError
from abxgap import utils
from oracles import (
    naive_language_cells, naive_phonetic_cells, random_language_fixture, random_phonetic_fixture, straight_line_final)


POOLED = DistanceSpec(sequence_mode='mean_pool')


def _scaled(features, factor):
    return {u: FeatureMatrix(u, m.values * factor, m.frame_rate) for u, m in features.items()}


class TestTriplet:
    def test_outcomes(self):
        assert score_triplet(0.2, 0.9) == 1.0
        assert score_triplet(0.9, 0.2) == 0.0
        assert score_triplet(0.4, 0.4) == 0.5

    def test_non_finite(self):
        with pytest.raises(ContractViolation):
            score_triplet(float('nan'), 0.2)
        with pytest.raises(ContractViolation):
            score_triplet(0.2, float('inf'))


class TestCell:
    def test_separable_cell(self):
        features = {f'a{i}': FeatureMatrix(f'a{i}', [[1.0, 0.01 * i]], 100) for i in range(3)}
        features.update({f'b{i}': FeatureMatrix(f'b{i}', [[0.01 * i, 1.0]], 100) for i in range(2)})
        records = [UtteranceRecord(u, 's1', u[0]) for u in features]
        for cell in build_language_cells(records, AbxCondition('language')):
            assert score_cell(cell, features, records, POOLED).score == 1.0

    def test_identical_pools_score_half(self):
        features = {u: FeatureMatrix(u, [[1.0, 2.0]], 100) for u in ('a1', 'a2', 'b1', 'b2')}
        records = [UtteranceRecord(u, 's1', u[0]) for u in features]
        for cell in build_language_cells(records, AbxCondition('language')):
            result = score_cell(cell, features, records, POOLED)
            assert (result.score, result.triplet_count) == (0.5, 4)

    def test_unresolvable_token_is_named(self):
        features = {'a1': FeatureMatrix('a1', [[1.0, 0.0]], 100)}
        records = [UtteranceRecord('a1', 's1', 'a'), UtteranceRecord('a2', 's1', 'a'), UtteranceRecord('b1', 's1', 'b')]
        cell = build_language_cells(records, AbxCondition('language'))[0]
        with pytest.raises(DataError, match="a2"):
            score_cell(cell, features, records, POOLED)

    def test_scorer_pickles_without_caches(self):
        import pickle
        features, records, _ = random_language_fixture(0)
        scorer = CellScorer(features, records, POOLED)
        scorer.distance(0, 1)
        clone = pickle.loads(pickle.dumps(scorer))
        assert clone._distances == {}
        assert clone.distance(0, 1) == scorer.distance(0, 1)


class TestAggregate:
    def test_single_cell(self):
        report = aggregate([CellScore(('a', 'b', 'sil', 't', 's1'), 4, 1.0)], AbxCondition('phonetic_within'))
        assert report.final_error_percent == 0.0

    def test_symmetrization(self):
        report = aggregate([CellScore(('a', 'b', 'sil', 't', 's1'), 10, 0.9),
                            CellScore(('b', 'a', 'sil', 't', 's1'), 10, 0.7)], AbxCondition('phonetic_within'))
        assert report.levels['symmetrized'] == {('a', 'b'): pytest.approx(0.8)}
        assert report.final_error_percent == pytest.approx(20.0)
        assert report.to_dict()['final_error_percent'] == 20.0

    def test_one_sided_pair_is_kept(self):
        report = aggregate([CellScore(('a', 'b', 'sil', 't', 's1'), 10, 0.9),
                            CellScore(('a', 'e', 'sil', 't', 's1'), 10, 0.5)], AbxCondition('phonetic_within'))
        assert report.levels['symmetrized'] == {('a', 'b'): 0.9, ('a', 'e'): 0.5}

    def test_unweighted_levels(self):
        scores = [CellScore(('a', 'b', 'c1', 'c2', 's1'), 1000, 1.0), CellScore(('a', 'b', 'c1', 'c2', 's2'), 1, 0.0),
                  CellScore(('a', 'b', 'k', 'sil', 's1'), 1, 0.5)]
        report = aggregate(scores, AbxCondition('phonetic_within'))
        assert report.levels['speaker_collapsed'] == {('a', 'b', 'c1', 'c2'): 0.5, ('a', 'b', 'k', 'sil'): 0.5}
        assert report.final_score == 0.5

    def test_language_levels(self):
        scores = [CellScore(('EN', 'FR', 's1'), 2, 1.0), CellScore(('EN', 'FR', 's2'), 2, 0.5),
                  CellScore(('FR', 'EN', 's1'), 2, 0.5)]
        report = aggregate(scores, AbxCondition('language', by_speaker=True))
        assert report.levels['speaker_collapsed'] == {('EN', 'FR'): 0.75, ('FR', 'EN'): 0.5}
        assert report.final_score == 0.625
        assert report.to_dict()['aggregation'] == ['cell', 'speaker_collapsed', 'symmetrized', 'final']

    def test_empty(self):
        with pytest.raises(DataError, match='no scorable cells'):
            aggregate([], AbxCondition('language'))

    def test_duplicate_keys(self):
        cell = CellScore(('EN', 'FR'), 2, 1.0)
        with pytest.raises(ContractViolation):
            aggregate([cell, cell], AbxCondition('language'))

    def test_input_order_is_irrelevant(self, rng):
        keys = [(a, b, c, 'x', s) for a in 'abc' for b in 'abc' if a != b for c in 'pq' for s in ('s1', 's2')]
        scores = [CellScore(k, 3, float(v)) for k, v in zip(keys, rng.random(len(keys)))]
        first = aggregate(scores, AbxCondition('phonetic_within'))
        second = aggregate(scores[::-1], AbxCondition('phonetic_within'))
        assert first.to_dict() == second.to_dict()
        assert first.final_score == straight_line_final({c.key: c.score for c in scores})


class TestMatchesOracle:
    @pytest.mark.parametrize('seed', range(50))
    def test_phonetic(self, seed):
        features, tokens, frames = random_phonetic_fixture(seed)
        metric = 'angular' if seed % 2 else 'cosine'
        for kind in ('phonetic_within', 'phonetic_across'):
            expected = naive_phonetic_cells(tokens, frames, kind, metric)
            if not expected:
                with pytest.raises(DataError, match='no scorable cells'):
                    run_phonetic_abx(features, tokens, AbxCondition(kind), DistanceSpec(metric))
                continue
            report = run_phonetic_abx(features, tokens, AbxCondition(kind), DistanceSpec(metric))
            assert report.levels['cell'] == expected
            assert report.final_score == straight_line_final(expected)
            assert report.cells_scored == len(expected)

    @pytest.mark.parametrize('seed', range(50))
    def test_language(self, seed):
        features, records, pooled = random_language_fixture(seed)
        metric = 'angular' if seed % 2 else 'cosine'
        expected = naive_language_cells(records, pooled, metric)
        report = run_language_abx(features, records, DistanceSpec(metric, 'mean_pool'))
        assert report.levels['cell'] == expected
        assert report.final_score == straight_line_final(expected, phonetic=False)


NOISY = SynSpec(n_phones=3, n_speakers=2, n_languages=2, tokens_per_class=3, dim=4, frames_per_token=(1, 3),
                class_separation=0.5, noise_std=0.5, seed=9)


class TestInvariance:
    def test_token_order(self, rng):
        corpus = generate(NOISY)
        features, tokens = corpus.features, corpus.phone_tokens
        shuffled = [tokens[i] for i in rng.permutation(len(tokens))]
        for kind in ('phonetic_within', 'phonetic_across'):
            a = run_phonetic_abx(features, tokens, AbxCondition(kind))
            b = run_phonetic_abx(features, shuffled, AbxCondition(kind))
            assert a.to_dict() == b.to_dict()

    @pytest.mark.parametrize('metric', ['cosine', 'angular'])
    def test_feature_scale(self, metric):
        corpus = generate(NOISY)
        features, tokens = corpus.features, corpus.phone_tokens
        scaled = _scaled(features, 3.7)
        for kind in ('phonetic_within', 'phonetic_across'):
            a = run_phonetic_abx(features, tokens, AbxCondition(kind), DistanceSpec(metric))
            b = run_phonetic_abx(scaled, tokens, AbxCondition(kind), DistanceSpec(metric))
            assert a.to_dict() == b.to_dict()
        features, records, _ = random_language_fixture(11)
        a = run_language_abx(features, records, DistanceSpec(metric, 'mean_pool'))
        b = run_language_abx(_scaled(features, 3.7), records, DistanceSpec(metric, 'mean_pool'))
        assert a.to_dict() == b.to_dict()

    def test_worker_count(self, small_corpus):
        serial = run_phonetic_abx(small_corpus.features, small_corpus.phone_tokens, AbxCondition('phonetic_across'))
        parallel = run_phonetic_abx(small_corpus.features, small_corpus.phone_tokens, AbxCondition('phonetic_across'),
                                    threads=2)
        assert serial.to_dict() == parallel.to_dict()
        assert cell_scores_csv(serial) == cell_scores_csv(parallel)


class TestSyntheticLevels:
    def test_phonetic_chance(self):
        corpus = generate(SynSpec(n_phones=4, n_speakers=3, n_languages=1, tokens_per_class=10, dim=8,
                                  class_separation=0.0, noise_std=1.0, seed=5))
        report = run_phonetic_abx(corpus.features, corpus.phone_tokens)
        assert report.triplets_scored >= 5000
        assert report.final_error_percent == pytest.approx(50.0, abs=3.0)

    def test_language_chance(self):
        corpus = generate(SynSpec(n_phones=3, n_speakers=5, n_languages=2, tokens_per_class=20, dim=8,
                                  frames_per_token=(1, 2), class_separation=0.0, noise_std=1.0, seed=5))
        report = run_language_abx(corpus.features, corpus.language_records)
        assert report.triplets_scored >= 5000
        assert report.final_error_percent == pytest.approx(50.0, abs=3.0)

    @pytest.mark.parametrize('kind', ['phonetic_within', 'phonetic_across'])
    def test_separable_phones(self, small_corpus, kind):
        report = run_phonetic_abx(small_corpus.features, small_corpus.phone_tokens, AbxCondition(kind))
        assert report.final_error_percent == 0.0
        assert utils.format_percent(report.final_error_percent) == '0.00'

    def test_separable_languages(self):
        corpus = generate(SynSpec(n_phones=3, n_speakers=2, n_languages=2, tokens_per_class=3, dim=8,
                                  class_separation=0.0, language_offset_scale=3.0, noise_std=0.1, seed=2))
        report = run_language_abx(corpus.features, corpus.language_records)
        assert report.final_error_percent == 0.0

    def test_speaker_controlled_language(self):
        features, records = {}, []
        rng = np.random.default_rng(4)
        for speaker in ('s1', 's2'):
            for lang, direction in (('EN', [1.0, 0.0, 0.0]), ('FR', [0.0, 1.0, 0.0])):
                for r in range(3):
                    utt = f'{speaker}{lang}{r}'
                    features[utt] = FeatureMatrix(utt, direction + 0.01 * rng.standard_normal((4, 3)), 100)
                    records.append(UtteranceRecord(utt, speaker, lang))
        report = run_language_abx(features, records, condition=AbxCondition('language', by_speaker=True))
        assert sorted(report.levels['cell']) == [('EN', 'FR', 's1'), ('EN', 'FR', 's2'), ('FR', 'EN', 's1'),
                                                 ('FR', 'EN', 's2')]
        assert report.final_error_percent == 0.0
        assert report.to_dict()['speaker_control'] == 'same_speaker'


class TestSampling:
    def test_capped_cells_are_sampled_reproducibly(self, small_corpus):
        args = small_corpus.features, small_corpus.phone_tokens, AbxCondition('phonetic_within')
        capped = run_phonetic_abx(*args, max_triplets=3, seed=3)
        assert capped.sampled
        assert all(c.triplet_count <= 3 for c in capped.cell_scores)
        assert capped.to_dict()['seed'] == 3
        assert run_phonetic_abx(*args, max_triplets=3, seed=3).to_dict() == capped.to_dict()
        assert run_phonetic_abx(*args, max_triplets=3, seed=3, threads=2).to_dict() == capped.to_dict()

    def test_uncapped_run_records_no_sampling(self, small_corpus):
        report = run_phonetic_abx(small_corpus.features, small_corpus.phone_tokens)
        d = report.to_dict()
        assert (d['sampled'], d['max_triplets'], d['seed']) == (False, None, None)

    def test_cap_above_cell_size_is_exhaustive(self, small_corpus):
        args = small_corpus.features, small_corpus.phone_tokens
        assert not run_phonetic_abx(*args, max_triplets=10 ** 6).sampled


class TestReportIO:
    def test_missing_utterance(self):
        features, tokens, _ = random_phonetic_fixture(1)
        del features[tokens[0].utterance_id]
        with pytest.raises(DataError, match='missing from the feature archive'):
            run_phonetic_abx(features, tokens)

    def test_load_report(self, tmp_path, small_corpus):
        report = run_phonetic_abx(small_corpus.features, small_corpus.phone_tokens)
        path = utils.write_json(report.to_dict(), tmp_path / 'r.json')
        loaded = load_report(path)
        assert loaded['condition'] == 'phonetic_within'
        assert loaded['final_score'] == report.final_score

    def test_load_report_rejects_garbage(self, tmp_path):
        (tmp_path / 'bad.json').write_text('{"condition": "phonetic_within"}')
        with pytest.raises(DataError, match='lacks'):
            load_report(tmp_path / 'bad.json')
        (tmp_path / 'worse.json').write_text('not json')
        with pytest.raises(DataError):
            load_report(tmp_path / 'worse.json')

    def test_csv_dump(self):
        report = aggregate([CellScore(('EN', 'FR'), 12, 0.75), CellScore(('FR', 'EN'), 6, 0.5)],
                           AbxCondition('language'), POOLED)
        assert cell_scores_csv(report) == 'key,triplet_count,score,sampled\nEN FR,12,0.75,0\nFR EN,6,0.5,0\n'
