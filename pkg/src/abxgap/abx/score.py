"""ABX scoring and aggregation.

Each triplet scores 1 when ``d(A, X) < d(B, X)``, 0.5 on an exact tie and 0 otherwise. A cell score is the mean
over its triplets. Cell scores are then folded through unweighted means, always in ascending key order:

- phonetic: cell -> speaker-collapsed ``(phoneA, phoneB, context)`` -> context-collapsed ``(phoneA, phoneB)``
  -> symmetrized unordered pair -> final;
- language: cell -> speaker-collapsed ``(La, Lb)`` -> symmetrized unordered pair -> final.

Scoring of independent cells may run in worker processes; the report never depends on completion order.
"""

from __future__ import annotations
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Union
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from collections import defaultdict
import csv
import io
import logging
import math
import numpy as np
from .task import (
    CONDITION_KINDS, AbxCell, AbxCondition, AbxTask, build_phonetic_task, build_language_task, count_triplets,
    triplet_at)
from ..featstore import FeatureMatrix
from ..itemfile import PhoneToken, UtteranceRecord
from ..kernels import DistanceSpec, distance_matrix, dtw_distance, mean_pool
from .. import utils
from ..typealiases import CellKey, Matrix, Vector, SomeSortOfPath, DataError, ContractViolation


__all__ = [
    'CellScore', 'AbxReport', 'CellScorer', 'score_triplet', 'score_cell', 'score_cells', 'aggregate',
    'run_phonetic_abx', 'run_language_abx', 'cell_scores_csv', 'load_report']


log = logging.getLogger(__name__)

Item = Union[PhoneToken, UtteranceRecord]
FeatureSource = Mapping[str, FeatureMatrix]

PHONETIC_LEVELS = ('cell', 'speaker_collapsed', 'context_collapsed', 'symmetrized')
LANGUAGE_LEVELS = ('cell', 'speaker_collapsed', 'symmetrized')


def score_triplet(d_ax: float, d_bx: float) -> float:
    """1 if A is closer to X than B is, 0.5 on exact equality, 0 otherwise."""
    if not (math.isfinite(d_ax) and math.isfinite(d_bx)):
        raise ContractViolation(f'Non-finite distance in triplet: d(A,X)={d_ax}, d(B,X)={d_bx}.')
    if d_ax < d_bx:
        return 1.0
    if d_ax == d_bx:
        return 0.5
    return 0.0


@dataclass(frozen=True)
class CellScore:
    key: CellKey
    triplet_count: int
    score: float
    sampled: bool = False

    def __post_init__(self) -> None:
        if self.triplet_count < 1:
            raise ContractViolation(f'Cell {self.key} has no triplets.')
        if not 0.0 <= self.score <= 1.0:
            raise ContractViolation(f'Cell {self.key} score {self.score} outside [0, 1].')


class CellScorer:
    """Scores cells against one feature source. Token features and pairwise sequence distances are cached, so
    tokens shared between cells are compared only once per process.

    :param features: Mapping from utterance id to features, e.g. a :class:`~abxgap.featstore.FeatureArchive`.
    :param items: The token list (phone tokens or utterance records) the cells index into.
    :param spec: Frame metric and sequence mode.
    :param max_triplets: If set, cells with more triplets are scored on a seeded uniform sample of this size.
    :param seed: Seed of the downsampler.
    """

    def __init__(
            self, features: FeatureSource, items: Sequence[Item], spec: DistanceSpec,
            max_triplets: Optional[int] = None, seed: int = 0) -> None:
        if max_triplets is not None and max_triplets < 1:
            raise ContractViolation('max_triplets must be positive.')
        self.features = features
        self.items = list(items)
        self.spec = spec
        self.max_triplets = max_triplets
        self.seed = seed
        self._frames: Dict[int, Matrix] = {}
        self._pooled: Dict[int, Vector] = {}
        self._distances: Dict[tuple, float] = {}

    def __getstate__(self) -> Dict[str, Any]:
        state = self.__dict__.copy()
        state['_frames'], state['_pooled'], state['_distances'] = {}, {}, {}
        return state

    def token_frames(self, i: int) -> Matrix:
        if i not in self._frames:
            item = self.items[i]
            try:
                m = self.features[item.utterance_id]
            except KeyError:
                name = item.describe() if isinstance(item, PhoneToken) else item.utterance_id
                raise DataError(f'Token {i} ({name}): utterance \'{item.utterance_id}\' not in the feature archive.')
            if isinstance(item, PhoneToken):
                m = m.slice(item.onset, item.offset)
            self._frames[i] = m.values
        return self._frames[i]

    def distance(self, i: int, j: int) -> float:
        pair = (i, j)
        if pair not in self._distances:
            if self.spec.sequence_mode == 'dtw':
                d = dtw_distance(self.token_frames(i), self.token_frames(j), self.spec.frame_metric)
            else:
                d = float(distance_matrix(self._pool(i)[None, :], self._pool(j)[None, :], self.spec.frame_metric)[0, 0])
            self._distances[pair] = d
        return self._distances[pair]

    def _pool(self, i: int) -> Vector:
        if i not in self._pooled:
            self._pooled[i] = mean_pool(self.token_frames(i))
        return self._pooled[i]

    def _sampled_twice(self, cell: AbxCell, index: int, total: int) -> int:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, index]))
        picks = np.sort(rng.choice(total, size=self.max_triplets, replace=False))
        twice = 0
        for p in picks:
            a, b, x = triplet_at(cell, int(p))
            twice += int(2 * score_triplet(self.distance(a, x), self.distance(b, x)))
        return twice

    def _exhaustive_twice(self, cell: AbxCell) -> int:
        d_ax = np.array([[self.distance(a, x) if a != x else 0.0 for x in cell.x_tokens] for a in cell.a_tokens])
        d_bx = np.array([[self.distance(b, x) for x in cell.x_tokens] for b in cell.b_tokens])
        if not (np.isfinite(d_ax).all() and np.isfinite(d_bx).all()):
            raise ContractViolation(f'Non-finite distance in cell {cell.key}.')
        valid = np.ones(d_ax.shape, dtype=bool)
        if cell.shared_pool:
            valid = np.asarray(cell.a_tokens)[:, None] != np.asarray(cell.x_tokens)[None, :]
        twice = 0
        for row in d_bx:
            twice += 2 * int(np.count_nonzero((d_ax < row) & valid)) + int(np.count_nonzero((d_ax == row) & valid))
        return twice

    def score(self, cell: AbxCell, index: int = 0) -> CellScore:
        """Score one cell. ``index`` is the cell's position in the task and seeds its downsampling."""
        total = count_triplets(cell)
        if self.max_triplets is not None and total > self.max_triplets:
            twice = self._sampled_twice(cell, index, total)
            return CellScore(cell.key, self.max_triplets, twice / (2 * self.max_triplets), sampled=True)
        twice = self._exhaustive_twice(cell)
        return CellScore(cell.key, total, twice / (2 * total))


def score_cell(cell: AbxCell, features: FeatureSource, items: Sequence[Item], spec: DistanceSpec) -> CellScore:
    """**Score a single cell** over all its triplets.

    :param cell: The cell, indexing into ``items``.
    :param features: Mapping from utterance id to features.
    :param items: Phone tokens (sliced out of their utterance) or utterance records (used whole).
    :param spec: Distance specification: DTW for phonetic ABX, mean pooling for language ABX.
    :return: The cell score.
    """
    return CellScorer(features, items, spec).score(cell)


_worker_scorer: Optional[CellScorer] = None


def _init_worker(scorer: CellScorer) -> None:
    global _worker_scorer
    _worker_scorer = scorer


def _score_batch(start: int, cells: List[AbxCell]) -> List[CellScore]:
    """This function is submitted to the ProcessPoolExecutor."""
    return [_worker_scorer.score(cell, start + k) for k, cell in enumerate(cells)]


def score_cells(scorer: CellScorer, cells: Sequence[AbxCell], threads: Optional[int] = 1) -> List[CellScore]:
    """Score all cells, in worker processes when ``threads`` > 1. Results are in cell order whatever the
    completion order."""
    threads = utils.resolve_threads(threads)
    cells = list(cells)
    if threads == 1 or len(cells) < 2:
        return [scorer.score(cell, i) for i, cell in enumerate(cells)]

    batch = max(1, math.ceil(len(cells) / (threads * 4)))
    results: List[Optional[List[CellScore]]] = [None] * math.ceil(len(cells) / batch)
    with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker, initargs=(scorer,)) as executor:
        futures = {
            executor.submit(_score_batch, start, cells[start:start + batch]): start // batch
            for start in range(0, len(cells), batch)}
        for k, future in enumerate(as_completed(futures), 1):
            results[futures[future]] = future.result()
            log.debug('Scored batch %d/%d.', k, len(futures))
    return [score for part in results for score in part]


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def _collapse(level: Dict[CellKey, float], group: Callable[[CellKey], CellKey]) -> Dict[CellKey, float]:
    buckets: Dict[CellKey, List[float]] = defaultdict(list)
    for key in sorted(level):
        buckets[group(key)].append(level[key])
    return {k: _mean(buckets[k]) for k in sorted(buckets)}


def _symmetrize(level: Dict[CellKey, float]) -> Dict[CellKey, float]:
    buckets: Dict[CellKey, List[float]] = defaultdict(list)
    for key in sorted(level):
        a, b = key
        buckets[(min(a, b), max(a, b))].append(level[key])
    return {k: _mean(buckets[k]) for k in sorted(buckets)}


@dataclass
class AbxReport:
    """Scores of one ABX run at every aggregation level, plus the exact settings used."""

    condition: AbxCondition
    spec: DistanceSpec
    levels: Dict[str, Dict[CellKey, float]]
    final_score: float
    cells_scored: int
    cells_skipped: int = 0
    cell_scores: List[CellScore] = field(default_factory=list)
    max_triplets: Optional[int] = None
    seed: Optional[int] = None

    @property
    def final_error_percent(self) -> float:
        return 100.0 * (1.0 - self.final_score)

    @property
    def sampled(self) -> bool:
        return any(c.sampled for c in self.cell_scores)

    @property
    def triplets_scored(self) -> int:
        return sum(c.triplet_count for c in self.cell_scores)

    def to_dict(self) -> Dict[str, Any]:
        names = PHONETIC_LEVELS if self.condition.is_phonetic else LANGUAGE_LEVELS
        return {
            'condition': self.condition.kind,
            'frame_metric': self.spec.frame_metric,
            'sequence_mode': self.spec.sequence_mode,
            'final_error_percent': utils.round_half_up(self.final_error_percent),
            'final_score': self.final_score,
            'cells_scored': self.cells_scored,
            'cells_skipped': self.cells_skipped,
            'triplets_scored': self.triplets_scored,
            'sampled': self.sampled,
            'max_triplets': self.max_triplets,
            'seed': self.seed,
            'min_class_a': self.condition.min_class_a,
            'min_class_b': self.condition.min_class_b,
            'speaker_control': self.condition.speaker_control,
            'aggregation': list(names) + ['final'],
            'levels': {name: {' '.join(k): v for k, v in self.levels[name].items()} for name in names},
        }


def aggregate(
        cell_scores: Sequence[CellScore], condition: AbxCondition, spec: DistanceSpec = DistanceSpec(),
        cells_skipped: int = 0, max_triplets: Optional[int] = None, seed: Optional[int] = None) -> AbxReport:
    """**Fold cell scores into the final ABX score.**

    :param cell_scores: One score per cell, any order.
    :param condition: The condition the cells were built for; decides the key layout.
    :param spec: Recorded in the report.
    :param cells_skipped: Candidate cells dropped for lack of tokens, recorded in the report.
    :return: The report. Raises :class:`DataError` when there is nothing to aggregate.
    """
    if not cell_scores:
        raise DataError('no scorable cells')
    cell_level = {}
    for c in cell_scores:
        if c.key in cell_level:
            raise ContractViolation(f'Duplicate cell key {c.key}.')
        cell_level[c.key] = c.score
    cell_level = {k: cell_level[k] for k in sorted(cell_level)}

    levels = {'cell': cell_level}
    if condition.is_phonetic:
        levels['speaker_collapsed'] = _collapse(cell_level, lambda k: k[:4])
        levels['context_collapsed'] = _collapse(levels['speaker_collapsed'], lambda k: k[:2])
        levels['symmetrized'] = _symmetrize(levels['context_collapsed'])
    else:
        levels['speaker_collapsed'] = _collapse(cell_level, lambda k: k[:2])
        levels['symmetrized'] = _symmetrize(levels['speaker_collapsed'])
    final = _mean(list(levels['symmetrized'].values()))

    return AbxReport(
        condition, spec, levels, final, len(cell_level), cells_skipped,
        sorted(cell_scores, key=lambda c: c.key), max_triplets, seed)


def _check_features(features: FeatureSource, items: Sequence[Item]) -> None:
    missing = sorted({i.utterance_id for i in items if i.utterance_id not in features})
    if missing:
        shown = ', '.join(missing[:5]) + (' ...' if len(missing) > 5 else '')
        raise DataError(f'{len(missing)} item utterance(s) missing from the feature archive: {shown}.')
    dim = getattr(features, 'dim', None)
    if dim is None:
        dims = {features[u].dim for u in {i.utterance_id for i in items}}
        if len(dims) > 1:
            raise DataError(f'Feature archive mixes dimensions {sorted(dims)}.')


def _run(
        task: AbxTask, features: FeatureSource, items: Sequence[Item], spec: DistanceSpec,
        threads: Optional[int], max_triplets: Optional[int], seed: int) -> AbxReport:
    log.info('%s: %d cells (%d skipped), %d triplets.', task.condition.kind, len(task.cells), task.cells_skipped,
             task.triplet_count)
    if not task.cells:
        raise DataError(f'no scorable cells for condition {task.condition.kind} '
                        f'({task.cells_skipped} candidate cells had too few tokens).')
    scorer = CellScorer(features, items, spec, max_triplets, seed)
    scores = score_cells(scorer, task.cells, threads)
    return aggregate(scores, task.condition, spec, task.cells_skipped, max_triplets,
                     seed if max_triplets is not None else None)


def run_phonetic_abx(
        features: FeatureSource, items: Sequence[PhoneToken],
        condition: AbxCondition = AbxCondition('phonetic_within'), spec: DistanceSpec = DistanceSpec(),
        threads: Optional[int] = 1, max_triplets: Optional[int] = None, seed: int = 0) -> AbxReport:
    """**Phonetic ABX: build cells, score them, aggregate.**

    :param features: Feature archive (or any mapping from utterance id to :class:`FeatureMatrix`).
    :param items: Phone tokens referencing utterances of ``features``.
    :param condition: ``phonetic_within`` (default) or ``phonetic_across``.
    :param spec: Defaults to cosine frames compared with DTW.
    :param threads: Worker processes. ``None`` uses all CPUs. Results do not depend on it.
    :param max_triplets: Optional per-cell cap, enforced by seeded uniform downsampling.
    :param seed: Seed of the downsampler.
    :return: The ABX report.
    """
    _check_features(features, items)
    task = build_phonetic_task(items, condition)
    return _run(task, features, items, spec, threads, max_triplets, seed)


def run_language_abx(
        features: FeatureSource, items: Sequence[UtteranceRecord],
        spec: DistanceSpec = DistanceSpec(sequence_mode='mean_pool'),
        condition: AbxCondition = AbxCondition('language'),
        threads: Optional[int] = 1, max_triplets: Optional[int] = None, seed: int = 0) -> AbxReport:
    """**Language ABX over whole utterances**, by default with mean-pooled cosine distance and no speaker
    control. Arguments are as in :func:`run_phonetic_abx`."""
    _check_features(features, items)
    task = build_language_task(items, condition)
    return _run(task, features, items, spec, threads, max_triplets, seed)


def cell_scores_csv(report: AbxReport) -> str:
    """Per-cell dump: key, triplet count, score, whether the cell was downsampled."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(['key', 'triplet_count', 'score', 'sampled'])
    for c in report.cell_scores:
        writer.writerow([' '.join(c.key), c.triplet_count, repr(c.score), int(c.sampled)])
    return buffer.getvalue()


REPORT_KEYS = ('condition', 'final_score', 'final_error_percent', 'cells_scored', 'levels')


def load_report(path: SomeSortOfPath) -> Dict[str, Any]:
    """Read back a report written from :meth:`AbxReport.to_dict`, checking that it has the fields downstream
    tools rely on."""
    try:
        report = utils.read_json(path)
    except ValueError as e:
        raise DataError(f'{path}: not a JSON report ({e}).')
    if not isinstance(report, dict):
        raise DataError(f'{path}: not an ABX report.')
    missing = [k for k in REPORT_KEYS if k not in report]
    if missing:
        raise DataError(f'{path}: ABX report lacks {", ".join(missing)}.')
    if report['condition'] not in CONDITION_KINDS:
        raise DataError(f'{path}: unknown condition {report["condition"]!r}.')
    if not 0.0 <= report['final_score'] <= 1.0:
        raise DataError(f'{path}: final score {report["final_score"]} outside [0, 1].')
    return report
