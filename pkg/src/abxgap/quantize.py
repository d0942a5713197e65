"""k-means codebooks and discrete units.

Codebooks are fitted with k-means++ seeding and Lloyd iterations, and give both the units for unit-level ABX
(k=50 by default) and pseudo-labels for masked prediction. The assignment step runs over fixed-size chunks of frames
and the partial sums are reduced in chunk order, so a fitted codebook is bit-identical for any number of threads.

Codebook file (little-endian): magic ``KMB1``, version u32, k u32, dim u32, seed i64, inertia f64, then k x dim
f32 centroids. Unit sequences export as text lines ``utt_id u0 u1 u2 ...``.
"""

from __future__ import annotations
from typing import Iterable, List, Mapping, Optional, TextIO, Tuple
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import struct
from pathlib import Path
import numpy as np
from scipy.spatial.distance import cdist
from .featstore import FeatureMatrix, write_archive, ArchiveManifest
from .typealiases import SomeSortOfPath, Matrix, DataError
from . import utils


__all__ = [
    'Codebook', 'UnitSequence', 'ENCODINGS', 'fit_kmeans', 'assign_units', 'units_to_features', 'sample_frames',
    'save_codebook', 'load_codebook', 'write_units', 'read_units', 'quantize_archive',
    'CODEBOOK_MAGIC', 'CODEBOOK_VERSION']


log = logging.getLogger(__name__)

CODEBOOK_MAGIC = b'KMB1'
CODEBOOK_VERSION = 1
CODEBOOK_HEADER = struct.Struct('<4sIIIqd')
ENCODINGS = ('one_hot', 'centroid')
CHUNK_FRAMES = 16384


@dataclass(eq=False)
class Codebook:
    """``k`` centroids of dimension ``dim``. ``inertia_trace`` holds the inertia after every assignment step of
    the fit (not persisted)."""

    centroids: Matrix
    inertia: float
    iterations_run: int
    seed: int
    inertia_trace: List[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise DataError(f'Codebook centroids must be a non-empty k x dim matrix, got {self.centroids.shape}.')
        if not np.isfinite(self.centroids).all():
            raise DataError('Codebook centroids contain NaN or Inf.')

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class UnitSequence:
    utterance_id: str
    units: Tuple[int, ...]
    frame_rate: float = 1.0


def _nearest(frames: Matrix, centroids: Matrix) -> Tuple[np.ndarray, np.ndarray]:
    dist = cdist(frames, centroids, 'sqeuclidean')
    labels = np.argmin(dist, axis=1)
    return labels, dist[np.arange(frames.shape[0]), labels]


def _assign_chunked(frames: Matrix, centroids: Matrix, threads: int) -> Tuple[np.ndarray, np.ndarray]:
    starts = range(0, frames.shape[0], CHUNK_FRAMES)
    chunks = [frames[s:s + CHUNK_FRAMES] for s in starts]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            parts = list(executor.map(lambda c: _nearest(c, centroids), chunks))
    else:
        parts = [_nearest(c, centroids) for c in chunks]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _inertia(min_dist: np.ndarray) -> float:
    # Chunk partial sums added in chunk order.
    total = 0.0
    for s in range(0, min_dist.shape[0], CHUNK_FRAMES):
        total += float(np.sum(min_dist[s:s + CHUNK_FRAMES]))
    return total


def _kmeans_plus_plus(frames: Matrix, k: int, rng: np.random.Generator) -> Matrix:
    n = frames.shape[0]
    chosen = [int(rng.integers(n))]
    closest = cdist(frames, frames[chosen], 'sqeuclidean')[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # Every point coincides with a chosen centroid; pick any unchosen index.
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining))
        chosen.append(idx)
        closest = np.minimum(closest, cdist(frames, frames[idx:idx + 1], 'sqeuclidean')[:, 0])
    return frames[chosen].copy()


def _update(frames: Matrix, labels: np.ndarray, min_dist: np.ndarray, centroids: Matrix) -> Matrix:
    k, dim = centroids.shape
    sums = np.zeros((k, dim))
    counts = np.zeros(k, dtype=np.int64)
    for s in range(0, frames.shape[0], CHUNK_FRAMES):
        part = labels[s:s + CHUNK_FRAMES]
        np.add.at(sums, part, frames[s:s + CHUNK_FRAMES])
        counts += np.bincount(part, minlength=k)
    updated = centroids.copy()
    filled = counts > 0
    updated[filled] = sums[filled] / counts[filled, None]

    empty = np.flatnonzero(~filled)
    if empty.size:
        # Re-seed each empty cluster on the frame farthest from its current centroid.
        order = np.argsort(-min_dist, kind='stable')
        for cluster, idx in zip(empty, order):
            updated[cluster] = frames[idx]
        log.debug('Re-seeded %d empty cluster(s).', empty.size)
    return updated


def fit_kmeans(
        frames: Matrix, k: int = 50, max_iter: int = 300, tol: float = 1e-6, seed: int = 0,
        threads: Optional[int] = 1) -> Codebook:
    """**Fit a k-means codebook.**

    :param frames: ``n x dim`` sample of frame vectors, ``n >= k``.
    :param k: Number of centroids. Defaults to 50.
    :param max_iter: Maximum number of Lloyd iterations. Defaults to 300.
    :param tol: Stop once the relative inertia improvement of an iteration falls below this. Defaults to 1e-6.
    :param seed: Seed of the k-means++ initialization.
    :param threads: Threads for the assignment step. The result does not depend on it.
    :return: The fitted codebook with its inertia trace.
    """
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] < 1:
        raise DataError(f'Frames must be an n x dim matrix, got shape {frames.shape}.')
    if k < 1:
        raise DataError(f'k must be at least 1, got {k}.')
    if frames.shape[0] < k:
        raise DataError(f'sample < k: {frames.shape[0]} frames for k={k}.')
    if not np.isfinite(frames).all():
        raise DataError('Frame sample contains NaN or Inf.')
    threads = utils.resolve_threads(threads)

    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(frames, k, rng)
    labels, min_dist = _assign_chunked(frames, centroids, threads)
    inertia = _inertia(min_dist)
    trace = [inertia]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        centroids = _update(frames, labels, min_dist, centroids)
        labels, min_dist = _assign_chunked(frames, centroids, threads)
        new_inertia = _inertia(min_dist)
        trace.append(new_inertia)
        improvement = inertia - new_inertia
        inertia = new_inertia
        if inertia == 0 or improvement < tol * (inertia + improvement):
            break
    log.info('k-means k=%d: %d iterations, inertia %.6g.', k, iterations, inertia)
    return Codebook(centroids, inertia, iterations, seed, trace)


def assign_units(m: FeatureMatrix, cb: Codebook) -> UnitSequence:
    """Nearest centroid (Euclidean) per frame; ties go to the lowest index."""
    if m.dim != cb.dim:
        raise DataError(f'Utterance \'{m.utterance_id}\': feature dim {m.dim} does not match codebook dim {cb.dim}.')
    labels, _ = _nearest(m.values, cb.centroids)
    return UnitSequence(m.utterance_id, tuple(int(u) for u in labels), m.frame_rate)


def units_to_features(u: UnitSequence, cb: Codebook, encoding: str = 'one_hot') -> FeatureMatrix:
    """**Turn units back into frame vectors** for unit-level ABX.

    :param u: The unit sequence.
    :param cb: The codebook that produced it.
    :param encoding: ``'one_hot'`` (k-dim indicator per frame) or ``'centroid'`` (the centroid vector).
    :return: A feature matrix at the unit sequence's frame rate.
    """
    if encoding not in ENCODINGS:
        raise DataError(f'Unknown unit encoding {encoding!r}; expected one of {ENCODINGS}.')
    units = np.asarray(u.units, dtype=np.int64)
    if units.size == 0:
        raise DataError(f'Utterance \'{u.utterance_id}\': empty unit sequence.')
    if units.min() < 0 or units.max() >= cb.k:
        raise DataError(f'Utterance \'{u.utterance_id}\': unit out of range [0, {cb.k}).')
    if encoding == 'one_hot':
        data = np.zeros((units.size, cb.k), dtype=np.float32)
        data[np.arange(units.size), units] = 1.0
    else:
        data = cb.centroids[units]
    return FeatureMatrix(u.utterance_id, data, u.frame_rate)


def sample_frames(features: Mapping[str, FeatureMatrix], size: int, seed: int = 0) -> Matrix:
    """Seeded uniform sample of ``size`` frames (without replacement) across every utterance, in archive order.
    Returns all frames when the archive holds fewer."""
    ids = list(features)
    manifest = getattr(features, 'manifest', None)
    known = {e.utterance_id: e.frames for e in manifest.entries} if manifest is not None else {}
    counts = np.array([known[u] if u in known else features[u].frames for u in ids], dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise DataError('Feature archive is empty.')
    if size >= total:
        picks = np.arange(total)
    else:
        picks = np.sort(np.random.default_rng(seed).choice(total, size=size, replace=False))
    bounds = np.concatenate([[0], np.cumsum(counts)])
    rows = []
    for i, u in enumerate(ids):
        local = picks[(picks >= bounds[i]) & (picks < bounds[i + 1])] - bounds[i]
        if local.size:
            rows.append(features[u].values[local])
    return np.concatenate(rows, axis=0)


def save_codebook(cb: Codebook, path: SomeSortOfPath) -> Path:
    path = Path(path)
    if path.parent != Path(''):
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(CODEBOOK_HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, cb.k, cb.dim, cb.seed, cb.inertia))
        f.write(np.ascontiguousarray(cb.centroids, dtype='<f4').tobytes())
    return path


def load_codebook(path: SomeSortOfPath) -> Codebook:
    raw = Path(path).read_bytes()
    if len(raw) < CODEBOOK_HEADER.size:
        raise DataError(f'Codebook \'{path}\': truncated header.')
    magic, version, k, dim, seed, inertia = CODEBOOK_HEADER.unpack_from(raw)
    if magic != CODEBOOK_MAGIC or version != CODEBOOK_VERSION:
        raise DataError(f'Codebook \'{path}\': not a {CODEBOOK_MAGIC.decode()} v{CODEBOOK_VERSION} file.')
    expected = CODEBOOK_HEADER.size + k * dim * 4
    if len(raw) != expected:
        raise DataError(f'Codebook \'{path}\': {len(raw)} bytes, expected {expected}.')
    centroids = np.frombuffer(raw, dtype='<f4', offset=CODEBOOK_HEADER.size).reshape(k, dim)
    return Codebook(centroids.astype(np.float64), inertia, 0, seed)


def write_units(sequences: Iterable[UnitSequence], stream: TextIO) -> None:
    for s in sequences:
        stream.write(' '.join([s.utterance_id] + [str(u) for u in s.units]) + '\n')


def read_units(stream: Iterable[str], frame_rate: float = 1.0) -> List[UnitSequence]:
    sequences = []
    for number, line in enumerate(stream, 1):
        cols = line.split()
        if not cols:
            raise DataError(f'Line {number}: empty unit line.')
        try:
            units = tuple(int(c) for c in cols[1:])
        except ValueError:
            raise DataError(f'Line {number}: units must be integers.')
        sequences.append(UnitSequence(cols[0], units, frame_rate))
    return sequences


def quantize_archive(
        features: Mapping[str, FeatureMatrix], cb: Codebook, out: SomeSortOfPath,
        encoding: str = 'one_hot') -> Tuple[ArchiveManifest, List[UnitSequence]]:
    """**Apply a codebook to a whole archive.** Writes the unit features as a new archive under ``out`` and the
    unit sequences to ``out/units.txt``.

    :return: The manifest of the written archive and the unit sequences.
    """
    sequences = [assign_units(features[u], cb) for u in features]
    manifest = write_archive((units_to_features(s, cb, encoding) for s in sequences), out)
    with open(Path(out) / 'units.txt', 'w', encoding='utf-8') as f:
        write_units(sequences, f)
    return manifest, sequences
