"""Frame-level feature matrices and their on-disk archive.

An archive is a directory holding one ``.fea`` file per utterance plus ``manifest.json``. Each ``.fea`` file is
little-endian: magic ``FEA1``, version u32, frames u32, dim u32, frame_rate f64, then frames x dim f32 row-major.
Archives are immutable once written; :class:`FeatureArchive` only reads and can be shipped to worker processes.
"""

from __future__ import annotations
from typing import Any, Dict, Iterable, Iterator, List, Optional
from collections.abc import Mapping
from dataclasses import dataclass, field
import math
import re
import struct
from pathlib import Path
import numpy as np
from .typealiases import SomeSortOfPath, Matrix, DataError, ContractViolation
from .utils import write_json, read_json


__all__ = [
    'FeatureMatrix', 'ArchiveEntry', 'ArchiveManifest', 'FeatureArchive',
    'write_archive', 'read_archive', 'slice_frames', 'FORMAT_MAGIC', 'FORMAT_VERSION']


FORMAT_MAGIC = b'FEA1'
FORMAT_VERSION = 1
MANIFEST_NAME = 'manifest.json'
HEADER = struct.Struct('<4sIIId')
PAYLOAD_DTYPE = np.dtype('<f4')


@dataclass(eq=False)
class FeatureMatrix:
    """One utterance worth of encoder output: ``frames`` rows of ``dim`` values at ``frame_rate`` frames per
    second. Values are held at storage precision (float32); use :attr:`values` for 64-bit arithmetic."""

    utterance_id: str
    data: Matrix
    frame_rate: float

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise DataError(f'Utterance \'{self.utterance_id}\': feature data must be 2-dimensional, '
                            f'got shape {data.shape}.')
        frames, dim = data.shape
        if frames < 1 or dim < 1:
            raise DataError(f'Utterance \'{self.utterance_id}\': empty feature matrix {data.shape}.')
        if not (self.frame_rate > 0 and math.isfinite(self.frame_rate)):
            raise DataError(f'Utterance \'{self.utterance_id}\': frame rate must be positive, got {self.frame_rate}.')
        if not np.isfinite(data).all():
            raise DataError(f'Utterance \'{self.utterance_id}\': feature data contains NaN or Inf.')
        with np.errstate(over='ignore'):
            stored = np.ascontiguousarray(data, dtype=np.float32)
        if not np.isfinite(stored).all():
            raise DataError(f'Utterance \'{self.utterance_id}\': values overflow 32-bit storage.')
        self.data = stored
        self.frame_rate = float(self.frame_rate)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def values(self) -> Matrix:
        return self.data.astype(np.float64)

    @property
    def duration(self) -> float:
        return self.frames / self.frame_rate

    def frame_span(self, onset: float, offset: float) -> tuple:
        """Half-open frame interval for a time span, both ends rounded half-up and clipped to the matrix."""
        if not (0 <= onset < offset):
            raise ContractViolation(f'Invalid time span [{onset}, {offset}).')
        start = min(max(math.floor(onset * self.frame_rate + 0.5), 0), self.frames)
        end = min(max(math.floor(offset * self.frame_rate + 0.5), 0), self.frames)
        return start, end

    def slice(self, onset: float, offset: float) -> FeatureMatrix:
        """Frames covering ``[onset, offset)`` seconds.

        :param onset: Start time in seconds.
        :param offset: End time in seconds, greater than ``onset``.
        :return: A new matrix sharing the frame rate. Raises :class:`DataError` if no frame is left.
        """
        start, end = self.frame_span(onset, offset)
        if end <= start:
            raise DataError(
                f'Utterance \'{self.utterance_id}\': empty token for span [{onset}, {offset}) '
                f'({self.frames} frames at {self.frame_rate} fps).')
        return FeatureMatrix(self.utterance_id, self.data[start:end], self.frame_rate)


def slice_frames(m: FeatureMatrix, onset: float, offset: float) -> FeatureMatrix:
    return m.slice(onset, offset)


@dataclass(frozen=True)
class ArchiveEntry:
    utterance_id: str
    relative_path: str
    frames: int
    dim: int
    frame_rate: float

    def to_dict(self) -> Dict[str, Any]:
        return {'utterance_id': self.utterance_id, 'relative_path': self.relative_path,
                'frames': self.frames, 'dim': self.dim, 'frame_rate': self.frame_rate}


@dataclass(frozen=True)
class ArchiveManifest:
    entries: List[ArchiveEntry] = field(default_factory=list)

    @property
    def dim(self) -> Optional[int]:
        return self.entries[0].dim if self.entries else None

    def to_dict(self) -> Dict[str, Any]:
        return {'format': FORMAT_MAGIC.decode('ascii'), 'version': FORMAT_VERSION, 'dim': self.dim,
                'entries': [e.to_dict() for e in self.entries]}

    @classmethod
    def from_dict(cls, obj: Dict[str, Any]) -> ArchiveManifest:
        try:
            entries = [
                ArchiveEntry(str(e['utterance_id']), str(e['relative_path']), int(e['frames']), int(e['dim']),
                             float(e['frame_rate']))
                for e in obj['entries']]
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f'Malformed archive manifest: {e!r}.')
        ids = set()
        for e in entries:
            if e.utterance_id in ids:
                raise DataError(f'Duplicate utterance id \'{e.utterance_id}\' in archive manifest.')
            ids.add(e.utterance_id)
            rel = Path(e.relative_path)
            if rel.is_absolute() or e.relative_path.startswith(('/', '\\')) or '..' in rel.parts:
                raise DataError(f'Archive manifest path \'{e.relative_path}\' of \'{e.utterance_id}\' must stay '
                                f'inside the archive.')
        if len({e.dim for e in entries}) > 1:
            raise DataError('Archive manifest mixes feature dimensions.')
        return cls(entries)


def _file_name(index: int, utterance_id: str) -> str:
    safe = re.sub(r'[^A-Za-z0-9._-]', '_', utterance_id)[:64]
    return f'{index:06d}_{safe}.fea'


def write_archive(matrices: Iterable[FeatureMatrix], root: SomeSortOfPath) -> ArchiveManifest:
    """**Persist feature matrices as an archive directory.**

    :param matrices: The matrices to store. They must share one dimension and have unique utterance ids.
    :param root: The archive directory. Created if missing.
    :return: The manifest that was written.
    """
    matrices = list(matrices)
    seen = set()
    for m in matrices:
        if m.utterance_id in seen:
            raise DataError(f'Duplicate utterance id \'{m.utterance_id}\'.')
        seen.add(m.utterance_id)
    dims = sorted({m.dim for m in matrices})
    if len(dims) > 1:
        raise DataError(f'Feature matrices have mixed dimensions {dims}.')

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for index, m in enumerate(matrices):
        name = _file_name(index, m.utterance_id)
        with open(root / name, 'wb') as f:
            f.write(HEADER.pack(FORMAT_MAGIC, FORMAT_VERSION, m.frames, m.dim, m.frame_rate))
            f.write(np.ascontiguousarray(m.data, dtype=PAYLOAD_DTYPE).tobytes())
        entries.append(ArchiveEntry(m.utterance_id, name, m.frames, m.dim, m.frame_rate))

    manifest = ArchiveManifest(entries)
    write_json(manifest.to_dict(), root / MANIFEST_NAME)
    return manifest


def _read_header(path: Path, entry: ArchiveEntry) -> None:
    try:
        with open(path, 'rb') as f:
            raw = f.read(HEADER.size)
    except FileNotFoundError:
        raise DataError(f'Utterance \'{entry.utterance_id}\': file \'{entry.relative_path}\' is missing.')
    if len(raw) < HEADER.size:
        raise DataError(f'Utterance \'{entry.utterance_id}\': truncated header in \'{entry.relative_path}\'.')
    magic, version, frames, dim, frame_rate = HEADER.unpack(raw)
    if magic != FORMAT_MAGIC or version != FORMAT_VERSION:
        raise DataError(f'Utterance \'{entry.utterance_id}\': not a {FORMAT_MAGIC.decode()} v{FORMAT_VERSION} file.')
    if (frames, dim) != (entry.frames, entry.dim) or frame_rate != entry.frame_rate:
        raise DataError(
            f'Utterance \'{entry.utterance_id}\': header (frames={frames}, dim={dim}, frame_rate={frame_rate}) '
            f'does not match manifest (frames={entry.frames}, dim={entry.dim}, frame_rate={entry.frame_rate}).')
    expected = HEADER.size + frames * dim * PAYLOAD_DTYPE.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise DataError(f'Utterance \'{entry.utterance_id}\': file has {actual} bytes, expected {expected} '
                        f'(truncated or padded payload).')


class FeatureArchive(Mapping):
    """Read-only, lazily loaded view of an archive: ``archive[utterance_id] -> FeatureMatrix``.

    Headers are checked against the manifest when the archive is opened; payloads are memory-mapped and copied
    on access. Instances pickle as (root, manifest), so they can be handed to worker processes.
    """

    def __init__(self, root: SomeSortOfPath, manifest: ArchiveManifest) -> None:
        self.root = Path(root)
        self.manifest = manifest
        self._entries = {e.utterance_id: e for e in manifest.entries}

    def __getitem__(self, utterance_id: str) -> FeatureMatrix:
        entry = self._entries[utterance_id]
        mm = np.memmap(self.root / entry.relative_path, dtype=PAYLOAD_DTYPE, mode='r', offset=HEADER.size,
                       shape=(entry.frames, entry.dim))
        data = np.array(mm, dtype=np.float32)
        del mm
        if not np.isfinite(data).all():
            raise DataError(f'Utterance \'{utterance_id}\': stored features contain NaN or Inf.')
        return FeatureMatrix(utterance_id, data, entry.frame_rate)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def dim(self) -> Optional[int]:
        return self.manifest.dim

    def __getstate__(self) -> Dict[str, Any]:
        return {'root': str(self.root), 'manifest': self.manifest.to_dict()}

    def __setstate__(self, state: Dict[str, Any]) -> None:
        self.__init__(state['root'], ArchiveManifest.from_dict(state['manifest']))


def read_archive(root: SomeSortOfPath) -> FeatureArchive:
    """**Open an archive written by** :func:`write_archive`.

    :param root: The archive directory.
    :return: A lazy mapping from utterance id to :class:`FeatureMatrix`.
    """
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DataError(f'No {MANIFEST_NAME} in \'{root}\'.')
    try:
        obj = read_json(manifest_path)
    except ValueError as e:
        raise DataError(f'Unreadable {MANIFEST_NAME} in \'{root}\': {e}.')
    manifest = ArchiveManifest.from_dict(obj)
    for entry in manifest.entries:
        _read_header(root / entry.relative_path, entry)
    return FeatureArchive(root, manifest)
