"""Synthetic corpora with known structure.

Every frame is ``class mean + speaker offset + language offset + noise``. Class means lie on the unit sphere:
``normalize(u0 + delta * v_p)`` with ``u0`` and the ``v_p`` orthonormal when the dimension allows, so
``class_separation = 0`` makes all phones identically distributed and large values make them angularly separable.

Each (language, speaker, repetition) gives one utterance. An utterance strings together, for every context
``(p_c, p_{c+1})`` and every center phone ``p``, the three segments ``p_c p p_{c+1}``; the center segment is the
phone token. The random stream does not depend on the separation, scales or noise level, so changing one of them
with a fixed seed moves the same draws.
"""

from __future__ import annotations
from typing import Any, Dict, List, Optional, Tuple
from dataclasses import dataclass, asdict, fields
from pathlib import Path
import logging
import numpy as np
from .featstore import FeatureMatrix, write_archive
from .itemfile import PhoneToken, UtteranceRecord, serialize_phone_items, serialize_language_items
from .typealiases import SomeSortOfPath, Matrix, DataError
from . import utils


__all__ = ['SynSpec', 'SyntheticCorpus', 'class_means', 'generate', 'write_corpus', 'load_synspec']


log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynSpec:
    """Shape and difficulty of a synthetic corpus. ``frames_per_token`` is an inclusive ``(low, high)`` range
    for the length of every segment."""

    n_phones: int = 4
    n_speakers: int = 2
    n_languages: int = 2
    tokens_per_class: int = 3
    dim: int = 8
    frames_per_token: Tuple[int, int] = (3, 5)
    class_separation: float = 1.0
    speaker_offset_scale: float = 0.0
    language_offset_scale: float = 0.0
    noise_std: float = 0.1
    frame_rate: float = 100.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ('n_phones', 'n_speakers', 'n_languages', 'tokens_per_class'):
            if getattr(self, name) < 1:
                raise DataError(f'{name} must be at least 1, got {getattr(self, name)}.')
        if self.dim < 2:
            raise DataError(f'dim must be at least 2, got {self.dim}.')
        low, high = (int(v) for v in self.frames_per_token)
        if not 1 <= low <= high:
            raise DataError(f'frames_per_token must be a range 1 <= low <= high, got {self.frames_per_token}.')
        object.__setattr__(self, 'frames_per_token', (low, high))
        for name in ('class_separation', 'speaker_offset_scale', 'language_offset_scale', 'noise_std'):
            if not getattr(self, name) >= 0:
                raise DataError(f'{name} must be non-negative, got {getattr(self, name)}.')
        if not self.frame_rate > 0:
            raise DataError(f'frame_rate must be positive, got {self.frame_rate}.')

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> SynSpec:
        if not isinstance(d, dict):
            raise DataError('A synthetic corpus spec must be a JSON object.')
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise DataError(f'Unknown synthetic corpus setting(s): {", ".join(unknown)}.')
        d = dict(d)
        if 'frames_per_token' in d:
            d['frames_per_token'] = tuple(d['frames_per_token'])
        return cls(**d)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d['frames_per_token'] = list(self.frames_per_token)
        return d


def load_synspec(path: SomeSortOfPath) -> SynSpec:
    try:
        return SynSpec.from_dict(utils.read_json(path))
    except ValueError as e:
        raise DataError(f'{path}: not valid JSON ({e}).')
    except TypeError as e:
        raise DataError(f'{path}: bad synthetic corpus setting ({e}).')


@dataclass
class SyntheticCorpus:
    spec: SynSpec
    matrices: List[FeatureMatrix]
    phone_tokens: List[PhoneToken]
    language_records: List[UtteranceRecord]

    @property
    def features(self) -> Dict[str, FeatureMatrix]:
        return {m.utterance_id: m for m in self.matrices}


def _basis(rng: np.random.Generator, dim: int, n: int) -> Tuple[np.ndarray, Matrix]:
    draws = rng.standard_normal((dim, n + 1))
    if dim >= n + 1:
        q, r = np.linalg.qr(draws)
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        return q[:, 0], q[:, 1:].T
    # Too few dimensions for n + 1 orthonormal directions: keep each v_p orthogonal to u0 only.
    u0 = draws[:, 0] / np.linalg.norm(draws[:, 0])
    v = draws[:, 1:].T
    v = v - np.outer(v @ u0, u0)
    return u0, v / np.linalg.norm(v, axis=1, keepdims=True)


def class_means(rng: np.random.Generator, n_phones: int, dim: int, separation: float) -> Matrix:
    """Unit-norm class means, pairwise chord distance growing with ``separation`` (all equal at 0)."""
    u0, v = _basis(rng, dim, n_phones)
    means = u0[None, :] + separation * v
    return means / np.linalg.norm(means, axis=1, keepdims=True)


def _labels(spec: SynSpec) -> Tuple[List[str], List[str], Dict[str, List[str]]]:
    phones = [f'p{i}' for i in range(spec.n_phones)]
    languages = [f'L{i + 1}' for i in range(spec.n_languages)]
    speakers = {lang: [f'{lang}s{j + 1:02d}' for j in range(spec.n_speakers)] for lang in languages}
    return phones, languages, speakers


def generate(spec: SynSpec, out: Optional[SomeSortOfPath] = None) -> SyntheticCorpus:
    """**Generate a synthetic corpus**, optionally writing it to disk.

    :param spec: The corpus settings.
    :param out: If given, the directory receiving ``features/`` (a feature archive), ``phone.item`` and
        ``language.item``.
    :return: The corpus in memory. Identical specs give identical corpora and byte-identical files.
    """
    if spec.n_phones < 3:
        raise DataError(f'n_phones must be at least 3 to populate triphone contexts, got {spec.n_phones}.')
    rng = np.random.default_rng(spec.seed)
    phones, languages, speakers = _labels(spec)
    means = class_means(rng, spec.n_phones, spec.dim, spec.class_separation)
    language_offsets = {lang: spec.language_offset_scale * rng.standard_normal(spec.dim) for lang in languages}
    speaker_offsets = {
        s: spec.speaker_offset_scale * rng.standard_normal(spec.dim) for lang in languages for s in speakers[lang]}
    contexts = [(c, (c + 1) % spec.n_phones) for c in range(spec.n_phones)]
    low, high = spec.frames_per_token

    matrices, tokens, records = [], [], []
    for lang in languages:
        for speaker in speakers[lang]:
            shift = language_offsets[lang] + speaker_offsets[speaker]
            for r in range(spec.tokens_per_class):
                utt = f'{speaker}_u{r + 1:03d}'
                segments = []
                start = 0
                for prev, nxt in contexts:
                    for p in range(spec.n_phones):
                        for role, q in enumerate((prev, p, nxt)):
                            n = int(rng.integers(low, high + 1))
                            noise = rng.standard_normal((n, spec.dim))
                            segments.append(means[q] + shift + spec.noise_std * noise)
                            if role == 1:
                                tokens.append(PhoneToken(
                                    utt, start / spec.frame_rate, (start + n) / spec.frame_rate, phones[p],
                                    phones[prev], phones[nxt], speaker, lang))
                            start += n
                matrices.append(FeatureMatrix(utt, np.concatenate(segments), spec.frame_rate))
                records.append(UtteranceRecord(utt, speaker, lang))

    log.info('Generated %d utterances, %d phone tokens.', len(matrices), len(tokens))
    corpus = SyntheticCorpus(spec, matrices, tokens, records)
    if out is not None:
        write_corpus(corpus, out)
    return corpus


def write_corpus(corpus: SyntheticCorpus, out: SomeSortOfPath) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_archive(corpus.matrices, out / 'features')
    (out / 'phone.item').write_text(serialize_phone_items(corpus.phone_tokens), encoding='utf-8')
    (out / 'language.item').write_text(serialize_language_items(corpus.language_records), encoding='utf-8')
    log.info('Wrote synthetic corpus to %s.', out)
    return out
