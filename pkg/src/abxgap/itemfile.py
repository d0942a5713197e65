"""Item files: the evaluation metadata read next to a feature archive.

Phone item files list one phone token per line::

    #file onset offset #phone prev-phone next-phone speaker [language]
    utt1 0.25 0.55 a sil t s01

Language item files list whole utterances::

    #file speaker language
    utt9 s03 FR

Input is strict: exactly one header line, no blank or comment lines after it. Labels are case-sensitive.
"""

from __future__ import annotations
from typing import Iterable, List, Optional, Sequence, TextIO, Union
from dataclasses import dataclass
import math
from pathlib import Path
from .typealiases import SomeSortOfPath, Label, DataError


__all__ = [
    'PhoneToken', 'UtteranceRecord', 'parse_phone_items', 'parse_language_items',
    'serialize_phone_items', 'serialize_language_items', 'read_phone_items', 'read_language_items',
    'PHONE_HEADER', 'LANGUAGE_HEADER']


PHONE_HEADER = '#file onset offset #phone prev-phone next-phone speaker'
LANGUAGE_HEADER = '#file speaker language'

Source = Union[TextIO, Iterable[str]]


def _check_label(name: str, value: str) -> None:
    if not value or any(c.isspace() for c in value):
        raise DataError(f'Invalid {name} label {value!r}: labels must be non-empty and contain no whitespace.')


@dataclass(frozen=True)
class PhoneToken:
    utterance_id: str
    onset: float
    offset: float
    phone: Label
    prev_phone: Label
    next_phone: Label
    speaker: Label
    language: Optional[Label] = None

    def __post_init__(self) -> None:
        if not self.onset < self.offset:
            raise DataError(f'Token of \'{self.utterance_id}\': onset {self.onset} >= offset {self.offset}.')
        for name in ('utterance_id', 'phone', 'prev_phone', 'next_phone', 'speaker'):
            _check_label(name, getattr(self, name))
        if self.language is not None:
            _check_label('language', self.language)

    @property
    def context(self) -> tuple:
        return self.prev_phone, self.next_phone

    def describe(self) -> str:
        return f'{self.utterance_id} [{self.onset}, {self.offset}) /{self.phone}/'


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker: Label
    language: Label

    def __post_init__(self) -> None:
        for name in ('utterance_id', 'speaker', 'language'):
            _check_label(name, getattr(self, name))


def _body(source: Source) -> Iterable[tuple]:
    """Yield ``(line_number, columns)`` for every line after the header."""
    lines = iter(source)
    try:
        header = next(lines)
    except StopIteration:
        raise DataError('Item file is empty: a header line starting with \'#\' is required.')
    if not header.startswith('#'):
        raise DataError('Line 1: item file must start with a header line beginning with \'#\'.')
    for number, line in enumerate(lines, 2):
        line = line.rstrip('\r\n')
        if not line.strip():
            raise DataError(f'Line {number}: blank lines are not allowed in item files.')
        if line.lstrip().startswith('#'):
            raise DataError(f'Line {number}: only the first line may be a header/comment.')
        yield number, line.split()


def _parse_time(value: str, name: str, number: int) -> float:
    try:
        parsed = float(value)
    except ValueError:
        raise DataError(f'Line {number}: {name} {value!r} is not a number.')
    if not math.isfinite(parsed) or parsed < 0:
        raise DataError(f'Line {number}: {name} {value!r} must be a finite non-negative number.')
    return parsed


def parse_phone_items(source: Source) -> List[PhoneToken]:
    """**Parse a phone item file.**

    :param source: An open text stream or any iterable of lines, header included.
    :return: The tokens in file order.
    """
    tokens = []
    for number, cols in _body(source):
        if len(cols) not in (7, 8):
            raise DataError(f'Line {number}: expected 7 or 8 columns, found {len(cols)}.')
        onset = _parse_time(cols[1], 'onset', number)
        offset = _parse_time(cols[2], 'offset', number)
        if onset >= offset:
            raise DataError(f'onset ≥ offset at line {number} ({onset} >= {offset}).')
        language = cols[7] if len(cols) == 8 else None
        tokens.append(PhoneToken(cols[0], onset, offset, cols[3], cols[4], cols[5], cols[6], language))
    return tokens


def parse_language_items(source: Source) -> List[UtteranceRecord]:
    """**Parse a language item file.** Duplicate utterance ids are rejected."""
    records = []
    seen = set()
    for number, cols in _body(source):
        if len(cols) != 3:
            raise DataError(f'Line {number}: expected 3 columns, found {len(cols)}.')
        if cols[0] in seen:
            raise DataError(f'Line {number}: duplicate utterance id \'{cols[0]}\'.')
        seen.add(cols[0])
        records.append(UtteranceRecord(*cols))
    return records


def serialize_phone_items(tokens: Sequence[PhoneToken]) -> str:
    """Inverse of :func:`parse_phone_items`. Either all tokens carry a language or none does."""
    with_language = {t.language is not None for t in tokens}
    if len(with_language) > 1:
        raise DataError('Cannot serialize tokens that mix present and missing language labels.')
    has_language = with_language == {True}
    lines = [PHONE_HEADER + (' language' if has_language else '')]
    for t in tokens:
        cols = [t.utterance_id, repr(t.onset), repr(t.offset), t.phone, t.prev_phone, t.next_phone, t.speaker]
        if has_language:
            cols.append(t.language)
        lines.append(' '.join(cols))
    return '\n'.join(lines) + '\n'


def serialize_language_items(records: Sequence[UtteranceRecord]) -> str:
    lines = [LANGUAGE_HEADER] + [f'{r.utterance_id} {r.speaker} {r.language}' for r in records]
    return '\n'.join(lines) + '\n'


def read_phone_items(path: SomeSortOfPath) -> List[PhoneToken]:
    with open(Path(path), encoding='utf-8') as f:
        return parse_phone_items(f)


def read_language_items(path: SomeSortOfPath) -> List[UtteranceRecord]:
    with open(Path(path), encoding='utf-8') as f:
        return parse_language_items(f)
