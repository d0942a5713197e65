"""ABX cells and triplets.

A cell fixes the classes being discriminated and the token pools A, B and X are drawn from:

- ``phonetic_within``: key ``(phoneA, phoneB, prev, next, speaker)``; A, B and X share one speaker, X is drawn from
  the A pool without reusing A.
- ``phonetic_across``: key ``(phoneA, phoneB, prev, next, s1, s2)``; A and B come from ``s1``, X is a ``phoneA``
  token of ``s2`` in the same context.
- ``language``: key ``(La, Lb)`` (or ``(La, Lb, speaker)`` with speaker control); A and X are distinct utterances of
  ``La``, B an utterance of ``Lb``.

Ordered pairs are separate cells; symmetrization happens during aggregation.
"""

from __future__ import annotations
from typing import Dict, Iterator, List, Sequence, Tuple
from dataclasses import dataclass, field
from collections import defaultdict
from ..itemfile import PhoneToken, UtteranceRecord
from ..typealiases import CellKey, Triplet, DataError, ContractViolation


__all__ = [
    'CONDITION_KINDS', 'AbxCondition', 'AbxCell', 'AbxTask', 'build_phonetic_task', 'build_phonetic_cells',
    'build_language_task', 'build_language_cells', 'enumerate_triplets', 'count_triplets', 'triplet_at',
    'format_cell_listing']


CONDITION_KINDS = ('phonetic_within', 'phonetic_across', 'language')


@dataclass(frozen=True)
class AbxCondition:
    """What is discriminated and under which speaker constraint.

    :param kind: One of ``phonetic_within``, ``phonetic_across``, ``language``.
    :param min_class_a: Minimum A-pool size for cells where A and X share a pool. At least 2.
    :param min_class_b: Minimum B-pool size. At least 1.
    :param by_speaker: Language ABX only. Build one cell per speaker so A, B and X share a speaker.
    """

    kind: str
    min_class_a: int = 2
    min_class_b: int = 1
    by_speaker: bool = False

    def __post_init__(self) -> None:
        if self.kind not in CONDITION_KINDS:
            raise ContractViolation(f'Unknown ABX condition {self.kind!r}; expected one of {CONDITION_KINDS}.')
        if self.min_class_a < 2:
            raise ContractViolation('min_class_a must be at least 2 so that A and X can be distinct tokens.')
        if self.min_class_b < 1:
            raise ContractViolation('min_class_b must be at least 1.')
        if self.by_speaker and self.kind != 'language':
            raise ContractViolation('Speaker control is an option of language ABX only.')

    @property
    def is_phonetic(self) -> bool:
        return self.kind != 'language'

    @property
    def speaker_control(self) -> str:
        if self.kind == 'phonetic_within':
            return 'within'
        if self.kind == 'phonetic_across':
            return 'across'
        return 'same_speaker' if self.by_speaker else 'unconstrained'


@dataclass(frozen=True)
class AbxCell:
    condition: AbxCondition
    key: CellKey
    class_a_key: CellKey
    class_b_key: CellKey
    a_tokens: Tuple[int, ...]
    b_tokens: Tuple[int, ...]
    x_tokens: Tuple[int, ...]

    @property
    def shared_pool(self) -> bool:
        """Whether X is drawn from the A pool (and must then differ from A)."""
        return self.condition.kind != 'phonetic_across'


@dataclass
class AbxTask:
    condition: AbxCondition
    cells: List[AbxCell] = field(default_factory=list)
    cells_skipped: int = 0

    @property
    def triplet_count(self) -> int:
        return sum(count_triplets(c) for c in self.cells)


def _phonetic_within(tokens: Sequence[PhoneToken], condition: AbxCondition) -> AbxTask:
    groups: Dict[tuple, Dict[str, List[int]]] = defaultdict(lambda: defaultdict(list))
    for i, t in enumerate(tokens):
        groups[(t.speaker, t.prev_phone, t.next_phone)][t.phone].append(i)

    task = AbxTask(condition)
    for (speaker, prev, nxt), by_phone in groups.items():
        for a, a_pool in by_phone.items():
            for b, b_pool in by_phone.items():
                if a == b:
                    continue
                if len(a_pool) < condition.min_class_a or len(b_pool) < condition.min_class_b:
                    task.cells_skipped += 1
                    continue
                task.cells.append(AbxCell(
                    condition, (a, b, prev, nxt, speaker), (a, prev, nxt, speaker), (b, prev, nxt, speaker),
                    tuple(a_pool), tuple(b_pool), tuple(a_pool)))
    return task


def _phonetic_across(tokens: Sequence[PhoneToken], condition: AbxCondition) -> AbxTask:
    groups: Dict[tuple, Dict[str, Dict[str, List[int]]]] = defaultdict(lambda: defaultdict(lambda: defaultdict(list)))
    for i, t in enumerate(tokens):
        groups[(t.prev_phone, t.next_phone)][t.speaker][t.phone].append(i)

    task = AbxTask(condition)
    for (prev, nxt), by_speaker in groups.items():
        for s1, phones1 in by_speaker.items():
            for s2, phones2 in by_speaker.items():
                if s1 == s2:
                    continue
                for a, a_pool in phones1.items():
                    for b, b_pool in phones1.items():
                        if a == b:
                            continue
                        x_pool = phones2.get(a, [])
                        if not x_pool or len(b_pool) < condition.min_class_b:
                            task.cells_skipped += 1
                            continue
                        task.cells.append(AbxCell(
                            condition, (a, b, prev, nxt, s1, s2), (a, prev, nxt, s1), (b, prev, nxt, s1),
                            tuple(a_pool), tuple(b_pool), tuple(x_pool)))
    return task


def build_phonetic_task(tokens: Sequence[PhoneToken], condition: AbxCondition) -> AbxTask:
    """**Enumerate the phonetic ABX cells of a token list**, together with the number of candidate cells that
    were dropped for having too few tokens. Cells come out sorted by key."""
    if condition.kind == 'phonetic_within':
        task = _phonetic_within(tokens, condition)
    elif condition.kind == 'phonetic_across':
        task = _phonetic_across(tokens, condition)
    else:
        raise ContractViolation(f'Condition {condition.kind!r} is not a phonetic condition.')
    task.cells.sort(key=lambda c: c.key)
    return task


def build_phonetic_cells(tokens: Sequence[PhoneToken], condition: AbxCondition) -> List[AbxCell]:
    return build_phonetic_task(tokens, condition).cells


def build_language_task(records: Sequence[UtteranceRecord], condition: AbxCondition) -> AbxTask:
    """**Enumerate the language ABX cells**, one per ordered language pair (and per speaker under speaker
    control)."""
    if condition.kind != 'language':
        raise ContractViolation(f'Condition {condition.kind!r} is not the language condition.')
    languages = sorted({r.language for r in records})
    if len(languages) < 2:
        raise DataError(f'Language ABX needs at least 2 languages, found {len(languages)} ({languages}).')

    groups: Dict[tuple, Dict[str, List[int]]] = defaultdict(lambda: defaultdict(list))
    for i, r in enumerate(records):
        scope = (r.speaker,) if condition.by_speaker else ()
        groups[scope][r.language].append(i)

    task = AbxTask(condition)
    for scope, by_language in groups.items():
        for la, a_pool in by_language.items():
            for lb, b_pool in by_language.items():
                if la == lb:
                    continue
                if len(a_pool) < condition.min_class_a or len(b_pool) < condition.min_class_b:
                    task.cells_skipped += 1
                    continue
                task.cells.append(AbxCell(
                    condition, (la, lb) + scope, (la,) + scope, (lb,) + scope,
                    tuple(a_pool), tuple(b_pool), tuple(a_pool)))
    task.cells.sort(key=lambda c: c.key)
    return task


def build_language_cells(records: Sequence[UtteranceRecord], condition: AbxCondition) -> List[AbxCell]:
    return build_language_task(records, condition).cells


def count_triplets(cell: AbxCell) -> int:
    n_a, n_b = len(cell.a_tokens), len(cell.b_tokens)
    if cell.shared_pool:
        return n_a * n_b * (n_a - 1)
    return n_a * n_b * len(cell.x_tokens)


def enumerate_triplets(cell: AbxCell) -> Iterator[Triplet]:
    """Every ``(a, b, x)`` token-index triplet of a cell, looping over A, then B, then X."""
    for a in cell.a_tokens:
        for b in cell.b_tokens:
            for x in cell.x_tokens:
                if cell.shared_pool and x == a:
                    continue
                yield a, b, x


def triplet_at(cell: AbxCell, index: int) -> Triplet:
    """The ``index``-th triplet of :func:`enumerate_triplets` without walking the stream."""
    n_x = len(cell.x_tokens) - 1 if cell.shared_pool else len(cell.x_tokens)
    n_b = len(cell.b_tokens)
    if not 0 <= index < count_triplets(cell):
        raise ContractViolation(f'Triplet index {index} out of range for cell {cell.key}.')
    ia, rest = divmod(index, n_b * n_x)
    ib, ix = divmod(rest, n_x)
    if cell.shared_pool and ix >= ia:
        ix += 1
    return cell.a_tokens[ia], cell.b_tokens[ib], cell.x_tokens[ix]


def format_cell_listing(cells: Sequence[AbxCell]) -> str:
    """Audit dump: one line per cell with condition, key and pool sizes."""
    lines = [
        f'{c.condition.kind}\t{" ".join(c.key)}\tA={len(c.a_tokens)}\tB={len(c.b_tokens)}\tX={len(c.x_tokens)}'
        for c in cells]
    return '\n'.join(lines) + ('\n' if lines else '')
