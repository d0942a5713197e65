"""Multilingual gap and grounding gain statistics.

From phonetic ABX error rates of audio-only (``SSL_A``) and visually grounded (``VGS_plus``) models, each trained
monolingually and bilingually:

- ``y``: relative gap of the bilingual audio-only model over its monolingual counterpart, per WS, AS and Avg;
- ``w``: the same gap for the grounded models;
- ``x``: relative gain of grounding for monolingual models, from the Avg column;
- ``z``: relative gain of grounding for bilingual models, from the Avg column.

A ``monolingual`` row may be given directly or derived as the mean of the native ``EN`` and ``FR`` rows. Two
verdicts are drawn from the unrounded values: gap reduction (``y > w``) and differential benefit (``z > x``).
"""

from __future__ import annotations
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union
from dataclasses import dataclass, field
from pathlib import Path
import csv
import io
from .abx.score import load_report
from .typealiases import Number, SomeSortOfPath, DataError
from . import utils


__all__ = [
    'STAGES', 'SETTINGS', 'NATIVE_SETTINGS', 'AVG_BASES', 'LANGUAGE_CHANCE', 'ResultRow', 'GapReport', 'row_average',
    'relative_gap', 'relative_gain', 'monolingual_from_native', 'analyze', 'parse_results_csv', 'read_results_csv',
    'read_run_mapping', 'format_table']


STAGES = ('SSL', 'SSL_A', 'VGS_plus')
NATIVE_SETTINGS = ('EN', 'FR')
SETTINGS = ('monolingual',) + NATIVE_SETTINGS + ('bilingual',)
GAP_SETTINGS = ('monolingual', 'bilingual')
COLUMNS = ('ws', 'as', 'avg')
AVG_BASES = ('printed', 'exact')
LANGUAGE_CHANCE = 50.0
CSV_HEADER = ('stage', 'setting', 'ws', 'as')


def row_average(ws: Number, as_: Number) -> float:
    return (ws + as_) / 2


def relative_gap(mono: Number, bili: Number) -> float:
    """Relative degradation, in percent, of the bilingual error over the monolingual one."""
    if mono <= 0:
        raise DataError(f'Monolingual error must be positive to compute a relative gap, got {mono}.')
    return 100.0 * (bili - mono) / mono


def relative_gain(baseline: Number, grounded: Number) -> float:
    """Relative improvement, in percent, of the grounded error over the baseline one."""
    if baseline <= 0:
        raise DataError(f'Baseline error must be positive to compute a relative gain, got {baseline}.')
    return 100.0 * (baseline - grounded) / baseline


def _check_percent(name: str, value: Number) -> float:
    value = float(value)
    if not 0.0 <= value <= 100.0:
        raise DataError(f'{name} error {value} is not a percentage in [0, 100].')
    return value


@dataclass(frozen=True)
class ResultRow:
    """ABX error rates of one model: within-speaker, across-speaker and, optionally, language discrimination.

    ``derived`` marks a monolingual row averaged from the native rows. ``layers`` records, for rows read from
    per-layer reports, which layer was selected for each column.
    """

    stage: str
    setting: str
    ws: float
    as_: float
    lang: Optional[float] = None
    derived: bool = False
    layers: Optional[Dict[str, int]] = field(default=None, compare=False, hash=False)

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise DataError(f'Unknown model stage {self.stage!r}; expected one of {STAGES}.')
        if self.setting not in SETTINGS:
            raise DataError(f'Unknown setting {self.setting!r}; expected one of {SETTINGS}.')
        object.__setattr__(self, 'ws', _check_percent('WS', self.ws))
        object.__setattr__(self, 'as_', _check_percent('AS', self.as_))
        if self.lang is not None:
            object.__setattr__(self, 'lang', _check_percent('Language', self.lang))

    @property
    def key(self) -> Tuple[str, str]:
        return self.stage, self.setting

    @property
    def avg(self) -> float:
        return row_average(self.ws, self.as_)

    def average(self, basis: str = 'printed') -> float:
        """The Avg value gains and gaps are computed from: the two-decimal printed one, or the exact mean."""
        return utils.round_half_up(self.avg) if basis == 'printed' else self.avg

    def column(self, name: str, basis: str = 'printed') -> float:
        return {'ws': self.ws, 'as': self.as_}[name] if name != 'avg' else self.average(basis)


@dataclass
class GapReport:
    rows: List[ResultRow]
    avg_basis: str
    y: Dict[str, float]
    w: Dict[str, float]
    x: float
    z: float
    stage_gaps: Dict[str, Dict[str, float]] = field(default_factory=dict)

    @property
    def gap_reduction(self) -> bool:
        return self.y['avg'] > self.w['avg']

    @property
    def differential_benefit(self) -> bool:
        return self.z > self.x

    @property
    def no_multilingual_gap(self) -> bool:
        """Bilingual models are at least as good as monolingual ones in both stages."""
        return self.y['avg'] <= 0 and self.w['avg'] <= 0

    @property
    def flags(self) -> List[str]:
        return ['no multilingual gap'] if self.no_multilingual_gap else []

    def to_dict(self) -> Dict[str, Any]:
        def rounded(columns: Dict[str, float]) -> Dict[str, float]:
            return {c: utils.round_half_up(v) for c, v in columns.items()}

        rows = []
        for r in self.rows:
            entry = {'stage': r.stage, 'setting': r.setting, 'ws': r.ws, 'as': r.as_, 'avg': r.avg,
                     'avg_used': r.average(self.avg_basis)}
            if r.derived:
                entry['derived_from'] = list(NATIVE_SETTINGS)
            if r.layers is not None:
                entry['layers'] = dict(r.layers)
            if r.lang is not None:
                entry['lang'] = r.lang
                entry['lang_chance'] = LANGUAGE_CHANCE
            rows.append(entry)
        return {
            'avg_basis': self.avg_basis,
            'rows': rows,
            'y': rounded(self.y),
            'w': rounded(self.w),
            'x': utils.round_half_up(self.x),
            'z': utils.round_half_up(self.z),
            'stage_gaps': {s: rounded(g) for s, g in self.stage_gaps.items()},
            'verdicts': {'gap_reduction': self.gap_reduction, 'differential_benefit': self.differential_benefit},
            'flags': self.flags,
            'exact': {'y': self.y, 'w': self.w, 'x': self.x, 'z': self.z},
        }


def _gaps(mono: ResultRow, bili: ResultRow, basis: str) -> Dict[str, float]:
    return {c: relative_gap(mono.column(c, basis), bili.column(c, basis)) for c in COLUMNS}


def monolingual_from_native(native: Iterable[ResultRow]) -> ResultRow:
    """Monolingual row of a stage as the mean of its ``EN`` and ``FR`` rows, column by column. The language
    error is averaged only when both rows carry one."""
    by_setting = {r.setting: r for r in native}
    if set(by_setting) != set(NATIVE_SETTINGS) or len({r.stage for r in by_setting.values()}) != 1:
        raise DataError(f'A monolingual row needs one {" and one ".join(NATIVE_SETTINGS)} row of the same stage.')
    parts = [by_setting[s] for s in NATIVE_SETTINGS]
    langs = [r.lang for r in parts]
    lang = sum(langs) / len(langs) if None not in langs else None
    return ResultRow(parts[0].stage, 'monolingual', sum(r.ws for r in parts) / len(parts),
                     sum(r.as_ for r in parts) / len(parts), lang, derived=True)


def analyze(rows: Iterable[ResultRow], avg_basis: str = 'printed') -> GapReport:
    """**Compute gaps, gains and verdicts** from a table of error rates.

    With ``avg_basis='exact'`` every gap and gain is a ratio of error rates, so multiplying all inputs by the same
    positive constant leaves the report unchanged. ``'printed'`` rounds the Avg column first and only holds that
    property up to the rounding.

    :param rows: At least the monolingual and bilingual rows of ``SSL_A`` and ``VGS_plus``. A missing
        monolingual row is derived from the stage's ``EN`` and ``FR`` rows when both are present. ``SSL`` rows are
        optional and only contribute to ``stage_gaps``.
    :param avg_basis: ``'printed'`` computes Avg-based values from the two-decimal, round-half-up Avg;
        ``'exact'`` from the exact mean of WS and AS.
    :return: The gap report.
    """
    if avg_basis not in AVG_BASES:
        raise DataError(f'Unknown Avg basis {avg_basis!r}; expected one of {AVG_BASES}.')
    rows = list(rows)
    table: Dict[Tuple[str, str], ResultRow] = {}
    for r in rows:
        if r.key in table:
            raise DataError(f'Duplicate row for {r.stage}/{r.setting}.')
        table[r.key] = r
    for stage in STAGES:
        native = [table[(stage, s)] for s in NATIVE_SETTINGS if (stage, s) in table]
        if (stage, 'monolingual') not in table and len(native) == len(NATIVE_SETTINGS):
            derived = monolingual_from_native(native)
            table[derived.key] = derived
            rows.append(derived)
    missing = [f'{s}/{t}' for s in ('SSL_A', 'VGS_plus') for t in GAP_SETTINGS if (s, t) not in table]
    if missing:
        raise DataError(f'missing rows: {", ".join(missing)}')

    stage_gaps = {
        s: _gaps(table[(s, 'monolingual')], table[(s, 'bilingual')], avg_basis)
        for s in STAGES if (s, 'monolingual') in table and (s, 'bilingual') in table}
    x = relative_gain(table[('SSL_A', 'monolingual')].average(avg_basis),
                      table[('VGS_plus', 'monolingual')].average(avg_basis))
    z = relative_gain(table[('SSL_A', 'bilingual')].average(avg_basis),
                      table[('VGS_plus', 'bilingual')].average(avg_basis))
    ordered = sorted(rows, key=lambda r: (STAGES.index(r.stage), SETTINGS.index(r.setting)))
    return GapReport(ordered, avg_basis, stage_gaps['SSL_A'], stage_gaps['VGS_plus'], x, z, stage_gaps)


def _parse_number(value: str, name: str, line: int) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise DataError(f'Bad {name} value {value!r} at line {line}.')


def parse_results_csv(text: str) -> List[ResultRow]:
    """Rows of a CSV with header ``stage,setting,ws,as`` and an optional trailing ``lang`` column."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise DataError('Empty results file.')
    header = tuple(h.strip() for h in header)
    if header not in (CSV_HEADER, CSV_HEADER + ('lang',)):
        raise DataError(f'Results header must be "stage,setting,ws,as" with an optional "lang", got '
                        f'"{",".join(header)}".')
    rows = []
    for line, fields in enumerate(reader, 2):
        if not fields or all(not f.strip() for f in fields):
            continue
        if len(fields) != len(header):
            raise DataError(f'Expected {len(header)} fields at line {line}, got {len(fields)}.')
        fields = [f.strip() for f in fields]
        lang = None
        if len(fields) == 5 and fields[4]:
            lang = _parse_number(fields[4], 'lang', line)
        rows.append(ResultRow(
            fields[0], fields[1], _parse_number(fields[2], 'ws', line), _parse_number(fields[3], 'as', line), lang))
    return rows


def read_results_csv(path: SomeSortOfPath) -> List[ResultRow]:
    return parse_results_csv(Path(path).read_text(encoding='utf-8'))


def _report_error(path: Path, kind: str) -> float:
    report = load_report(path)
    if report['condition'] != kind:
        raise DataError(f'{path}: expected a {kind} report, found {report["condition"]}.')
    return 100.0 * (1.0 - report['final_score'])


def _best_layer(root: Path, files: Union[str, List[str]], kind: str) -> Tuple[float, Optional[int]]:
    """Error of a single report, or the lowest error over per-layer reports with its layer index (first wins)."""
    if isinstance(files, str):
        return _report_error(root / files, kind), None
    if not isinstance(files, list) or not files or not all(isinstance(f, str) for f in files):
        raise DataError(f'Expected a report file or a non-empty list of per-layer report files for {kind}.')
    errors = [_report_error(root / f, kind) for f in files]
    layer = min(range(len(errors)), key=lambda k: errors[k])
    return errors[layer], layer


def read_run_mapping(path: SomeSortOfPath) -> List[ResultRow]:
    """Rows assembled from ABX report files.

    The mapping is a JSON object ``{"runs": [{"stage": ..., "setting": ..., "within": FILE, "across": FILE,
    "language": FILE}, ...]}``; ``language`` is optional and relative paths are resolved against the mapping's
    directory. Error rates are taken unrounded from each report's final score.

    Each of ``within``, ``across`` and ``language`` may instead list one report per layer of the model. The lowest
    error is then selected for that column on its own, and the chosen layer indices are kept in
    :attr:`ResultRow.layers`.
    """
    path = Path(path)
    mapping = utils.read_json(path)
    if not isinstance(mapping, dict) or not isinstance(mapping.get('runs'), list):
        raise DataError(f'{path}: expected an object with a "runs" list.')
    rows = []
    for i, run in enumerate(mapping['runs']):
        try:
            stage, setting, within, across = run['stage'], run['setting'], run['within'], run['across']
        except (KeyError, TypeError):
            raise DataError(f'{path}: run {i} needs "stage", "setting", "within" and "across".')
        ws, ws_layer = _best_layer(path.parent, within, 'phonetic_within')
        as_, as_layer = _best_layer(path.parent, across, 'phonetic_across')
        lang, lang_layer = (None, None)
        if run.get('language') is not None:
            lang, lang_layer = _best_layer(path.parent, run['language'], 'language')
        layers = {c: k for c, k in (('ws', ws_layer), ('as', as_layer), ('lang', lang_layer)) if k is not None}
        rows.append(ResultRow(stage, setting, ws, as_, lang, layers=layers or None))
    return rows


def format_table(report: GapReport) -> str:
    """Plain-text rendering: the input rows with their Avg, the gap rows, the gains and the verdicts."""
    def cell(value: Optional[float]) -> str:
        return f'{utils.format_percent(value):>7}' if value is not None else f'{"":>7}'

    has_lang = any(r.lang is not None for r in report.rows)
    head = f'{"stage":<10}{"setting":<24}{"WS":>7}{"AS":>7}{"Avg":>7}' + (f'{"Lang":>7}' if has_lang else '')
    lines = [head]
    for r in report.rows:
        setting = r.setting + (' (' + '/'.join(NATIVE_SETTINGS) + ' mean)' if r.derived else '')
        line = f'{r.stage:<10}{setting:<24}{cell(r.ws)}{cell(r.as_)}{cell(r.avg)}'
        lines.append(line + (cell(r.lang) if has_lang else ''))
    for stage, gaps in report.stage_gaps.items():
        label = {'SSL_A': 'gap y', 'VGS_plus': 'gap w'}.get(stage, 'gap')
        lines.append(f'{stage:<10}{label + " (relative %)":<24}' + ''.join(cell(gaps[c]) for c in COLUMNS))
    lines.append(f'{"":<10}{"gain x (monolingual)":<24}{"":>14}{cell(report.x)}')
    lines.append(f'{"":<10}{"gain z (bilingual)":<24}{"":>14}{cell(report.z)}')
    lines.append(f'y > w (gap reduction): {str(report.gap_reduction).lower()}')
    lines.append(f'z > x (differential benefit): {str(report.differential_benefit).lower()}')
    if has_lang:
        lines.append(f'Lang: ABX language discrimination error, chance level {LANGUAGE_CHANCE:.0f}%')
    lines.extend(f'note: {flag}' for flag in report.flags)
    return '\n'.join(lines) + '\n'
