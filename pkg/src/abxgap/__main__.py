"""Command line interface: ``abxgap <command> ...``.

Machine-readable results go to ``--out`` files (or stdout for ``loss check``); everything meant for people goes to
stderr. Exit status: 0 success, 1 usage error, 2 data or I/O error, 3 contract violation or failed self-check.
"""

from __future__ import annotations
from typing import List, NoReturn, Optional
import argparse
import logging
import sys
from pathlib import Path
from . import __version__, featstore, gaps, itemfile, losses, quantize, syngen, utils
from .abx import (
    AbxCondition, build_language_task, build_phonetic_task, cell_scores_csv, format_cell_listing, run_language_abx,
    run_phonetic_abx)
from .kernels import DistanceSpec, FRAME_METRICS
from .typealiases import DataError, ContractViolation, InvariantFailure


log = logging.getLogger(__name__)

PROG = 'abxgap'
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f'{self.prog}: error: {message}\n')


def _write_text(text: str, path: str) -> None:
    path = Path(path)
    if path.parent != Path(''):
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding='utf-8')


def cmd_abx_phonetic(args: argparse.Namespace) -> int:
    features = featstore.read_archive(args.features)
    items = itemfile.read_phone_items(args.items)
    condition = AbxCondition(f'phonetic_{args.mode}')
    spec = DistanceSpec(frame_metric=args.frame_metric, sequence_mode='dtw')
    if args.dump_cells:
        _write_text(format_cell_listing(build_phonetic_task(items, condition).cells), args.dump_cells)
    report = run_phonetic_abx(features, items, condition, spec, args.threads, args.max_triplets, args.seed)
    return _finish_abx(report, args)


def cmd_abx_language(args: argparse.Namespace) -> int:
    features = featstore.read_archive(args.features)
    items = itemfile.read_language_items(args.items)
    condition = AbxCondition('language', by_speaker=args.by_speaker)
    spec = DistanceSpec(frame_metric=args.frame_metric, sequence_mode='mean_pool')
    if args.dump_cells:
        _write_text(format_cell_listing(build_language_task(items, condition).cells), args.dump_cells)
    report = run_language_abx(features, items, spec, condition, args.threads, args.max_triplets, args.seed)
    return _finish_abx(report, args)


def _finish_abx(report, args: argparse.Namespace) -> int:
    utils.write_json(report.to_dict(), args.out)
    if args.csv:
        _write_text(cell_scores_csv(report), args.csv)
    log.info('%s error: %s%% over %d cells (%d skipped)%s.', report.condition.kind,
             utils.format_percent(report.final_error_percent), report.cells_scored, report.cells_skipped,
             ', sampled' if report.sampled else '')
    return EXIT_OK


def cmd_quantize_fit(args: argparse.Namespace) -> int:
    features = featstore.read_archive(args.features)
    frames = quantize.sample_frames(features, args.sample, args.seed)
    log.info('Fitting k=%d on %d sampled frames.', args.k, frames.shape[0])
    cb = quantize.fit_kmeans(frames, args.k, args.max_iter, args.tol, args.seed, args.threads)
    quantize.save_codebook(cb, args.out)
    return EXIT_OK


def cmd_quantize_apply(args: argparse.Namespace) -> int:
    features = featstore.read_archive(args.features)
    cb = quantize.load_codebook(args.codebook)
    manifest, _ = quantize.quantize_archive(features, cb, args.out, args.encoding)
    log.info('Wrote %d unit sequences to %s.', len(manifest.entries), args.out)
    return EXIT_OK


def cmd_loss_check(args: argparse.Namespace) -> int:
    check = losses.check_gradients(args.trials, args.seed)
    sys.stdout.write(utils.dump_json(check.to_dict()))
    if check.max_relative_error > check.tolerance:
        raise InvariantFailure(
            f'gradient check failed: relative error {check.max_relative_error:.3g} > {check.tolerance:g} '
            f'in {check.worst}')
    if check.max_coordinate_error > check.coordinate_tolerance:
        raise InvariantFailure(
            f'gradient check failed: coordinate error {check.max_coordinate_error:.3g} > '
            f'{check.coordinate_tolerance:g} in {check.worst_coordinate}')
    log.info('Gradient check passed: max relative error %.3g, max coordinate error %.3g.',
             check.max_relative_error, check.max_coordinate_error)
    return EXIT_OK


def cmd_gaps(args: argparse.Namespace) -> int:
    if Path(args.results).suffix.lower() == '.json':
        rows = gaps.read_run_mapping(args.results)
    else:
        rows = gaps.read_results_csv(args.results)
    report = gaps.analyze(rows, args.avg_basis)
    utils.write_json(report.to_dict(), args.out)
    sys.stderr.write(gaps.format_table(report))
    return EXIT_OK


def cmd_syngen(args: argparse.Namespace) -> int:
    spec = syngen.load_synspec(args.spec)
    syngen.generate(spec, args.out)
    return EXIT_OK


def _abx_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--features', required=True, help='feature archive directory')
    parser.add_argument('--items', required=True, help='item file')
    parser.add_argument('--frame-metric', choices=FRAME_METRICS, default='cosine')
    parser.add_argument('--out', required=True, help='report JSON file')
    parser.add_argument('--max-triplets', type=int, default=None, help='per-cell cap, enforced by downsampling')
    parser.add_argument('--seed', type=int, default=0, help='seed of the downsampler')
    parser.add_argument('--threads', type=int, default=None, help='worker processes (default: all CPUs)')
    parser.add_argument('--dump-cells', metavar='FILE', help='write the cell listing to FILE')
    parser.add_argument('--csv', metavar='FILE', help='write per-cell scores to FILE')


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog=PROG, description='Zero-shot ABX evaluation and multilingual gap statistics.')
    parser.add_argument(
        '--version', action='version',
        version=f'{PROG} {__version__} (features {featstore.FORMAT_MAGIC.decode()} v{featstore.FORMAT_VERSION}, '
                f'codebook {quantize.CODEBOOK_MAGIC.decode()} v{quantize.CODEBOOK_VERSION})')
    parser.add_argument('-v', '--verbose', action='store_true', help='report progress on stderr')
    commands = parser.add_subparsers(dest='command', required=True, metavar='command')

    abx = commands.add_parser('abx', help='ABX discrimination').add_subparsers(
        dest='task', required=True, metavar='task')
    p = abx.add_parser('phonetic', help='phone discrimination within or across speakers')
    _abx_options(p)
    p.add_argument('--mode', choices=('within', 'across'), default='within')
    p.set_defaults(func=cmd_abx_phonetic)
    p = abx.add_parser('language', help='language discrimination over whole utterances')
    _abx_options(p)
    p.add_argument('--by-speaker', action='store_true', help='only compare utterances of one speaker')
    p.set_defaults(func=cmd_abx_language)

    q = commands.add_parser('quantize', help='k-means units').add_subparsers(
        dest='task', required=True, metavar='task')
    p = q.add_parser('fit', help='fit a codebook on sampled frames')
    p.add_argument('--features', required=True)
    p.add_argument('--k', type=int, default=50)
    p.add_argument('--sample', type=int, default=1000000, help='number of frames to fit on')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--max-iter', type=int, default=300)
    p.add_argument('--tol', type=float, default=1e-6)
    p.add_argument('--threads', type=int, default=None)
    p.add_argument('--out', required=True, help='codebook file')
    p.set_defaults(func=cmd_quantize_fit)
    p = q.add_parser('apply', help='turn an archive into unit features')
    p.add_argument('--features', required=True)
    p.add_argument('--codebook', required=True)
    p.add_argument('--encoding', choices=quantize.ENCODINGS, default='one_hot')
    p.add_argument('--out', required=True, help='output archive directory')
    p.set_defaults(func=cmd_quantize_apply)

    p = commands.add_parser('loss', help='training objectives').add_subparsers(
        dest='task', required=True, metavar='task').add_parser('check', help='finite-difference gradient check')
    p.add_argument('--trials', type=int, default=100)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(func=cmd_loss_check)

    p = commands.add_parser('gaps', help='multilingual gap and grounding gain statistics')
    p.add_argument('--results', required=True, help='results CSV, or a JSON mapping of ABX reports')
    p.add_argument('--avg-basis', choices=gaps.AVG_BASES, default='printed')
    p.add_argument('--out', required=True, help='gap report JSON file')
    p.set_defaults(func=cmd_gaps)

    p = commands.add_parser('syngen', help='generate a synthetic corpus')
    p.add_argument('--spec', required=True, help='corpus settings (JSON)')
    p.add_argument('--out', required=True, help='output directory')
    p.set_defaults(func=cmd_syngen)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format='%(name)s: %(message)s')
    try:
        return args.func(args)
    except (DataError, OSError) as e:
        sys.stderr.write(f'{PROG}: error: {e}\n')
        return EXIT_DATA
    except (ContractViolation, InvariantFailure) as e:
        sys.stderr.write(f'{PROG}: error: {e}\n')
        return EXIT_INTERNAL


if __name__ == '__main__':
    sys.exit(main())
