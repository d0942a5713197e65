from typing import Any, Optional
from decimal import Decimal, ROUND_HALF_UP
import json
import os
from pathlib import Path
from .typealiases import SomeSortOfPath, Number


def resolve_threads(threads: Optional[int]) -> int:
    """Return the number of workers to use. ``None`` or values below one mean all available CPUs."""
    if threads is None or threads < 1:
        return os.cpu_count() or 1
    return threads


def round_half_up(value: Number, places: int = 2) -> float:
    """Round to ``places`` decimals, halves away from zero. The value is first trimmed to 9 decimals so
    that binary noise (7.10499999... for 7.105) does not decide the direction."""
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(repr(round(float(value), 9))).quantize(quantum, rounding=ROUND_HALF_UP))


def format_percent(value: Number, places: int = 2) -> str:
    """Percent value as printed in reports: fixed decimals, round-half-up."""
    return f'{round_half_up(value, places):.{places}f}'


def dump_json(obj: Any) -> str:
    """Canonical JSON text. Sorted keys so identical inputs give byte-identical files."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + '\n'


def write_json(obj: Any, path: SomeSortOfPath) -> Path:
    path = Path(path)
    if path.parent != Path(''):
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(obj), encoding='utf-8')
    return path


def read_json(path: SomeSortOfPath) -> Any:
    return json.loads(Path(path).read_text(encoding='utf-8'))
