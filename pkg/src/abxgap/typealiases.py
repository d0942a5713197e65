from typing import Union, Tuple
from os import PathLike
from pathlib import Path
import numpy as np

SomeSortOfPath = Union[str, PathLike, Path]
Number = Union[int, float]
Label = str
Matrix = np.ndarray
Vector = np.ndarray

CellKey = Tuple[Label, ...]
Triplet = Tuple[int, int, int]


class DataError(Exception):
    """Malformed or inconsistent input data. Maps to exit status 2."""
    pass


class ContractViolation(Exception):
    """A precondition of a pure kernel was broken by its caller. Maps to exit status 3."""
    pass


class InvariantFailure(Exception):
    """An internal self-check failed. Maps to exit status 3."""
    pass
