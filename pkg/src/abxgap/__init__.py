"""
:Version: 0.1.0

abxgap
======

Zero-shot evaluation of speech representations, and the statistics that compare monolingual with bilingual models.

`abxgap` scores precomputed frame-level features with **ABX discrimination**: is a token X closer to a token A of
its own class than to a token B of another class? Phones are compared within a triphone context with DTW over
cosine frame distances, either within or across speakers; languages are compared over whole utterances with
mean-pooled cosine distance. Error rates then feed the **multilingual gap** (relative degradation of bilingual
models) and **grounding gain** (relative improvement from visual grounding) statistics.

Basic Usage
-----------

Features live in an archive directory, items in a plain-text item file:

    >>> import abxgap as ag
    >>> features = ag.read_archive('features/')
    >>> tokens = ag.read_phone_items('phone.item')
    >>> report = ag.run_phonetic_abx(features, tokens, ag.AbxCondition('phonetic_across'))
    >>> report.final_error_percent

Language discrimination works the same way with ``read_language_items()`` and ``run_language_abx()``.

The rest of the toolkit:

- ``quantize``: k-means codebooks (``fit_kmeans()``) that turn frames into discrete units, for unit-level ABX.

- ``losses``: the masked-prediction cross-entropy and the audio-visual contrastive loss, with analytic gradients
  and ``check_gradients()``.

- ``gaps``: ``analyze()`` computes the gaps y and w, the gains x and z, and the two verdicts from a table of error
  rates.

- ``syngen``: synthetic corpora with a known answer, for testing all of the above.

Scoring with ``threads`` greater than one uses **multiprocessing**, so scripts need an
``if __name__ == '__main__'`` guard. Every stage is also available from the command line as ``abxgap <command>``.
"""

from . import abx, gaps, losses, quantize, syngen
from .featstore import FeatureMatrix, FeatureArchive, read_archive, write_archive
from .itemfile import (
    PhoneToken, UtteranceRecord, parse_phone_items, parse_language_items, read_phone_items, read_language_items)
from .kernels import DistanceSpec, frame_distance, distance_matrix, dtw_distance, mean_pool
from .abx import AbxCondition, AbxReport, run_phonetic_abx, run_language_abx
from .typealiases import DataError, ContractViolation, InvariantFailure


__version__ = '0.1.0'
