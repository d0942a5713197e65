"""Training objectives as pure functions over embedding matrices.

- ``masked_ce``: cross-entropy of unit predictions at masked frames (the audio-only objective).
- ``contrastive_av``: symmetric temperature-scaled softmax cross-entropy over cosine similarities, where every
  other pair of the batch is a negative (the audio-visual objective).
- ``combined_loss``: ``(1 - alpha) * l_a + alpha * l_av``.

Gradients are analytic and can be checked against central finite differences with :func:`check_gradients`.
"""

from __future__ import annotations
from typing import Dict, Iterable, Sequence, Tuple
from dataclasses import dataclass
import math
import numpy as np
from scipy.special import log_softmax, softmax
from .typealiases import Matrix, Vector, DataError, ContractViolation


__all__ = [
    'LossConfig', 'BatchPair', 'GradientCheck', 'masked_ce', 'grad_masked_ce', 'cosine_similarity_matrix',
    'contrastive_av', 'grad_contrastive_av', 'combined_loss', 'retrieval_recall', 'relative_error',
    'coordinate_error', 'numeric_gradient', 'random_batch', 'check_gradients']


ZERO_NORM = 1e-12
CHECK_TEMPERATURES = (0.05, 0.07, 1.0)
COORDINATE_FLOOR = 1e-2
COORDINATE_TOLERANCE = 1e-3


@dataclass(frozen=True)
class LossConfig:
    """Weighting of the two objectives and the contrastive temperature."""

    alpha: float = 0.5
    temperature: float = 0.07

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractViolation(f'alpha must lie in [0, 1], got {self.alpha}.')
        if not self.temperature > 0.0:
            raise ContractViolation(f'temperature must be positive, got {self.temperature}.')

    def combine(self, l_a: float, l_av: float) -> float:
        return combined_loss(l_a, l_av, self.alpha)


@dataclass(frozen=True, eq=False)
class BatchPair:
    """Paired embeddings: row ``i`` of the audio matrix belongs with row ``i`` of the image matrix."""

    audio_embeddings: Matrix
    image_embeddings: Matrix

    def __post_init__(self) -> None:
        audio = np.asarray(self.audio_embeddings, dtype=np.float64)
        image = np.asarray(self.image_embeddings, dtype=np.float64)
        if audio.ndim != 2 or audio.shape != image.shape:
            raise DataError(f'Audio and image embeddings must be matrices of equal shape, got {audio.shape} '
                            f'and {image.shape}.')
        if audio.shape[0] < 1 or audio.shape[1] < 1:
            raise DataError(f'Empty batch of shape {audio.shape}.')
        for name, m in (('audio', audio), ('image', image)):
            if not np.isfinite(m).all():
                raise DataError(f'Non-finite value in the {name} embeddings.')
            zero = np.flatnonzero(np.linalg.norm(m, axis=1) < ZERO_NORM)
            if zero.size:
                raise DataError(f'Zero-norm row {int(zero[0])} in the {name} embeddings.')
        object.__setattr__(self, 'audio_embeddings', audio)
        object.__setattr__(self, 'image_embeddings', image)

    @property
    def size(self) -> int:
        return self.audio_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.audio_embeddings.shape[1]


def _check_ce_inputs(logits: Matrix, labels: Vector, mask: Vector) -> Tuple[Matrix, Vector, Vector]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],) or mask.shape != (logits.shape[0],):
        raise DataError(f'Expected M x k logits with M labels and M mask entries, got {logits.shape}, '
                        f'{labels.shape} and {mask.shape}.')
    if not mask.any():
        raise DataError('The mask selects no position.')
    picked = labels[mask]
    if not np.issubdtype(picked.dtype, np.integer):
        raise DataError(f'Labels must be integers, got dtype {picked.dtype}.')
    bad = np.flatnonzero((picked < 0) | (picked >= logits.shape[1]))
    if bad.size:
        raise DataError(f'Label {int(picked[bad[0]])} out of range [0, {logits.shape[1]}).')
    return logits, labels.astype(np.int64), mask


def masked_ce(logits: Matrix, labels: Vector, mask: Vector) -> float:
    """**Mean cross-entropy over masked positions.**

    :param logits: ``M x k`` unnormalized unit scores.
    :param labels: ``M`` target unit indices (only masked ones are read).
    :param mask: ``M`` booleans selecting the positions that count.
    :return: Mean of ``-log softmax(logits[m])[labels[m]]`` over masked ``m``.
    """
    logits, labels, mask = _check_ce_inputs(logits, labels, mask)
    rows = np.flatnonzero(mask)
    log_p = log_softmax(logits[rows], axis=1)
    return -math.fsum(log_p[np.arange(rows.size), labels[rows]]) / rows.size


def grad_masked_ce(logits: Matrix, labels: Vector, mask: Vector) -> Matrix:
    """Gradient of :func:`masked_ce` with respect to the logits. Unmasked rows get zeros."""
    logits, labels, mask = _check_ce_inputs(logits, labels, mask)
    rows = np.flatnonzero(mask)
    grad = np.zeros_like(logits)
    p = softmax(logits[rows], axis=1)
    p[np.arange(rows.size), labels[rows]] -= 1.0
    grad[rows] = p / rows.size
    return grad


def _normalized(m: Matrix) -> Tuple[Matrix, Vector]:
    norms = np.linalg.norm(m, axis=1)
    return m / norms[:, None], norms


def cosine_similarity_matrix(a: Matrix, b: Matrix) -> Matrix:
    """``S[i, j]`` = cosine similarity of ``a[i]`` and ``b[j]``."""
    a_hat, _ = _normalized(np.asarray(a, dtype=np.float64))
    b_hat, _ = _normalized(np.asarray(b, dtype=np.float64))
    return a_hat @ b_hat.T


def _check_temperature(temperature: float) -> None:
    if not temperature > 0.0:
        raise ContractViolation(f'temperature must be positive, got {temperature}.')


def contrastive_av(batch: BatchPair, temperature: float = 0.07) -> float:
    """**Symmetric in-batch contrastive loss.**

    With ``S`` the cosine similarity matrix between audio rows and image rows, the loss is the mean of the
    audio-to-image and image-to-audio cross-entropies that pick the diagonal out of ``S / temperature``.
    A single-pair batch has no negatives and a loss of 0.
    """
    _check_temperature(temperature)
    z = cosine_similarity_matrix(batch.audio_embeddings, batch.image_embeddings) / temperature
    row = np.diag(log_softmax(z, axis=1))
    col = np.diag(log_softmax(z, axis=0))
    return -(math.fsum(row) + math.fsum(col)) / (2 * batch.size) + 0.0


def _back_through_norm(x_hat: Matrix, norms: Vector, g: Matrix) -> Matrix:
    return (g - x_hat * np.einsum('ij,ij->i', x_hat, g)[:, None]) / norms[:, None]


def grad_contrastive_av(batch: BatchPair, temperature: float = 0.07) -> Tuple[Matrix, Matrix]:
    """Gradients of :func:`contrastive_av` with respect to the raw audio and image embeddings."""
    _check_temperature(temperature)
    a_hat, a_norm = _normalized(batch.audio_embeddings)
    b_hat, b_norm = _normalized(batch.image_embeddings)
    z = (a_hat @ b_hat.T) / temperature
    eye = np.eye(batch.size)
    g = (softmax(z, axis=1) - eye + softmax(z, axis=0) - eye) / (2 * batch.size * temperature)
    return _back_through_norm(a_hat, a_norm, g @ b_hat), _back_through_norm(b_hat, b_norm, g.T @ a_hat)


def combined_loss(l_a: float, l_av: float, alpha: float = 0.5) -> float:
    """``(1 - alpha) * l_a + alpha * l_av``."""
    if not (math.isfinite(l_a) and math.isfinite(l_av)):
        raise ContractViolation(f'Losses must be finite, got l_a={l_a}, l_av={l_av}.')
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation(f'alpha must lie in [0, 1], got {alpha}.')
    return (1.0 - alpha) * l_a + alpha * l_av


def _recall(similarity: Matrix, ks: Sequence[int]) -> Dict[int, float]:
    n = similarity.shape[0]
    positive = np.diag(similarity)
    above = (similarity > positive[:, None]).sum(axis=1)
    # Ties with the positive count against it only when they sit at a lower index.
    earlier = np.tril(similarity == positive[:, None], k=-1).sum(axis=1)
    rank = above + earlier
    return {k: float(np.count_nonzero(rank < k)) / n for k in ks}


def retrieval_recall(batch: BatchPair, ks: Iterable[int] = (1, 5, 10)) -> Dict[str, Dict[int, float]]:
    """**Recall@k in both retrieval directions.**

    :param batch: Paired embeddings; the true match of row ``i`` is row ``i``.
    :param ks: Cutoffs, each between 1 and the batch size.
    :return: ``{'audio_to_image': {k: recall}, 'image_to_audio': {k: recall}}``.
    """
    ks = sorted(set(int(k) for k in ks))
    for k in ks:
        if not 1 <= k <= batch.size:
            raise DataError(f'Recall cutoff k={k} outside [1, {batch.size}] for a batch of {batch.size} pairs.')
    s = cosine_similarity_matrix(batch.audio_embeddings, batch.image_embeddings)
    return {'audio_to_image': _recall(s, ks), 'image_to_audio': _recall(s.T, ks)}


@dataclass(frozen=True)
class GradientCheck:
    """Worst disagreements seen by :func:`check_gradients`, against the largest entry and coordinate-wise."""

    trials: int
    max_relative_error: float
    worst: str
    tolerance: float
    max_coordinate_error: float = 0.0
    worst_coordinate: str = ''
    coordinate_tolerance: float = COORDINATE_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance and self.max_coordinate_error <= self.coordinate_tolerance

    def to_dict(self) -> Dict[str, object]:
        return {'trials': self.trials, 'max_relative_error': self.max_relative_error, 'worst': self.worst,
                'tolerance': self.tolerance, 'max_coordinate_error': self.max_coordinate_error,
                'worst_coordinate': self.worst_coordinate, 'coordinate_tolerance': self.coordinate_tolerance,
                'passed': self.passed}


def relative_error(analytic: Matrix, numeric: Matrix) -> float:
    """Largest absolute disagreement, relative to the largest gradient entry of either side."""
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), np.finfo(np.float64).tiny)
    return float(np.abs(analytic - numeric).max()) / scale


def coordinate_error(analytic: Matrix, numeric: Matrix, floor: float = COORDINATE_FLOOR) -> float:
    """Largest disagreement of a single entry relative to that entry. Entries below ``floor`` in both gradients
    are compared against ``floor`` instead, so finite-difference noise around zero is not amplified."""
    analytic, numeric = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / scale).max())


def numeric_gradient(f, x: Matrix, h: float = 1e-4) -> Matrix:
    """Central finite differences of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for idx in np.ndindex(*x.shape):
        keep = x[idx]
        x[idx] = keep + h
        up = f(x)
        x[idx] = keep - h
        down = f(x)
        x[idx] = keep
        grad[idx] = (up - down) / (2 * h)
    return grad


def random_batch(rng: np.random.Generator, n: int, d: int) -> BatchPair:
    """Random unit rows scaled by factors in [0.5, 2], so no row is near zero norm."""
    def rows():
        m = rng.standard_normal((n, d))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        return m * rng.uniform(0.5, 2.0, size=(n, 1))
    return BatchPair(rows(), rows())


def check_gradients(trials: int = 100, seed: int = 0, h: float = 1e-4, tolerance: float = 1e-4,
                    coordinate_tolerance: float = COORDINATE_TOLERANCE) -> GradientCheck:
    """**Compare analytic gradients with central finite differences** on random inputs.

    Each trial draws a contrastive batch (``N`` in 2..8, ``d`` in 2..16, temperature cycling through 0.05, 0.07
    and 1.0) and a masked cross-entropy problem. Both gradients are scored twice: against their largest entry
    (:func:`relative_error`) and entry by entry (:func:`coordinate_error`).
    """
    if trials < 1:
        raise ContractViolation('trials must be positive.')
    rng = np.random.default_rng(seed)
    worst, where = 0.0, ''
    worst_coord, where_coord = 0.0, ''
    for t in range(trials):
        n, d = int(rng.integers(2, 9)), int(rng.integers(2, 17))
        tau = CHECK_TEMPERATURES[t % len(CHECK_TEMPERATURES)]
        batch = random_batch(rng, n, d)
        g_audio, g_image = grad_contrastive_av(batch, tau)
        n_audio = numeric_gradient(lambda a: contrastive_av(BatchPair(a, batch.image_embeddings), tau),
                                   batch.audio_embeddings, h)
        n_image = numeric_gradient(lambda b: contrastive_av(BatchPair(batch.audio_embeddings, b), tau),
                                   batch.image_embeddings, h)

        m, k = int(rng.integers(1, 9)), int(rng.integers(2, 11))
        logits = rng.standard_normal((m, k)) * 3.0
        labels = rng.integers(0, k, size=m)
        mask = rng.random(m) < 0.6
        mask[int(rng.integers(0, m))] = True
        g_ce = grad_masked_ce(logits, labels, mask)
        n_ce = numeric_gradient(lambda z: masked_ce(z, labels, mask), logits, h)

        for name, analytic, numeric in (
                (f'contrastive_av audio (trial {t}, N={n}, d={d}, tau={tau})', g_audio, n_audio),
                (f'contrastive_av image (trial {t}, N={n}, d={d}, tau={tau})', g_image, n_image),
                (f'masked_ce (trial {t}, M={m}, k={k})', g_ce, n_ce)):
            err = relative_error(analytic, numeric)
            if err > worst or not where:
                worst, where = err, name
            err = coordinate_error(analytic, numeric)
            if err > worst_coord or not where_coord:
                worst_coord, where_coord = err, name
    return GradientCheck(trials, worst, where, tolerance, worst_coord, where_coord, coordinate_tolerance)
