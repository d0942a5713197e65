import numpy as np
import pytest
from abxgap.syngen import SynSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_spec():
    return SynSpec(n_phones=3, n_speakers=2, n_languages=2, tokens_per_class=2, dim=6, frames_per_token=(2, 4),
                   class_separation=5.0, noise_std=0.05, seed=7)


@pytest.fixture
def small_corpus(small_spec):
    return generate(small_spec)


@pytest.fixture
def corpus_dir(tmp_path, small_spec):
    generate(small_spec, tmp_path / 'corpus')
    return tmp_path / 'corpus'
