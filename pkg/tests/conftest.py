import os

import pytest
import torch
from hypothesis import HealthCheck, settings

from rankdistill.labelgen import SyntheticOracleLabeler, build_dataset
from rankdistill.text import corpus_vocabulary, generate_synthetic_corpus

settings.register_profile("default", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(7, n_queries=24, docs_per_query=30, vocab_size=120, n_topics=5)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return corpus_vocabulary(small_corpus, 400)


@pytest.fixture(scope="session")
def small_labels(small_corpus):
    return build_dataset(small_corpus, SyntheticOracleLabeler(), seed=3).labels
