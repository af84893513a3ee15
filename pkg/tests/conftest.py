import numpy as np
import pytest
import torch

from flowtok.corpus import CorpusSpec, generate_corpus


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def small_spec():
    return CorpusSpec(n_utterances=8, symbols_min=2, symbols_max=3, seed=3, frames_per_symbol=16)


@pytest.fixture(scope="session")
def small_corpus(small_spec):
    return generate_corpus(small_spec)
