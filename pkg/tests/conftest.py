import numpy as np
import pytest

from nflbench.embedding import EmbeddingTable, EncoderG, Vocabulary
from nflbench.rng import substream


@pytest.fixture
def tiny_vocab():
    return Vocabulary(("a", "b", "c"))


@pytest.fixture
def tiny_table():
    return EmbeddingTable(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))


@pytest.fixture
def identity_encoder():
    return EncoderG.identity(2)


def random_instance(seed: int, vocab_size: int = 12, dim: int = 3, spread: float = 2.0):
    """Seeded vocabulary + canonical table for pipeline tests."""
    rng = substream(seed)
    tokens = tuple(f"t{i}" for i in range(vocab_size))
    matrix = rng.normal(0.0, spread, size=(vocab_size, dim))
    return Vocabulary(tokens), EmbeddingTable(matrix)


def rng_for(test_seed: int) -> np.random.Generator:
    return substream(0xBEEF, test_seed)
