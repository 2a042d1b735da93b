import os
import sys

import numpy as np
import pytest

# The modules live at the repository root, next to verify_pipeline.py.
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, ROOT)

from paraphrase_engine import load_synonym_table  # noqa: E402
from text_metrics import EmbeddingTable  # noqa: E402

DATA_DIR = os.path.join(ROOT, 'data')
GOLDEN_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'golden')


@pytest.fixture(scope='session')
def synonyms():
    return load_synonym_table(os.path.join(DATA_DIR, 'synonyms.tsv'))


@pytest.fixture
def one_hot():
    """Orthogonal embeddings for a small alphabet of tokens."""
    def build(tokens):
        tokens = sorted(set(tokens))
        return EmbeddingTable.from_vectors({t: np.eye(len(tokens))[i] for i, t in enumerate(tokens)})
    return build


@pytest.fixture(scope='session')
def random_emb():
    rng = np.random.default_rng(11)
    words = [f"w{i}" for i in range(30)]
    return EmbeddingTable.from_vectors({w: rng.normal(size=8) for w in words})
