import numpy as np
import pytest

from tokenmixer.data import Corpus, DatasetConfig
from tokenmixer.model import Model, ModelConfig

TINY_DATA = DatasetConfig(grid_h=4, grid_w=4, palette=4, min_objects=1, max_objects=2, max_side=3)
TINY_MODEL = ModelConfig(data=TINY_DATA, d_model=16, heads=2, n_enc=1, n_dec=2)


@pytest.fixture(scope="session")
def tiny_model():
    return Model(TINY_MODEL, seed=0)


@pytest.fixture(scope="session")
def tiny_corpus():
    return Corpus(seed=11, size=32, knobs=TINY_DATA)


@pytest.fixture(scope="session")
def tiny_example(tiny_corpus):
    return tiny_corpus.examples[0]


def first_rows(batch, n):
    return {k: v[:n] for k, v in batch.items()}


def redraw_params(model, seed, scale=0.25):
    """Re-draw weights at a larger scale so no gradient path is degenerate.

    Tiny 0.02-scale init leaves some mixer-path gradients below the 1e-8
    relative-error floor, where central-difference roundoff dominates; the
    oracle needs healthy magnitudes to be meaningful. Norm gains/biases keep
    their 1/0 values.
    """
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        if p.name.endswith(".g") or p.name.endswith((".b", ".b1", ".b2")):
            continue
        p.value.data = rng.normal(0.0, scale, size=p.value.shape).astype(p.value.dtype)
    return model
