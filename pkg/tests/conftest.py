import numpy as np
import pytest

from dda.lm import LanguageModel, LmConfig
from dda.nmt import NmtConfig, TranslationModel


def randomize(model, seed, scale=0.7):
    rng = np.random.default_rng(seed)
    for p in model.parameters().values():
        p.data = rng.uniform(-scale, scale, p.shape)
    return model


@pytest.fixture
def tiny_models():
    """Random NMT plus two LMs over a 10-token vocabulary, all with hidden size 8."""
    V = 10
    nmt = randomize(TranslationModel(NmtConfig(V, 8, 8, 1, seed=1)), 11)
    lm_in = randomize(LanguageModel(LmConfig(V, 8, 8, 1, seed=2)), 12)
    lm_out = randomize(LanguageModel(LmConfig(V, 8, 8, 1, seed=3)), 13)
    return nmt, lm_in, lm_out


def random_simplex(rng, n, size=None):
    return rng.dirichlet(np.ones(n), size=size)
