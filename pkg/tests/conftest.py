import numpy as np
import pytest

from idforge.corpus import synthetic_face_corpus
from idforge.numkit import RngState
from idforge.pca import latent_gaussian_fit, pca_fit


@pytest.fixture(scope="session")
def small_corpus():
    """256 x 64 synthetic corpus; fast enough for every module test."""
    return synthetic_face_corpus(256, 64, RngState(0xFACE))


@pytest.fixture(scope="session")
def small_models(small_corpus):
    model = pca_fit(small_corpus, 63)
    lg = latent_gaussian_fit(model, small_corpus)
    return model, lg
