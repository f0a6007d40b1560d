import numpy as np
import pytest
import torch

from wrel.data import (SplitSpec, SyntheticSceneConfig, generate_synthetic,
                       stratified_split)
from wrel.params import rng_for
from wrel.text import TextEncoder, Vocabulary
from wrel.model import RefSegModel

TOKEN_LEN = 16
CLASSES = ("circle", "square", "triangle", "cross", "bar")


@pytest.fixture(scope="session")
def tiny_manifest():
    return generate_synthetic(SyntheticSceneConfig(grid_size=24, max_instances=2, seed=5), 30)


@pytest.fixture(scope="session")
def tiny_split(tiny_manifest):
    return stratified_split(tiny_manifest, SplitSpec(accurate_ratio=0.3, seed=1))


@pytest.fixture(scope="session")
def vocab(tiny_manifest):
    return Vocabulary.build([s.expression for s in tiny_manifest.samples],
                            extra_tokens=CLASSES)


@pytest.fixture()
def encoder(vocab):
    return TextEncoder(len(vocab), dim=32, out_dim=32, rng=rng_for(3, "test-encoder"))


@pytest.fixture()
def seg_model():
    return RefSegModel(ref_dim=32, channels=(8, 16), rng=rng_for(3, "test-model"))


def random_sequence(encoder, rng, length=None):
    """A random embedded sequence with at least one attended position."""
    length = length or TOKEN_LEN
    n_valid = int(rng.integers(1, length))
    ids = np.zeros(length, dtype=np.int64)
    ids[:n_valid] = rng.integers(0, encoder.emb.shape[0], n_valid)
    attn = np.zeros(length, dtype=np.int8)
    attn[:n_valid] = 1
    return encoder.embed(ids, attn)
