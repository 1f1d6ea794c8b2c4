from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from driftlm.backbone import ModelConfig, init_params
from driftlm.encoder import FeatureVec, make_frozen_encoder

settings.register_profile("ci", max_examples=30, deadline=None, derandomize=True)
settings.load_profile("ci")


SMALL_MODEL = ModelConfig(vocab_size=7, length=5, embed_dim=6, hidden_dim=8)
DESK_MODEL = ModelConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_params():
    return init_params(SMALL_MODEL, np.random.default_rng(42))


@pytest.fixture
def small_encoder(small_params):
    return make_frozen_encoder(small_params)


def unit_vec(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def feature(rng: np.random.Generator, dim: int) -> FeatureVec:
    return FeatureVec(unit_vec(rng, dim))


def rel_err(analytic: np.ndarray, reference: np.ndarray, atol: float = 1e-8) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(reference)), atol)
    return float(np.max(np.abs(analytic - reference) / scale))
