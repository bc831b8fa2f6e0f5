import json
import struct

import numpy as np
import pytest

from cycle import CycleConfig
from episode import EpisodeBundle, decode_bundle
from synth import SynthSpec, gen_synthetic
from transform import ModelParams, init_params


def random_bundle(seed: int, C: int = 3, n_support: int = 6, M: int = 4, A: int = 1, d: int = 8, n_query: int = 6):
    """Random episode with every class present in support and query."""
    rng = np.random.default_rng(seed)
    support_labels = np.arange(n_support) % C
    query_labels = np.arange(n_query) % C
    return EpisodeBundle(
        text=rng.standard_normal((C, d)),
        support_labels=support_labels,
        support_globals=rng.standard_normal((n_support, d)),
        support_views=rng.standard_normal((n_support, A + 1, M, d)),
        query_labels=query_labels,
        query_globals=rng.standard_normal((n_query, d)),
        query_patches=rng.standard_normal((n_query, M, d)),
        metadata={"class_names": [f"c{j}" for j in range(C)], "source": "random"},
    )


def random_params(seed: int, d: int = 8, h: int = 8, adapter_scale: float = 0.1):
    """Glorot MLP plus a small random adapter so every parameter block is active."""
    params = init_params(d, h, seed)
    params.Wa = adapter_scale * np.random.default_rng(seed + 1000).standard_normal((d, d))
    return params


def identity_params(d: int) -> ModelParams:
    """ReLU(x [I, -I]) [I; -I] = x, so the MLP leaves every row unchanged."""
    W1 = np.hstack([np.eye(d), -np.eye(d)])
    W2 = np.vstack([np.eye(d), -np.eye(d)])
    return ModelParams(W1, W2, np.zeros((d, d)))


def with_metadata_block(data: bytes, payload: bytes) -> bytes:
    """Swap the trailing metadata block of CCFB bytes for an arbitrary payload."""
    meta = json.dumps(decode_bundle(data).metadata, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    body = data[: len(data) - len(meta.encode("utf-8")) - 4]
    return body + struct.pack("<I", len(payload)) + payload


@pytest.fixture
def toy_bundle():
    return random_bundle(0)


@pytest.fixture
def toy_params():
    return random_params(0)


@pytest.fixture
def toy_cfg():
    return CycleConfig(lambda1=1.0, lambda2=1.0, k=2, tau_ce=0.1, tau_soft=0.5)


@pytest.fixture
def clean_spec():
    return SynthSpec(
        C=3,
        d=16,
        M=8,
        A=1,
        N_support=2,
        N_query=4,
        signal_patches_per_image=2,
        signal_strength=1.0,
        noise_sigma=0.0,
        distractor_overlap=0.0,
        view_jitter_sigma=0.0,
        seed=3,
    )


@pytest.fixture
def clean_bundle(clean_spec):
    return gen_synthetic(clean_spec)
