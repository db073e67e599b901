import numpy as np
import pytest

from alien_ue.bundle import EmbeddingBundle, SynthConfig, generate_synthetic


@pytest.fixture(scope="session")
def synth():
    """The fixed-seed synthetic benchmark (acceptance configuration)."""
    return generate_synthetic(SynthConfig(seed=42))


@pytest.fixture(scope="session")
def small_synth():
    """A small synthetic dataset for fast training tests."""
    return generate_synthetic(
        SynthConfig(n_train=600, n_val=300, n_test=300, d=8, c=3, seed=5)
    )


def random_bundle(rng, n=40, d=6, c=3, with_logits=True, split_role="test"):
    """A structurally valid bundle with random features and head."""
    feats = rng.standard_normal((n, d)).astype(np.float32)
    w = rng.standard_normal((c, d)).astype(np.float32)
    b = rng.standard_normal(c).astype(np.float32)
    labels = rng.integers(0, c, size=n).astype(np.uint32)
    logits = None
    if with_logits:
        logits = (feats.astype(np.float64) @ w.astype(np.float64).T
                  + b.astype(np.float64)).astype(np.float32)
    return EmbeddingBundle(
        features=feats, gold_labels=labels, head_weight=w, head_bias=b,
        logits=logits, split_role=split_role,
    ).validate()
