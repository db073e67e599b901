"""Numerically stable probability primitives.

All scores follow one convention: higher = more uncertain. Entropy is
natural-log based and normalized by log C, so the base cancels and scores
live in [0, 1]. Single-vector functions delegate to the batch kernels, so
every caller (scalar or batched, python or native backend) runs the exact
same code path.
"""

import numpy as np

from . import _kernels
from .errors import DegenerateDataError, ValidationError


def validate_logits(z) -> np.ndarray:
    """Check a logit vector: C >= 2, all entries finite. Returns float64."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise ValidationError(f"logit vector must be 1-d with C >= 2, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValidationError("logit vector contains non-finite entries")
    return z


def validate_probs(p, atol: float = 1e-9) -> np.ndarray:
    """Check a probability vector: C >= 2, entries in [0, 1], sums to 1."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise ValidationError(f"probability vector must be 1-d with C >= 2, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValidationError("probability vector contains non-finite entries")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValidationError("probability entries must lie in [0, 1]")
    if abs(p.sum() - 1.0) > atol:
        raise ValidationError(f"probabilities sum to {p.sum()!r}, expected 1 within {atol}")
    return p


def softmax(z) -> np.ndarray:
    """Max-shifted softmax of a single logit vector."""
    z = validate_logits(z)
    return _kernels.softmax_rows(z[None, :])[0]


def normalized_entropy(p) -> float:
    """-(1/log C) sum p_c log p_c, in [0, 1]; the 0 log 0 := 0 convention
    is realized by clamping probabilities to [1e-12, 1] before the log."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 2:
        raise DegenerateDataError(
            "entropy normalization needs C >= 2 (log C = 0 for C = 1)"
        )
    p = validate_probs(arr)
    return float(_kernels.entropy_rows(p[None, :])[0])


def sr_score(p) -> float:
    """Softmax-response uncertainty: 1 - max_c p_c, in [0, 1 - 1/C]."""
    p = validate_probs(p)
    return float(1.0 - p.max())


def entropy_grad(z) -> np.ndarray:
    """Gradient of normalized_entropy(softmax(z)) w.r.t. the logits z."""
    z = validate_logits(z)
    p = _kernels.softmax_rows(z[None, :])
    return _kernels.entropy_grad_rows(p)[0]


def softmax_batch(z) -> np.ndarray:
    """Rowwise softmax of an (n, C) logit matrix."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ValidationError(f"logit matrix must be (n, C) with C >= 2, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValidationError("logit matrix contains non-finite entries")
    return _kernels.softmax_rows(z)


def entropy_batch(p) -> np.ndarray:
    """Rowwise normalized entropy of an (n, C) probability matrix."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ValidationError(f"probability matrix must be (n, C) with C >= 2, got shape {p.shape}")
    return _kernels.entropy_rows(p)


def entropy_of_logits(z) -> np.ndarray:
    """Rowwise normalized entropy straight from logits."""
    return _kernels.entropy_rows(softmax_batch(z))
