"""Ensemble-based uncertainty decomposition.

For T member probability matrices, total uncertainty is the normalized
entropy of the member mean, the aleatoric part is the mean member entropy,
and the epistemic part is their difference (nonnegative by Jensen's
inequality, zero iff the members agree).
"""

import dataclasses
import json
import os

import numpy as np

from . import _kernels
from .errors import DegenerateDataError, ValidationError
from .logistic import fit_multinomial_logistic
from .metrics import spearman

MEMBER_FORMAT = "UEM"
MEMBER_VERSION = 1
COMPONENTS = ("h_total", "h_alea", "h_epi")


def _as_members(probs) -> np.ndarray:
    """Validate a (T, n, c) stack of member probability matrices."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 3:
        raise ValidationError(f"member stack must be (T, n, c), got shape {p.shape}")
    t, _, c = p.shape
    if t < 2:
        raise DegenerateDataError(f"need at least 2 ensemble members, got {t}")
    if c < 2:
        raise ValidationError("member rows must have C >= 2 classes")
    if not np.all(np.isfinite(p)):
        raise ValidationError("member probabilities contain non-finite values")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValidationError("member probabilities outside [0, 1]")
    sums = p.sum(axis=2)
    bad = np.abs(sums - 1.0) > 1e-9
    if bad.any():
        t_i, n_i = np.argwhere(bad)[0]
        raise ValidationError(
            f"member {int(t_i)} row {int(n_i)} sums to {sums[t_i, n_i]!r}, expected 1"
        )
    return p


@dataclasses.dataclass
class EnsembleDecomposition:
    h_total: np.ndarray
    h_alea: np.ndarray
    h_epi: np.ndarray


def decompose(probs) -> EnsembleDecomposition:
    """Split ensemble uncertainty into total / aleatoric / epistemic parts."""
    p = _as_members(probs)
    mean_p = p.mean(axis=0)
    h_total = _kernels.entropy_rows(mean_p)
    h_alea = np.mean([_kernels.entropy_rows(p[t]) for t in range(p.shape[0])], axis=0)
    return EnsembleDecomposition(h_total=h_total, h_alea=h_alea, h_epi=h_total - h_alea)


def correlate_components(decomp: EnsembleDecomposition, method_scores: dict) -> dict:
    """Spearman of each uncertainty component against each method's scores.

    Returns {component: {method: rho}} for the three components.
    """
    out = {}
    for comp in COMPONENTS:
        values = getattr(decomp, comp)
        out[comp] = {
            name: spearman(values, scores) for name, scores in method_scores.items()
        }
    return out


def train_ensemble_members(features, labels, n_classes: int, t: int = 5, seed: int = 0,
                           init_std: float = 0.02):
    """T logistic heads trained identically but from seed-varied inits.

    Returns a list of (weight, bias) pairs; member index k draws its init
    from stream (seed, k).
    """
    if t < 2:
        raise DegenerateDataError(f"need at least 2 ensemble members, got {t}")
    x = np.asarray(features, dtype=np.float64)
    members = []
    for k in range(t):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
        w0 = init_std * rng.standard_normal((n_classes, x.shape[1]))
        b0 = init_std * rng.standard_normal(n_classes)
        members.append(fit_multinomial_logistic(x, labels, n_classes,
                                                init_weight=w0, init_bias=b0))
    return members


def member_probs(members, features) -> np.ndarray:
    """(T, n, c) member probabilities for the given features."""
    x = np.asarray(features, dtype=np.float64)
    return np.stack([_kernels.softmax_rows(x @ w.T + b) for w, b in members])


# ---------------------------------------------------------------------------
# Member file IO (bundle-adjacent: manifest + one f32 matrix per member)
# ---------------------------------------------------------------------------


def write_members(path, probs) -> None:
    from . import bundle as bio

    p = _as_members(probs)
    t, n, c = p.shape
    os.makedirs(path, exist_ok=True)
    files = [f"member_{k}.bin" for k in range(t)]
    manifest = {
        "format": MEMBER_FORMAT,
        "version": MEMBER_VERSION,
        "t": t,
        "n": n,
        "c": c,
        "dtype": "f32le",
        "files": files,
    }
    with open(os.path.join(path, "members_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for k, name in enumerate(files):
        bio.write_f32(os.path.join(path, name), p[k])


def read_members(path) -> np.ndarray:
    """Load member probabilities; rows are renormalized to counteract the
    float32 storage rounding, then fully validated."""
    from . import bundle as bio

    manifest_path = os.path.join(path, "members_manifest.json")
    if not os.path.isfile(manifest_path):
        raise ValidationError(f"no members_manifest.json in {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MEMBER_FORMAT:
        raise ValidationError(f"bad member-file format {manifest.get('format')!r}")
    if manifest.get("version") != MEMBER_VERSION:
        raise ValidationError(f"unsupported member-file version {manifest.get('version')!r}")
    t, n, c = int(manifest["t"]), int(manifest["n"]), int(manifest["c"])
    stack = np.empty((t, n, c))
    for k, name in enumerate(manifest["files"]):
        stack[k] = bio.read_f32(os.path.join(path, name), (n, c), name).astype(np.float64)
    stack /= stack.sum(axis=2, keepdims=True)
    return _as_members(stack)
