"""Embedding-bundle on-disk format, validation, and synthetic generation.

A bundle is a directory: ``manifest.json`` plus raw little-endian arrays
(features, labels, classifier head, optional logits). Features are float32
on disk; all computation happens in float64. Predictions are always derived
by argmax (from stored logits when present, from the head otherwise), never
stored.
"""

import dataclasses
import json
import math
import os

import numpy as np

from . import core
from .errors import ValidationError
from .logistic import fit_multinomial_logistic

FORMAT_NAME = "UEB"
FORMAT_VERSION = 1
DTYPE_TAG = "f32le"

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")

SPLIT_ROLES = ("train", "val", "test")


def write_f32(path, arr) -> None:
    np.ascontiguousarray(arr, dtype=_F32).tofile(path)


def write_u32(path, arr) -> None:
    np.ascontiguousarray(arr, dtype=_U32).tofile(path)


def read_f32(path, shape, field: str) -> np.ndarray:
    expected = int(np.prod(shape))
    try:
        arr = np.fromfile(path, dtype=_F32)
    except FileNotFoundError:
        raise ValidationError(f"missing file for '{field}': {path}") from None
    if arr.size != expected:
        raise ValidationError(
            f"shape mismatch for '{field}': file {os.path.basename(path)} holds "
            f"{arr.size} values, manifest implies {expected}"
        )
    return arr.reshape(shape)


def read_u32(path, shape, field: str) -> np.ndarray:
    expected = int(np.prod(shape))
    try:
        arr = np.fromfile(path, dtype=_U32)
    except FileNotFoundError:
        raise ValidationError(f"missing file for '{field}': {path}") from None
    if arr.size != expected:
        raise ValidationError(
            f"shape mismatch for '{field}': file {os.path.basename(path)} holds "
            f"{arr.size} values, manifest implies {expected}"
        )
    return arr.reshape(shape)


def _check_finite(arr, field: str) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"non-finite value in '{field}' at flat index {idx}")


@dataclasses.dataclass
class EmbeddingBundle:
    """One dataset split: features, gold labels, classifier head, optional
    precomputed logits.

    ``head_input`` marks whether the features are what the classifier head
    actually consumes; when False (e.g. mid-depth extractions) logits must be
    present and the head-route/logits argmax agreement check is skipped.
    """

    features: np.ndarray
    gold_labels: np.ndarray
    head_weight: np.ndarray
    head_bias: np.ndarray
    logits: np.ndarray | None = None
    split_role: str = "test"
    head_input: bool = True

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=_F32)
        self.gold_labels = np.ascontiguousarray(self.gold_labels, dtype=_U32)
        self.head_weight = np.ascontiguousarray(self.head_weight, dtype=_F32)
        self.head_bias = np.ascontiguousarray(self.head_bias, dtype=_F32)
        if self.logits is not None:
            self.logits = np.ascontiguousarray(self.logits, dtype=_F32)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def c(self) -> int:
        return self.head_weight.shape[0]

    def validate(self) -> "EmbeddingBundle":
        if self.features.ndim != 2:
            raise ValidationError("'features' must be a 2-d matrix")
        if self.split_role not in SPLIT_ROLES:
            raise ValidationError(f"split_role must be one of {SPLIT_ROLES}")
        n, d, c = self.n, self.d, self.c
        if c < 2:
            raise ValidationError("head must define at least 2 classes")
        if self.head_weight.shape != (c, d):
            raise ValidationError(
                f"shape mismatch for 'head_weight': {self.head_weight.shape} vs (c={c}, d={d})"
            )
        if self.head_bias.shape != (c,):
            raise ValidationError(f"shape mismatch for 'head_bias': {self.head_bias.shape}")
        if self.gold_labels.shape != (n,):
            raise ValidationError(f"shape mismatch for 'labels': {self.gold_labels.shape}")
        out = np.flatnonzero(self.gold_labels >= c)
        if out.size:
            raise ValidationError(
                f"label out of range in 'labels' at index {int(out[0])}: "
                f"{int(self.gold_labels[out[0]])} >= c={c}"
            )
        _check_finite(self.features, "features")
        _check_finite(self.head_weight, "head_weight")
        _check_finite(self.head_bias, "head_bias")
        if self.logits is not None:
            if self.logits.shape != (n, c):
                raise ValidationError(f"shape mismatch for 'logits': {self.logits.shape}")
            _check_finite(self.logits, "logits")
            if self.head_input:
                # Compare at storage precision: stored logits are f32.
                head_route = np.argmax(self.head_logits().astype(_F32), axis=1)
                stored = np.argmax(self.logits, axis=1)
                bad = np.flatnonzero(head_route != stored)
                if bad.size:
                    raise ValidationError(
                        f"stored logits and head-route predictions disagree at index {int(bad[0])}"
                    )
        elif not self.head_input:
            raise ValidationError("bundles with head_input=false must carry logits")
        return self

    def head_logits(self) -> np.ndarray:
        """(n, c) float64 logits recomputed from features and head."""
        x = self.features.astype(np.float64)
        return x @ self.head_weight.astype(np.float64).T + self.head_bias.astype(np.float64)

    def base_logits(self) -> np.ndarray:
        """Stored logits when present, head route otherwise; float64."""
        if self.logits is not None:
            return self.logits.astype(np.float64)
        return self.head_logits()

    def predictions(self) -> np.ndarray:
        return np.argmax(self.base_logits(), axis=1)

    def error_labels(self) -> np.ndarray:
        """0/1 indicators of base-model errors (1 = wrong prediction)."""
        return (self.predictions() != self.gold_labels.astype(np.int64)).astype(np.float64)

    def base_entropy(self) -> np.ndarray:
        return core.entropy_of_logits(self.base_logits())

    def base_sr(self) -> np.ndarray:
        return 1.0 - core.softmax_batch(self.base_logits()).max(axis=1)


@dataclasses.dataclass
class TokenSequenceBundle:
    """Variable-length per-token hidden states; features hold all sequences
    concatenated row-wise, lengths give each sequence's row count. The
    terminal index of sequence i is lengths[i] - 1."""

    features: np.ndarray
    lengths: np.ndarray
    gold_labels: np.ndarray
    head_weight: np.ndarray
    head_bias: np.ndarray
    logits: np.ndarray | None = None
    split_role: str = "test"
    head_input: bool = False

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=_F32)
        self.lengths = np.ascontiguousarray(self.lengths, dtype=_U32)
        self.gold_labels = np.ascontiguousarray(self.gold_labels, dtype=_U32)
        self.head_weight = np.ascontiguousarray(self.head_weight, dtype=_F32)
        self.head_bias = np.ascontiguousarray(self.head_bias, dtype=_F32)
        if self.logits is not None:
            self.logits = np.ascontiguousarray(self.logits, dtype=_F32)
        self._offsets = np.concatenate([[0], np.cumsum(self.lengths.astype(np.int64))])

    @property
    def n(self) -> int:
        return self.lengths.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def c(self) -> int:
        return self.head_weight.shape[0]

    def validate(self) -> "TokenSequenceBundle":
        if (self.lengths.astype(np.int64) < 1).any():
            idx = int(np.flatnonzero(self.lengths.astype(np.int64) < 1)[0])
            raise ValidationError(f"sequence length must be >= 1, violated at index {idx}")
        total = int(self.lengths.astype(np.int64).sum())
        if self.features.shape[0] != total:
            raise ValidationError(
                f"shape mismatch for 'features': {self.features.shape[0]} rows, "
                f"lengths sum to {total}"
            )
        n, c = self.n, self.c
        if self.gold_labels.shape != (n,):
            raise ValidationError(f"shape mismatch for 'labels': {self.gold_labels.shape}")
        out = np.flatnonzero(self.gold_labels >= c)
        if out.size:
            raise ValidationError(f"label out of range in 'labels' at index {int(out[0])}")
        if self.head_weight.shape != (c, self.d):
            raise ValidationError(f"shape mismatch for 'head_weight': {self.head_weight.shape}")
        if self.logits is not None and self.logits.shape != (n, c):
            raise ValidationError(f"shape mismatch for 'logits': {self.logits.shape}")
        _check_finite(self.features, "features")
        if self.logits is not None:
            _check_finite(self.logits, "logits")
        return self

    def sequence(self, i: int) -> np.ndarray:
        """View of the i-th sequence, shape (L_i, d)."""
        return self.features[self._offsets[i] : self._offsets[i + 1]]

    def terminal_features(self) -> np.ndarray:
        """(n, d) matrix of each sequence's terminal-index row."""
        return self.features[self._offsets[1:] - 1]

    def error_labels(self) -> np.ndarray:
        if self.logits is None:
            raise ValidationError("sequence bundle without logits cannot derive error labels")
        pred = np.argmax(self.logits.astype(np.float64), axis=1)
        return (pred != self.gold_labels.astype(np.int64)).astype(np.float64)


def write_bundle(bundle, path) -> None:
    """Write a bundle directory (manifest.json + raw arrays)."""
    seq = isinstance(bundle, TokenSequenceBundle)
    bundle.validate()
    os.makedirs(path, exist_ok=True)
    files = {
        "features": "features.bin",
        "labels": "labels.bin",
        "head_weight": "head_weight.bin",
        "head_bias": "head_bias.bin",
    }
    if bundle.logits is not None:
        files["logits"] = "logits.bin"
    if seq:
        files["lengths"] = "lengths.bin"
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n": bundle.n,
        "d": bundle.d,
        "c": bundle.c,
        "dtype": DTYPE_TAG,
        "split_role": bundle.split_role,
        "files": files,
        "sequence_mode": seq,
        "head_input": bundle.head_input,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_f32(os.path.join(path, files["features"]), bundle.features)
    write_u32(os.path.join(path, files["labels"]), bundle.gold_labels)
    write_f32(os.path.join(path, files["head_weight"]), bundle.head_weight)
    write_f32(os.path.join(path, files["head_bias"]), bundle.head_bias)
    if bundle.logits is not None:
        write_f32(os.path.join(path, files["logits"]), bundle.logits)
    if seq:
        write_u32(os.path.join(path, files["lengths"]), bundle.lengths)


def read_bundle(path):
    """Read and validate a bundle directory.

    Returns an EmbeddingBundle, or a TokenSequenceBundle when the manifest
    sets sequence_mode.
    """
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise ValidationError(f"no manifest.json in {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT_NAME:
        raise ValidationError(f"bad format magic {manifest.get('format')!r}, expected {FORMAT_NAME!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported version {manifest.get('version')!r}")
    if manifest.get("dtype") != DTYPE_TAG:
        raise ValidationError(f"unsupported dtype {manifest.get('dtype')!r}")
    for key in ("n", "d", "c", "split_role", "files"):
        if key not in manifest:
            raise ValidationError(f"manifest missing field '{key}'")
    n, d, c = int(manifest["n"]), int(manifest["d"]), int(manifest["c"])
    files = manifest["files"]
    for key in ("features", "labels", "head_weight", "head_bias"):
        if key not in files:
            raise ValidationError(f"manifest files missing '{key}'")

    def fpath(key):
        return os.path.join(path, files[key])

    head_weight = read_f32(fpath("head_weight"), (c, d), "head_weight")
    head_bias = read_f32(fpath("head_bias"), (c,), "head_bias")
    labels = read_u32(fpath("labels"), (n,), "labels")
    logits = None
    if "logits" in files:
        logits = read_f32(fpath("logits"), (n, c), "logits")
    head_input = bool(manifest.get("head_input", True))

    if manifest.get("sequence_mode", False):
        if "lengths" not in files:
            raise ValidationError("sequence_mode manifest missing 'lengths' file")
        lengths = read_u32(fpath("lengths"), (n,), "lengths")
        total = int(lengths.astype(np.int64).sum())
        feats = read_f32(fpath("features"), (total, d), "features")
        bundle = TokenSequenceBundle(
            features=feats,
            lengths=lengths,
            gold_labels=labels,
            head_weight=head_weight,
            head_bias=head_bias,
            logits=logits,
            split_role=manifest["split_role"],
            head_input=head_input,
        )
    else:
        feats = read_f32(fpath("features"), (n, d), "features")
        bundle = EmbeddingBundle(
            features=feats,
            gold_labels=labels,
            head_weight=head_weight,
            head_bias=head_bias,
            logits=logits,
            split_role=manifest["split_role"],
            head_input=head_input,
        )
    return bundle.validate()


@dataclasses.dataclass
class SynthConfig:
    """Configuration of the synthetic cluster-plus-pocket generator."""

    n_train: int = 4000
    n_val: int = 2000
    n_test: int = 2000
    d: int = 16
    c: int = 4
    class_separation: float = 4.0
    noise_scale: float = 1.0
    epistemic_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.c < 2:
            raise ValidationError("need at least 2 classes")
        if self.d < self.c + 1:
            raise ValidationError(
                f"d={self.d} < c+1={self.c + 1}: no orthogonal pocket direction available"
            )
        for name, count in (("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)):
            if count < 10 * self.c:
                raise ValidationError(f"{name}={count} < 10*c={10 * self.c}")
        if not 0.0 <= self.epistemic_fraction < 0.5:
            raise ValidationError("epistemic_fraction must lie in [0, 0.5)")
        if self.class_separation <= 0 or self.noise_scale <= 0:
            raise ValidationError("class_separation and noise_scale must be positive")
        return self


@dataclasses.dataclass
class SynthResult:
    train: EmbeddingBundle
    val: EmbeddingBundle
    test: EmbeddingBundle
    info: dict

    def bundles(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def generate_synthetic(cfg: SynthConfig) -> SynthResult:
    """Generate train/val/test bundles with a planted epistemic pocket.

    Clean examples are Gaussian clusters (stddev noise_scale, isotropic in
    every coordinate except the held-out one) whose means sit pairwise
    class_separation apart on scaled basis axes. Pocket examples keep their
    true gold label (uniform over classes 1..c-1) but their features are
    drawn from class 0's cluster, shifted by 2*class_separation^2/noise_scale
    along the held-out coordinate c, which is orthogonal to every class-mean
    difference and carries zero variance in clean data. Zero clean variance
    there means the base head, a logistic classifier fit on the clean train
    portion only, puts exactly zero weight on the pocket flag: it is
    confidently wrong on the pocket, seed-varied ensemble members keep their
    disagreement there forever, and the pocket stays linearly identifiable.
    Because one wrong cluster generates the pocket, a small weight change on
    the held-out coordinate can tie the logits there, which is what makes the
    pocket learnable for an entropy-mapped head and not only for a plain probe.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    c, d = cfg.c, cfg.d
    means = np.zeros((c, d))
    means[np.arange(c), np.arange(c)] = cfg.class_separation / math.sqrt(2.0)
    offset_coord = c
    offset_mag = 2.0 * cfg.class_separation**2 / cfg.noise_scale

    splits = {}
    pocket_positions = {}
    clean_train = None
    for role, n_total in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        n_pocket = int(math.floor(cfg.epistemic_fraction * n_total))
        n_clean = n_total - n_pocket

        y_clean = rng.integers(0, c, size=n_clean)
        noise = cfg.noise_scale * rng.standard_normal((n_clean, d))
        noise[:, offset_coord] = 0.0
        x_clean = means[y_clean] + noise

        y_pocket = rng.integers(1, c, size=n_pocket)
        noise = cfg.noise_scale * rng.standard_normal((n_pocket, d))
        noise[:, offset_coord] = 0.0
        x_pocket = means[np.zeros(n_pocket, dtype=np.int64)] + noise
        x_pocket[:, offset_coord] = offset_mag

        x = np.concatenate([x_clean, x_pocket]).astype(_F32)
        y = np.concatenate([y_clean, y_pocket])
        perm = rng.permutation(n_total)
        splits[role] = (x[perm], y[perm])
        pocket_positions[role] = np.flatnonzero(perm >= n_clean)
        if role == "train":
            clean_train = (x[:n_clean], y_clean)

    w, b = fit_multinomial_logistic(clean_train[0].astype(np.float64), clean_train[1], c)
    w32 = w.astype(_F32)
    b32 = b.astype(_F32)
    w64 = w32.astype(np.float64)
    b64 = b32.astype(np.float64)

    bundles = {}
    accuracy = {}
    for role, (x, y) in splits.items():
        logits = x.astype(np.float64) @ w64.T + b64
        bundles[role] = EmbeddingBundle(
            features=x,
            gold_labels=y,
            head_weight=w32,
            head_bias=b32,
            logits=logits.astype(_F32),
            split_role=role,
        ).validate()
        accuracy[role] = float((np.argmax(logits, axis=1) == y).mean())

    info = {
        "config": dataclasses.asdict(cfg),
        "base_accuracy": accuracy,
        "pocket_indices": {k: v.tolist() for k, v in pocket_positions.items()},
        "offset_coordinate": offset_coord,
        "offset_magnitude": offset_mag,
    }
    return SynthResult(train=bundles["train"], val=bundles["val"], test=bundles["test"], info=info)
