"""Comparison methods: the Mahalanobis-distance family and error probes.

Distance scores are unbounded (higher = farther from the training
distribution = more uncertain); probe scores are sigmoid error
probabilities in (0, 1). All fitting happens in float64.
"""

import dataclasses
import json
import os

import numpy as np

from .errors import DegenerateDataError, ValidationError
from .optim import AdamW

DEFAULT_RIDGE = 1e-6
DEPTH_TAGS = ("begin", "mid", "last")


# ---------------------------------------------------------------------------
# Gaussian / Mahalanobis family
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class GaussianStats:
    """Per-class Gaussians with one shared covariance, plus a class-agnostic
    background Gaussian over all training features."""

    class_means: np.ndarray
    covariance: np.ndarray
    precision: np.ndarray
    background_mean: np.ndarray
    background_covariance: np.ndarray
    background_precision: np.ndarray
    ridge: float

    @property
    def d(self) -> int:
        return self.class_means.shape[1]


def _regularize(cov: np.ndarray, ridge: float) -> np.ndarray:
    trace = float(np.trace(cov))
    scale = trace / cov.shape[0] if trace > 0 else 1.0
    return cov + ridge * scale * np.eye(cov.shape[0])


def _invert(cov: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.inv(cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateDataError(f"{what} covariance is singular; increase ridge") from exc


def fit_stats_arrays(features, labels, n_classes: int, ridge: float = DEFAULT_RIDGE,
                     min_per_class: int = 2) -> GaussianStats:
    """Fit class means + pooled within-class covariance and background stats."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, d = x.shape
    means = np.empty((n_classes, d))
    centered = np.empty_like(x)
    for cls in range(n_classes):
        mask = y == cls
        count = int(mask.sum())
        if count < min_per_class:
            raise DegenerateDataError(
                f"class {cls} has {count} training examples, need >= {min_per_class}"
            )
        means[cls] = x[mask].mean(axis=0)
        centered[mask] = x[mask] - means[cls]
    pooled = centered.T @ centered / n

    bg_mean = x.mean(axis=0)
    bg_centered = x - bg_mean
    bg_cov = bg_centered.T @ bg_centered / n

    cov = _regularize(pooled, ridge)
    bg_cov = _regularize(bg_cov, ridge)
    return GaussianStats(
        class_means=means,
        covariance=cov,
        precision=_invert(cov, "pooled"),
        background_mean=bg_mean,
        background_covariance=bg_cov,
        background_precision=_invert(bg_cov, "background"),
        ridge=ridge,
    )


def fit_gaussian_stats(bundle, ridge: float = DEFAULT_RIDGE) -> GaussianStats:
    return fit_stats_arrays(bundle.features.astype(np.float64), bundle.gold_labels, bundle.c, ridge)


def _quad_form(x, mean, precision):
    """(x - mean)^T P (x - mean) per row."""
    delta = x - mean
    return np.einsum("ij,jk,ik->i", delta, precision, delta)


def _check_dim(x, d):
    if x.shape[1] != d:
        raise ValidationError(f"feature dimension {x.shape[1]} does not match fitted stats (d={d})")


def md_scores(stats: GaussianStats, features) -> np.ndarray:
    """Minimum squared Mahalanobis distance to any class centroid."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    _check_dim(x, stats.d)
    dists = np.stack([_quad_form(x, mu, stats.precision) for mu in stats.class_means])
    return dists.min(axis=0)


def mdm_scores(stats: GaussianStats, features) -> np.ndarray:
    """Squared Mahalanobis distance to the class-agnostic background."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    _check_dim(x, stats.d)
    return _quad_form(x, stats.background_mean, stats.background_precision)


def mdr_scores(stats: GaussianStats, features) -> np.ndarray:
    """Relative distance: class distance minus background distance."""
    return md_scores(stats, features) - mdm_scores(stats, features)


def md_score(stats, h) -> float:
    return float(md_scores(stats, np.asarray(h)[None, :])[0])


def mdm_score(stats, h) -> float:
    return float(mdm_scores(stats, np.asarray(h)[None, :])[0])


def mdr_score(stats, h) -> float:
    return float(mdr_scores(stats, np.asarray(h)[None, :])[0])


# ---------------------------------------------------------------------------
# Robust distance estimation: PCA + distance-trimmed refit
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class RdeConfig:
    pca_components: int | None = None  # resolved to min(d, 256) at fit
    trim_fraction: float = 0.1

    def resolve(self, d: int) -> "RdeConfig":
        k = self.pca_components if self.pca_components is not None else min(d, 256)
        if k > d:
            raise ValidationError(f"pca_components={k} exceeds feature dimension d={d}")
        if not 0.0 <= self.trim_fraction < 0.5:
            raise ValidationError("trim_fraction must lie in [0, 0.5)")
        return RdeConfig(pca_components=k, trim_fraction=self.trim_fraction)


@dataclasses.dataclass
class RdeScorer:
    center: np.ndarray
    components: np.ndarray  # (k, d) projection rows
    stats: GaussianStats  # fitted in the reduced, trimmed space
    cfg: RdeConfig

    def project(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        _check_dim(x, self.center.shape[0])
        return (x - self.center) @ self.components.T

    def scores(self, features) -> np.ndarray:
        return md_scores(self.stats, self.project(features))


def rde_fit(bundle, cfg: RdeConfig | None = None, ridge: float = DEFAULT_RIDGE) -> RdeScorer:
    """PCA-project, trim the largest per-class distances, refit, score.

    A deterministic stand-in for robust covariance estimation: points whose
    initial own-class Mahalanobis distance falls in the top trim_fraction of
    their class are discarded before the final fit, so gross outliers cannot
    inflate the covariance.
    """
    x = bundle.features.astype(np.float64)
    y = np.asarray(bundle.gold_labels, dtype=np.int64)
    n, d = x.shape
    cfg = (cfg or RdeConfig()).resolve(d)
    if n < 2 * cfg.pca_components:
        raise ValidationError(f"need n >= 2*pca_components, got n={n}, k={cfg.pca_components}")

    center = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - center, full_matrices=False)
    components = vt[: cfg.pca_components]
    # Deterministic sign convention: largest-magnitude entry positive.
    flips = np.sign(components[np.arange(len(components)), np.argmax(np.abs(components), axis=1)])
    components = components * flips[:, None]

    z = (x - center) @ components.T
    initial = fit_stats_arrays(z, y, bundle.c, ridge)
    keep = np.ones(n, dtype=bool)
    for cls in range(bundle.c):
        idx = np.flatnonzero(y == cls)
        dist = _quad_form(z[idx], initial.class_means[cls], initial.precision)
        n_drop = int(np.floor(cfg.trim_fraction * idx.size))
        if n_drop > 0:
            # Tie-stable: argsort is mergesort so equal distances drop by index.
            drop = idx[np.argsort(dist, kind="mergesort")[idx.size - n_drop:]]
            keep[drop] = False
        if idx.size - n_drop < 1:
            raise DegenerateDataError(f"class {cls} emptied by trimming")
    trimmed = fit_stats_arrays(z[keep], y[keep], bundle.c, ridge, min_per_class=1)
    return RdeScorer(center=center, components=components, stats=trimmed, cfg=cfg)


# ---------------------------------------------------------------------------
# Probes
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class ProbeHead:
    """Single-output error probe: sigmoid(w . h + b), optionally with
    attention pooling over a token sequence via query q."""

    weight: np.ndarray
    bias: float
    query: np.ndarray | None = None
    depth_tag: str = "last"

    @property
    def kind(self) -> str:
        return "attention_pooling" if self.query is not None else "linear"


def _sigmoid(s):
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    ez = np.exp(s[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_from_logits(s, e):
    """mean(softplus(s) - e*s), the numerically stable BCE-with-logits."""
    return float((np.maximum(s, 0.0) - e * s + np.log1p(np.exp(-np.abs(s)))).mean())


def _check_binary(e):
    e = np.asarray(e, dtype=np.float64)
    total = e.sum()
    if total == 0 or total == e.size:
        raise DegenerateDataError("error labels are single-class; probe target untrainable")
    return e


def fit_linear_probe(features, errors, cfg, init_std: float = 0.0,
                     depth_tag: str = "last") -> ProbeHead:
    """Train sigmoid(w.h + b) against error indicators with BCE.

    Same optimizer contract as the entropy-head trainer: AdamW, seeded
    shuffle per epoch, fixed epoch count. Zero init by default; init_std>0
    draws a scaled Gaussian start instead.
    """
    cfg.validate()
    x = np.asarray(features, dtype=np.float64)
    e = _check_binary(errors)
    n, d = x.shape
    if e.shape != (n,):
        raise ValidationError(f"errors shape {e.shape} does not match {n} feature rows")
    rng = np.random.default_rng(cfg.seed)
    if init_std > 0:
        w = init_std * rng.standard_normal(d)
        b = np.array([init_std * rng.standard_normal()])
    else:
        w = np.zeros(d)
        b = np.zeros(1)
    opt = AdamW([w, b], lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps,
                weight_decay=cfg.weight_decay)
    history = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            s = x[idx] @ w + b[0]
            p = _sigmoid(s)
            ds = (p - e[idx]) / idx.size
            epoch_loss += _bce_from_logits(s, e[idx]) * idx.size
            opt.step([x[idx].T @ ds, np.array([ds.sum()])])
        history.append(epoch_loss / n)
    probe = ProbeHead(weight=w, bias=float(b[0]), depth_tag=depth_tag)
    probe.history = history
    return probe


def probe_scores(probe: ProbeHead, features) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    _check_dim(x, probe.weight.shape[0])
    return _sigmoid(x @ probe.weight + probe.bias)


def _attention_pool(seq, q, w):
    """Returns (pooled, alphas, a) for one sequence; a = per-token w.h."""
    u = seq @ q
    u = u - u.max()
    alphas = np.exp(u)
    alphas /= alphas.sum()
    pooled = alphas @ seq
    return pooled, alphas, seq @ w


def attention_batch_grads(seqs, e, w, b, q):
    """Mean BCE over the sequences plus gradients for (w, b, q).

    The pooled representation is h_bar = sum_j alpha_j h_j with
    alpha = softmax(q.h_j); the chain rule through the softmax gives
    dL/dq = ds * sum_j alpha_j (a_j - a_bar) h_j where a_j = w.h_j.
    """
    dw = np.zeros_like(w)
    db = 0.0
    dq = np.zeros_like(q)
    loss = 0.0
    m = len(seqs)
    for seq, err in zip(seqs, e):
        pooled, alphas, a = _attention_pool(seq, q, w)
        s = w @ pooled + b
        p = 1.0 / (1.0 + np.exp(-s)) if s >= 0 else np.exp(s) / (1.0 + np.exp(s))
        ds = (p - err) / m
        loss += _bce_from_logits(np.array([s]), np.array([err])) / m
        dw += ds * pooled
        db += ds
        dq += ds * ((alphas * a) @ seq - (alphas @ a) * pooled)
    return loss, dw, db, dq


def fit_attention_probe(seq_bundle, errors, cfg, depth_tag: str = "last") -> ProbeHead:
    """Attention-pooling probe: softmax(q.h_j) weights pool the sequence,
    then sigmoid(w.pooled + b); w, b and q are all trained."""
    cfg.validate()
    e = _check_binary(errors)
    n, d = seq_bundle.n, seq_bundle.d
    if e.shape != (n,):
        raise ValidationError(f"errors shape {e.shape} does not match {n} sequences")
    if (seq_bundle.lengths.astype(np.int64) < 1).any():
        raise ValidationError("empty sequence in bundle")
    seqs = [seq_bundle.sequence(i).astype(np.float64) for i in range(n)]
    rng = np.random.default_rng(cfg.seed)
    w = np.zeros(d)
    b = np.zeros(1)
    q = np.zeros(d)
    opt = AdamW([w, b, q], lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps,
                weight_decay=cfg.weight_decay)
    history = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, dw, db, dq = attention_batch_grads(
                [seqs[i] for i in idx], e[idx], w, b[0], q
            )
            epoch_loss += loss * idx.size
            opt.step([dw, np.array([db]), dq])
        history.append(epoch_loss / n)
    probe = ProbeHead(weight=w, bias=float(b[0]), query=q, depth_tag=depth_tag)
    probe.history = history
    return probe


def attention_probe_scores(probe: ProbeHead, seq_bundle) -> np.ndarray:
    if probe.query is None:
        raise ValidationError("probe has no query vector; not an attention probe")
    out = np.empty(seq_bundle.n)
    for i in range(seq_bundle.n):
        seq = seq_bundle.sequence(i).astype(np.float64)
        pooled, _, _ = _attention_pool(seq, probe.query, probe.weight)
        s = probe.weight @ pooled + probe.bias
        out[i] = 1.0 / (1.0 + np.exp(-s)) if s >= 0 else np.exp(s) / (1.0 + np.exp(s))
    return out


def attention_weights(probe: ProbeHead, seq) -> np.ndarray:
    """Attention distribution over one sequence's positions (sums to 1)."""
    _, alphas, _ = _attention_pool(np.asarray(seq, dtype=np.float64), probe.query, probe.weight)
    return alphas


# ---------------------------------------------------------------------------
# Serialization (manifest + f32 arrays, same conventions as bundles)
# ---------------------------------------------------------------------------


def save_probe(probe: ProbeHead, path, meta: dict | None = None) -> None:
    from . import bundle as bio

    os.makedirs(path, exist_ok=True)
    manifest = {
        "kind": probe.kind,
        "depth_tag": probe.depth_tag,
        "d": int(probe.weight.shape[0]),
        **(meta or {}),
    }
    with open(os.path.join(path, "probe_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    bio.write_f32(os.path.join(path, "weight.bin"), probe.weight)
    bio.write_f32(os.path.join(path, "bias.bin"), np.array([probe.bias]))
    if probe.query is not None:
        bio.write_f32(os.path.join(path, "query.bin"), probe.query)


def load_probe(path) -> ProbeHead:
    from . import bundle as bio

    with open(os.path.join(path, "probe_manifest.json")) as fh:
        manifest = json.load(fh)
    d = int(manifest["d"])
    weight = bio.read_f32(os.path.join(path, "weight.bin"), (d,), "weight").astype(np.float64)
    bias = float(bio.read_f32(os.path.join(path, "bias.bin"), (1,), "bias")[0])
    query = None
    if manifest["kind"] == "attention_pooling":
        query = bio.read_f32(os.path.join(path, "query.bin"), (d,), "query").astype(np.float64)
    return ProbeHead(weight=weight, bias=bias, query=query, depth_tag=manifest["depth_tag"])


def save_gaussian_stats(stats: GaussianStats, path, meta: dict | None = None) -> None:
    from . import bundle as bio

    os.makedirs(path, exist_ok=True)
    c, d = stats.class_means.shape
    manifest = {"c": c, "d": d, "ridge": stats.ridge, **(meta or {})}
    with open(os.path.join(path, "stats_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, arr in (
        ("class_means", stats.class_means),
        ("covariance", stats.covariance),
        ("precision", stats.precision),
        ("background_mean", stats.background_mean),
        ("background_covariance", stats.background_covariance),
        ("background_precision", stats.background_precision),
    ):
        bio.write_f32(os.path.join(path, f"{name}.bin"), arr)


def load_gaussian_stats(path) -> GaussianStats:
    from . import bundle as bio

    with open(os.path.join(path, "stats_manifest.json")) as fh:
        manifest = json.load(fh)
    c, d = int(manifest["c"]), int(manifest["d"])

    def arr(name, shape):
        return bio.read_f32(os.path.join(path, f"{name}.bin"), shape, name).astype(np.float64)

    return GaussianStats(
        class_means=arr("class_means", (c, d)),
        covariance=arr("covariance", (d, d)),
        precision=arr("precision", (d, d)),
        background_mean=arr("background_mean", (d,)),
        background_covariance=arr("background_covariance", (d, d)),
        background_precision=arr("background_precision", (d, d)),
        ridge=float(manifest["ridge"]),
    )
