"""The trainable entropy head and its three-term objective.

The head starts as an exact copy of the task classifier, so its initial
normalized-entropy scores equal the base model's. Training then aligns the
score with observed errors (BCE) while two regularizers anchor it: a
consistency term pulling the score toward the frozen base entropy, and an
L2-SP term pulling the weights toward their initialization. The base
entropy target and the error labels are computed once from the bundle's
frozen head/logits and never from the trainable head.
"""

import concurrent.futures
import dataclasses
import itertools
import json
import os

import numpy as np

from . import _kernels
from .baselines import ProbeHead, fit_linear_probe, probe_scores
from .env import worker_count
from .errors import DegenerateDataError, MissingArtifactError, ValidationError
from .metrics import roc_auc
from .optim import AdamW

VARIANTS = (
    "full_alien",
    "bce_only",
    "bce_plus_l2sp",
    "bce_plus_reg",
    "rand_cls_bce",
    "rand_linear_bce",
)

ALPHA_GRID = (0.01, 0.1, 1.0)
BETA_GRID = (0.01, 0.1, 1.0)
LR_GRID = (4e-4, 1e-4, 1e-5)

RAND_INIT_STD = 0.02


@dataclasses.dataclass
class TrainConfig:
    learning_rate: float = 4e-4
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def validate(self) -> "TrainConfig":
        if not 0.0 < self.learning_rate < 1.0:
            raise ValidationError(f"learning_rate must be in (0, 1), got {self.learning_rate}")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        return self


@dataclasses.dataclass
class AlienHead:
    """Trainable head weights plus the frozen initialization snapshot."""

    weight: np.ndarray
    bias: np.ndarray
    init_weight: np.ndarray
    init_bias: np.ndarray
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        self.init_weight = np.array(self.init_weight, dtype=np.float64)
        self.init_bias = np.array(self.init_bias, dtype=np.float64)
        self.init_weight.setflags(write=False)
        self.init_bias.setflags(write=False)
        if self.weight.shape != self.init_weight.shape or self.bias.shape != self.init_bias.shape:
            raise ValidationError("trainable and init shapes disagree")
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("loss coefficients must be >= 0")

    @property
    def c(self) -> int:
        return self.weight.shape[0]

    @property
    def d(self) -> int:
        return self.weight.shape[1]

    def logits(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ValidationError(f"features shape {x.shape} does not match head d={self.d}")
        return x @ self.weight.T + self.bias


def init_alien(bundle, alpha: float = 0.0, beta: float = 0.0) -> AlienHead:
    """Copy the bundle's classifier head into a trainable entropy head."""
    if bundle.head_weight is None or bundle.head_bias is None:
        raise ValidationError("bundle carries no classifier head")
    if not getattr(bundle, "head_input", True):
        raise ValidationError(
            "bundle features are not the head's input (head_input=false); "
            "an entropy head cannot be initialized from it"
        )
    w = bundle.head_weight.astype(np.float64)
    b = bundle.head_bias.astype(np.float64)
    return AlienHead(weight=w.copy(), bias=b.copy(), init_weight=w, init_bias=b,
                     alpha=alpha, beta=beta)


def score_alien(head: AlienHead, features) -> np.ndarray:
    """Normalized entropy of the head's softmax distribution, per row."""
    z = head.logits(features)
    return _kernels.entropy_rows(_kernels.softmax_rows(z))


def _check_training_inputs(head, features, errors, base_entropy):
    x = np.asarray(features, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    u0 = np.asarray(base_entropy, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.d:
        raise ValidationError(f"features shape {x.shape} does not match head d={head.d}")
    if e.shape != (x.shape[0],):
        raise ValidationError(f"errors length {e.shape} does not match {x.shape[0]} rows")
    if u0.shape != (x.shape[0],):
        raise ValidationError(f"base_entropy length {u0.shape} does not match {x.shape[0]} rows")
    return x, e, u0


def _l2sp(head: AlienHead) -> float:
    dw = head.weight - head.init_weight
    db = head.bias - head.init_bias
    return float((dw * dw).sum() + (db * db).sum())


def alien_loss(head: AlienHead, features, errors, base_entropy):
    """Returns (total, bce, reg, l2sp); total = bce + alpha*reg + beta*l2sp."""
    x, e, u0 = _check_training_inputs(head, features, errors, base_entropy)
    p = _kernels.softmax_rows(head.logits(x))
    _, bce, reg, _ = _kernels.alien_backward_rows(p, e, u0, head.alpha)
    l2 = _l2sp(head)
    return bce + head.alpha * reg + head.beta * l2, bce, reg, l2


def alien_grad(head: AlienHead, features, errors, base_entropy):
    """Analytic gradient of the total loss w.r.t. (weight, bias)."""
    x, e, u0 = _check_training_inputs(head, features, errors, base_entropy)
    p = _kernels.softmax_rows(head.logits(x))
    _, _, _, dz = _kernels.alien_backward_rows(p, e, u0, head.alpha)
    dw = dz.T @ x + 2.0 * head.beta * (head.weight - head.init_weight)
    db = dz.sum(axis=0) + 2.0 * head.beta * (head.bias - head.init_bias)
    return dw, db


def _effective_coeffs(variant: str, alpha: float, beta: float):
    if variant in ("bce_only", "rand_cls_bce", "rand_linear_bce"):
        return 0.0, 0.0
    if variant == "bce_plus_l2sp":
        return 0.0, beta
    if variant == "bce_plus_reg":
        return alpha, 0.0
    return alpha, beta


def fit_alien(bundle_train, variant: str = "full_alien", cfg: TrainConfig | None = None,
              alpha: float = 0.1, beta: float = 0.1):
    """Train an uncertainty head on one bundle's error labels.

    Returns an AlienHead for the entropy-mapped variants, or a ProbeHead for
    rand_linear_bce (single sigmoid output). Deterministic given cfg.seed.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    cfg = (cfg or TrainConfig()).validate()
    e = bundle_train.error_labels()
    n_err = int(e.sum())
    if n_err == 0 or n_err == e.size:
        raise DegenerateDataError(
            f"error labels are single-class ({n_err}/{e.size} errors); target untrainable"
        )
    x = bundle_train.features.astype(np.float64)

    if variant == "rand_linear_bce":
        return fit_linear_probe(x, e, cfg, init_std=RAND_INIT_STD)

    u_base = bundle_train.base_entropy()
    rng = np.random.default_rng(cfg.seed)
    a_eff, b_eff = _effective_coeffs(variant, alpha, beta)
    if variant == "rand_cls_bce":
        w0 = RAND_INIT_STD * rng.standard_normal((bundle_train.c, bundle_train.d))
        b0 = RAND_INIT_STD * rng.standard_normal(bundle_train.c)
        head = AlienHead(weight=w0.copy(), bias=b0.copy(), init_weight=w0, init_bias=b0,
                         alpha=a_eff, beta=b_eff)
    else:
        head = init_alien(bundle_train, alpha=a_eff, beta=b_eff)

    opt = AdamW([head.weight, head.bias], lr=cfg.learning_rate, betas=cfg.betas,
                eps=cfg.eps, weight_decay=cfg.weight_decay)
    n = x.shape[0]
    history = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb = x[idx]
            p = _kernels.softmax_rows(xb @ head.weight.T + head.bias)
            _, bce, reg, dz = _kernels.alien_backward_rows(p, e[idx], u_base[idx], a_eff)
            dw = dz.T @ xb + 2.0 * b_eff * (head.weight - head.init_weight)
            db = dz.sum(axis=0) + 2.0 * b_eff * (head.bias - head.init_bias)
            l2 = _l2sp(head)
            history.append((bce + a_eff * reg + b_eff * l2, bce, reg, l2))
            opt.step([dw, db])
    head.history = history
    return head


def head_scores(fitted, bundle) -> np.ndarray:
    """Uncertainty scores of a fitted head (AlienHead or linear ProbeHead)."""
    if isinstance(fitted, AlienHead):
        return score_alien(fitted, bundle.features.astype(np.float64))
    if isinstance(fitted, ProbeHead):
        return probe_scores(fitted, bundle.features.astype(np.float64))
    raise ValidationError(f"unsupported head type {type(fitted).__name__}")


# ---------------------------------------------------------------------------
# Hyperparameter grid search
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class GridResult:
    alpha: float
    beta: float
    learning_rate: float
    val_roc_auc: float
    head: AlienHead
    table: list  # one record per grid point, in grid order


def _grid_point(args):
    bundle_train, bundle_val, cfg, alpha, beta, lr = args
    point_cfg = dataclasses.replace(cfg, learning_rate=lr)
    head = fit_alien(bundle_train, "full_alien", point_cfg, alpha=alpha, beta=beta)
    vars(head).pop("history", None)  # keep worker results small
    scores = score_alien(head, bundle_val.features.astype(np.float64))
    auc = roc_auc(scores, bundle_val.error_labels())
    return {"alpha": alpha, "beta": beta, "learning_rate": lr, "val_roc_auc": auc}, head


def grid_search(bundle_train, bundle_val, cfg: TrainConfig | None = None,
                alphas=ALPHA_GRID, betas=BETA_GRID, learning_rates=LR_GRID) -> GridResult:
    """Train every (alpha, beta, lr) point; select by validation ROC-AUC.

    Ties break toward maximal anchoring: larger beta, then larger alpha,
    then smaller learning rate. Grid points may run in parallel workers
    (ALIEN_UE_THREADS); selection is over the full deterministic table, so
    serial and parallel runs agree bit-for-bit.
    """
    if bundle_train.d != bundle_val.d or bundle_train.c != bundle_val.c:
        raise ValidationError("train and val bundles disagree on d or c")
    cfg = (cfg or TrainConfig()).validate()
    points = [
        (bundle_train, bundle_val, cfg, alpha, beta, lr)
        for alpha, beta, lr in itertools.product(alphas, betas, learning_rates)
    ]
    workers = worker_count()
    if workers > 1 and len(points) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_grid_point, points))
    else:
        results = [_grid_point(p) for p in points]

    best = max(
        range(len(results)),
        key=lambda i: (
            results[i][0]["val_roc_auc"],
            results[i][0]["beta"],
            results[i][0]["alpha"],
            -results[i][0]["learning_rate"],
        ),
    )
    rec, head = results[best]
    return GridResult(
        alpha=rec["alpha"],
        beta=rec["beta"],
        learning_rate=rec["learning_rate"],
        val_roc_auc=rec["val_roc_auc"],
        head=head,
        table=[r for r, _ in results],
    )


# ---------------------------------------------------------------------------
# Serialization (manifest + f32 arrays, same conventions as bundles)
# ---------------------------------------------------------------------------


def save_alien_head(head: AlienHead, path, meta: dict | None = None) -> None:
    from . import bundle as bio

    os.makedirs(path, exist_ok=True)
    manifest = {
        "variant": "full_alien",
        "alpha": head.alpha,
        "beta": head.beta,
        "c": head.c,
        "d": head.d,
        **(meta or {}),
    }
    with open(os.path.join(path, "alien_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    bio.write_f32(os.path.join(path, "weight.bin"), head.weight)
    bio.write_f32(os.path.join(path, "bias.bin"), head.bias)
    bio.write_f32(os.path.join(path, "init_weight.bin"), head.init_weight)
    bio.write_f32(os.path.join(path, "init_bias.bin"), head.init_bias)


def load_alien_head(path) -> AlienHead:
    from . import bundle as bio

    manifest_path = os.path.join(path, "alien_manifest.json")
    if not os.path.isfile(manifest_path):
        raise MissingArtifactError(f"no alien_manifest.json under {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    c, d = int(manifest["c"]), int(manifest["d"])

    def arr(name, shape):
        return bio.read_f32(os.path.join(path, f"{name}.bin"), shape, name).astype(np.float64)

    return AlienHead(
        weight=arr("weight", (c, d)),
        bias=arr("bias", (c,)),
        init_weight=arr("init_weight", (c, d)),
        init_bias=arr("init_bias", (c,)),
        alpha=float(manifest.get("alpha", 0.0)),
        beta=float(manifest.get("beta", 0.0)),
    )
