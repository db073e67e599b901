"""Full-batch multinomial logistic regression.

Used to fit the synthetic generator's base classifier and the seed-varied
ensemble member heads. Deterministic: fixed iteration budget, fixed
learning rate, early stop on gradient norm only.
"""

import numpy as np

from . import _kernels
from .errors import ValidationError


def fit_multinomial_logistic(
    features,
    labels,
    n_classes: int,
    lr: float = 0.5,
    max_iters: int = 500,
    grad_tol: float = 1e-6,
    init_weight=None,
    init_bias=None,
):
    """Gradient descent on mean cross-entropy; returns (weight, bias).

    weight is (c, d), bias is (c,); zero-initialized unless overridden.
    Stops early once the combined gradient 2-norm drops below ``grad_tol``.
    """
    x = np.ascontiguousarray(features, dtype=np.float64)
    y = np.asarray(labels)
    n, d = x.shape
    if y.shape != (n,):
        raise ValidationError(f"labels shape {y.shape} does not match {n} feature rows")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValidationError("labels out of range for the given class count")

    w = np.zeros((n_classes, d)) if init_weight is None else np.array(init_weight, dtype=np.float64)
    b = np.zeros(n_classes) if init_bias is None else np.array(init_bias, dtype=np.float64)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0

    for _ in range(max_iters):
        p = _kernels.softmax_rows(x @ w.T + b)
        resid = (p - onehot) / n
        gw = resid.T @ x
        gb = resid.sum(axis=0)
        gnorm = np.sqrt((gw * gw).sum() + (gb * gb).sum())
        if gnorm < grad_tol:
            break
        w -= lr * gw
        b -= lr * gb
    return w, b
