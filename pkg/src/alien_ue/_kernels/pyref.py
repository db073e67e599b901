"""Pure-numpy reference kernels for the rowwise probability math.

These are the fallback implementations behind ``alien_ue._kernels``; the
compiled extension (``_native``) implements the same functions with fused C
loops. Both operate on float64 C-contiguous arrays and share the clamping
constants below, so they agree to floating-point roundoff.
"""

import numpy as np

# Probabilities are clamped before any log so a hard zero never produces -inf.
# 1e-12 perturbs normalized entropy far below reporting precision.
LOG_EPS = 1e-12
# Clamp for the BCE score, matching the usual framework default.
BCE_EPS = 1e-7

BACKEND_NAME = "python"


def softmax_rows(z):
    """Rowwise softmax of an (n, c) logit matrix, max-shifted for stability."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    ez = np.exp(shifted)
    return ez / ez.sum(axis=1, keepdims=True)


def entropy_rows(p):
    """Normalized entropy -(1/log c) * sum p log p of each probability row."""
    p = np.ascontiguousarray(p, dtype=np.float64)
    c = p.shape[1]
    logp = np.log(np.clip(p, LOG_EPS, 1.0))
    return -(p * logp).sum(axis=1) / np.log(c)


def entropy_grad_rows(p):
    """Gradient of rowwise normalized entropy w.r.t. the logits.

    With u = -(1/log c) sum_k p_k log p_k and p = softmax(z),
    du/dz_j = -p_j (log p_j + H) / log c where H = -sum_k p_k log p_k.
    """
    p = np.ascontiguousarray(p, dtype=np.float64)
    c = p.shape[1]
    logp = np.log(np.clip(p, LOG_EPS, 1.0))
    h = -(p * logp).sum(axis=1, keepdims=True)
    return -p * (logp + h) / np.log(c)


def alien_backward_rows(p, err, u_base, alpha):
    """Fused forward/backward for the error-BCE + consistency objective.

    Args:
        p: (n, c) softmax probabilities of the trainable head.
        err: (n,) float64 0/1 error indicators.
        u_base: (n,) frozen base-model normalized entropies.
        alpha: weight of the consistency term.

    Returns:
        (u, bce, reg, dz) where u is the (n,) normalized-entropy score,
        bce and reg are the mean loss terms, and dz is the (n, c) gradient
        of ``bce + alpha * reg`` w.r.t. the logits.
    """
    p = np.ascontiguousarray(p, dtype=np.float64)
    err = np.ascontiguousarray(err, dtype=np.float64)
    u_base = np.ascontiguousarray(u_base, dtype=np.float64)
    n, c = p.shape
    logc = np.log(c)

    logp = np.log(np.clip(p, LOG_EPS, 1.0))
    h = -(p * logp).sum(axis=1)
    u = h / logc

    u_cl = np.clip(u, BCE_EPS, 1.0 - BCE_EPS)
    bce = -(err * np.log(u_cl) + (1.0 - err) * np.log1p(-u_cl)).mean()
    diff = u - u_base
    reg = (diff * diff).mean()

    # dL/du: the clamp is flat outside (BCE_EPS, 1-BCE_EPS).
    inside = (u > BCE_EPS) & (u < 1.0 - BCE_EPS)
    dbce = np.where(inside, -(err / u_cl) + (1.0 - err) / (1.0 - u_cl), 0.0)
    du = (dbce + alpha * 2.0 * diff) / n

    dz = du[:, None] * (-p * (logp + h[:, None]) / logc)
    return u, float(bce), float(reg), dz
