"""Pure numpy implementation of the hot kernels.

This module mirrors the compiled ``simdistill._core`` extension one to one.
Every function takes and returns C-contiguous float64 arrays; selection
between the two implementations happens once, in :mod:`simdistill.backend`.
"""

import numpy as np

NAME = "python"


def matmul(a, b):
    return a @ b


def affine_fwd(x, w, b):
    out = x @ w
    out += b
    return out


def relu_fwd(x):
    return np.maximum(x, 0.0)


def relu_bwd(x, gout):
    return np.where(x > 0.0, gout, 0.0)


def rownorm_fwd(x, eps):
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    denom = np.maximum(norms, eps)
    return x / denom[:, None], norms


def rownorm_bwd(y, norms, eps, gout):
    # Rows with norm >= eps were divided by their own norm; the Jacobian of
    # x/||x|| contributes the projection term. Shorter rows used the constant
    # eps, so their backward is a plain rescale.
    dots = np.einsum("ij,ij->i", gout, y)
    gx = np.empty_like(gout)
    big = norms >= eps
    denom = np.where(big, norms, 1.0)
    gx[big] = (gout[big] - dots[big, None] * y[big]) / denom[big, None]
    gx[~big] = gout[~big] / eps
    return gx


def gram_fwd(x):
    g = x @ x.T
    # dgemm does not guarantee bit-level symmetry; averaging with the
    # transpose does (float addition is commutative).
    return (g + g.T) * 0.5


def gram_bwd(x, gout):
    return (gout + gout.T) @ x


def pdist2_fwd(a, b):
    aa = np.einsum("ij,ij->i", a, a)
    bb = np.einsum("ij,ij->i", b, b)
    d = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    np.maximum(d, 0.0, out=d)
    return d


def pdist2_bwd(a, b, gout):
    row = gout.sum(axis=1)
    col = gout.sum(axis=0)
    ga = 2.0 * (a * row[:, None] - gout @ b)
    gb = 2.0 * (b * col[:, None] - gout.T @ a)
    return ga, gb


def softmax_ce_fwd(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    total = expz.sum(axis=1, keepdims=True)
    probs = expz / total
    n = logits.shape[0]
    logp = shifted[np.arange(n), labels] - np.log(total[:, 0])
    return -float(logp.mean()), probs


def softmax_ce_bwd(probs, labels, gout):
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    g *= gout / n
    return g


def frobdiff_fwd(a, b):
    diff = a - b
    return float(np.sqrt(np.einsum("ij,ij->", diff, diff)))


def row_extremum_fwd(x, mask, use_max):
    """Per-row max (or min) over mask-allowed entries.

    ``mask`` is uint8. Returns (values as an (N,1) array, argext indices as
    int64, -1 for rows with an empty mask). Ties resolve to the lowest
    column index.
    """
    mask = mask.astype(bool)
    sentinel = -np.inf if use_max else np.inf
    masked = np.where(mask, x, sentinel)
    idx = masked.argmax(axis=1) if use_max else masked.argmin(axis=1)
    has_any = mask.any(axis=1)
    vals = np.where(has_any, masked[np.arange(x.shape[0]), idx], 0.0)
    idx = np.where(has_any, idx, -1)
    return vals[:, None].copy(), idx.astype(np.int64)
