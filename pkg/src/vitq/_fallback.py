"""Pure-numpy versions of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature.
``vitq.kernels`` picks one of the two at import time.
"""
import numpy as np


def quantize(y, delta, bits):
    """Round-half-away-from-zero onto the signed ``bits``-bit grid."""
    v = np.asarray(y, dtype=np.float64) / delta
    a = np.abs(v)
    r = np.floor(a)
    r += (a - r) >= 0.5
    r = np.copysign(r, v)
    lo = -(2 ** (bits - 1))
    hi = 2 ** (bits - 1) - 1
    return np.clip(r, lo, hi).astype(np.int32)


def quant_dequant(y, delta, bits):
    q = quantize(y, delta, bits)
    return (q.astype(np.float64) * delta).astype(np.float32)


def pearson_rows(o, oh):
    """Pearson correlation of each row of ``o`` with the same row of ``oh``.

    Rows where either side has zero variance get 0.
    """
    o = np.asarray(o, dtype=np.float64)
    oh = np.asarray(oh, dtype=np.float64)
    oc = o - o.mean(axis=1, keepdims=True)
    hc = oh - oh.mean(axis=1, keepdims=True)
    num = np.einsum("ij,ij->i", oc, hc)
    den = np.sqrt(np.einsum("ij,ij->i", oc, oc)) * np.sqrt(np.einsum("ij,ij->i", hc, hc))
    out = np.zeros(o.shape[0])
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return np.clip(out, -1.0, 1.0)


def ranking_loss_rows(a, ah, theta, pi=None, pj=None):
    """Hinge ranking loss summed per batch entry.

    ``a`` and ``ah`` have shape (B, R, W); each of the R rows contributes
    the pairs (pi[t], pj[t]), or every pair i < j when ``pi`` is None.
    Returns an array of B sums.
    """
    a = np.asarray(a, dtype=np.float64)
    if pi is None:
        pi, pj = np.triu_indices(a.shape[-1], k=1)
    ah = np.asarray(ah, dtype=np.float64)
    s = np.sign(a[..., pi] - a[..., pj])
    p = (ah[..., pi] - ah[..., pj]) * s
    h = np.maximum(theta - p, 0.0)
    h[s == 0] = 0.0
    return h.reshape(a.shape[0], -1).sum(axis=1)


def pair_signs(a, pi=None, pj=None):
    a = np.asarray(a, dtype=np.float64)
    if pi is None:
        pi, pj = np.triu_indices(a.shape[-1], k=1)
    return np.sign(a[..., pi] - a[..., pj]).astype(np.int8)


def ranking_loss_signed(signs, ah, theta, pi=None, pj=None):
    ah = np.asarray(ah, dtype=np.float64)
    signs = np.asarray(signs, dtype=np.float64)
    if pi is None:
        pi, pj = np.triu_indices(ah.shape[-1], k=1)
    h = np.maximum(theta - (ah[..., pi] - ah[..., pj]) * signs, 0.0) * (signs * signs)
    return h.reshape(ah.shape[0], -1).sum(axis=1)


def inversion_count_rows(a, ah, pi=None, pj=None):
    """Number of pairs whose strict order under ``a`` is reversed under ``ah``."""
    a = np.asarray(a, dtype=np.float64)
    if pi is None:
        pi, pj = np.triu_indices(a.shape[-1], k=1)
    ah = np.asarray(ah, dtype=np.float64)
    s = np.sign(a[..., pi] - a[..., pj]) * np.sign(ah[..., pi] - ah[..., pj])
    return int(np.count_nonzero(s < 0))


def singular_values(m, tol=1e-10, max_sweeps=100):
    """Singular values by one-sided (Hestenes) Jacobi orthogonalization."""
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("singular_values expects a 2-D matrix")
    if a.shape[1] > a.shape[0]:
        a = a.T.copy()
    n = a.shape[1]
    if n == 0:
        return np.zeros(0)
    # columns are rotated in place; work on the transpose for contiguous rows
    cols = np.ascontiguousarray(a.T)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                cp = cols[p]
                cq = cols[q]
                alpha = cp @ cp
                beta = cq @ cq
                gamma = cp @ cq
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * cp - s * cq
                cols[q] = s * cp + c * cq
                cols[p] = new_p
        if not rotated:
            break
    sv = np.sqrt(np.einsum("ij,ij->i", cols, cols))
    return np.sort(sv)[::-1]
