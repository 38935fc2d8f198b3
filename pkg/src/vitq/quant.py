"""Uniform symmetric quantizer and the similarity / ranking measures."""
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor_core import ShapeError

log = logging.getLogger(__name__)

MIN_BITS = 2
MAX_BITS = 16
# rows longer than this are scored on a fixed random subset of pairs
EXACT_PAIR_LIMIT = 64
SAMPLED_PAIRS = 2048
PAIR_SEED = 0


class QuantizationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantParams:
    """Step size ``delta`` and bit-width ``bits`` of one quantization site."""

    delta: float
    bits: int

    def __post_init__(self):
        delta = float(self.delta)
        if not math.isfinite(delta) or delta <= 0:
            raise QuantizationError(f"delta must be positive and finite, got {self.delta}")
        if int(self.bits) != self.bits or not MIN_BITS <= self.bits <= MAX_BITS:
            raise QuantizationError(f"bits must be an integer in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "bits", int(self.bits))

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    def to_json(self):
        return {"delta": self.delta, "bits": self.bits}

    @classmethod
    def from_json(cls, d):
        return cls(float(d["delta"]), int(d["bits"]))


def _check_delta(delta):
    if not delta > 0:
        raise QuantizationError(f"quantization interval must be positive, got {delta}")


def quantize(y, p: QuantParams):
    """Integer grid codes ``clip(round(y / delta), -2^(b-1), 2^(b-1)-1)``.

    Rounding is half away from zero.
    """
    _check_delta(p.delta)
    return kernels.quantize(y, p.delta, p.bits)


def quant_dequant(y, p: QuantParams):
    """Quantize and scale back to reals (fake quantization)."""
    _check_delta(p.delta)
    return kernels.quant_dequant(y, p.delta, p.bits)


def max_init_delta(y, bits):
    """``max|y| / (2^(b-1)-1)``; falls back to 1.0 for an all-zero tensor."""
    m = float(np.max(np.abs(y))) if np.size(y) else 0.0
    if m == 0.0:
        return 1.0
    return m / (2 ** (bits - 1) - 1)


def pearson(o, oh):
    """Pearson correlation of two same-shape tensors, flattened.

    Returns 0 when either side is constant.
    """
    o = np.asarray(o)
    oh = np.asarray(oh)
    if o.shape != oh.shape:
        raise ShapeError(f"pearson: shapes differ {o.shape} vs {oh.shape}")
    if o.size < 2:
        raise ShapeError("pearson needs at least two elements")
    r = float(kernels.pearson_rows(o.reshape(1, -1), oh.reshape(1, -1))[0])
    if r == 0.0 and (np.ptp(o) == 0 or np.ptp(oh) == 0):
        log.warning("pearson: zero-variance operand, similarity set to 0")
    return r


def pearson_batch(o, oh):
    """Per-sample Pearson for arrays whose first axis indexes samples."""
    o = np.asarray(o)
    oh = np.asarray(oh)
    if o.shape != oh.shape:
        raise ShapeError(f"pearson: shapes differ {o.shape} vs {oh.shape}")
    n = o.shape[0]
    return kernels.pearson_rows(o.reshape(n, -1), oh.reshape(n, -1))


def exact_pairs(w):
    return w <= EXACT_PAIR_LIMIT or w * (w - 1) // 2 <= SAMPLED_PAIRS


def _pairs_arg(w, seed=PAIR_SEED):
    """``(None, None)`` selects the kernels' all-pairs loop."""
    return (None, None) if exact_pairs(w) else pair_indices(w, seed)


def pair_indices(w, rng_seed=PAIR_SEED):
    """Index arrays (i, j), i < j, for rows of length ``w``.

    Exact for ``w <= EXACT_PAIR_LIMIT``, otherwise a fixed-seed uniform
    sample of ``SAMPLED_PAIRS`` distinct pairs.
    """
    iu, ju = np.triu_indices(w, k=1)
    if exact_pairs(w):
        return iu.astype(np.intp), ju.astype(np.intp)
    rng = np.random.default_rng(rng_seed)
    pick = np.sort(rng.choice(iu.size, size=SAMPLED_PAIRS, replace=False))
    return iu[pick].astype(np.intp), ju[pick].astype(np.intp)


def ranking_loss(a, ah, theta):
    """Pairwise hinge ranking loss of ``ah`` against the order of ``a``.

    Sums ``max(theta - (ah_i - ah_j) * sign(a_i - a_j), 0)`` over every row
    and every column pair i < j. Pairs tied in ``a`` contribute nothing.
    Leading axes are treated as more rows.
    """
    a = np.asarray(a)
    ah = np.asarray(ah)
    if a.shape != ah.shape:
        raise ShapeError(f"ranking_loss: shapes differ {a.shape} vs {ah.shape}")
    if a.ndim == 0:
        return 0.0
    w = a.shape[-1]
    if w < 2:
        return 0.0
    pi, pj = _pairs_arg(w)
    a3 = a.reshape(1, -1, w)
    return float(kernels.ranking_loss_rows(a3, ah.reshape(1, -1, w), theta, pi, pj)[0])


def ranking_loss_batch(a, ah, theta):
    """Ranking loss per sample for arrays shaped (N, ..., w)."""
    a = np.asarray(a)
    ah = np.asarray(ah)
    if a.shape != ah.shape:
        raise ShapeError(f"ranking_loss: shapes differ {a.shape} vs {ah.shape}")
    n, w = a.shape[0], a.shape[-1]
    if w < 2:
        return np.zeros(n)
    pi, pj = _pairs_arg(w)
    return kernels.ranking_loss_rows(a.reshape(n, -1, w), ah.reshape(n, -1, w), theta, pi, pj)


class RankingReference:
    """Reference attention scores with their pair orders precomputed.

    ``a`` is shaped (N, ..., w); :meth:`loss` returns the per-sample ranking
    loss of a candidate map of the same shape. Equivalent to
    :func:`ranking_loss_batch` but reuses the reference signs.
    """

    def __init__(self, a, seed=PAIR_SEED):
        a = np.asarray(a)
        self.shape = a.shape
        self.n, self.w = a.shape[0], a.shape[-1]
        self.pi, self.pj = _pairs_arg(self.w, seed)
        self.signs = kernels.pair_signs(a.reshape(self.n, -1, self.w), self.pi, self.pj)

    def loss(self, ah, theta):
        ah = np.asarray(ah)
        if ah.shape != self.shape:
            raise ShapeError(f"ranking_loss: shapes differ {self.shape} vs {ah.shape}")
        if self.w < 2:
            return np.zeros(self.n)
        return kernels.ranking_loss_signed(self.signs, ah.reshape(self.n, -1, self.w), theta, self.pi, self.pj)


def inversion_count(a, ah):
    """Count row-wise pairs whose strict order in ``a`` is reversed in ``ah``."""
    a = np.asarray(a)
    ah = np.asarray(ah)
    if a.shape != ah.shape:
        raise ShapeError(f"inversion_count: shapes differ {a.shape} vs {ah.shape}")
    w = a.shape[-1]
    if w < 2:
        return 0
    pi, pj = _pairs_arg(w)
    return kernels.inversion_count_rows(a.reshape(1, -1, w), ah.reshape(1, -1, w), pi, pj)


def percentile_baseline(y, percentile, bits) -> QuantParams:
    """Step size from a percentile of ``|y|`` (linear interpolation).

    ``delta = P(|y|) / (2^(b-1)-1)``. A tensor whose percentile is zero
    gets ``delta = 1``.
    """
    y = np.asarray(y)
    if y.size == 0:
        raise QuantizationError("percentile_baseline: empty tensor")
    if not 50 < percentile <= 100:
        raise QuantizationError(f"percentile must lie in (50, 100], got {percentile}")
    clip = float(np.percentile(np.abs(y.astype(np.float64)).ravel(), percentile, method="linear"))
    if clip == 0.0:
        log.warning("percentile_baseline: degenerate all-zero range, using delta=1")
        return QuantParams(1.0, bits)
    return QuantParams(clip / (2 ** (bits - 1) - 1), bits)
