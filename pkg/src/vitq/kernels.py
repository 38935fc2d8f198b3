"""Backend selection for the hot kernels.

The compiled extension ``vitq._kernels`` is used when it was built;
otherwise the numpy implementations in ``vitq._fallback`` are used.
Set ``VITQ_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("VITQ_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback

quantize = _impl.quantize
quant_dequant = _impl.quant_dequant
pearson_rows = _impl.pearson_rows
ranking_loss_rows = _impl.ranking_loss_rows
pair_signs = _impl.pair_signs
ranking_loss_signed = _impl.ranking_loss_signed
inversion_count_rows = _impl.inversion_count_rows
singular_values = _impl.singular_values

__all__ = [
    "BACKEND",
    "quantize",
    "quant_dequant",
    "pearson_rows",
    "ranking_loss_rows",
    "pair_signs",
    "ranking_loss_signed",
    "inversion_count_rows",
    "singular_values",
]
