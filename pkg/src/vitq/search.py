"""Interval search, bias correction and whole-model calibration.

Each :class:`~vitq.model.SiteGroup` is one matrix product ``X @ W`` with a
quantized left operand (site ``.x``) and right operand (site ``.w``). For a
group we cache, over the calibration batch, the operands arriving at it from
the already-quantized prefix of the network together with the
full-precision product ``O``. The objective of a step-size pair is the mean
per-sample Pearson correlation between ``O`` and the fake-quantized product,
minus ``gamma`` times the mean hinge ranking loss on the attention scores for
the groups that produce them (``q``, ``k`` and ``qk``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .model import QuantHooks, SiteGroup, ViTModel, merge_heads, model_forward, site_groups, split_heads
from .quant import QuantParams, RankingReference, max_init_delta, pearson_batch, percentile_baseline

log = logging.getLogger(__name__)


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    alpha: float = 0.5
    beta: float = 1.2
    candidates: int = 100
    max_iter: int = 20
    gamma: float = 0.1
    theta: float = 0.2
    convergence_tol: float = 1e-5
    bias_correction: bool = True
    pair_seed: int = 0  # only used when attention rows are long enough to sample pairs

    def __post_init__(self):
        if not 0 < self.alpha < self.beta:
            raise ValueError("need 0 < alpha < beta")
        if int(self.candidates) < 1:
            raise ValueError("candidates must be >= 1")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be >= 1")
        if self.gamma < 0 or self.theta < 0:
            raise ValueError("gamma and theta must be non-negative")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")

    def to_json(self):
        return {
            "alpha": self.alpha, "beta": self.beta, "candidates": self.candidates,
            "max_iter": self.max_iter, "gamma": self.gamma, "theta": self.theta,
            "convergence_tol": self.convergence_tol, "bias_correction": self.bias_correction,
            "pair_seed": self.pair_seed,
        }


class LayerCalibration:
    """Cached operands and reference outputs of one site group.

    ``x`` and ``w`` are the unquantized operands. For ``linear`` groups
    ``w`` is the weight matrix shared by all samples; for ``qk`` and ``av``
    both operands are per-sample activations. ``partner`` is the other
    projection (K for the ``q`` group, Q for the ``k`` group) used to form
    attention scores for the ranking term.
    """

    def __init__(self, group: SiteGroup, x, w, bias=None, heads=1, partner=None, partner_side=None):
        x = np.asarray(x, dtype=np.float32)
        if x.shape[0] < 1:
            raise CalibrationError(f"{group.name}: empty calibration set")
        self.group = group
        self.x = x
        self.w = np.asarray(w, dtype=np.float32)
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float32)
        self.heads = heads
        self.partner = partner
        self.partner_side = partner_side
        self.n = x.shape[0]
        self.reference = self.product(self.x, self.w)
        self.scores = self.attention(self.reference) if self.has_ranking else None
        self._rank_ref = None
        self._qx = (None, None)
        self._qw = (None, None)

    @property
    def has_ranking(self):
        if self.group.kind == "qk":
            return True
        return self.group.ranking and self.partner is not None

    def product(self, x, w, bias=None):
        kind = self.group.kind
        if kind == "linear":
            out = x @ w
            b = self.bias if bias is None else bias
            return out if b is None else out + b
        if kind == "qk":
            return split_heads(x, self.heads) @ np.swapaxes(split_heads(w, self.heads), -1, -2)
        if kind == "av":
            return merge_heads(x @ split_heads(w, self.heads))
        raise ValueError(kind)

    def attention(self, out):
        """Per-head raw attention scores implied by this group's output."""
        if self.group.kind == "qk":
            return out
        h = self.heads
        if self.partner_side == "k":  # out is Q, partner is K
            return split_heads(out, h) @ np.swapaxes(split_heads(self.partner, h), -1, -2)
        return split_heads(self.partner, h) @ np.swapaxes(split_heads(out, h), -1, -2)

    def init_deltas(self, bits):
        """Max-based starting step sizes ``(delta_x, delta_w)``."""
        return max_init_delta(self.x, bits), max_init_delta(self.w, bits)

    def _quant_x(self, dx, bits):
        if self._qx[0] != (dx, bits):
            self._qx = ((dx, bits), kernels.quant_dequant(self.x, dx, bits))
        return self._qx[1]

    def _quant_w(self, dw, bits):
        if self._qw[0] != (dw, bits):
            self._qw = ((dw, bits), kernels.quant_dequant(self.w, dw, bits))
        return self._qw[1]

    def quantized_output(self, dx, dw, bits, bias=None):
        return self.product(self._quant_x(dx, bits), self._quant_w(dw, bits), bias)

    def similarity(self, out):
        return float(np.mean(pearson_batch(self.reference, out)))

    def ranking(self, out, theta, seed=0):
        if not self.has_ranking:
            return 0.0
        if self._rank_ref is None or self._rank_ref[0] != seed:
            self._rank_ref = (seed, RankingReference(self.scores, seed))
        return float(np.mean(self._rank_ref[1].loss(self.attention(out), theta)))


def build_calibration(group: SiteGroup, model: ViTModel, capture) -> LayerCalibration:
    """Assemble a group's cache from a captured forward pass."""
    h = model.config.num_heads
    x = capture[group.x_site]
    if group.kind == "linear":
        w = model.get(group.weight)
        bias = model.get(group.bias) if group.bias else None
        partner, side = None, None
        if group.ranking:
            prefix = group.name.rsplit(".", 1)[0]
            op = group.name.rsplit(".", 1)[1]
            if op == "q":
                partner, side = capture[f"{prefix}.qk.w"], "k"
            else:
                partner, side = capture[f"{prefix}.qk.x"], "q"
        return LayerCalibration(group, x, w, bias, h, partner, side)
    return LayerCalibration(group, x, capture[group.w_site], None, h)


def site_objective(calib: LayerCalibration, dx, dw, bits, cfg: SearchConfig) -> float:
    """Mean Pearson similarity minus ``gamma`` times the mean ranking loss."""
    out = calib.quantized_output(dx, dw, bits)
    value = calib.similarity(out)
    if cfg.gamma > 0 and calib.has_ranking:
        value -= cfg.gamma * calib.ranking(out, cfg.theta, cfg.pair_seed)
    return value


def candidate_deltas(delta0, cfg: SearchConfig):
    """``C`` evenly spaced step sizes covering ``[alpha*delta0, beta*delta0]``."""
    c = int(cfg.candidates)
    if c < 1:
        raise ValueError("candidates must be >= 1")
    if c == 1:
        return [cfg.alpha * delta0]
    step = (cfg.beta - cfg.alpha) * delta0 / (c - 1)
    return [cfg.alpha * delta0 + t * step for t in range(c)]


@dataclass
class SearchStep:
    delta: float
    objective: float
    candidates: list
    objectives: list


def search_interval(calib: LayerCalibration, side, fixed_delta, delta0, bits, cfg: SearchConfig) -> SearchStep:
    """Scan the candidate window for one operand with the other held fixed.

    ``side`` is ``"w"`` or ``"x"``. The first (smallest) of equally good
    candidates wins.
    """
    cands = candidate_deltas(delta0, cfg)
    values = []
    best_i = 0
    for i, d in enumerate(cands):
        if side == "w":
            v = site_objective(calib, fixed_delta, d, bits, cfg)
        elif side == "x":
            v = site_objective(calib, d, fixed_delta, bits, cfg)
        else:
            raise ValueError(f"side must be 'x' or 'w', got {side!r}")
        values.append(v)
        if v > values[best_i]:
            best_i = i
    return SearchStep(cands[best_i], values[best_i], cands, values)


@dataclass
class SearchResult:
    delta_x: float
    delta_w: float
    init_objective: float
    objective: float
    trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def alternating_search(calib: LayerCalibration, bits, cfg: SearchConfig) -> SearchResult:
    """Coordinate ascent on ``(delta_w, delta_x)``.

    Each iteration searches the weight step with the input step fixed, then
    the input step with the weight step fixed. A candidate replaces the
    current value only if it strictly improves the objective, so ``trace``
    (initial value, then one entry per half-step) never decreases.
    """
    dx0, dw0 = calib.init_deltas(bits)
    dx, dw = dx0, dw0
    f = site_objective(calib, dx, dw, bits, cfg)
    result = SearchResult(dx, dw, f, f, [f])
    for it in range(1, int(cfg.max_iter) + 1):
        start = f
        step = search_interval(calib, "w", dx, dw0, bits, cfg)
        if step.objective > f:
            dw, f = step.delta, step.objective
        result.trace.append(f)
        step = search_interval(calib, "x", dw, dx0, bits, cfg)
        if step.objective > f:
            dx, f = step.delta, step.objective
        result.trace.append(f)
        result.iterations = it
        if f - start < cfg.convergence_tol:
            result.converged = True
            break
    result.delta_x, result.delta_w, result.objective = dx, dw, f
    return result


@dataclass
class BiasCorrection:
    bias: np.ndarray | None
    error_before: np.ndarray | None
    error_after: np.ndarray | None
    applied: bool


def output_mean_error(calib: LayerCalibration, dx, dw, bits, bias=None):
    """Per-output-unit mean of (quantized - reference) over the calibration set."""
    out = calib.quantized_output(dx, dw, bits, bias).astype(np.float64)
    diff = out - calib.reference.astype(np.float64)
    return diff.reshape(-1, diff.shape[-1]).mean(axis=0)


def bias_correct(calib: LayerCalibration, dx, dw, bits) -> BiasCorrection:
    """Fold the calibration-mean output error of a biased linear into its bias.

    Groups without a bias are left untouched (``applied`` is False).
    """
    if calib.group.kind != "linear" or calib.bias is None:
        log.warning("bias_correct: %s has no bias parameter, skipped", calib.group.name)
        return BiasCorrection(None, None, None, False)
    before = output_mean_error(calib, dx, dw, bits)
    new_bias = (calib.bias.astype(np.float64) - before).astype(np.float32)
    after = output_mean_error(calib, dx, dw, bits, bias=new_bias)
    return BiasCorrection(new_bias, before, after, True)


@dataclass
class QuantizedModel:
    """Bias-corrected model plus its quantization table."""

    model: ViTModel
    hooks: QuantHooks
    groups: dict = field(default_factory=dict)
    method: str = "search"


def group_bits(model: ViTModel, bits):
    """Map every group name to a bit-width.

    ``bits`` is an int (uniform) or a mapping with per-module entries such
    as ``{"layers.0.msa": 6, ...}`` and a ``"base"`` entry used for the
    embedding and the head.
    """
    out = {}
    for g in site_groups(model.config):
        if isinstance(bits, int):
            out[g.name] = bits
        else:
            mod = g.module
            out[g.name] = int(bits[mod]) if mod is not None and mod in bits else int(bits["base"])
    return out


def _capture(model, images, hooks):
    capture = {}
    model_forward(images, model, hooks, partial=True, capture=capture)
    return capture


def calibrate_model(model: ViTModel, images, cfg: SearchConfig = SearchConfig(), bits=8) -> QuantizedModel:
    """Search every group's step sizes in execution order.

    Each group sees inputs produced by the already-quantized (and
    bias-corrected) prefix of the network.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] < 1:
        raise CalibrationError("calibration set must be a non-empty (N, H, W, C) batch")
    bmap = group_bits(model, bits)
    hooks = QuantHooks()
    current = model
    records = {}
    for g in site_groups(model.config):
        b = bmap[g.name]
        calib = build_calibration(g, current, _capture(current, images, hooks))
        res = alternating_search(calib, b, cfg)
        rec = {
            "bits": b,
            "delta_x": res.delta_x,
            "delta_w": res.delta_w,
            "init_objective": res.init_objective,
            "objective": res.objective,
            "trace": res.trace,
            "iterations": res.iterations,
            "converged": res.converged,
            "bias_error_before": None,
            "bias_error_after": None,
        }
        if cfg.bias_correction and g.bias is not None:
            bc = bias_correct(calib, res.delta_x, res.delta_w, b)
            current = current.replace_tensors({g.bias: bc.bias})
            rec["bias_error_before"] = float(np.max(np.abs(bc.error_before)))
            rec["bias_error_after"] = float(np.max(np.abs(bc.error_after)))
        hooks = hooks.with_site(g.x_site, QuantParams(res.delta_x, b))
        hooks = hooks.with_site(g.w_site, QuantParams(res.delta_w, b))
        records[g.name] = rec
        log.debug("%s: bits=%d objective %.6f -> %.6f in %d iterations",
                  g.name, b, res.init_objective, res.objective, res.iterations)
    return QuantizedModel(current, hooks, records, "search")


def calibrate_percentile(model: ViTModel, images, percentile=99.99, bits=8, cfg: SearchConfig = SearchConfig()) -> QuantizedModel:
    """Percentile-clipping baseline: no search, no bias correction.

    Step sizes come from the ``percentile`` of each operand's magnitudes,
    collected in the same sequential order as :func:`calibrate_model`.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] < 1:
        raise CalibrationError("calibration set must be a non-empty (N, H, W, C) batch")
    bmap = group_bits(model, bits)
    hooks = QuantHooks()
    records = {}
    for g in site_groups(model.config):
        b = bmap[g.name]
        calib = build_calibration(g, model, _capture(model, images, hooks))
        dx = percentile_baseline(calib.x, percentile, b).delta
        dw = percentile_baseline(calib.w, percentile, b).delta
        f = site_objective(calib, dx, dw, b, cfg)
        records[g.name] = {
            "bits": b, "delta_x": dx, "delta_w": dw,
            "init_objective": f, "objective": f, "trace": [f], "iterations": 0, "converged": True,
            "bias_error_before": None, "bias_error_after": None,
        }
        hooks = hooks.with_site(g.x_site, QuantParams(dx, b)).with_site(g.w_site, QuantParams(dw, b))
    return QuantizedModel(model, hooks, records, "percentile")
