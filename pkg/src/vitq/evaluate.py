"""Full-precision vs quantized comparison metrics and size accounting."""
import math

import numpy as np

from .model import QuantHooks, ViTModel, model_forward, site_groups
from .quant import inversion_count, pearson_batch


class EvaluationError(ValueError):
    pass


def _forward(images, model, hooks=None):
    capture = {}
    logits = model_forward(images, model, hooks, capture=capture)
    return logits, capture


def compare(fp_model: ViTModel, q_model: ViTModel, hooks: QuantHooks, images):
    """Metrics of the quantized network against the full-precision one.

    ``q_model`` is the bias-corrected model the hooks were calibrated for
    (pass ``fp_model`` again when no biases changed).
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] == 0:
        raise EvaluationError("evaluation needs a non-empty (N, H, W, C) batch")
    if fp_model.config != q_model.config:
        raise EvaluationError("full-precision and quantized models have different configs")
    hooks.validate(fp_model.config, complete=True)
    fp_logits, fp_cap = _forward(images, fp_model)
    q_logits, q_cap = _forward(images, q_model, hooks)
    dev = np.abs(q_logits.astype(np.float64) - fp_logits.astype(np.float64))
    layers = []
    inversions = 0
    for i in range(fp_model.config.num_layers):
        a, ah = fp_cap[f"layers.{i}.scores"], q_cap[f"layers.{i}.scores"]
        inv = inversion_count(a, ah)
        inversions += inv
        pear = pearson_batch(fp_cap[f"layers.{i}.out"], q_cap[f"layers.{i}.out"])
        layers.append({"layer": i, "pearson": float(np.mean(pear)), "inversions": int(inv)})
    return {
        "samples": int(images.shape[0]),
        "top1_agreement": float(np.mean(fp_logits.argmax(-1) == q_logits.argmax(-1))),
        "mean_logit_error": float(dev.mean()),
        "max_logit_error": float(dev.max()),
        "mean_layer_pearson": float(np.mean([r["pearson"] for r in layers])),
        "inversions": int(inversions),
        "inversion_pairs": int(_pair_total(fp_cap, fp_model.config)),
        "layers": layers,
    }


def _pair_total(capture, cfg):
    w = cfg.seq_len
    n = 0
    for i in range(cfg.num_layers):
        s = capture[f"layers.{i}.scores"]
        n += (s.size // w) * (w * (w - 1) // 2)
    return n


def top1_accuracy(model, hooks, images, labels):
    logits = model_forward(np.asarray(images, dtype=np.float32), model, hooks)
    return float(np.mean(logits.argmax(-1) == np.asarray(labels)))


MB = 1_000_000


def model_sizes(model: ViTModel, bits_by_group=None):
    """Byte counts of the float model and of its quantized version.

    Quantized weight tensors cost ``ceil(params * bits / 8)`` bytes; all
    other parameters (position embedding, class token, biases, LayerNorm)
    stay 32-bit. ``bits_by_group`` maps group name to bit-width.
    """
    tensors = model.named_tensors()
    full = 4 * sum(a.size for a in tensors.values())
    out = {"full_bytes": int(full), "full_mb": full / MB}
    if bits_by_group is None:
        return out
    quantized = 0
    weights = set()
    for g in site_groups(model.config):
        if g.weight is None:
            continue
        weights.add(g.weight)
        quantized += math.ceil(tensors[g.weight].size * bits_by_group[g.name] / 8)
    quantized += 4 * sum(a.size for k, a in tensors.items() if k not in weights)
    out["quantized_bytes"] = int(quantized)
    out["quantized_mb"] = quantized / MB
    return out
