"""Nuclear-norm sensitivity and bit-width allocation per MSA / MLP module.

A module's sensitivity at bit-width ``b`` is

    omega = sum_j sigma_j(Y) * ||Y_hat - Y||_F^2

averaged over calibration samples (and over heads for MSA), where ``Y`` is
the full-precision attention-score map (MSA) or output feature (MLP) and
``Y_hat`` the same quantity with every operand of the module fake-quantized
at ``b`` bits using max-based step sizes.

Allocation picks one bit-width per module minimizing the summed omega under
a weight-byte budget. Omega is additive over modules, so the exact optimum
is found by a dynamic program that keeps, after each module, only the
Pareto frontier of (bytes, omega) partial assignments.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import ViTModel, model_forward, split_heads
from .quant import max_init_delta
from .tensor_core import gelu, nuclear_norm


class InfeasibleBudgetError(ValueError):
    pass


class UnknownModuleError(KeyError):
    pass


@dataclass(frozen=True)
class SensitivityRecord:
    module_id: str
    bits: int
    omega: float
    weight_bytes: int

    def to_json(self):
        return {"module_id": self.module_id, "bits": self.bits, "omega": self.omega, "bytes": self.weight_bytes}

    @classmethod
    def from_json(cls, d):
        return cls(str(d["module_id"]), int(d["bits"]), float(d["omega"]), int(d["bytes"]))


@dataclass
class BitAllocation:
    bits: dict
    total_omega: float
    total_bytes: int

    def to_json(self):
        return {"bits": dict(self.bits), "total_omega": self.total_omega, "total_bytes": self.total_bytes}


def module_ids(cfg):
    out = []
    for i in range(cfg.num_layers):
        out += [f"layers.{i}.msa", f"layers.{i}.mlp"]
    return out


def module_param_count(cfg, module_id):
    _, layer, kind = _parse(cfg, module_id)
    d, f = cfg.embed_dim, cfg.mlp_dim
    return 4 * d * d if kind == "msa" else 2 * d * f


def weight_bytes(param_count, bits):
    return math.ceil(param_count * bits / 8)


def _parse(cfg, module_id):
    parts = module_id.split(".")
    if len(parts) != 3 or parts[0] != "layers" or parts[2] not in ("msa", "mlp"):
        raise UnknownModuleError(module_id)
    try:
        layer = int(parts[1])
    except ValueError:
        raise UnknownModuleError(module_id) from None
    if not 0 <= layer < cfg.num_layers:
        raise UnknownModuleError(module_id)
    return parts[0], layer, parts[2]


def _qd(y, bits):
    return kernels.quant_dequant(y, max_init_delta(y, bits), bits)


def full_precision_capture(model: ViTModel, images):
    capture = {}
    model_forward(np.asarray(images, dtype=np.float32), model, capture=capture)
    return capture


def omega(y, y_hat):
    """``nuclear_norm(y) * ||y_hat - y||_F^2`` for one matrix."""
    diff = np.asarray(y_hat, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return nuclear_norm(y) * float(np.sum(diff * diff))


def _module_maps(model, capture, layer, kind, bits):
    """Full-precision and quantized module quantities, each (M, rows, cols)."""
    lw = model.layers[layer]
    p = f"layers.{layer}"
    h = model.config.num_heads
    if kind == "msa":
        x = capture[f"{p}.q.x"]
        q = _qd(x, bits) @ _qd(lw.wq, bits)
        k = _qd(x, bits) @ _qd(lw.wk, bits)
        # step sizes for the Q.K^T operands come from the full-precision Q and K
        dq = max_init_delta(capture[f"{p}.qk.x"], bits)
        dk = max_init_delta(capture[f"{p}.qk.w"], bits)
        qs = split_heads(kernels.quant_dequant(q, dq, bits), h)
        ks = split_heads(kernels.quant_dequant(k, dk, bits), h)
        y_hat = qs @ np.swapaxes(ks, -1, -2)
        y = capture[f"{p}.scores"]
        r = y.shape[-1]
        return y.reshape(-1, r, r), y_hat.reshape(-1, r, r)
    z = capture[f"{p}.fc1.x"]
    y = model_mlp(z, lw)
    hid = gelu(_qd(z, bits) @ _qd(lw.w1, bits) + lw.b1)
    dh = max_init_delta(capture[f"{p}.fc2.x"], bits)
    y_hat = kernels.quant_dequant(hid, dh, bits) @ _qd(lw.w2, bits) + lw.b2
    return y, y_hat


def model_mlp(z, lw):
    return gelu(z @ lw.w1 + lw.b1) @ lw.w2 + lw.b2


def module_sensitivity(model: ViTModel, images, module_id, bits, capture=None) -> SensitivityRecord:
    """Sensitivity record of one module at one bit-width.

    Inputs to the module come from the full-precision network; pass a
    precomputed ``capture`` (see :func:`full_precision_capture`) to avoid
    repeating the forward pass.
    """
    cfg = model.config
    _, layer, kind = _parse(cfg, module_id)
    if capture is None:
        capture = full_precision_capture(model, images)
    y, y_hat = _module_maps(model, capture, layer, kind, int(bits))
    vals = [omega(y[i], y_hat[i]) for i in range(y.shape[0])]
    return SensitivityRecord(
        module_id, int(bits), float(np.mean(vals)), weight_bytes(module_param_count(cfg, module_id), int(bits))
    )


def module_nuclear_norms(model: ViTModel, images, capture=None):
    """Mean nuclear norm of each module's full-precision attention map / output."""
    if capture is None:
        capture = full_precision_capture(model, images)
    out = {}
    for mid in module_ids(model.config):
        _, layer, kind = _parse(model.config, mid)
        if kind == "msa":
            y = capture[f"layers.{layer}.scores"]
            y = y.reshape(-1, y.shape[-2], y.shape[-1])
        else:
            y = model_mlp(capture[f"layers.{layer}.fc1.x"], model.layers[layer])
        out[mid] = float(np.mean([nuclear_norm(m) for m in y]))
    return out


def sensitivity_table(model: ViTModel, images, bit_set):
    capture = full_precision_capture(model, images)
    return [
        module_sensitivity(model, images, mid, b, capture)
        for mid in module_ids(model.config)
        for b in sorted(bit_set)
    ]


def budget_for_average_bits(cfg, avg_bits):
    """Weight bytes of the transformer modules when all use ``avg_bits``."""
    return sum(weight_bytes(module_param_count(cfg, m), avg_bits) for m in module_ids(cfg))


def allocate_bits(records, bit_set, budget_bytes) -> BitAllocation:
    """Minimum total omega assignment with total weight bytes <= budget.

    Exact. Among equal-omega optima the smaller total size wins, then the
    lexicographically smaller bit vector in module order.
    """
    bit_set = sorted(set(int(b) for b in bit_set))
    table = {}
    modules = []
    for r in records:
        if r.bits not in bit_set:
            continue
        if r.module_id not in table:
            table[r.module_id] = {}
            modules.append(r.module_id)
        table[r.module_id][r.bits] = r
    for m in modules:
        missing = [b for b in bit_set if b not in table[m]]
        if missing:
            raise ValueError(f"{m}: no sensitivity record for bits {missing}")
    if not modules:
        raise ValueError("no sensitivity records")

    min_bytes = sum(min(r.weight_bytes for r in table[m].values()) for m in modules)
    if min_bytes > budget_bytes:
        raise InfeasibleBudgetError(
            f"budget {budget_bytes} bytes is below the minimum-bit size {min_bytes} bytes"
        )

    # frontier entries: (bytes, omega, choice tuple); strictly increasing bytes,
    # strictly decreasing omega
    frontier = [(0, 0.0, ())]
    for m in modules:
        expanded = []
        for size, om, choice in frontier:
            for b in bit_set:
                r = table[m][b]
                s = size + r.weight_bytes
                if s <= budget_bytes:
                    expanded.append((s, om + r.omega, choice + (b,)))
        expanded.sort(key=lambda e: (e[0], e[1], e[2]))
        frontier = []
        for e in expanded:
            if not frontier or e[1] < frontier[-1][1]:
                frontier.append(e)
    size, om, choice = min(frontier, key=lambda e: (e[1], e[0], e[2]))
    bits = dict(zip(modules, choice))
    total = float(sum(table[m][bits[m]].omega for m in modules))
    assert size <= budget_bytes
    return BitAllocation(bits, total, int(size))


def save_sensitivity(path, records, nuclear_norms=None, meta=None):
    doc = {"records": [r.to_json() for r in records]}
    if nuclear_norms is not None:
        doc["nuclear_norms"] = nuclear_norms
    if meta:
        doc.update(meta)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def load_sensitivity(path):
    with open(path) as fh:
        doc = json.load(fh)
    return [SensitivityRecord.from_json(d) for d in doc["records"]]
