"""Report assembly, the hooks sidecar file, and schema validation."""
import hashlib
import json
import math
from importlib import resources

import numpy as np

from . import __version__
from .model import QuantHooks, ViTConfig, ViTModel, site_groups

HOOKS_FORMAT = "vitq-hooks"
REPORT_FORMAT = "vitq-report"


class HooksMismatchError(ValueError):
    pass


def model_digest(model: ViTModel) -> str:
    """SHA-256 over the config and every tensor's bytes, in container order."""
    h = hashlib.sha256(json.dumps(model.config.to_json(), sort_keys=True).encode())
    for name, arr in model.named_tensors().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


def corrected_biases(fp_model: ViTModel, q_model: ViTModel):
    """Bias tensors that differ between the two models."""
    out = {}
    for g in site_groups(fp_model.config):
        if g.bias is None:
            continue
        a, b = fp_model.get(g.bias), q_model.get(g.bias)
        if a.tobytes() != b.tobytes():
            out[g.bias] = [float(v) for v in b]
    return out


def hooks_document(fp_model: ViTModel, q_model: ViTModel, hooks: QuantHooks, method: str):
    return {
        "format": HOOKS_FORMAT,
        "version": 1,
        "method": method,
        "model_sha256": model_digest(fp_model),
        "config": fp_model.config.to_json(),
        "sites": hooks.to_json(),
        "biases": corrected_biases(fp_model, q_model),
    }


def apply_hooks_document(fp_model: ViTModel, doc):
    """``(quantized model, hooks)`` rebuilt from a full-precision model.

    The document must have been written for exactly this model.
    """
    if doc.get("format") != HOOKS_FORMAT:
        raise HooksMismatchError("not a hooks file")
    if ViTConfig.from_json(doc["config"]) != fp_model.config:
        raise HooksMismatchError("hooks were produced for a different model config")
    if doc.get("model_sha256") != model_digest(fp_model):
        raise HooksMismatchError("hooks were produced for a different model (weights differ)")
    hooks = QuantHooks.from_json(doc["sites"])
    hooks.validate(fp_model.config, complete=True)
    updates = {k: np.asarray(v, dtype=np.float32) for k, v in doc.get("biases", {}).items()}
    return fp_model.replace_tensors(updates) if updates else fp_model, hooks


def save_json(path, doc):
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    text = json.dumps(doc, indent=2, sort_keys=True, allow_nan=False)
    with open(path, "w") as fh:
        fh.write(text + "\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def build_report(command, qm, evaluation, sizes, run_config, bits, sensitivity=None):
    return {
        "format": REPORT_FORMAT,
        "version": __version__,
        "command": command,
        "method": qm.method,
        "run_config": run_config,
        "bits": bits,
        "sites": qm.hooks.to_json(),
        "groups": qm.groups,
        "sensitivity": sensitivity,
        "evaluation": evaluation,
        "sizes": sizes,
    }


def _finite(x, where="report"):
    if isinstance(x, float):
        if not math.isfinite(x):
            raise ValueError(f"non-finite number in {where}")
    elif isinstance(x, dict):
        for k, v in x.items():
            _finite(v, f"{where}.{k}")
    elif isinstance(x, (list, tuple)):
        for i, v in enumerate(x):
            _finite(v, f"{where}[{i}]")


def check_finite(doc):
    _finite(doc)


def report_schema():
    return json.loads(resources.files("vitq").joinpath("schemas/report.schema.json").read_text())


def validate_report(doc):
    import jsonschema  # test/dev dependency only

    jsonschema.validate(doc, report_schema())
