"""``vitq`` command line: quantize, sensitivity, eval, baseline, make-toy.

Exit codes: 0 success, 2 config error, 3 I/O or malformed input,
4 infeasible budget, 5 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import mixed
from .container import ContainerError, load_calibration, load_model, save_calibration, save_model
from .evaluate import EvaluationError, compare, model_sizes
from .model import MissingSiteError
from .quant import MAX_BITS, MIN_BITS, QuantizationError
from .report import (
    HooksMismatchError, apply_hooks_document, build_report, check_finite, hooks_document,
    load_json, save_json,
)
from .search import CalibrationError, SearchConfig, calibrate_model, calibrate_percentile, group_bits
from .tensor_core import ShapeError

log = logging.getLogger("vitq")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_BUDGET = 4
EXIT_NUMERIC = 5


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_SEARCH_FIELDS = [f.name for f in dataclasses.fields(SearchConfig) if f.name != "pair_seed"]


@dataclass
class RunConfig:
    model_path: str
    calib_path: str
    eval_path: str | None = None
    hooks_path: str | None = None  # eval only
    base_bits: int = 8
    mixed: bool = False
    bit_set: list | None = None
    budget_bytes: int | None = None
    target_avg_bits: float | None = None
    search: dict = field(default_factory=dict)
    percentile: float = 99.99
    seed: int = 0
    out_dir: str = "vitq_out"

    def __post_init__(self):
        if not isinstance(self.base_bits, int) or not MIN_BITS <= self.base_bits <= MAX_BITS:
            raise ConfigError(f"base_bits must be an integer in [{MIN_BITS}, {MAX_BITS}]")
        if self.bit_set is None:
            self.bit_set = [b for b in range(self.base_bits - 2, self.base_bits + 3) if MIN_BITS <= b <= MAX_BITS]
        bs = self.bit_set
        if not bs or any(not isinstance(b, int) or not MIN_BITS <= b <= MAX_BITS for b in bs):
            raise ConfigError("bit_set must be a non-empty list of integers in [2, 16]")
        self.bit_set = sorted(set(bs))
        if self.mixed and (self.budget_bytes is None) == (self.target_avg_bits is None):
            raise ConfigError("mixed precision needs exactly one of budget_bytes or target_avg_bits")
        if self.budget_bytes is not None and (not isinstance(self.budget_bytes, int) or self.budget_bytes < 0):
            raise ConfigError("budget_bytes must be a non-negative integer")
        if self.target_avg_bits is not None and not MIN_BITS <= self.target_avg_bits <= MAX_BITS:
            raise ConfigError("target_avg_bits must lie in [2, 16]")
        unknown = sorted(set(self.search) - set(_SEARCH_FIELDS))
        if unknown:
            raise ConfigError(f"unknown search fields: {unknown}")
        try:
            self.search_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"search: {exc}") from None
        if not 50 < self.percentile <= 100:
            raise ConfigError("percentile must lie in (50, 100]")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        # search fields may sit at top level or under "search"
        search = dict(d.pop("search", {}) or {})
        for k in _SEARCH_FIELDS:
            if k in d:
                search[k] = d.pop(k)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        for req in ("model_path", "calib_path"):
            if req not in d:
                raise ConfigError(f"config is missing {req!r}")
        try:
            return cls(search=search, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def search_config(self) -> SearchConfig:
        return SearchConfig(**self.search, pair_seed=self.seed)

    def budget(self, cfg):
        if self.budget_bytes is not None:
            return int(self.budget_bytes)
        return mixed.budget_for_average_bits(cfg, self.target_avg_bits)

    def to_json(self):
        d = dataclasses.asdict(self)
        d["search"] = self.search_config().to_json()
        return d


def load_run_config(path, overrides=None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    base = Path(path).resolve().parent
    for key in ("model_path", "calib_path", "eval_path", "hooks_path", "out_dir"):
        # relative paths are taken relative to the config file
        if isinstance(raw.get(key), str) and not os.path.isabs(raw[key]):
            raw[key] = str(base / raw[key])
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    return RunConfig.from_dict(raw)


def _inputs(rc: RunConfig):
    model = load_model(rc.model_path)
    calib, _ = load_calibration(rc.calib_path)
    evals = load_calibration(rc.eval_path)[0] if rc.eval_path else calib
    return model, calib, evals


def _sensitivity(model, calib, rc: RunConfig, budget=None):
    capture = mixed.full_precision_capture(model, calib)
    records = []
    for mid in mixed.module_ids(model.config):
        for b in rc.bit_set:
            records.append(mixed.module_sensitivity(model, calib, mid, b, capture))
    doc = {
        "records": [r.to_json() for r in records],
        "nuclear_norms": mixed.module_nuclear_norms(model, calib, capture),
    }
    alloc = None
    if budget is not None:
        alloc = mixed.allocate_bits(records, rc.bit_set, budget)
        doc["allocation"] = {**alloc.to_json(), "budget_bytes": int(budget)}
    return records, alloc, doc


def run_quantize(rc: RunConfig, command="quantize"):
    """Calibrate, evaluate and write artifacts. Returns the report dict."""
    model, calib, evals = _inputs(rc)
    scfg = rc.search_config()
    sens_doc = None
    if rc.mixed:
        _, alloc, sens_doc = _sensitivity(model, calib, rc, rc.budget(model.config))
        bits = {**alloc.bits, "base": rc.base_bits}
    else:
        bits = rc.base_bits
    if command == "baseline":
        qm = calibrate_percentile(model, calib, rc.percentile, bits, scfg)
    else:
        qm = calibrate_model(model, calib, scfg, bits)
    gb = group_bits(model, bits)
    modules = {m: b for m, b in bits.items() if m != "base"} if isinstance(bits, dict) else {
        m: rc.base_bits for m in mixed.module_ids(model.config)}
    evaluation = compare(model, qm.model, qm.hooks, evals)
    report = build_report(
        command, qm, evaluation, model_sizes(model, gb), rc.to_json(),
        {"base": rc.base_bits, "modules": modules, "groups": gb}, sens_doc,
    )
    check_finite(report)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = "quantized" if command == "quantize" else "baseline"
    save_model(qm.model, out / f"{stem}.vitm")
    save_json(out / f"{stem}.hooks.json", hooks_document(model, qm.model, qm.hooks, qm.method))
    save_json(out / f"{stem}.report.json", report)
    if sens_doc is not None:
        save_json(out / "sensitivity.json", sens_doc)
    return report


def run_sensitivity(rc: RunConfig):
    model, calib, _ = _inputs(rc)
    budget = rc.budget(model.config) if (rc.budget_bytes is not None or rc.target_avg_bits is not None) else None
    _, _, doc = _sensitivity(model, calib, rc, budget)
    doc["bit_set"] = list(rc.bit_set)
    check_finite(doc)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_json(out / "sensitivity.json", doc)
    return doc


def cmd_eval(model_path, hooks_path, calib_path, quantized_model_path=None):
    """Compare a full-precision model with its quantized version on a data file.

    The quantized network is rebuilt from the hooks file (step sizes plus
    corrected biases). If ``quantized_model_path`` is given its biases must
    match the hooks file.
    """
    model = load_model(model_path)
    q_model, hooks = apply_hooks_document(model, load_json(hooks_path))
    if quantized_model_path is not None:
        stored = load_model(quantized_model_path)
        if not stored.equals(q_model):
            raise HooksMismatchError("quantized model does not match the hooks file")
    images, _ = load_calibration(calib_path)
    metrics = compare(model, q_model, hooks, images)
    check_finite(metrics)
    return metrics


def cmd_make_toy(out_dir, seed=0, n_calib=64, n_eval=256, hot_layer=None):
    from .toy import toy_problem

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, (cx, cy), (ex, ey) = toy_problem(seed, n_calib, n_eval, hot_layer=hot_layer)
    save_model(model, out / "model.vitm")
    save_calibration(out / "calib.vitt", cx, cy)
    save_calibration(out / "eval.vitt", ex, ey)
    cfg = {"model_path": "model.vitm", "calib_path": "calib.vitt", "eval_path": "eval.vitt",
           "base_bits": 8, "seed": seed, "out_dir": "out"}
    save_json(out / "config.json", cfg)
    return out / "config.json"


def build_parser():
    p = argparse.ArgumentParser(prog="vitq", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="run config JSON")
        sp.add_argument("--bits", type=int, help="override base_bits")
        sp.add_argument("--mixed", action="store_true", default=None, help="enable mixed precision")
        sp.add_argument("--budget-bytes", type=int, help="override budget_bytes")
        sp.add_argument("--seed", type=int, help="override seed")
        sp.add_argument("--out", help="override out_dir")

    for name, help_ in (("quantize", "searched calibration"), ("baseline", "percentile baseline"),
                        ("sensitivity", "nuclear-norm sensitivity table")):
        common(sub.add_parser(name, help=help_))

    ev = sub.add_parser("eval", help="compare full-precision and quantized forward passes")
    ev.add_argument("--config", help="config with model_path, hooks_path, calib_path")
    ev.add_argument("--model")
    ev.add_argument("--hooks")
    ev.add_argument("--calib")
    ev.add_argument("--quantized-model")
    ev.add_argument("--out", help="write metrics JSON here instead of stdout")

    toy = sub.add_parser("make-toy", help="write the bundled synthetic model and data")
    toy.add_argument("--out", required=True)
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument("--n-calib", type=int, default=64)
    toy.add_argument("--n-eval", type=int, default=256)
    toy.add_argument("--hot-layer", type=int)
    return p


def _overrides(args):
    o = {"base_bits": args.bits, "budget_bytes": args.budget_bytes, "seed": args.seed, "out_dir": args.out}
    if args.mixed:
        o["mixed"] = True
    return o


def _eval_args(args):
    if args.config:
        raw = load_json(args.config)
        base = Path(args.config).resolve().parent

        def path(key):
            v = raw.get(key)
            return None if v is None else str(base / v) if not os.path.isabs(v) else v

        model, hooks, calib = path("model_path"), path("hooks_path"), path("calib_path")
    else:
        model = hooks = calib = None
    model, hooks, calib = args.model or model, args.hooks or hooks, args.calib or calib
    if not (model and hooks and calib):
        raise ConfigError("eval needs model, hooks and calibration paths")
    return model, hooks, calib


def _run(args):
    if args.command == "make-toy":
        print(cmd_make_toy(args.out, args.seed, args.n_calib, args.n_eval, args.hot_layer))
        return
    if args.command == "eval":
        metrics = cmd_eval(*_eval_args(args), args.quantized_model)
        if args.out:
            save_json(args.out, metrics)
        else:
            print(json.dumps(metrics, indent=2, sort_keys=True))
        return
    rc = load_run_config(args.config, _overrides(args))
    if args.command == "sensitivity":
        run_sensitivity(rc)
    else:
        report = run_quantize(rc, args.command)
        ev = report["evaluation"]
        print(f"{args.command}: top-1 agreement {ev['top1_agreement']:.4f}, "
              f"size {report['sizes']['quantized_mb']:.4f} MB -> {rc.out_dir}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except mixed.InfeasibleBudgetError as exc:
        log.error("infeasible budget: %s", exc)
        return EXIT_BUDGET
    except (OSError, ContainerError, ShapeError, MissingSiteError, HooksMismatchError,
            CalibrationError, EvaluationError) as exc:
        log.error("input error: %s", exc)
        return EXIT_IO
    except (NumericError, QuantizationError, FloatingPointError, ValueError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
