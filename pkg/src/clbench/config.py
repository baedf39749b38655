"""Experiment configuration: JSON schema, defaults, preset expansion, validation.

Errors carry the 1-based line of the offending key in the source file so the
CLI can point at it.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import fields

from .engine import TrainConfig
from .losses import LossConfig
from .methods import METHODS
from .nn import FAMILIES, PENULTIMATE, ArchError, ArchSpec, preset

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, message, line=None, path=None):
        self.message = message
        self.line = line
        self.path = path
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{message}")


DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "name": "",
    "dataset": {"kind": "synth"},
    "tasks": 5,
    "order_seeds": [1],
    "seed": 1993,
    "method": {"name": "finetune"},
    "arch_stable": "mlp:4,800",
    "arch_plastic": None,
    "loss": {},
    "train": {},
    "memory": {"budget": 200},
    "output_dir": "runs",
    "checkpoints": "final",
    "variants": None,
}

DATASET_KEYS = {
    "synth": {"kind": "synth", "num_classes": 10, "per_class": 100, "test_per_class": 30, "dim": 16,
              "noise": 0.15, "seed": 1, "shape": None},
    "mnist_idx": {"kind": "mnist_idx", "root": None},
}
METHOD_KEYS = {"name", "lambda", "temperature", "align", "ce_scope"}
ARCH_KEYS = {f.name for f in fields(ArchSpec)}
VARIANT_KEYS = {"name", "arch_stable", "arch_plastic"}


def _line_of(text, path):
    """Best-effort line of the last key in ``path`` within JSON ``text``."""
    if not text:
        return None
    pos = 0
    for key in path:
        if isinstance(key, int):
            continue
        found = text.find(f'"{key}"', pos)
        if found < 0:
            break
        pos = found
    return text.count("\n", 0, pos) + 1 if pos else None


class _Validator:
    def __init__(self, text):
        self.text = text

    def fail(self, message, path):
        raise ConfigError(message, _line_of(self.text, path), ".".join(str(p) for p in path))

    def keys(self, obj, allowed, path):
        if not isinstance(obj, dict):
            self.fail(f"{'.'.join(map(str, path)) or 'config'} must be an object", path)
        for k in obj:
            if k not in allowed:
                self.fail(f"unknown key {k!r} (allowed: {', '.join(sorted(allowed))})", path + [k])

    def number(self, obj, key, path, kind=float, minimum=None, maximum=None, allow_none=False):
        v = obj[key]
        if v is None and allow_none:
            return
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        if kind is int:
            ok = isinstance(v, int) and not isinstance(v, bool)
        if not ok:
            self.fail(f"{key} must be {'an integer' if kind is int else 'a number'}, got {v!r}", path + [key])
        if minimum is not None and v < minimum:
            self.fail(f"{key} must be >= {minimum}, got {v}", path + [key])
        if maximum is not None and v > maximum:
            self.fail(f"{key} must be <= {maximum}, got {v}", path + [key])


def _feature_info(ds):
    if ds["kind"] == "mnist_idx":
        return 10, (1, 28, 28)
    shape = tuple(ds["shape"]) if ds.get("shape") else (ds["dim"],)
    return ds["num_classes"], shape


def _resolve_arch(v, arch, path, num_classes, feat_shape):
    if arch is None or (isinstance(arch, str) and arch.lower() == "none"):
        return None
    in_features = 1
    for s in feat_shape:
        in_features *= s
    image = {"in_channels": feat_shape[0], "input_size": feat_shape[-1]} if len(feat_shape) == 3 else {}
    try:
        if isinstance(arch, str):
            family = arch.split(":")[0].strip().lower()
            over = {"in_features": in_features}
            if family != "mlp":
                over.update(image)
            spec = preset(arch, num_classes, **over)
        elif isinstance(arch, dict):
            v.keys(arch, ARCH_KEYS, path)
            d = {"num_classes": num_classes, "in_features": in_features, **image, **arch}
            if "family" not in d or "depth" not in d or "width" not in d:
                v.fail("architecture objects need family, depth and width", path)
            if d["family"] not in FAMILIES:
                v.fail(f"family must be one of {FAMILIES}", path + ["family"])
            if d.get("penultimate", "gap") not in PENULTIMATE:
                v.fail(f"penultimate must be one of {PENULTIMATE}", path + ["penultimate"])
            spec = ArchSpec.from_dict(d)
        else:
            v.fail("architecture must be a preset string, an object or null", path)
    except (ArchError, TypeError) as e:
        v.fail(str(e), path)
    if spec.family == "resnet" and len(feat_shape) != 3:
        v.fail("resnet architectures need image-shaped data (set dataset.shape)", path)
    return spec.to_dict()


def load_config(path):
    with open(path) as f:
        text = f.read()
    return resolve(text=text)


def resolve(raw=None, text=None):
    """Validate and fill defaults; returns a fully explicit config dict."""
    if text is not None:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e.msg}", e.lineno) from None
    v = _Validator(text)
    raw = copy.deepcopy(raw)
    v.keys(raw, set(DEFAULTS), [])
    cfg = copy.deepcopy(DEFAULTS)
    cfg.update(raw)
    if cfg["schema_version"] != SCHEMA_VERSION:
        v.fail(f"unsupported schema_version {cfg['schema_version']!r}; expected {SCHEMA_VERSION}", ["schema_version"])

    ds = cfg["dataset"]
    v.keys(ds, {"kind"} | set().union(*[set(d) for d in DATASET_KEYS.values()]), ["dataset"])
    kind = ds.get("kind", "synth")
    if kind not in DATASET_KEYS:
        v.fail(f"dataset.kind must be one of {sorted(DATASET_KEYS)}", ["dataset", "kind"])
    v.keys(ds, set(DATASET_KEYS[kind]), ["dataset"])
    cfg["dataset"] = ds = {**DATASET_KEYS[kind], **ds}
    if kind == "synth":
        for k in ("num_classes", "per_class", "test_per_class", "dim"):
            v.number(ds, k, ["dataset"], int, minimum=1)
        v.number(ds, "noise", ["dataset"], minimum=0)
        v.number(ds, "seed", ["dataset"], int)
    num_classes, feat_shape = _feature_info(ds)

    v.number(cfg, "tasks", [], int, minimum=1)
    if num_classes % cfg["tasks"]:
        v.fail(f"{num_classes} classes cannot be split into {cfg['tasks']} tasks", ["tasks"])
    seeds = cfg["order_seeds"]
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = cfg["order_seeds"] = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        v.fail("order_seeds must be a non-empty list of integers", ["order_seeds"])
    v.number(cfg, "seed", [], int, allow_none=True)

    m = cfg["method"]
    if isinstance(m, str):
        m = cfg["method"] = {"name": m}
    v.keys(m, METHOD_KEYS, ["method"])
    if m.get("name") not in METHODS:
        v.fail(f"method.name must be one of {METHODS}", ["method", "name"])
    m.setdefault("lambda", None if m["name"] == "wa" else 1.0)
    m.setdefault("temperature", 2.0)
    m.setdefault("align", True)
    m.setdefault("ce_scope", "new" if m["name"] == "lwf" else "all")
    if m["ce_scope"] not in ("all", "new"):
        v.fail("method.ce_scope must be 'all' or 'new'", ["method", "ce_scope"])
    if m["ce_scope"] == "new" and m["name"] != "lwf":
        v.fail("method.ce_scope 'new' is only supported for lwf", ["method", "ce_scope"])
    v.number(m, "lambda", ["method"], minimum=0, allow_none=True)
    v.number(m, "temperature", ["method"], minimum=1e-12)

    loss_defaults = {f.name: f.default for f in fields(LossConfig)}
    v.keys(cfg["loss"], set(loss_defaults), ["loss"])
    cfg["loss"] = {**loss_defaults, **cfg["loss"]}
    v.number(cfg["loss"], "alpha", ["loss"], minimum=0, maximum=1)
    v.number(cfg["loss"], "temperature", ["loss"], minimum=1e-12)
    for k in ("distill_on_replay", "kd_t2"):
        if not isinstance(cfg["loss"][k], bool):
            v.fail(f"loss.{k} must be true or false", ["loss", k])

    train_defaults = {f.name: f.default for f in fields(TrainConfig) if f.name != "seed"}
    v.keys(cfg["train"], set(train_defaults), ["train"])
    cfg["train"] = {**train_defaults, **cfg["train"]}
    for k in ("epochs_first", "epochs_rest"):
        v.number(cfg["train"], k, ["train"], int, minimum=0)
    v.number(cfg["train"], "batch_size", ["train"], int, minimum=1)
    for k in ("lr0", "momentum", "weight_decay"):
        v.number(cfg["train"], k, ["train"], minimum=0)

    v.keys(cfg["memory"], {"budget"}, ["memory"])
    cfg["memory"] = {"budget": 200, **cfg["memory"]}
    v.number(cfg["memory"], "budget", ["memory"], int, minimum=0)
    if m["name"] in ("er", "icarl", "wa") and cfg["memory"]["budget"] < num_classes:
        v.fail(f"memory budget {cfg['memory']['budget']} cannot hold {num_classes} classes", ["memory", "budget"])

    if cfg["checkpoints"] not in ("none", "final", "every"):
        v.fail("checkpoints must be none, final or every", ["checkpoints"])
    if not isinstance(cfg["output_dir"], str):
        v.fail("output_dir must be a string", ["output_dir"])

    cfg["arch_stable"] = _resolve_arch(v, cfg["arch_stable"], ["arch_stable"], num_classes, feat_shape)
    if cfg["arch_stable"] is None:
        v.fail("arch_stable is required", ["arch_stable"])
    cfg["arch_plastic"] = _resolve_arch(v, cfg["arch_plastic"], ["arch_plastic"], num_classes, feat_shape)

    if cfg["variants"] is not None:
        if not isinstance(cfg["variants"], list) or not cfg["variants"]:
            v.fail("variants must be a non-empty list", ["variants"])
        out = []
        for i, var in enumerate(cfg["variants"]):
            v.keys(var, VARIANT_KEYS, ["variants", i])
            if "arch_stable" not in var:
                v.fail("each variant needs arch_stable", ["variants", i])
            st = _resolve_arch(v, var["arch_stable"], ["variants", i, "arch_stable"], num_classes, feat_shape)
            pl = _resolve_arch(v, var.get("arch_plastic"), ["variants", i, "arch_plastic"], num_classes, feat_shape)
            name = var.get("name") or ArchSpec(**st).label() + ("+" + ArchSpec(**pl).label() if pl else "")
            out.append({"name": name, "arch_stable": st, "arch_plastic": pl})
        cfg["variants"] = out
    return cfg


def config_hash(cfg):
    """Short digest of everything that determines results, excluding seeds and output location."""
    core = {k: v for k, v in cfg.items() if k not in ("order_seeds", "output_dir", "variants", "name")}
    blob = json.dumps(core, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:10]


def single_run_configs(cfg):
    """One fully explicit config per order seed."""
    out = []
    for s in cfg["order_seeds"]:
        c = copy.deepcopy(cfg)
        c["order_seeds"] = [s]
        c["variants"] = None
        out.append(c)
    return out


def arch_label(d):
    return "none" if d is None else ArchSpec(**d).label()
