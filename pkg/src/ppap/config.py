"""Experiment configuration: YAML in, validated :class:`ExperimentConfig` out.

Every key is checked against a schema before anything trains; unknown keys
and bad values raise :class:`ConfigError` carrying the dotted field path
(``optimizer.learning_rate``). Defaults are filled in so the effective config
written next to the results is complete and can be re-run as is.

Layering, lowest first: built-in defaults, the YAML file, ``PPAP_*``
environment variables, command-line flags. ``PPAP_SECTION__KEY=value``
overrides ``section.key`` (the value is parsed as YAML).
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass

import yaml

from .errors import ConfigError
from .harness import METHODS, MethodSpec, RunConfig

PROTOCOLS = ("synthetic", "sequence", "loco")

# section -> key -> default; None marks an optional value
SCHEMA = {
    "protocol": "synthetic",
    "seeds": [0],
    "output": "runs/latest",
    "workers": 1,
    "record_timing": False,
    "save_profiles": True,
    "data": {
        "source": "synthetic",
        "kind": "cluster-split",
        "n_tasks": 2,
        "classes_per_task": 5,
        "n_per_class": 100,
        "spread": 2.0,
        "cluster_std": 0.6,
        "dim": None,  # 2, or 16 for loco
        "rotation_deg": 45.0,
        "noise": None,  # 0.1, or 0.7 for loco
        "cifar10_path": None,
        "cifar100_path": None,
        "n_super": 20,
        "n_fine": 5,
        "n_per_fine": 40,
        "super_spread": 3.0,
        "fine_spread": 1.0,
        "holdouts": "all",
        "split": None,  # 80/20, or 80/16/4 for loco
    },
    "model": {
        "kind": "mlp",
        "hidden": [32, 32],
        "channels": [32, 32, 64, 64],
        "dense": 512,
        "dropout": [0.25, 0.5],
    },
    "optimizer": {
        "name": "adam",
        "learning_rate": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "momentum": 0.9,
    },
    "training": {
        "epochs": 200,
        "epoch_configs": [[20, 20]],
        "batch_size": 32,
        "augment": False,
    },
    "probe": {
        "epochs": 100,
        "patience": 10,
        "learning_rate": 1e-3,
        "batch_size": 256,
    },
    "methods": [{"name": "none"}],
}

METHOD_KEYS = {
    "none": {},
    "scratch": {},
    "ppap": {"r": 0.03, "k": 25.0, "combine": "min", "spike_trigger": "positive", "default_score": 1.0},
    "si": {"c": 0.1, "xi": 1e-3},
    "ewc": {"lam": 100.0, "fisher_samples": 2000},
}
STRENGTH_KEY = {"ppap": "r", "si": "c", "ewc": "lam"}


@dataclass
class ExperimentConfig:
    """Validated, defaults-filled configuration (``raw`` is the effective mapping)."""

    raw: dict

    def __getattr__(self, name):
        try:
            return self.__dict__["raw"][name]
        except KeyError:
            raise AttributeError(name) from None

    def method_specs(self):
        """Expand strength lists into one :class:`MethodSpec` per value."""
        out = []
        for i, m in enumerate(self.raw["methods"]):
            m = dict(m)
            name = m.pop("name")
            key = STRENGTH_KEY.get(name)
            values = m.pop(key) if key else None
            for v in (values if isinstance(values, list) else [values]):
                kw = dict(m)
                if key:
                    kw[key] = v
                try:
                    out.append(MethodSpec(name, **kw))
                except ConfigError as e:
                    raise ConfigError(e.message, f"methods[{i}].{e.path or key}") from None
        return out

    def run_config(self, model=None, seed=None):
        o, t, p = self.raw["optimizer"], self.raw["training"], self.raw["probe"]
        return RunConfig(
            model=model,
            optimizer=o["name"],
            lr=o["learning_rate"],
            beta1=o["beta1"],
            beta2=o["beta2"],
            eps=o["eps"],
            momentum=o["momentum"],
            augment=t["augment"],
            probe_epochs=p["epochs"],
            probe_patience=p["patience"],
            probe_lr=p["learning_rate"],
            probe_batch_size=p["batch_size"],
            seed=self.raw["seeds"][0] if seed is None else seed,
        )

    def to_yaml(self):
        return yaml.safe_dump(self.raw, sort_keys=False, default_flow_style=None)


def _merge(schema, given, path):
    if not isinstance(given, dict):
        raise ConfigError(f"expected a mapping, got {type(given).__name__}", path or "<root>")
    out = {}
    for key in given:
        if key not in schema:
            raise ConfigError(f"unknown key {key!r}", f"{path}.{key}" if path else key)
    for key, default in schema.items():
        sub = f"{path}.{key}" if path else key
        if isinstance(default, dict):
            out[key] = _merge(default, given.get(key, {}) or {}, sub)
        else:
            out[key] = copy.deepcopy(given.get(key, default))
    return out


def _num(v, path, lo=None, hi=None, integer=False, strict_lo=False):
    ok_type = isinstance(v, int) if integer else isinstance(v, (int, float))
    if isinstance(v, bool) or not ok_type:
        raise ConfigError(f"expected {'an integer' if integer else 'a number'}, got {v!r}", path)
    if lo is not None and (v <= lo if strict_lo else v < lo):
        raise ConfigError(f"must be {'>' if strict_lo else '>='} {lo}, got {v}", path)
    if hi is not None and v > hi:
        raise ConfigError(f"must be <= {hi}, got {v}", path)
    return v


def _choice(v, options, path):
    if v not in options:
        raise ConfigError(f"{v!r} is not one of {list(options)}", path)
    return v


def _int_list(v, path, lo=0, min_len=1):
    if not isinstance(v, list) or len(v) < min_len:
        raise ConfigError(f"expected a list of at least {min_len} integers", path)
    for i, x in enumerate(v):
        _num(x, f"{path}[{i}]", lo=lo, integer=True)
    return v


def _validate_methods(methods):
    if not isinstance(methods, list) or not methods:
        raise ConfigError("expected a non-empty list of methods", "methods")
    out = []
    for i, m in enumerate(methods):
        path = f"methods[{i}]"
        if isinstance(m, str):
            m = {"name": m}
        if not isinstance(m, dict) or "name" not in m:
            raise ConfigError("each method needs a 'name'", path)
        name = _choice(m["name"], METHODS, f"{path}.name")
        schema = {"name": name, **METHOD_KEYS[name]}
        full = _merge(schema, m, path)
        key = STRENGTH_KEY.get(name)
        if key:
            vals = full[key] if isinstance(full[key], list) else [full[key]]
            if not vals:
                raise ConfigError("empty strength list", f"{path}.{key}")
            for j, v in enumerate(vals):
                _num(v, f"{path}.{key}[{j}]" if isinstance(full[key], list) else f"{path}.{key}", lo=0)
        out.append(full)
    # fail early on anything MethodSpec itself rejects
    cfg = ExperimentConfig({"methods": out})
    cfg.method_specs()
    return out


def validate(raw):
    """Fill defaults into ``raw`` and check every field; returns an :class:`ExperimentConfig`."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", "<root>")
    base = {k: v for k, v in SCHEMA.items() if k != "methods"}
    cfg = _merge(base, {k: v for k, v in raw.items() if k != "methods"}, "")
    cfg["methods"] = _validate_methods(raw.get("methods", SCHEMA["methods"]))

    _choice(cfg["protocol"], PROTOCOLS, "protocol")
    seeds = cfg["seeds"]
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = cfg["seeds"] = [seeds]
    _int_list(seeds, "seeds")
    _num(cfg["workers"], "workers", lo=1, integer=True)
    if not isinstance(cfg["output"], str) or not cfg["output"]:
        raise ConfigError("expected a non-empty path", "output")
    for key in ("record_timing", "save_profiles"):
        if not isinstance(cfg[key], bool):
            raise ConfigError("expected true or false", key)

    d = cfg["data"]
    _choice(d["source"], ("synthetic", "cifar"), "data.source")
    _choice(d["kind"], ("cluster-split", "moons-rotation"), "data.kind")
    loco = cfg["protocol"] == "loco"
    if d["dim"] is None:
        d["dim"] = 16 if loco else 2
    if d["noise"] is None:
        d["noise"] = 0.7 if loco else 0.1
    for key in ("n_tasks", "classes_per_task", "n_per_class", "dim", "n_super", "n_fine", "n_per_fine"):
        _num(d[key], f"data.{key}", lo=1, integer=True)
    for key in ("spread", "cluster_std", "noise", "super_spread", "fine_spread", "rotation_deg"):
        _num(d[key], f"data.{key}", lo=0)
    if d["source"] == "cifar":
        need = ("cifar100_path",) if cfg["protocol"] == "loco" else ("cifar10_path", "cifar100_path")
        for key in need:
            if not isinstance(d[key], str):
                raise ConfigError("path required when data.source is cifar", f"data.{key}")
    if cfg["protocol"] == "sequence" and d["source"] != "cifar":
        raise ConfigError("the sequence protocol reads CIFAR; use protocol: synthetic for generated tasks",
                          "data.source")
    if cfg["protocol"] == "synthetic" and d["source"] != "synthetic":
        raise ConfigError("the synthetic protocol generates its own data", "data.source")
    if d["holdouts"] != "all":
        _int_list(d["holdouts"], "data.holdouts")
        for i, h in enumerate(d["holdouts"]):
            if h >= d["n_super"]:
                raise ConfigError(f"holdout {h} >= n_super {d['n_super']}", f"data.holdouts[{i}]")
    if d["split"] is None:
        d["split"] = [0.8, 0.16, 0.04] if cfg["protocol"] == "loco" else [0.8, 0.2]
    split = d["split"]
    if not isinstance(split, list) or len(split) != (3 if cfg["protocol"] == "loco" else 2):
        raise ConfigError("expected [train, val] fractions ([train, val, test] for loco)", "data.split")
    for i, f in enumerate(split):
        _num(f, f"data.split[{i}]", lo=0, strict_lo=True)
    if abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError(f"fractions sum to {sum(split)}, not 1", "data.split")

    m = cfg["model"]
    _choice(m["kind"], ("mlp", "cnn"), "model.kind")
    _int_list(m["hidden"], "model.hidden", lo=1)
    _int_list(m["channels"], "model.channels", lo=1)
    if len(m["channels"]) != 4:
        raise ConfigError("the multi-head CNN has exactly 4 conv layers", "model.channels")
    _num(m["dense"], "model.dense", lo=1, integer=True)
    if not isinstance(m["dropout"], list) or len(m["dropout"]) != 2:
        raise ConfigError("expected two dropout rates", "model.dropout")
    for i, p in enumerate(m["dropout"]):
        _num(p, f"model.dropout[{i}]", lo=0, hi=0.99)

    o = cfg["optimizer"]
    _choice(o["name"], ("adam", "sgd"), "optimizer.name")
    _num(o["learning_rate"], "optimizer.learning_rate", lo=0, strict_lo=True)
    for key in ("beta1", "beta2", "momentum"):
        _num(o[key], f"optimizer.{key}", lo=0, hi=0.999999)
    _num(o["eps"], "optimizer.eps", lo=0, strict_lo=True)

    t = cfg["training"]
    _num(t["epochs"], "training.epochs", lo=1, integer=True)
    _num(t["batch_size"], "training.batch_size", lo=1, integer=True)
    if not isinstance(t["augment"], bool):
        raise ConfigError("expected true or false", "training.augment")
    ec = t["epoch_configs"]
    if not isinstance(ec, list) or not ec:
        raise ConfigError("expected a list of [pretrain, finetune] epoch pairs", "training.epoch_configs")
    for i, pair in enumerate(ec):
        _int_list(pair, f"training.epoch_configs[{i}]", lo=1, min_len=2)
        if len(pair) != 2:
            raise ConfigError("expected [pretrain, finetune]", f"training.epoch_configs[{i}]")

    p = cfg["probe"]
    _num(p["epochs"], "probe.epochs", lo=1, integer=True)
    _num(p["patience"], "probe.patience", lo=0, integer=True)
    _num(p["learning_rate"], "probe.learning_rate", lo=0, strict_lo=True)
    _num(p["batch_size"], "probe.batch_size", lo=1, integer=True)

    if cfg["protocol"] == "loco":
        if any(x["name"] == "scratch" for x in cfg["methods"]):
            raise ConfigError("'scratch' is not defined for LOCO", "methods")
        ppap = [(x["k"], x["spike_trigger"]) for x in cfg["methods"] if x["name"] == "ppap"]
        if len(set(ppap)) > 1:
            raise ConfigError("PPAP entries share one pretraining profile, so k and spike_trigger must agree",
                              "methods")
    return ExperimentConfig(cfg)


def env_overrides(raw, environ=None):
    """Apply ``PPAP_SECTION__KEY`` variables on top of ``raw`` (a new dict is returned).

    ``PPAP_WORKERS``, ``PPAP_OUT`` and ``PPAP_SEED_OVERRIDE`` mirror the CLI
    flags and are handled by the caller.
    """
    environ = os.environ if environ is None else environ
    raw = copy.deepcopy(raw or {})
    reserved = {"PPAP_WORKERS", "PPAP_OUT", "PPAP_SEED_OVERRIDE", "PPAP_CONFIG"}
    for var in sorted(environ):
        if not var.startswith("PPAP_") or var in reserved:
            continue
        parts = [p.lower() for p in var[5:].split("__")]
        value = yaml.safe_load(environ[var])
        node = raw
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"{var} addresses a non-section", ".".join(parts))
            node = nxt
        node[parts[-1]] = value
    return raw


def load_config(path, environ=None, overrides=None):
    """Read, overlay environment and flag overrides, and validate."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", str(path)) from None
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}", str(path)) from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", "<root>")
    raw = env_overrides(raw, environ)
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    return validate(raw)
