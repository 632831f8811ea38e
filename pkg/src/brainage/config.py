"""Declarative run configuration: defaults, JSON file, then CLI overrides."""

import copy
import hashlib
import json
import os
from pathlib import Path

from .models.types import REGIMES, OptimizerSettings

SCHEMA_VERSION = 1


class ConfigFieldError(ValueError):
    def __init__(self, field, message):
        super().__init__(f"config field {field!r}: {message}")
        self.field = field


OPTIMIZER_DEFAULTS = {
    "step_size": 1e-2,
    "max_step_size": 1e3,
    "max_halvings": 30,
    "penalty_weight": 10.0,
    "multiplier_interval": 10,
    "max_iter": 5000,
    "tol": 1e-6,
    "constraint_tol": 1e-4,
    "activity_steps": 5,
    "floor": 1e-8,
}

SYNTH_BASE_DEFAULTS = {
    "p": 50,
    "k": 5,
    "n_subjects": 25,
    "n_obs_per_subject": 100,
    "activity_mean": 2.5,
    "activity_std": 1.0,
    "beta_range": [0.0, 10.0],
    "subject_noise": 1.0,
    "age_noise": 1.0,
}

DEFAULTS = {
    "synth-bench": {
        "schema_version": SCHEMA_VERSION,
        "axis": "vary_n",
        "grid": [25, 50, 100, 200, 400],
        "regimes": ["fa", "pca", "nnpca", "mcf", "mha"],
        "repeats": 20,
        "seed": 0,
        "n_held_out": 100,
        "n_jobs": 1,
        "base": SYNTH_BASE_DEFAULTS,
        "optimizer": OPTIMIZER_DEFAULTS,
    },
    "fit": {
        "schema_version": SCHEMA_VERSION,
        "format": "csv_dir",
        "regime": "mha",
        "k": 5,
        "k_grid": None,
        "split": [0.6, 0.2, 0.2],
        "seed": 0,
        "use_intercept": True,
        "bootstrap": {"subset_size": 30, "n_bootstrap": 1000},
        "optimizer": OPTIMIZER_DEFAULTS,
    },
    "transfer": {
        "schema_version": SCHEMA_VERSION,
        "format": "csv_dir",
        "seed": 0,
        "dataset": None,
        "bootstrap": {"subset_size": 30, "n_bootstrap": 1000},
    },
    "predict": {"schema_version": SCHEMA_VERSION, "format": "csv_dir"},
    "synth-cohort": {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "base": SYNTH_BASE_DEFAULTS,
    },
}


def _merge(base, override, prefix=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigFieldError(name, "unknown field")
        if isinstance(base[key], dict) and base[key] is not None:
            if not isinstance(value, dict):
                raise ConfigFieldError(name, "expected an object")
            out[key] = _merge(base[key], value, prefix=name + ".")
        else:
            out[key] = value
    return out


def load_config(command, path=None, overrides=None):
    """Resolved configuration for ``command``.

    Flags in ``overrides`` (``None`` values ignored) win over the file, which
    wins over the defaults.
    """
    cfg = copy.deepcopy(DEFAULTS[command])
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigFieldError("--config", f"file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigFieldError("--config", f"invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigFieldError("--config", "top level must be an object")
        cfg = _merge(cfg, doc)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    validate(command, cfg)
    return cfg


def _require(cond, field, message):
    if not cond:
        raise ConfigFieldError(field, message)


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _check_optimizer(opt):
    for key in ("max_halvings", "multiplier_interval", "max_iter", "activity_steps"):
        _require(_is_int(opt[key]) and opt[key] >= 1, f"optimizer.{key}", "must be an integer >= 1")
    for key in ("step_size", "max_step_size", "penalty_weight", "tol", "constraint_tol", "floor"):
        _require(isinstance(opt[key], (int, float)) and opt[key] > 0, f"optimizer.{key}", "must be positive")


def _check_regime(value, field):
    _require(isinstance(value, str) and value.upper() in REGIMES, field, f"must be one of {[r.lower() for r in REGIMES]}")


def _check_base(base):
    for key in ("p", "k", "n_subjects", "n_obs_per_subject"):
        _require(_is_int(base[key]) and base[key] >= 1, f"base.{key}", "must be a positive integer")
    _require(base["k"] < base["p"], "base.k", "must be smaller than base.p")
    for key in ("activity_std", "subject_noise", "age_noise"):
        _require(isinstance(base[key], (int, float)) and base[key] > 0, f"base.{key}", "must be positive")
    br = base["beta_range"]
    _require(isinstance(br, (list, tuple)) and len(br) == 2 and br[0] <= br[1], "base.beta_range", "must be [low, high]")


def validate(command, cfg):
    _require(cfg.get("schema_version") == SCHEMA_VERSION, "schema_version", f"must be {SCHEMA_VERSION}")
    if "seed" in cfg:
        _require(_is_int(cfg["seed"]) and 0 <= cfg["seed"] < 2 ** 64, "seed", "must be an unsigned 64-bit integer")
    if "optimizer" in cfg:
        _check_optimizer(cfg["optimizer"])
    if "base" in cfg:
        _check_base(cfg["base"])
    if "bootstrap" in cfg:
        bs = cfg["bootstrap"]
        _require(_is_int(bs["subset_size"]) and bs["subset_size"] >= 1, "bootstrap.subset_size", "must be a positive integer")
        _require(_is_int(bs["n_bootstrap"]) and bs["n_bootstrap"] >= 1, "bootstrap.n_bootstrap", "must be a positive integer")
    if "format" in cfg:
        _require(cfg["format"] in ("csv_dir", "single_table"), "format", "must be csv_dir or single_table")
    if command == "synth-bench":
        _require(cfg["axis"] in ("vary_n", "vary_N"), "axis", "must be vary_n or vary_N")
        _require(isinstance(cfg["grid"], list) and cfg["grid"], "grid", "must be a non-empty list")
        _require(all(_is_int(v) and v >= 1 for v in cfg["grid"]), "grid", "entries must be positive integers")
        if cfg["axis"] == "vary_n":
            _require(all(v >= 2 for v in cfg["grid"]), "grid", "observation counts must be >= 2")
        _require(isinstance(cfg["regimes"], list) and cfg["regimes"], "regimes", "must be a non-empty list")
        for i, r in enumerate(cfg["regimes"]):
            _check_regime(r, f"regimes[{i}]")
        _require(_is_int(cfg["repeats"]) and cfg["repeats"] >= 1, "repeats", "must be an integer >= 1")
        _require(_is_int(cfg["n_held_out"]) and cfg["n_held_out"] >= 1, "n_held_out", "must be a positive integer")
        _require(_is_int(cfg["n_jobs"]) and cfg["n_jobs"] != 0, "n_jobs", "must be a non-zero integer")
    if command == "fit":
        _check_regime(cfg["regime"], "regime")
        if cfg["k_grid"] is not None:
            kg = cfg["k_grid"]
            _require(isinstance(kg, list) and kg and all(_is_int(k) and k >= 1 for k in kg), "k_grid", "must be a list of positive integers")
        else:
            _require(_is_int(cfg["k"]) and cfg["k"] >= 1, "k", "must be a positive integer")
        sp = cfg["split"]
        _require(isinstance(sp, list) and len(sp) == 3 and all(isinstance(f, (int, float)) and f > 0 for f in sp), "split", "must be three positive fractions")
        _require(abs(sum(sp) - 1.0) <= 1e-9, "split", "fractions must sum to 1")
        _require(isinstance(cfg["use_intercept"], bool), "use_intercept", "must be true or false")


def optimizer_settings(cfg):
    return OptimizerSettings(**cfg["optimizer"])


def parse_k_grid(text):
    """``"2..10"`` or ``"2,3,5"`` -> list of ints."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigFieldError("--k-grid", f"expected a..b or a comma list, got {text!r}") from None


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def hash_config(cfg):
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def hash_path(path):
    """SHA-256 over a file, or over every file under a directory (sorted relative paths)."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_file():
        h.update(path.read_bytes())
        return h.hexdigest()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = Path(root) / name
            rel = full.relative_to(path).as_posix()
            h.update(rel.encode() + b"\0")
            h.update(full.read_bytes())
            h.update(b"\0")
    return h.hexdigest()
