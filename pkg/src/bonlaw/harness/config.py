"""Experiment configuration: TOML file, JSON-schema validation, typed sections.

Everything is validated and converted to typed objects before a recipe
starts, so a bad config never leaves partial output behind.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

from ..prm import FailurePopulationConfig, TrainConfig
from ..selection import CurveRequest, Strategy
from ..synth import FeatureUserSpec, PopulationSpec, RewardSpec
from .io import json_bytes, sha256_hex

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

COMMANDS = (
    "simulate-oracle",
    "simulate-correlation",
    "validate-unified-law",
    "diagnose",
    "train-prm",
    "failure-experiment",
    "strategies",
    "ingest-check",
)
U64_MAX = 2**64 - 1


class ConfigError(ValueError):
    """Invalid configuration (CLI exit code 2)."""


def _num(lo=None, hi=None, exclusive_lo=False):
    s: dict[str, Any] = {"type": "number"}
    if lo is not None:
        s["exclusiveMinimum" if exclusive_lo else "minimum"] = lo
    if hi is not None:
        s["maximum"] = hi
    return s


def _int(lo=None, hi=None):
    s: dict[str, Any] = {"type": "integer"}
    if lo is not None:
        s["minimum"] = lo
    if hi is not None:
        s["maximum"] = hi
    return s


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props, "required": list(required)}


_FEATURE_USER = {
    "n_queries": _int(2),
    "candidates_per_query": _int(2),
    "dim": _int(1),
    "label_mean": _num(0, 1),
    "label_std": _num(0),
    "signal": _num(0, 1),
    "query_effect": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
}

_TRAIN = {
    "loss_kind": {"enum": ["mse", "nll"]},
    "lam": _num(0),
    "tau": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "margin": _num(0, exclusive_lo=True),
    "learning_rate": _num(0, exclusive_lo=True),
    "epochs": _int(1),
    "batch_size": _int(1),
    "patience": _int(1),
    "warmup_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "grad_clip": _num(0, exclusive_lo=True),
    "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "hidden": _int(1),
    "init_scale": _num(0),
    "head_scale": _num(0),
    "init_var": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
    "seed": _int(0, U64_MAX),
}

SCHEMA: dict = _obj(
    {
        "seed": _int(0, U64_MAX),
        "threads": _int(1),
        "out": {"type": "string", "minLength": 1},
        "population": _obj(
            {
                "n_users": _int(1),
                "queries_per_user": _int(1),
                "candidates_per_query": _int(1),
                "reward_mean": _num(),
                "reward_sigma": _num(0),
                "clip_to_unit": {"type": "boolean"},
                "collapse_fraction": _num(0, 1),
                "hacking_fraction": _num(0, 1),
                "rho_plus": _num(0, 1, exclusive_lo=True),
                "rho_minus": {"type": "number", "minimum": -1, "exclusiveMaximum": 0},
                "rho_collapsed": _num(-1, 1),
                "pred_sigma": _num(0),
                "collapsed_pred_scale": _num(0),
                "rho_spread": _num(0),
            }
        ),
        "curve": _obj(
            {
                "n_grid": {"type": "array", "items": _int(1), "minItems": 2},
                "trials": _int(1),
                "backend": {"enum": ["auto", "python", "cython"]},
            }
        ),
        "correlation": _obj(
            {"rhos": {"type": "array", "items": _num(-1, 1), "minItems": 1}}
        ),
        "unified": _obj(
            {
                "threshold": _num(-1, 1),
                "mode": {"enum": ["pooled", "averaged"]},
                "method": {"enum": ["pearson", "spearman"]},
            }
        ),
        "diagnose": _obj(
            {
                "input": {"type": "string", "minLength": 1},
                "threshold": _num(-1, 1),
                "mode": {"enum": ["pooled", "averaged"]},
                "method": {"enum": ["pearson", "spearman"]},
                "bins": _int(3),
            }
        ),
        "feature_users": _obj({"n_users": _int(1), **_FEATURE_USER}),
        "train": _obj(_TRAIN),
        "prm": _obj(
            {"input": {"type": "string", "minLength": 1}, "eval_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}}
        ),
        "failure": _obj(
            {
                "n_low": _int(0),
                "n_normal": _int(0),
                "eval_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "threshold": _num(-1, 1),
                "low": _obj(_FEATURE_USER),
                "normal": _obj(_FEATURE_USER),
                "train": _obj({k: v for k, v in _TRAIN.items() if k != "loss_kind"}),
            }
        ),
        "strategies": _obj(
            {
                "list": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "input": {"type": "string", "minLength": 1},
                "eval_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            }
        ),
        "ingest": _obj({"input": {"type": "string", "minLength": 1}}),
    }
)

_BASE_POPULATION = {
    "n_users": 200,
    "queries_per_user": 50,
    "candidates_per_query": 30,
    "reward_mean": 0.3,
    "reward_sigma": 0.1,
    "clip_to_unit": True,
    "collapse_fraction": 0.0,
    "hacking_fraction": 0.0,
    "rho_plus": 0.5,
    "rho_minus": -0.25,
    "rho_collapsed": 0.0,
    "collapsed_pred_scale": 0.01,
    "rho_spread": 0.0,
}
_BASE_CURVE = {"n_grid": [1, 5, 10, 15, 20, 30], "trials": 20, "backend": "auto"}
_FAILURE_TRAIN = {
    "learning_rate": 0.02,
    "momentum": 0.9,
    "grad_clip": 1.0,
    "epochs": 50,
    "head_scale": 4.0,
}


def _failure_defaults() -> dict:
    pop = FailurePopulationConfig()
    spec_keys = list(_FEATURE_USER)
    return {
        "n_low": pop.n_low,
        "n_normal": pop.n_normal,
        "eval_fraction": pop.eval_fraction,
        "threshold": pop.threshold,
        "low": {k: getattr(pop.low, k) for k in spec_keys},
        "normal": {k: getattr(pop.normal, k) for k in spec_keys},
        "train": dict(_FAILURE_TRAIN),
    }


DEFAULTS: dict[str, dict] = {
    "simulate-oracle": {"population": _BASE_POPULATION, "curve": _BASE_CURVE},
    "simulate-correlation": {
        "population": {**_BASE_POPULATION, "n_users": 100, "queries_per_user": 40},
        "curve": _BASE_CURVE,
        "correlation": {"rhos": [-0.5, 0.0, 0.5, 0.9]},
    },
    "validate-unified-law": {
        "population": {**_BASE_POPULATION, "collapse_fraction": 0.2, "hacking_fraction": 0.3},
        "curve": _BASE_CURVE,
        "unified": {"threshold": 0.1, "mode": "pooled", "method": "pearson"},
    },
    "diagnose": {
        "population": {**_BASE_POPULATION, "collapse_fraction": 0.2, "hacking_fraction": 0.3},
        "diagnose": {"threshold": 0.1, "mode": "pooled", "method": "pearson", "bins": 10},
    },
    "train-prm": {
        "feature_users": {"n_users": 4, "n_queries": 40, "candidates_per_query": 10, "dim": 16,
                          "label_mean": 0.4, "label_std": 0.15, "signal": 0.9, "query_effect": 0.5},
        "train": {"loss_kind": "nll", "epochs": 60, "momentum": 0.9, "learning_rate": 0.02, "grad_clip": 1.0},
        "prm": {"eval_fraction": 0.3},
    },
    "failure-experiment": {"failure": _failure_defaults()},
    "strategies": {
        "feature_users": {"n_users": 8, "n_queries": 50, "candidates_per_query": 16, "dim": 16,
                          "label_mean": 0.4, "label_std": 0.15, "signal": 0.7, "query_effect": 0.5},
        "train": {"loss_kind": "nll", "epochs": 60, "momentum": 0.9, "learning_rate": 0.02, "grad_clip": 1.0},
        "curve": {"n_grid": [1, 2, 4, 8, 16], "trials": 20, "backend": "auto"},
        "strategies": {
            "list": ["oracle", "random", "mean", "lcb:0.5", "ucb:0.5", "varfilter:0.2", "snr"],
            "eval_fraction": 0.3,
        },
    },
    "ingest-check": {"ingest": {}},
}

# sections each command reads; anything else in the file is rejected
SECTIONS: dict[str, tuple[str, ...]] = {
    "simulate-oracle": ("population", "curve"),
    "simulate-correlation": ("population", "curve", "correlation"),
    "validate-unified-law": ("population", "curve", "unified"),
    "diagnose": ("population", "diagnose"),
    "train-prm": ("feature_users", "train", "prm"),
    "failure-experiment": ("failure",),
    "strategies": ("feature_users", "train", "curve", "strategies"),
    "ingest-check": ("ingest",),
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_toml(path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None


def validate_raw(raw: dict) -> None:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None


@dataclass
class ExperimentConfig:
    """A resolved, validated configuration for one command."""

    command: str
    seed: int
    sections: dict
    out: str | None = None
    threads: int = 1
    base_dir: Path = field(default_factory=Path.cwd)

    # typed views, filled by resolve()
    population: PopulationSpec | None = None
    curve: CurveRequest | None = None
    backend: str | None = None
    train: TrainConfig | None = None
    feature_user: FeatureUserSpec | None = None
    n_feature_users: int = 0
    failure: FailurePopulationConfig | None = None
    strategies: tuple[Strategy, ...] = ()

    def canonical(self) -> dict:
        """Everything that determines the outputs (no thread count, no output dir)."""
        return {"command": self.command, "seed": self.seed, **self.sections}

    def config_hash(self) -> str:
        return sha256_hex(json_bytes(self.canonical()))

    def input_path(self, section: str) -> Path | None:
        p = self.sections.get(section, {}).get("input")
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


def _population(sec: dict, seed: int) -> PopulationSpec:
    return PopulationSpec(
        n_users=sec["n_users"],
        queries_per_user=sec["queries_per_user"],
        candidates_per_query=sec["candidates_per_query"],
        base_reward=RewardSpec(sec["reward_mean"], sec["reward_sigma"], sec["clip_to_unit"]),
        collapse_fraction=sec["collapse_fraction"],
        hacking_fraction=sec["hacking_fraction"],
        rho_plus=sec["rho_plus"],
        rho_minus=sec["rho_minus"],
        rho_collapsed=sec["rho_collapsed"],
        seed=seed,
        pred_sigma=sec.get("pred_sigma"),
        collapsed_pred_scale=sec["collapsed_pred_scale"],
        rho_spread=sec["rho_spread"],
    )


def _feature_spec(sec: dict) -> FeatureUserSpec:
    return FeatureUserSpec(**{k: sec[k] for k in _FEATURE_USER if k in sec})


def _train(sec: dict, seed: int, loss_kind: str | None = None) -> TrainConfig:
    kw = dict(sec)
    kw.setdefault("seed", seed)
    if loss_kind is not None:
        kw["loss_kind"] = loss_kind
    return TrainConfig(**kw)


def resolve(
    command: str,
    raw: dict | None = None,
    seed: int | None = None,
    out: str | None = None,
    threads: int | None = None,
    base_dir: Path | None = None,
) -> ExperimentConfig:
    """Merge defaults, file contents and CLI overrides; validate; build typed objects."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    raw = dict(raw or {})
    validate_raw(raw)
    allowed = set(SECTIONS[command])
    extra = sorted(k for k in raw if k not in ("seed", "threads", "out") and k not in allowed)
    if extra:
        raise ConfigError(f"section(s) {', '.join(extra)} not used by {command}")
    if seed is not None and not 0 <= seed <= U64_MAX:
        raise ConfigError(f"seed must lie in [0, 2^64 - 1], got {seed}")
    if threads is not None and threads < 1:
        raise ConfigError("threads must be >= 1")

    merged = _merge(DEFAULTS[command], {k: v for k, v in raw.items() if k in allowed})
    cfg = ExperimentConfig(
        command=command,
        seed=int(seed if seed is not None else raw.get("seed", 0)),
        sections=merged,
        out=out if out is not None else raw.get("out"),
        threads=int(threads if threads is not None else raw.get("threads", 1)),
        base_dir=base_dir or Path.cwd(),
    )
    try:
        _build(cfg)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"config error: {exc}") from None
    return cfg


def _build(cfg: ExperimentConfig) -> None:
    s = cfg.sections
    if "population" in s:
        cfg.population = _population(s["population"], cfg.seed)
    if "curve" in s:
        c = s["curve"]
        cfg.curve = CurveRequest(tuple(c["n_grid"]), c["trials"], cfg.seed)
        cfg.backend = None if c["backend"] == "auto" else c["backend"]
        if cfg.population is not None and c["n_grid"][-1] > cfg.population.candidates_per_query:
            raise ConfigError(
                f"curve.n_grid max {c['n_grid'][-1]} exceeds population.candidates_per_query "
                f"{cfg.population.candidates_per_query}"
            )
        if cfg.backend == "cython":
            from .. import kernels

            if not kernels.compiled_available():
                raise ConfigError("curve.backend = 'cython' but the compiled kernel is not built")
    if "train" in s:
        cfg.train = _train(s["train"], cfg.seed)
    if "feature_users" in s:
        fu = dict(s["feature_users"])
        cfg.n_feature_users = fu.pop("n_users")
        cfg.feature_user = _feature_spec(fu)
    if "failure" in s:
        f = s["failure"]
        cfg.failure = FailurePopulationConfig(
            n_low=f["n_low"],
            n_normal=f["n_normal"],
            low=_feature_spec(f["low"]),
            normal=_feature_spec(f["normal"]),
            eval_fraction=f["eval_fraction"],
            threshold=f["threshold"],
            seed=cfg.seed,
        )
        _train(f["train"], cfg.seed, "mse")
    if "strategies" in s:
        st = s["strategies"]
        cfg.strategies = tuple(Strategy.parse(t) for t in st["list"])
        if cfg.curve is not None and cfg.feature_user is not None and "input" not in st:
            fu = cfg.feature_user
            if cfg.curve.n_grid[-1] > fu.candidates_per_query:
                raise ConfigError(
                    f"curve.n_grid max {cfg.curve.n_grid[-1]} exceeds feature_users.candidates_per_query"
                )
    if cfg.command == "ingest-check" and "input" not in s.get("ingest", {}):
        raise ConfigError("ingest-check needs [ingest] input = <path>")


def failure_train_configs(cfg: ExperimentConfig) -> tuple[TrainConfig, TrainConfig]:
    sec = cfg.sections["failure"]["train"]
    return _train(sec, cfg.seed, "mse"), _train(sec, cfg.seed, "nll")
