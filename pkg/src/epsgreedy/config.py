"""JSON run configuration: strict parsing, defaults, canonical hashing, presets.

A configuration file is a JSON object::

    {
      "covariates": {"kind": "truncated_normal", "dim": 3, "mean": 0, "scale": 1,
                     "lower": -10, "upper": 10},
      "reward": {"phi0": {"kind": "linear", "beta": [0.3, -0.1, 0.7]},
                 "phi1": {"kind": "linear", "beta": [0.8, 0.5, -0.4]},
                 "sigma0": 0.1, "sigma1": 0.1},
      "policy": {"epsilon": {"kind": "log_over_sqrt", "k": 0.1, "floor": 0.0, "ceiling": 1.0},
                 "T0": 20, "estimator": "OLS"},
      "T": 2000, "reps": 1000, "base_seed": 20190501
    }

Unknown keys and wrongly typed values are rejected with a
:class:`~epsgreedy.errors.ConfigError` naming the dotted field path. Omitted
fields take the documented defaults; :meth:`RunConfig.to_dict` returns the
fully expanded effective configuration, which is what gets hashed and echoed
into outputs. A ``report.json`` written by the CLI is itself accepted: its
``"config"`` member is used.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .env import CovariateSpec, RewardFunction, RewardSpec
from .errors import ConfigError
from .experiment import ExperimentConfig
from .policy import EpsilonSchedule, PolicyConfig
from .value import KernelConfig

__all__ = ["ReplaySettings", "RunConfig", "parse_config", "load_config", "config_hash",
           "list_presets", "preset_path", "canonical_json"]

REWARD_MODES = ("auto", "binary", "continuous")


@dataclass(frozen=True)
class ReplaySettings:
    """Synthetic-log parameters used by the replay command."""

    n: int = 50_000
    p: float = 0.5
    reward_mode: str = "auto"

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("must be >= 1", "replay.n")
        if not 0.0 < self.p < 1.0:
            raise ConfigError("must lie in (0, 1)", "replay.p")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError(f"must be one of {', '.join(REWARD_MODES)}", "replay.reward_mode")

    def to_dict(self) -> dict:
        return {"n": self.n, "p": self.p, "reward_mode": self.reward_mode}


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentConfig
    replay: ReplaySettings = field(default_factory=ReplaySettings)

    def to_dict(self) -> dict:
        out = self.experiment.to_dict()
        out["replay"] = self.replay.to_dict()
        return out

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical (sorted-key, compact) JSON encoding."""
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


# --- strict field readers -------------------------------------------------

def _obj(d: Any, path: str, allowed: set[str]) -> dict:
    if not isinstance(d, dict):
        raise ConfigError("must be a JSON object", path or "<root>")
    extra = sorted(set(d) - allowed)
    if extra:
        name = f"{path}.{extra[0]}" if path else extra[0]
        raise ConfigError("unknown field", name)
    return d


def _num(d: dict, key: str, path: str, default: float | None = None) -> float:
    if key not in d:
        if default is None:
            raise ConfigError("required field is missing", path)
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"must be a number, got {type(v).__name__}", path)
    return float(v)


def _int(d: dict, key: str, path: str, default: int | None = None) -> int:
    if key not in d:
        if default is None:
            raise ConfigError("required field is missing", path)
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise ConfigError("must be an integer", path)
    return int(v)


def _str(d: dict, key: str, path: str, default: str | None = None) -> str:
    if key not in d:
        if default is None:
            raise ConfigError("required field is missing", path)
        return default
    v = d[key]
    if not isinstance(v, str):
        raise ConfigError("must be a string", path)
    return v


def _num_list(d: dict, key: str, path: str, integer: bool = False) -> list:
    v = d.get(key)
    if not isinstance(v, list):
        raise ConfigError("must be a list", path)
    out = []
    for i, item in enumerate(v):
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise ConfigError("must be a number", f"{path}[{i}]")
        if integer and int(item) != item:
            raise ConfigError("must be an integer", f"{path}[{i}]")
        out.append(int(item) if integer else float(item))
    return out


# --- sections --------------------------------------------------------------

def _covariates(d: Any) -> CovariateSpec:
    p = "covariates"
    d = _obj(d, p, {"kind", "dim", "mean", "scale", "lower", "upper", "support"})
    kind = _str(d, "kind", f"{p}.kind", "truncated_normal")
    dim = _int(d, "dim", f"{p}.dim")
    if kind == "discrete_uniform":
        for k in ("mean", "scale", "lower", "upper"):
            if k in d:
                raise ConfigError("not used by discrete_uniform", f"{p}.{k}")
        return CovariateSpec(dim=dim, kind=kind,
                             support=tuple(_num_list(d, "support", f"{p}.support", integer=True)))
    if "support" in d and kind == "truncated_normal":
        raise ConfigError("not used by truncated_normal", f"{p}.support")
    return CovariateSpec(
        dim=dim, kind=kind,
        mean=_num(d, "mean", f"{p}.mean", 0.0), scale=_num(d, "scale", f"{p}.scale", 1.0),
        lower=_num(d, "lower", f"{p}.lower", -10.0), upper=_num(d, "upper", f"{p}.upper", 10.0),
    )


def _reward_fn(d: Any, path: str) -> RewardFunction:
    d = _obj(d, path, {"kind", "beta"})
    kind = _str(d, "kind", f"{path}.kind")
    try:
        return RewardFunction(kind, tuple(_num_list(d, "beta", f"{path}.beta")))
    except ConfigError as exc:
        # re-anchor the field name on this arm
        leaf = exc.field.split(".")[-1] if exc.field else "kind"
        raise ConfigError(str(exc).split(": ", 1)[-1], f"{path}.{leaf}") from None


def _reward(d: Any) -> RewardSpec:
    p = "reward"
    d = _obj(d, p, {"phi0", "phi1", "sigma0", "sigma1"})
    for k in ("phi0", "phi1"):
        if k not in d:
            raise ConfigError("required field is missing", f"{p}.{k}")
    return RewardSpec(
        _reward_fn(d["phi0"], f"{p}.phi0"), _reward_fn(d["phi1"], f"{p}.phi1"),
        sigma0=_num(d, "sigma0", f"{p}.sigma0", 0.1), sigma1=_num(d, "sigma1", f"{p}.sigma1", 0.1),
    )


def _schedule(d: Any) -> EpsilonSchedule:
    p = "policy.epsilon"
    d = _obj(d, p, {"kind", "k", "alpha", "c", "floor", "ceiling"})
    kind = _str(d, "kind", f"{p}.kind")
    return EpsilonSchedule(
        kind=kind, k=_num(d, "k", f"{p}.k", 0.1), alpha=_num(d, "alpha", f"{p}.alpha", 0.5),
        c=_num(d, "c", f"{p}.c", 0.1), floor=_num(d, "floor", f"{p}.floor", 0.0),
        ceiling=_num(d, "ceiling", f"{p}.ceiling", 1.0),
    )


def _policy(d: Any) -> PolicyConfig:
    p = "policy"
    d = _obj(d, p, {"epsilon", "T0", "estimator"})
    if "epsilon" not in d:
        raise ConfigError("required field is missing", f"{p}.epsilon")
    return PolicyConfig(
        _schedule(d["epsilon"]), T0=_int(d, "T0", f"{p}.T0", 20),
        estimator=_str(d, "estimator", f"{p}.estimator", "OLS"),
    )


def _kernel(d: Any) -> KernelConfig:
    p = "kernel"
    d = _obj(d, p, {"bandwidth_rule", "h", "min_bandwidth"})
    return KernelConfig(
        bandwidth_rule=_str(d, "bandwidth_rule", f"{p}.bandwidth_rule", "sigma_t_cuberoot"),
        h=_num(d, "h", f"{p}.h", 0.1), min_bandwidth=_num(d, "min_bandwidth", f"{p}.min_bandwidth", 1e-6),
    )


def _replay(d: Any) -> ReplaySettings:
    p = "replay"
    d = _obj(d, p, {"n", "p", "reward_mode"})
    return ReplaySettings(n=_int(d, "n", f"{p}.n", 50_000), p=_num(d, "p", f"{p}.p", 0.5),
                          reward_mode=_str(d, "reward_mode", f"{p}.reward_mode", "auto"))


_TOP = {"covariates", "reward", "policy", "T", "reps", "checkpoints", "base_seed", "mc_value_n",
        "oracle_n", "value_n", "level", "kernel", "replay"}


def parse_config(raw: Any, overrides: dict | None = None) -> RunConfig:
    """Build a validated :class:`RunConfig` from decoded JSON.

    ``overrides`` may set ``T``, ``reps`` or ``base_seed``. When ``T`` is
    overridden, explicit checkpoints beyond the new horizon are dropped.
    """
    if isinstance(raw, dict) and "config" in raw and "covariates" not in raw:
        raw = raw["config"]
    d = dict(_obj(raw, "", _TOP))
    for k in ("covariates", "reward", "policy"):
        if k not in d:
            raise ConfigError("required field is missing", k)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    unknown = set(overrides) - {"T", "reps", "base_seed"}
    if unknown:
        raise ConfigError("cannot be overridden", sorted(unknown)[0])
    d.update(overrides)

    cov = _covariates(d["covariates"])
    reward = _reward(d["reward"])
    policy = _policy(d["policy"])
    T = _int(d, "T", "T", 2000)
    checkpoints: tuple = ()
    if "checkpoints" in d:
        cps = _num_list(d, "checkpoints", "checkpoints", integer=True)
        if "T" in overrides:
            cps = [c for c in cps if c <= T]
        checkpoints = tuple(cps)
    base_seed = _int(d, "base_seed", "base_seed", 20190501)
    if base_seed < 0:
        raise ConfigError("must be nonnegative", "base_seed")
    exp = ExperimentConfig(
        cov=cov, reward=reward, policy=policy, T=T,
        reps=_int(d, "reps", "reps", 1000), checkpoints=checkpoints, base_seed=base_seed,
        mc_value_n=_int(d, "mc_value_n", "mc_value_n", 10_000),
        oracle_n=_int(d, "oracle_n", "oracle_n", 1_000_000),
        value_n=_int(d, "value_n", "value_n", 1_000_000),
        level=_num(d, "level", "level", 0.95),
        kernel=_kernel(d.get("kernel", {})),
    )
    return RunConfig(exp, _replay(d.get("replay", {})))


def list_presets() -> list[str]:
    root = resources.files("epsgreedy") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def preset_path(name: str):
    path = resources.files("epsgreedy") / "presets" / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r} (available: {', '.join(list_presets())})",
                          "preset")
    return path


def load_config(source: str | Path | None = None, preset: str | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Read a configuration from a JSON file or a bundled preset.

    Raises
    ------
    ConfigError
        Missing or unreadable file, invalid JSON (with line/column), or a
        schema violation (with the dotted field path).
    """
    if (source is None) == (preset is None):
        raise ConfigError("give exactly one of a config path or a preset name", "config")
    if preset is not None:
        text = preset_path(preset).read_text(encoding="utf-8")
        origin = f"preset {preset}"
    else:
        try:
            text = Path(source).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read {source}: {exc.strerror or exc}", "config") from None
        origin = str(source)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{origin}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}",
                          "config") from None
    return parse_config(raw, overrides)
