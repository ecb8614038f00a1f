"""JSON run configuration.

Every key is optional; missing keys take the defaults below and unknown keys
are rejected so typos fail loudly.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .net import CONTEXTS
from .reward import BUILTIN_REWARDS, RewardSpec, make_reward
from .schedule import ScheduleError, schedule_from_spec
from .train import TrainConfig

DEFAULTS = {
    "seed": 0,
    "dataset": None,
    "out": "runs/default",
    "target_label": None,
    "data": {
        "kind": "mixture2d",
        "n_samples": 1000,
        "points_per_cloud": 128,
        "centers": [[-2.0, 0.0], [2.0, 0.0]],
        "sigma": 0.2,
        "templates": ["ring", "two-bar", "cross"],
        "jitter": 0.05,
        "balanced": False,
    },
    "schedule": {"kind": "linear", "T": 100, "beta_1": 1e-4, "beta_T": 0.05, "s": 0.008},
    "model": {"layer_dims": [2, 64, 128, 64, 2], "context": "time"},
    "train": {
        "batch_size": 64,
        "finetune_batch_size": None,
        "pretrain_steps": 3000,
        "finetune_steps": 2000,
        "lr_pretrain": 1e-3,
        "lr_finetune": 2e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "r_max": 5.0,
        "eval_every": 100,
        "eval_clouds": 16,
    },
    "reward": {
        "name": "halfplane_margin",
        "params": {"normal": [1.0, 0.0], "offset": 0.0},
        "solver": "gradient",
        "radius": None,
        "kappa": 2.0,
        "steps": 50,
        "step_size": 0.1,
        "proposals": 500,
        "proposal_scale": 0.2,
        "tau_start": 1.0,
        "tau_end": 0.01,
    },
    "sample": {"n_samples": 64, "n_points": 128},
    # grid_res null means 32 for 2D data and 28 for 3D
    "eval": {"distances": ["CD", "EMD"], "grid_res": None},
}

# sections whose contents are free-form (checked by the consumer instead)
_OPEN = {"reward.params"}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


def _merge(default, user, prefix=""):
    out = copy.deepcopy(default)
    if not isinstance(user, dict):
        raise ConfigError(prefix or "<root>", "expected an object")
    for key, value in user.items():
        path = f"{prefix}{key}"
        if key not in default:
            raise ConfigError(path, "unknown key")
        if isinstance(default[key], dict) and path not in _OPEN:
            out[key] = _merge(default[key], value, path + ".")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    raw: dict
    train: TrainConfig

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def out(self) -> Path:
        return Path(self.raw["out"])

    @property
    def dataset(self) -> Path:
        return Path(self.raw["dataset"]) if self.raw["dataset"] else self.out / "data"

    def section(self, name: str) -> dict:
        return self.raw[name]


def build_reward(cfg: dict, seed: int = 0) -> RewardSpec:
    name = cfg["name"]
    if name not in BUILTIN_REWARDS:
        raise ConfigError("reward.name", f"unknown reward {name!r}; choose from {BUILTIN_REWARDS}")
    try:
        reward, grad = make_reward(name, cfg["params"])
    except KeyError as exc:
        raise ConfigError(f"reward.params.{exc.args[0]}", "required by this reward") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError("reward.params", str(exc)) from exc
    keys = ("solver", "radius", "kappa", "steps", "step_size", "proposals", "proposal_scale", "tau_start", "tau_end")
    try:
        return RewardSpec(reward, grad, name=name, params=cfg["params"], seed=seed, **{k: cfg[k] for k in keys})
    except ValueError as exc:
        raise ConfigError("reward", str(exc)) from exc


def _check_data(d: dict):
    if d["kind"] not in ("mixture2d", "templates"):
        raise ConfigError("data.kind", f"unknown generator kind {d['kind']!r}")
    for key in ("n_samples", "points_per_cloud"):
        if not isinstance(d[key], int) or d[key] < (0 if key == "n_samples" else 1):
            raise ConfigError(f"data.{key}", "must be a non-negative integer")
    if not (isinstance(d["sigma"], (int, float)) and d["sigma"] > 0):
        raise ConfigError("data.sigma", "must be > 0")
    if not isinstance(d["balanced"], bool):
        raise ConfigError("data.balanced", "must be true or false")


def from_dict(user: dict, seed: int | None = None, out: str | None = None) -> RunConfig:
    raw = _merge(DEFAULTS, user)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    if not isinstance(raw["seed"], int) or raw["seed"] < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    _check_data(raw["data"])
    try:
        sched = schedule_from_spec(raw["schedule"]).spec()
    except (ScheduleError, KeyError, TypeError) as exc:
        raise ConfigError("schedule", str(exc)) from exc
    dims = raw["model"]["layer_dims"]
    if not (isinstance(dims, list) and len(dims) >= 2 and dims[0] == dims[-1] and all(isinstance(v, int) and v > 0 for v in dims)):
        raise ConfigError("model.layer_dims", "need >= 2 positive widths with equal first and last")
    context = raw["model"]["context"]
    if context not in CONTEXTS:
        raise ConfigError("model.context", f"expected one of {CONTEXTS}, got {context!r}")
    reward = build_reward(raw["reward"], raw["seed"])
    ev = raw["eval"]
    if not set(ev["distances"]) <= {"CD", "EMD"} or not ev["distances"]:
        raise ConfigError("eval.distances", "must be a nonempty subset of ['CD', 'EMD']")
    if ev["grid_res"] is not None and (not isinstance(ev["grid_res"], int) or ev["grid_res"] < 2):
        raise ConfigError("eval.grid_res", "must be an integer >= 2")
    for key in ("n_samples", "n_points"):
        if not isinstance(raw["sample"][key], int) or raw["sample"][key] < (0 if key == "n_samples" else 1):
            raise ConfigError(f"sample.{key}", "out of range")
    try:
        train = TrainConfig(
            schedule=sched, layer_dims=dims, context=context, seed=raw["seed"], reward=reward, **raw["train"]
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from exc
    return RunConfig(raw, train)


def load_config(path, seed: int | None = None, out: str | None = None) -> RunConfig:
    if path is None:
        return from_dict({}, seed, out)
    try:
        user = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return from_dict(user, seed, out)
