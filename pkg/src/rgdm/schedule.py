"""Noise schedules.

Every array is indexed by the diffusion step ``t`` directly and has length
``T + 1``.  Entry 0 holds the ``t = 0`` convention (no noise, ``alpha_bar = 1``)
so that formulas referencing ``t - 1`` work unchanged at ``t = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    post_var: np.ndarray = field(repr=False)
    eta: np.ndarray = field(repr=False)
    params: dict = field(default_factory=dict)

    def check_step(self, t: int) -> None:
        if not 1 <= int(t) <= self.T:
            raise ScheduleError(f"step t={t} outside [1, {self.T}]")

    def spec(self) -> dict:
        """Serializable description; ``schedule_from_spec`` inverts it."""
        return {"kind": self.kind, "T": self.T, **self.params}


def _from_betas(kind: str, betas: np.ndarray, params: dict) -> NoiseSchedule:
    T = len(betas)
    beta = np.concatenate([[0.0], np.asarray(betas, dtype=np.float64)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    post_var = np.zeros(T + 1)
    post_var[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    for arr in (beta, alpha, alpha_bar, post_var):
        arr.setflags(write=False)
    return NoiseSchedule(
        kind=kind,
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        post_var=post_var,
        eta=beta,
        params=params,
    )


def make_linear_schedule(T: int, beta_1: float = 1e-4, beta_T: float = 0.05) -> NoiseSchedule:
    if T < 1 or not (0.0 < beta_1 <= beta_T < 1.0):
        raise ScheduleError(
            f"linear schedule needs T >= 1 and 0 < beta_1 <= beta_T < 1, got T={T}, "
            f"beta_1={beta_1}, beta_T={beta_T}"
        )
    if T == 1:
        betas = np.array([beta_1], dtype=np.float64)
    else:
        betas = beta_1 + np.arange(T) * (beta_T - beta_1) / (T - 1)
    return _from_betas("linear", betas, {"beta_1": float(beta_1), "beta_T": float(beta_T)})


def make_cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if T < 1 or not s > 0:
        raise ScheduleError(f"cosine schedule needs T >= 1 and s > 0, got T={T}, s={s}")

    def f(t):
        return np.cos((t / T + s) / (1.0 + s) * math.pi / 2.0) ** 2

    steps = np.arange(T + 1, dtype=np.float64)
    ab = f(steps) / f(0.0)
    betas = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, max_beta)
    # alpha_bar is rebuilt from the clipped betas so the cumulative product stays exact
    return _from_betas("cosine", betas, {"s": float(s)})


def schedule_from_spec(spec: dict) -> NoiseSchedule:
    kind = spec.get("kind")
    if kind == "linear":
        return make_linear_schedule(int(spec["T"]), float(spec["beta_1"]), float(spec["beta_T"]))
    if kind == "cosine":
        return make_cosine_schedule(int(spec["T"]), float(spec.get("s", 0.008)))
    raise ScheduleError(f"unknown schedule kind {kind!r}")
