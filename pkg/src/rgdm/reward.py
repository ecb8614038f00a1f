"""Rewards and the shift solvers that search a norm ball for the best nearby cloud.

The reward is a black box ``r(X) -> float``.  A gradient callable is only
needed for the gradient solver; annealing uses reward values alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffusion import make_rng
from .schedule import NoiseSchedule

SOLVERS = ("none", "gradient", "annealing")


class SolverError(RuntimeError):
    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


@dataclass
class RewardSpec:
    reward: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray] | None = None
    solver: str = "none"
    radius: float | None = None  # constant radius; None means kappa * sqrt(post_var[t])
    kappa: float = 2.0
    steps: int = 50
    step_size: float = 0.1  # gradient step, as a multiple of the radius
    proposals: int = 500
    proposal_scale: float = 0.2  # annealing proposal std, as a multiple of the radius
    tau_start: float = 1.0
    tau_end: float = 0.01
    seed: int = 0
    serial: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}; expected one of {SOLVERS}")
        if self.solver == "gradient" and self.grad is None:
            raise ValueError(f"reward {self.name!r} has no gradient; use the annealing solver")
        if self.radius is not None and not self.radius > 0:
            raise ValueError("radius must be > 0")
        if not self.kappa > 0:
            raise ValueError("kappa must be > 0")

    def radius_at(self, t: int, sched: NoiseSchedule) -> float:
        if self.radius is not None:
            return float(self.radius)
        return self.kappa * math.sqrt(sched.post_var[t])

    def summary(self) -> dict:
        return {
            "name": self.name,
            "params": self.params,
            "solver": self.solver,
            "radius": self.radius,
            "kappa": self.kappa,
        }


@dataclass
class ShiftResult:
    eps_star: np.ndarray
    reward_before: float
    reward_after: float
    iterations_used: int


def project_to_ball(v, d: float) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm <= d:
        return v
    return v * (d / norm)


def _eval(reward, X, eps) -> float:
    r = float(reward(X + eps))
    if not math.isfinite(r):
        raise SolverError(f"reward returned {r}", iterate=eps)
    return r


def _radius(spec: RewardSpec, d):
    d = spec.radius if d is None else d
    if d is None:
        raise ValueError("no radius given and the spec has no constant radius")
    return float(d)


def solve_shift_gradient(spec: RewardSpec, X_tilde, d: float | None = None) -> ShiftResult:
    """Projected gradient ascent from the zero shift; the best iterate wins."""
    if spec.grad is None:
        raise ValueError("gradient solver needs a reward gradient")
    X_tilde = np.asarray(X_tilde, dtype=np.float64)
    d = _radius(spec, d)
    eps = np.zeros_like(X_tilde)
    r0 = _eval(spec.reward, X_tilde, eps)
    best, best_r = eps, r0
    if d <= 0:
        return ShiftResult(eps, r0, r0, 0)
    lr = spec.step_size * d
    for k in range(spec.steps):
        g = np.asarray(spec.grad(X_tilde + eps), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise SolverError(f"non-finite reward gradient at iteration {k}", iterate=eps)
        eps = project_to_ball(eps + lr * g, d)
        r = _eval(spec.reward, X_tilde, eps)
        if r > best_r:
            best, best_r = eps, r
    return ShiftResult(best, r0, best_r, spec.steps)


def solve_shift_annealing(spec: RewardSpec, X_tilde, d: float | None = None, rng=None) -> ShiftResult:
    """Metropolis random walk inside the ball with a geometric temperature ladder."""
    X_tilde = np.asarray(X_tilde, dtype=np.float64)
    d = _radius(spec, d)
    rng = make_rng(spec.seed if rng is None else rng)
    eps = np.zeros_like(X_tilde)
    r_cur = r0 = _eval(spec.reward, X_tilde, eps)
    best, best_r = eps, r0
    n = spec.proposals
    if d <= 0 or n == 0:
        return ShiftResult(eps, r0, r0, 0)
    sigma = spec.proposal_scale * d
    ratio = spec.tau_end / spec.tau_start
    for k in range(n):
        tau = spec.tau_start * ratio ** (k / max(n - 1, 1))
        cand = project_to_ball(eps + sigma * rng.standard_normal(X_tilde.shape), d)
        r = _eval(spec.reward, X_tilde, cand)
        u = rng.random()
        if r >= r_cur or u < math.exp((r - r_cur) / tau):
            eps, r_cur = cand, r
            if r > best_r:
                best, best_r = cand, r
    return ShiftResult(best, r0, best_r, n)


def payoff_sample(spec: RewardSpec, X_tilde, d: float | None = None, rng=None):
    """Return ``(X_tilde + eps_star, ShiftResult)`` for the configured solver."""
    X_tilde = np.asarray(X_tilde, dtype=np.float64)
    if spec.solver == "none":
        r = _eval(spec.reward, X_tilde, 0.0)
        res = ShiftResult(np.zeros_like(X_tilde), r, r, 0)
    elif spec.solver == "gradient":
        res = solve_shift_gradient(spec, X_tilde, d)
    else:
        res = solve_shift_annealing(spec, X_tilde, d, rng)
    return X_tilde + res.eps_star, res


# built-in rewards ----------------------------------------------------------


class RegionIndicator:
    """Fraction of points inside an axis-aligned box.  Piecewise constant, no gradient."""

    def __init__(self, low, high):
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)

    def __call__(self, X):
        inside = np.all((X >= self.low) & (X <= self.high), axis=-1)
        return float(inside.mean())


class HalfplaneMargin:
    """Mean signed distance of the points to the hyperplane ``normal . x = offset``."""

    def __init__(self, normal, offset=0.0):
        n = np.asarray(normal, dtype=np.float64)
        self.unit = n / np.linalg.norm(n)
        self.offset = float(offset) / np.linalg.norm(n)

    def __call__(self, X):
        return float(np.mean(X @ self.unit) - self.offset)

    def grad(self, X):
        return np.broadcast_to(self.unit / X.shape[0], X.shape).copy()


class NegChamferToTemplate:
    """Negative Chamfer distance to a fixed template cloud."""

    def __init__(self, template):
        self.template = np.asarray(template, dtype=np.float64)

    def _pairs(self, X):
        diff = X[:, None, :] - self.template[None, :, :]
        return diff, np.einsum("ijk,ijk->ij", diff, diff)

    def __call__(self, X):
        _, d2 = self._pairs(X)
        return -float(d2.min(axis=1).mean() + d2.min(axis=0).mean())

    def grad(self, X):
        diff, d2 = self._pairs(X)
        n, m = d2.shape
        i_near = d2.argmin(axis=0)  # nearest X point for each template point
        j_near = d2.argmin(axis=1)
        g = 2.0 * diff[np.arange(n), j_near] / n
        np.add.at(g, i_near, 2.0 * diff[i_near, np.arange(m)] / m)
        return -g


def make_reward(name: str, params: dict):
    """Build ``(reward, grad_or_None)`` for a built-in reward by name."""
    if name == "region_indicator":
        r = RegionIndicator(params["low"], params["high"])
        return r, None
    if name == "halfplane_margin":
        r = HalfplaneMargin(params["normal"], params.get("offset", 0.0))
        return r, r.grad
    if name == "neg_chamfer_to_template":
        r = NegChamferToTemplate(params["template"])
        return r, r.grad
    if name == "zero":
        return (lambda X: 0.0), (lambda X: np.zeros_like(X))
    raise KeyError(name)


BUILTIN_REWARDS = ("region_indicator", "halfplane_margin", "neg_chamfer_to_template", "zero")
