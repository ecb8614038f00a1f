"""Forward noising, the closed-form posterior, ancestral sampling and the MLE loss."""

from __future__ import annotations

import numpy as np

from .net import NoiseEstimator, ShapeError, forward_backward, predict_noise
from .schedule import NoiseSchedule


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator used for every stochastic draw in the package."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def _coef(values: np.ndarray, t, ndim: int):
    """Schedule entries for a scalar step or a per-batch step array, broadcastable to the cloud."""
    c = values[np.asarray(t)]
    if np.ndim(c) == 0:
        return float(c)
    return c.reshape(c.shape + (1,) * (ndim - 1))


def _check(sched: NoiseSchedule, t, *arrays):
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ShapeError(f"time step outside [1, {sched.T}]")
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise ShapeError(f"shape mismatch: {shape} vs {np.shape(a)}")


def sample_forward(X0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    _check(sched, t, X0, eps)
    X0 = np.asarray(X0, dtype=np.float64)
    ab = _coef(sched.alpha_bar, t, X0.ndim)
    return np.sqrt(ab) * X0 + np.sqrt(1.0 - ab) * np.asarray(eps)


def posterior_mean(X_t, X0, t, sched: NoiseSchedule) -> np.ndarray:
    _check(sched, t, X_t, X0)
    X_t = np.asarray(X_t, dtype=np.float64)
    t = np.asarray(t)
    nd = X_t.ndim
    ab, ab_prev = _coef(sched.alpha_bar, t, nd), _coef(sched.alpha_bar, t - 1, nd)
    a, b = _coef(sched.alpha, t, nd), _coef(sched.beta, t, nd)
    return (np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab)) * X_t + (b * np.sqrt(ab_prev) / (1.0 - ab)) * np.asarray(X0)


def eps_coef(sched: NoiseSchedule, t):
    """Coefficient multiplying the predicted noise in the reverse mean."""
    return sched.beta[t] / np.sqrt(sched.alpha[t] * (1.0 - sched.alpha_bar[t]))


def mu_theta(X_t, t, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    _check(sched, t, X_t, eps_hat)
    X_t = np.asarray(X_t, dtype=np.float64)
    nd = X_t.ndim
    a, ab, b = (_coef(v, t, nd) for v in (sched.alpha, sched.alpha_bar, sched.beta))
    return X_t / np.sqrt(a) - (b / np.sqrt(a * (1.0 - ab))) * np.asarray(eps_hat)


def reverse_step(est: NoiseEstimator, X_t, t: int, z, sched: NoiseSchedule) -> np.ndarray:
    """One ancestral step; no noise is injected at ``t = 1``."""
    _check(sched, t, X_t, z)
    mean = mu_theta(X_t, t, predict_noise(est, X_t, t, sched.T), sched)
    if int(t) == 1:
        return mean
    return mean + np.sqrt(sched.beta[t]) * np.asarray(z)


def sample(est: NoiseEstimator, sched: NoiseSchedule, n_points: int, dim: int, seed, n_clouds: int | None = None):
    """Draw ``X_T ~ N(0, I)`` and run the reverse chain down to ``X_0``.

    With ``n_clouds`` set, a batch ``(n_clouds, n_points, dim)`` is generated in
    one pass; otherwise a single ``(n_points, dim)`` cloud.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = make_rng(seed)
    shape = (n_points, dim) if n_clouds is None else (n_clouds, n_points, dim)
    X = rng.standard_normal(shape)
    for t in range(sched.T, 0, -1):
        z = rng.standard_normal(shape) if t > 1 else np.zeros(shape)
        X = reverse_step(est, X, t, z, sched)
    return X


def ddpm_loss_and_grad(est: NoiseEstimator, X0, t, eps, sched: NoiseSchedule):
    """``||eps - eps_theta(X_t, t)||^2 / (2 eta_t)`` and its exact parameter gradient.

    Batched inputs ``(B, N, dim)`` with per-sample ``t`` return per-sample
    losses and the gradient of their sum.
    """
    X_t = sample_forward(X0, t, eps, sched)
    eta = _coef(sched.eta, t, np.ndim(X_t))
    pred, _, grad = forward_backward(est, X_t, t, sched.T, lambda p: (p - eps) / eta)
    sq = (np.asarray(eps) - pred) ** 2
    loss = sq.sum(axis=(-2, -1)) / (2.0 * np.squeeze(np.asarray(eta)))
    return (float(loss) if np.ndim(loss) == 0 else loss), grad
