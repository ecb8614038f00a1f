"""Reward-guided loss and the two-phase training loop.

Phase 1 fits the denoiser by maximum likelihood.  Phase 2 draws the target
``X_{t-1}`` from the reward payoff (posterior mean plus the best shift found
by a solver) and minimizes the reward-weighted squared error

    w * ||X_{t-1} - mu_theta(X_t, t)||^2 / (2 beta_t),   w = exp(min(r, r_max) - r_ref)

The shift and the weight come from a fixed distribution, so both are constants
in the parameter gradient.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, OptimizerState
from .diffusion import ddpm_loss_and_grad, make_rng, mu_theta, posterior_mean, sample, sample_forward
from .net import NoiseEstimator, forward_backward, init_estimator
from .reward import RewardSpec, payoff_sample
from .schedule import NoiseSchedule, schedule_from_spec

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "phase", "loss", "mean_reward", "mean_shift_norm", "sample_reward", "wall_time")


class TrainingError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class TrainConfig:
    schedule: dict = field(default_factory=lambda: {"kind": "linear", "T": 100, "beta_1": 1e-4, "beta_T": 0.05})
    layer_dims: list = field(default_factory=lambda: [2, 64, 128, 64, 2])
    context: str = "time"
    batch_size: int = 64
    finetune_batch_size: int | None = None
    pretrain_steps: int = 3000
    finetune_steps: int = 2000
    lr_pretrain: float = 1e-3
    lr_finetune: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    r_max: float = 5.0
    seed: int = 0
    reward: RewardSpec | None = None
    # every k finetune steps, score fresh model samples with the reward (0 disables)
    eval_every: int = 0
    eval_clouds: int = 16

    def __post_init__(self):
        for name in ("batch_size", "pretrain_steps", "finetune_steps", "eval_every", "eval_clouds"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1 or (self.finetune_batch_size is not None and self.finetune_batch_size < 1):
            raise ValueError("batch sizes must be >= 1")
        if not (self.lr_pretrain > 0 and self.lr_finetune > 0 and self.r_max > 0):
            raise ValueError("learning rates and r_max must be > 0")


def adam_step(params, grad, state: OptimizerState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place.  Returns ``(params, state)``."""
    if not (params.shape == grad.shape == state.m.shape):
        raise ValueError("params, grad and optimizer moments must have equal length")
    state.step += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def rgdm_loss_and_grad(
    est: NoiseEstimator,
    X0,
    t: int,
    eps,
    spec: RewardSpec,
    sched: NoiseSchedule,
    r_ref: float = 0.0,
    r_max: float = 5.0,
    rng=None,
):
    """Reward-weighted loss for one cloud.  Returns ``(loss, grad, diagnostics)``."""
    X0 = np.asarray(X0, dtype=np.float64)
    X_t = sample_forward(X0, t, eps, sched)
    X_prev, res = payoff_sample(spec, posterior_mean(X_t, X0, t, sched), spec.radius_at(t, sched), rng)
    w = math.exp(min(res.reward_after, r_max) - r_ref)
    loss, grad = _weighted_regression(est, X_t, np.asarray(t), X_prev, np.asarray(w), sched)
    diag = {"reward": res.reward_after, "shift_norm": float(np.linalg.norm(res.eps_star)), "weight": w}
    if not np.isfinite(loss):
        raise TrainingError("non-finite reward-guided loss", diag)
    return float(loss), grad, diag


def _weighted_regression(est, X_t, t, X_prev, w, sched):
    """Per-sample ``w ||X_prev - mu_theta||^2 / (2 beta_t)`` and the gradient of the sum."""
    beta = sched.beta[t]
    c = beta / np.sqrt(sched.alpha[t] * (1.0 - sched.alpha_bar[t]))
    bshape = np.shape(t) + (1, 1)
    scale = np.reshape(w * c / beta, bshape)
    box = {}

    def upstream(pred):
        box["resid"] = X_prev - mu_theta(X_t, t, pred, sched)
        return scale * box["resid"]

    _, _, grad = forward_backward(est, X_t, t, sched.T, upstream)
    loss = w * (box["resid"] ** 2).sum(axis=(-2, -1)) / (2.0 * beta)
    return loss, grad


def _as_array(dataset) -> np.ndarray:
    clouds = getattr(dataset, "clouds", dataset)
    arr = np.asarray(np.stack([np.asarray(c, dtype=np.float64) for c in clouds]) if len(clouds) else [])
    if arr.ndim != 3 or len(arr) == 0:
        raise ValueError("dataset must be a nonempty collection of equal-size clouds")
    return arr


def _streams(seed: int):
    data_seq, solver_seq, eval_seq = np.random.SeedSequence(seed).spawn(3)
    return tuple(np.random.Generator(np.random.Philox(s)) for s in (data_seq, solver_seq, eval_seq))


def _draw(rng, data: np.ndarray, batch: int, T: int):
    idx = rng.integers(0, len(data), size=batch)
    t = rng.integers(1, T + 1, size=batch)
    eps = rng.standard_normal((batch,) + data.shape[1:])
    return data[idx], t, eps


class _LogWriter:
    def __init__(self, stream):
        self.stream = stream
        self.t0 = time.perf_counter()
        if stream is not None and getattr(stream, "tell", lambda: 1)() == 0:
            stream.write("\t".join(LOG_HEADER) + "\n")

    def row(self, step, phase, loss, reward=float("nan"), shift=float("nan"), sample_reward=float("nan")):
        if self.stream is None:
            return
        vals = (step, phase, repr(float(loss)), repr(float(reward)), repr(float(shift)), repr(float(sample_reward)))
        self.stream.write("\t".join(map(str, vals)) + f"\t{time.perf_counter() - self.t0:.3f}\n")


def initial_checkpoint(config: TrainConfig) -> Checkpoint:
    est = init_estimator(config.layer_dims, config.seed, config.context)
    return Checkpoint(
        dict(config.schedule),
        list(est.layer_dims),
        est.params,
        None,
        {"seed": config.seed, "pretrain_steps": 0, "finetune_steps": 0},
        config.context,
    )


def pretrain(config: TrainConfig, dataset, init: Checkpoint | None = None, log_stream=None) -> Checkpoint:
    """Minibatch MLE training.  ``init`` continues from an existing checkpoint."""
    data = _as_array(dataset)
    ckpt = initial_checkpoint(config) if init is None else init
    sched = schedule_from_spec(ckpt.schedule)
    est = ckpt.estimator()
    opt = OptimizerState.zeros(est.param_count) if ckpt.optimizer is None else _copy_opt(ckpt.optimizer)
    rng = _streams(config.seed)[0]
    writer = _LogWriter(log_stream)
    B = config.batch_size
    for step in range(1, config.pretrain_steps + 1):
        X0, t, eps = _draw(rng, data, B, sched.T)
        losses, grad = ddpm_loss_and_grad(est, X0, t, eps, sched)
        loss = float(losses.mean())
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingError(f"non-finite loss at pretrain step {step}", {"step": step, "loss": loss, "t": t.tolist()})
        adam_step(est.params, grad / B, opt, config.lr_pretrain, config.beta1, config.beta2, config.adam_eps)
        writer.row(step, "pretrain", loss)
        if step % 500 == 0:
            log.info("pretrain step %d loss %.4f", step, loss)
    meta = dict(ckpt.meta)
    meta["pretrain_steps"] = meta.get("pretrain_steps", 0) + config.pretrain_steps
    meta["seed"] = config.seed
    return Checkpoint(ckpt.schedule, list(est.layer_dims), est.params, opt, meta, ckpt.context)


def finetune(ckpt: Checkpoint, config: TrainConfig, dataset, log_stream=None) -> Checkpoint:
    """Reward-guided fine-tuning from a pretrained checkpoint (fresh Adam moments)."""
    if list(ckpt.layer_dims) != list(config.layer_dims) or ckpt.context != config.context:
        raise ValueError(
            f"checkpoint topology {ckpt.layer_dims} ({ckpt.context}) does not match "
            f"config {config.layer_dims} ({config.context})"
        )
    if config.reward is None:
        raise ValueError("finetune needs a reward spec")
    spec = config.reward
    data = _as_array(dataset)
    sched = schedule_from_spec(ckpt.schedule)
    est = ckpt.estimator()
    opt = OptimizerState.zeros(est.param_count)
    rng, solver_rng, eval_rng = _streams(config.seed)
    eval_seed = int(eval_rng.integers(2**63))
    writer = _LogWriter(log_stream)
    B = config.finetune_batch_size or config.batch_size
    history = []
    for step in range(1, config.finetune_steps + 1):
        X0, t, eps = _draw(rng, data, B, sched.T)
        X_t = sample_forward(X0, t, eps, sched)
        X_tilde = posterior_mean(X_t, X0, t, sched)
        X_prev = np.empty_like(X_tilde)
        rewards, shifts = np.empty(B), np.empty(B)
        for b in range(B):
            X_prev[b], res = payoff_sample(spec, X_tilde[b], spec.radius_at(int(t[b]), sched), solver_rng)
            rewards[b], shifts[b] = res.reward_after, np.linalg.norm(res.eps_star)
        clipped = np.minimum(rewards, config.r_max)
        w = np.exp(clipped - clipped.mean())
        losses, grad = _weighted_regression(est, X_t, t, X_prev, w, sched)
        loss = float(losses.mean())
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingError(
                f"non-finite loss at finetune step {step}",
                {"step": step, "loss": loss, "rewards": rewards.tolist(), "weights": w.tolist()},
            )
        adam_step(est.params, grad / B, opt, config.lr_finetune, config.beta1, config.beta2, config.adam_eps)
        sample_reward = float("nan")
        if config.eval_every and step % config.eval_every == 0:
            sample_reward = mean_sample_reward(est, sched, spec, data.shape[1], config.eval_clouds, eval_seed)
        entry = {"step": step, "mean_reward": float(rewards.mean()), "mean_shift_norm": float(shifts.mean())}
        if not math.isnan(sample_reward):
            entry["sample_reward"] = sample_reward
        history.append(entry)
        writer.row(step, "finetune", loss, rewards.mean(), shifts.mean(), sample_reward)
        if step % 500 == 0:
            log.info("finetune step %d loss %.4f reward %.4f", step, loss, rewards.mean())
    meta = dict(ckpt.meta)
    meta["finetune_steps"] = meta.get("finetune_steps", 0) + config.finetune_steps
    meta["reward"] = spec.summary()
    meta["history"] = history
    return Checkpoint(ckpt.schedule, list(est.layer_dims), est.params, opt, meta, ckpt.context)


def mean_sample_reward(est, sched, spec: RewardSpec, n_points: int, n_clouds: int, seed: int) -> float:
    clouds = sample(est, sched, n_points, est.dim, seed, n_clouds=n_clouds)
    return float(np.mean([spec.reward(c) for c in clouds]))


def _copy_opt(opt: OptimizerState) -> OptimizerState:
    return OptimizerState(opt.m.copy(), opt.v.copy(), opt.step)
