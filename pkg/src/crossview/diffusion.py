"""Noise schedule, forward/reverse diffusion steps and deterministic DDIM.

Timesteps are 1-based: ``t = 1 .. T``.  Arrays are float64 numpy arrays of
any shape.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

log = logging.getLogger(__name__)


class InvalidRange(ValueError):
    pass


class InvalidSteps(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class Divergence(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise InvalidRange("betas must be a non-empty vector in (0, 1)")
        a = 1.0 - b
        for arr in (b, a):
            arr.setflags(write=False)
        ab = np.cumprod(a)
        ab.setflags(write=False)
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "alpha_bars", ab)

    @property
    def T(self) -> int:
        return self.betas.size

    def beta(self, t: int) -> float:
        return float(self.betas[self._idx(t)])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._idx(t)])

    def alpha_bar(self, t: int) -> float:
        """``prod(alpha_1..alpha_t)``; ``alpha_bar(0) == 1``."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[self._idx(t)])

    def _idx(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise InvalidRange(f"timestep {t} outside 1..{self.T}")
        return t - 1


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise InvalidRange("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise InvalidRange(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


class NoisePredictor(Protocol):
    def __call__(self, x_t: np.ndarray, t: int, cond: Optional[np.ndarray] = None) -> np.ndarray: ...


def _check_shape(a, b, what="eps"):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"{what} shape {np.shape(b)} != {np.shape(a)}")


def forward_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form ``q(x_t | x_0)``: ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    _check_shape(x0, eps)
    ab = sched.alpha_bar(t)
    return np.sqrt(ab) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def forward_step(x_prev: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """One transition ``x_{t-1} -> x_t`` of the Markov chain."""
    _check_shape(x_prev, noise, "noise")
    return np.sqrt(sched.alpha(t)) * x_prev + np.sqrt(sched.beta(t)) * noise


def _predict(pred, x_t, t, cond):
    out = np.asarray(pred(x_t, t, cond), dtype=np.float64)
    _check_shape(x_t, out, "prediction")
    return out


def loss_simple(pred: NoisePredictor, x0, t: int, eps, cond=None, sched: NoiseSchedule = None) -> float:
    """Mean-square error between predicted and true noise at step ``t``."""
    x_t = forward_sample(x0, t, eps, sched)
    diff = _predict(pred, x_t, t, cond) - eps
    return float(np.mean(diff * diff))


def reverse_step(x_t, t: int, pred: NoisePredictor, cond, sched: NoiseSchedule, noise=None) -> np.ndarray:
    """Ancestral step ``x_t -> x_{t-1}``; ``noise=None`` injects nothing."""
    x_t = np.asarray(x_t, dtype=np.float64)
    a, ab = sched.alpha(t), sched.alpha_bar(t)
    eps_hat = _predict(pred, x_t, t, cond)
    mean = (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    if noise is None:
        return mean
    _check_shape(x_t, noise, "noise")
    return mean + np.sqrt(sched.beta(t)) * noise


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly strided descending timesteps from ``T`` down to 1."""
    if not 1 <= steps <= T:
        raise InvalidSteps(f"steps must be in 1..{T}, got {steps}")
    if steps == 1:
        return np.array([T])
    ts = np.rint(np.linspace(T, 1, steps)).astype(int)
    return ts


def ddim_sample(
    pred: NoisePredictor,
    shape,
    cond=None,
    sched: NoiseSchedule = None,
    steps: int = 50,
    seed: int = 0,
    x_start: np.ndarray | None = None,
    trace: Callable[[int, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM trajectory from seeded Gaussian noise.

    ``trace(t, x0_hat)`` is called with the clean-sample estimate at each step.
    """
    ts = ddim_timesteps(sched.T, steps)
    if x_start is None:
        x = np.random.default_rng(seed).standard_normal(shape)
    else:
        x = np.array(x_start, dtype=np.float64)
        _check_shape(np.empty(shape), x, "x_start")
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        ab, ab_prev = sched.alpha_bar(int(t)), sched.alpha_bar(t_prev)
        eps_hat = _predict(pred, x, int(t), cond)
        x0_hat = (x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
        if trace is not None:
            trace(int(t), x0_hat)
        x = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat
    return x


def oracle_predictor(x0: np.ndarray, sched: NoiseSchedule) -> NoisePredictor:
    """Predictor that returns the exact noise separating ``x_t`` from ``x0``."""
    x0 = np.asarray(x0, dtype=np.float64)

    def pred(x_t, t, cond=None):
        ab = sched.alpha_bar(t)
        return (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)

    return pred


def zero_predictor(x_t, t, cond=None):
    return np.zeros_like(x_t, dtype=np.float64)


@dataclass(eq=False)
class LinearPredictor:
    """Per-timestep affine map ``eps_hat = W_t x_t + b_t`` on flattened samples.

    ``cond`` is accepted and ignored.
    """

    weights: np.ndarray  # (T, D, D)
    bias: np.ndarray  # (T, D)
    loss_history: list = field(default_factory=list)
    held_out: tuple[float, float] | None = None  # (before, after) training

    def __post_init__(self):
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("predictor parameters must be finite")

    @classmethod
    def zeros(cls, T: int, D: int) -> "LinearPredictor":
        return cls(np.zeros((T, D, D)), np.zeros((T, D)))

    def __call__(self, x_t, t, cond=None):
        x = np.asarray(x_t, dtype=np.float64)
        flat = x.reshape(-1)
        return (self.weights[t - 1] @ flat + self.bias[t - 1]).reshape(x.shape)


def noise_training_set(data, sched: NoiseSchedule, draws: int = 8, seed: int = 0):
    """Fixed ``(x_t, eps)`` samples: every datum at every step, ``draws`` times.

    Returns two arrays of shape ``(T, n * draws, D)`` indexed by ``t - 1``.
    """
    data = np.asarray(data, dtype=np.float64)
    data = data.reshape(data.shape[0], -1)
    rng = np.random.default_rng(seed)
    n, D = data.shape
    T = sched.T
    eps = rng.standard_normal((T, n * draws, D))
    x0 = np.tile(data, (draws, 1))
    xt = np.sqrt(sched.alpha_bars)[:, None, None] * x0[None] + np.sqrt(1 - sched.alpha_bars)[:, None, None] * eps
    return xt, eps


def _objective(W, b, xt, eps):
    resid = np.einsum("tij,tnj->tni", W, xt) + b[:, None, :] - eps
    return float(np.mean(resid * resid)), resid


def train_linear_predictor(
    data,
    sched: NoiseSchedule,
    epochs: int = 200,
    lr: float = 0.1,
    draws: int = 8,
    seed: int = 0,
    init: LinearPredictor | None = None,
) -> LinearPredictor:
    """Full-batch gradient descent on the simplified noise-prediction loss.

    The training set is :func:`noise_training_set` with ``seed`` (held-out
    draws use ``seed + 1``), so the objective is a fixed convex
    quadratic whose minimizer solves the per-timestep normal equations.
    ``loss_history`` holds the training loss before each epoch plus the final
    value; ``held_out`` is the loss on fresh noise draws before and after.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    X = np.asarray(data, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    n, D = X.shape
    xt, eps = noise_training_set(X, sched, draws, seed)
    held_xt, held_eps = noise_training_set(X, sched, draws, seed + 1)
    model = init if init is not None else LinearPredictor.zeros(sched.T, D)
    W, b = model.weights.copy(), model.bias.copy()
    count = xt.shape[1] * D  # per-timestep normalizer

    history = []
    rises = 0
    loss, resid = _objective(W, b, xt, eps)
    initial_held = _objective(W, b, held_xt, held_eps)[0]
    # rises below this are rounding noise at the convergence floor
    noise_floor = 1e-12 * max(loss, np.finfo(float).tiny)
    for _ in range(epochs):
        history.append(loss)
        gW = 2.0 / count * np.einsum("tni,tnj->tij", resid, xt)
        gb = 2.0 / count * resid.sum(axis=1)
        W -= lr * gW
        b -= lr * gb
        new_loss, resid = _objective(W, b, xt, eps)
        if not np.isfinite(new_loss):
            raise Divergence("training loss became non-finite")
        rises = rises + 1 if new_loss - loss > noise_floor else 0
        if rises >= 5:
            raise Divergence(f"loss increased for 5 consecutive epochs (lr={lr})")
        loss = new_loss
    history.append(loss)
    held = _objective(W, b, held_xt, held_eps)[0]
    log.info("linear predictor: held-out loss %.6g -> %.6g", initial_held, held)
    return LinearPredictor(W, b, history, (initial_held, held))

