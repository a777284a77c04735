"""White-box l-infinity attacks and the ensemble adversarial batch crafter.

Attacks receive a model and input rows only. Target labels are always the
model's own predictions, so the true labels never reach this module.

A model is anything with ``K``, ``predict(x)`` and ``loss_and_grad(x, y)``
returning per-row losses and input gradients (see :class:`stobatch.nn.Network`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PerturbedBatch, one_hot
from .errors import ConfigError, PrivacyViolationError
from .rng import make_rng

ATTACKS = ("fgsm", "ifgsm", "mim", "madry")


@dataclass(frozen=True)
class AttackConfig:
    mu: float = 0.2
    steps: int = 10
    decay: float = 1.0
    kinds: tuple = ("ifgsm", "mim", "madry")
    madry_step: float | None = None  # None means mu / 4

    def __post_init__(self):
        if not self.mu > 0:
            raise ConfigError("attack radius mu must be positive")
        if self.steps < 1:
            raise ConfigError("attack steps must be at least 1")
        if not self.kinds:
            raise ConfigError("ensemble attack list is empty")
        for k in self.kinds:
            if k not in ATTACKS:
                raise ConfigError(f"unknown attack {k!r}; expected one of {ATTACKS}")


def _predicted(model, x):
    return one_hot(model.predict(x), model.K)


def _finish(x, x_bar, mu, bounds):
    x = np.clip(x, x_bar - mu, x_bar + mu)
    if bounds is not None:
        x = np.clip(x, bounds[0], bounds[1])
    return x


def fgsm(model, x_bar, mu, bounds=None):
    x_bar = np.atleast_2d(np.asarray(x_bar, dtype=np.float64))
    _, g = model.loss_and_grad(x_bar, _predicted(model, x_bar))
    return _finish(x_bar + mu * np.sign(g), x_bar, mu, bounds)


def ifgsm(model, x_bar, mu, steps, bounds=None):
    """Steps of size mu/steps, re-predicting the target label at every iterate."""
    if steps < 1:
        raise ConfigError("steps must be at least 1")
    x_bar = np.atleast_2d(np.asarray(x_bar, dtype=np.float64))
    x = x_bar.copy()
    for _ in range(steps):
        _, g = model.loss_and_grad(x, _predicted(model, x))
        x = _finish(x + (mu / steps) * np.sign(g), x_bar, mu, bounds)
    return x


def mim(model, x_bar, mu, steps, decay=1.0, bounds=None):
    """Momentum iterative sign attack; momentum accumulates l1-normalised gradients."""
    if decay < 0:
        raise ConfigError("momentum decay must be nonnegative")
    x_bar = np.atleast_2d(np.asarray(x_bar, dtype=np.float64))
    x = x_bar.copy()
    momentum = np.zeros_like(x)
    for _ in range(steps):
        _, g = model.loss_and_grad(x, _predicted(model, x))
        l1 = np.abs(g).sum(axis=1, keepdims=True)
        momentum = decay * momentum + np.divide(g, l1, out=np.zeros_like(g), where=l1 > 0)
        x = _finish(x + (mu / steps) * np.sign(momentum), x_bar, mu, bounds)
    return x


def pgd_madry(model, x_bar, mu, steps, step=None, seed=0, bounds=None):
    """Random start in the ball, then projected sign steps against the initial prediction."""
    step = mu / 4.0 if step is None else step
    if mu > 0 and not step > 0:
        raise ConfigError("PGD step must be positive")
    x_bar = np.atleast_2d(np.asarray(x_bar, dtype=np.float64))
    if mu == 0:
        return x_bar.copy()
    y = _predicted(model, x_bar)
    x = _finish(x_bar + make_rng(seed, "madry-start").uniform(-mu, mu, size=x_bar.shape), x_bar, mu, bounds)
    for _ in range(steps):
        _, g = model.loss_and_grad(x, y)
        x = _finish(x + step * np.sign(g), x_bar, mu, bounds)
    return x


def run_attack(kind, model, x_bar, mu, config, seed=0, bounds=None):
    if kind == "fgsm":
        return fgsm(model, x_bar, mu, bounds)
    if kind == "ifgsm":
        return ifgsm(model, x_bar, mu, config.steps, bounds)
    if kind == "mim":
        return mim(model, x_bar, mu, config.steps, config.decay, bounds)
    if kind == "madry":
        step = None if config.madry_step is None else config.madry_step
        return pgd_madry(model, x_bar, mu, config.steps, step, seed, bounds)
    raise ConfigError(f"unknown attack {kind!r}")


def chunk_bounds(m, n_kinds):
    if m % n_kinds:
        raise ConfigError(f"batch size {m} is not divisible by the {n_kinds} ensemble attacks")
    size = m // n_kinds
    return [(i * size, (i + 1) * size) for i in range(n_kinds)]


def craft_ensemble_batch(model, source_batch, kinds, mu_t, m, config=None, seed=0, bounds=None):
    """Split the perturbed source batch into |A| equal chunks, one attack per chunk."""
    if not isinstance(source_batch, PerturbedBatch):
        raise PrivacyViolationError("adversarial examples must be crafted from a perturbed batch")
    if len(source_batch) != m:
        raise ConfigError(f"source batch has {len(source_batch)} rows, expected {m}")
    config = config or AttackConfig(kinds=tuple(kinds))
    x_src = source_batch.features
    out = np.empty_like(x_src)
    for i, (kind, (lo, hi)) in enumerate(zip(kinds, chunk_bounds(m, len(kinds)))):
        b = None if bounds is None else (bounds[0], bounds[1])
        out[lo:hi] = run_attack(kind, model, x_src[lo:hi], mu_t, config, seed=(seed, i), bounds=b)
    return out
