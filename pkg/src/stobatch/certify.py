"""Verified inference: Monte-Carlo scores, Hoeffding bounds and the certified radius search.

A certifiable model exposes ``K``, ``delta_R``, ``eps1``, ``m``,
``sample_scores(x, n, stream)`` returning an (n, K) array of softmax scores
under fresh noise, and ``sensitivities(mu)`` returning (delta_x_r, delta_h_r).
:class:`DPScorer` is the one backed by a trained network.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateParamError
from .nn import forward, input_gradient
from .noise import InferenceNoiseStream, next_inference_noise
from .objectives import row_norm_inf
from .rng import make_rng

CERT_COLUMNS = ("example_id", "label", "radius", "eps_r_star", "e_lb_k", "max_e_ub_other", "is_robust_at_mu_a")


def eps_r_grid(lo=1e-3, hi=5.0, points=200):
    if not 0 < lo < hi or points < 1:
        raise ConfigError("eps_r grid needs 0 < lo < hi and at least one point")
    return np.geomspace(lo, hi, points)


@dataclass(frozen=True)
class RobustnessConfig:
    n: int = 2000
    eta: float = 0.95
    psi: float = 2.0
    grid_lo: float = 1e-3
    grid_hi: float = 5.0
    grid_points: int = 200
    mu_for_sensitivity: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("Monte-Carlo budget n must be at least 1")
        if not 0 < self.eta < 1:
            raise ConfigError(f"eta must lie in (0, 1), got {self.eta}")
        if not self.psi > 0 or not self.mu_for_sensitivity > 0:
            raise ConfigError("psi and mu_for_sensitivity must be positive")
        eps_r_grid(self.grid_lo, self.grid_hi, self.grid_points)

    @property
    def grid(self):
        return eps_r_grid(self.grid_lo, self.grid_hi, self.grid_points)


@dataclass(frozen=True)
class CertificationResult:
    label: int
    e_hat: np.ndarray
    e_lb: np.ndarray
    e_ub: np.ndarray
    eps_r_star: float
    radius: float
    eta: float
    kappa: float = 0.0
    phi: float = 0.0
    passing: np.ndarray = field(default=None, repr=False)

    def is_robust_at(self, mu_a):
        return self.radius >= mu_a

    @property
    def e_lb_k(self):
        return float(self.e_lb[self.label])

    @property
    def max_e_ub_other(self):
        others = np.delete(self.e_ub, self.label)
        return float(others.max()) if others.size else 0.0


class DPScorer:
    """Trained network plus its training noise; every call draws fresh inference noise."""

    def __init__(self, params, noise, delta_R, eps1, m):
        self.params = params
        self.noise = noise
        self.delta_R = float(delta_R)
        self.eps1 = float(eps1)
        self.m = int(m)

    @classmethod
    def from_privacy(cls, params, noise, privacy_config):
        return cls(params, noise, privacy_config.delta_R, privacy_config.eps1, privacy_config.m)

    @property
    def K(self):
        return self.params.K

    def stream(self, psi=2.0, stream_id=0):
        return InferenceNoiseStream(self.noise, psi, stream_id=stream_id)

    def draw(self, n, stream):
        return next_inference_noise(stream, self.delta_R, self.eps1, self.m, count=n)

    def sample_scores(self, x, n, stream):
        x_noise, h_noise = self.draw(n, stream)
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        return forward(self.params, np.repeat(x, n, axis=0), x_noise, h_noise).scores

    def sensitivities(self, mu):
        return robustness_sensitivities(mu, self.params.d, self.params.beta, self.params.theta1)

    def expected_loss_grad(self, x, y, x_noise, h_noise):
        """Mean cross-entropy over the given noise draws and its gradient w.r.t. ``x``."""
        n = x_noise.shape[0]
        xs = np.repeat(np.asarray(x, dtype=np.float64).reshape(1, -1), n, axis=0)
        ys = np.repeat(np.asarray(y, dtype=np.float64).reshape(1, -1), n, axis=0)
        loss, g = input_gradient(self.params, xs, ys, x_noise, h_noise)
        return float(loss.mean()), g.mean(axis=0)


def monte_carlo_expectation(model, x, n, stream):
    if n < 1:
        raise ConfigError("n must be at least 1")
    return np.asarray(model.sample_scores(x, n, stream), dtype=np.float64).mean(axis=0)


def hoeffding_half_width(n, eta, K):
    if not 0 < eta < 1:
        raise ConfigError(f"eta must lie in (0, 1), got {eta}")
    if n < 1 or K < 1:
        raise ConfigError("n and K must be at least 1")
    return math.sqrt(math.log(2.0 * K / (1.0 - eta)) / (2.0 * n))


def hoeffding_bounds(e_hat, n, eta, K):
    """Two-sided per-class bounds, union bound over K classes, clipped to [0, 1]."""
    w = hoeffding_half_width(n, eta, K)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    return np.maximum(e_hat - w, 0.0), np.minimum(e_hat + w, 1.0)


def robustness_check(e_lb, e_ub, k, eps_sum):
    others = np.delete(np.asarray(e_ub, dtype=np.float64), k)
    top_other = others.max() if others.size else 0.0
    return bool(e_lb[k] > math.exp(2.0 * eps_sum) * top_other)


def kappa_phi(delta_R, m, eps1, eps_r, delta_x_r, delta_h_r):
    """Group sizes for the input and hidden mechanisms, and their composed radius."""
    if not (delta_x_r > 0 and delta_h_r > 0 and delta_R > 0):
        raise ConfigError("sensitivities must be positive")
    if not (m > 0 and eps1 > 0 and eps_r > 0):
        raise ConfigError("m, eps1 and eps_r must be positive")
    kappa = (delta_R / (m * eps1)) / (delta_x_r / eps_r)
    phi = (2.0 * delta_R / (m * eps1)) / (delta_h_r / eps_r)
    return kappa, phi, kappa * phi / (kappa + phi)


def robustness_sensitivities(mu, d, beta, theta1):
    """(mu * d, beta * max row 1-norm of theta1) for l-infinity perturbations."""
    norm = row_norm_inf(np.asarray(theta1))
    if not norm > 0:
        raise DegenerateParamError("theta1 is zero; the hidden-layer sensitivity vanishes")
    return mu * d, beta * norm


def radius_closed_form(delta_R, m, eps1, eps_r, delta_x_r, delta_h_r):
    return delta_R * eps_r / (m * eps1 * (delta_x_r + delta_h_r / 2.0))


def argmax_lowest(v):
    v = np.asarray(v)
    return int(np.flatnonzero(v == v.max())[0])


def _grid_scan(e_lb, e_ub, k, grid):
    """Ascending scan, stopping at the first failure (the check is monotone in eps_r)."""
    best = 0.0
    for eps_r in grid:
        if not robustness_check(e_lb, e_ub, k, eps_r):
            break
        best = float(eps_r)
    return best


def brute_force_eps_r(e_lb, e_ub, k, grid):
    """Largest grid eps_r passing the check, evaluating every point."""
    passing = [float(g) for g in grid if robustness_check(e_lb, e_ub, k, g)]
    return max(passing) if passing else 0.0


def certify_expectation(e_hat, n, eta, grid, delta_R, m, eps1, delta_x_r, delta_h_r):
    """Certification from an already computed Monte-Carlo expectation."""
    e_hat = np.asarray(e_hat, dtype=np.float64)
    K = e_hat.shape[0]
    e_lb, e_ub = hoeffding_bounds(e_hat, n, eta, K)
    k = argmax_lowest(e_hat)
    eps_r_star = _grid_scan(e_lb, e_ub, k, grid)
    if eps_r_star > 0:
        kappa, phi, radius = kappa_phi(delta_R, m, eps1, eps_r_star, delta_x_r, delta_h_r)
    else:
        kappa = phi = radius = 0.0
    return CertificationResult(k, e_hat, e_lb, e_ub, eps_r_star, float(radius), eta, kappa, phi)


def radius_search(model, x, config, stream=None):
    """One Monte-Carlo pass, then the largest grid eps_r that passes the composed check."""
    if stream is None:
        stream = InferenceNoiseStream(model.noise, config.psi, stream_id=("certify", config.seed))
    e_hat = monte_carlo_expectation(model, x, config.n, stream)
    dx, dh = model.sensitivities(config.mu_for_sensitivity)
    return certify_expectation(e_hat, config.n, config.eta, config.grid, model.delta_R, model.m,
                               model.eps1, dx, dh)


def verified_infer(model, x, mu_a, config, stream=None):
    if mu_a < 0:
        raise ConfigError("attack size mu_a must be nonnegative")
    res = radius_search(model, x, config, stream)
    return res.is_robust_at(mu_a), res.label, res.radius


def certify_batch(model, X, config):
    """Certify each row with its own forked noise stream (keyed by row index)."""
    base = InferenceNoiseStream(model.noise, config.psi, stream_id=("certify", config.seed))
    return [radius_search(model, x, config, base.fork(i)) for i, x in enumerate(np.atleast_2d(X))]


def smoothed_pgd(model, x, radius, steps=200, n_grad=32, step=None, seed=0, bounds=None):
    """PGD against the smoothed decision: gradients averaged over fresh noise draws.

    The target label is the smoothed prediction at ``x`` estimated from the
    same draws used for the first gradient. Returns the final adversarial input.
    """
    x = np.asarray(x, dtype=np.float64)
    if radius <= 0:
        return x.copy()
    step = radius / 4.0 if step is None else step
    stream = InferenceNoiseStream(model.noise, 2.0, stream_id=("smoothed-pgd", seed))
    xn, hn = model.draw(n_grad, stream)
    scores = forward(model.params, np.repeat(x[None], n_grad, axis=0), xn, hn).scores
    y = np.eye(model.K)[argmax_lowest(scores.mean(axis=0))]
    adv = x + make_rng(seed, "smoothed-pgd-start").uniform(-radius, radius, size=x.shape)
    for _ in range(steps):
        xn, hn = model.draw(n_grad, stream)
        _, g = model.expected_loss_grad(adv, y, xn, hn)
        adv = np.clip(adv + step * np.sign(g), x - radius, x + radius)
        if bounds is not None:
            adv = np.clip(adv, bounds[0], bounds[1])
    return adv


def write_cert_report(path, results, mu_a, header_lines=(), ids=None):
    with open(path, "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        w = csv.writer(f)
        w.writerow(CERT_COLUMNS)
        for i, r in enumerate(results):
            w.writerow([i if ids is None else ids[i], r.label, repr(r.radius), repr(r.eps_r_star),
                        repr(r.e_lb_k), repr(r.max_e_ub_other), int(r.is_robust_at(mu_a))])
