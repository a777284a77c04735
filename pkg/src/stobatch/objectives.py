"""Sensitivities, Taylor-approximated perturbed objectives and the privacy accountant."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ConsistencyError, DegenerateParamError, PrivacyViolationError, ShapeError
from .nn import encode, noised_hidden, reconstruct


def sensitivity_reconstruction(d, beta):
    """Global sensitivity d * (beta + 2) of the reconstruction polynomial."""
    if d < 1 or beta < 1:
        raise ConfigError("d and beta must be at least 1")
    return d * (beta + 2)


def sensitivity_output(h_pi_size):
    """Global sensitivity 2 * |h_pi| of the label-dependent output term."""
    if h_pi_size < 1:
        raise ConfigError("|h_pi| must be at least 1")
    return 2 * h_pi_size


def reconstruction_coefficients(x, h):
    """Batch-summed coefficients (sum_i h_i / 2, sum_i x_i) of the truncated reconstruction."""
    return 0.5 * np.asarray(h).sum(axis=0), np.asarray(x).sum(axis=0)


def output_coefficients(h_pi, y):
    """Batch-summed label coefficients, row k = sum_i h_pi_i * y_ik."""
    return np.asarray(y).T @ np.asarray(h_pi)


# -- reconstruction ---------------------------------------------------------

def perturbed_reconstruction_loss(batch, theta1, chi2, m):
    """sum_i [ sum_j theta1_j . h_bar_i / 2 - x_bar_i . x_tilde_i ] over perturbed rows."""
    X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if X.shape[1] != theta1.shape[0]:
        raise ShapeError(f"batch width {X.shape[1]} does not match theta1 rows {theta1.shape[0]}")
    h_bar = noised_hidden(encode(X, theta1), chi2, m)
    x_tilde = reconstruct(h_bar, theta1)
    return float(0.5 * (h_bar @ theta1.sum(axis=0)).sum() - (X * x_tilde).sum())


def reconstruction_logits(X, theta1):
    """z_ij = theta1_j . h_i with h_i = clamp(theta1^T x_i), no noise."""
    return encode(X, theta1) @ theta1.T


def reconstruction_cross_entropy(X, theta1):
    """Untruncated objective sum x log(1+e^-z) + (1-x) log(1+e^z) via its closed form."""
    X = np.atleast_2d(X)
    z = reconstruction_logits(X, theta1)
    return float((X * np.logaddexp(0.0, -z) + (1.0 - X) * np.logaddexp(0.0, z)).sum())


def reconstruction_truncated(X, theta1):
    """First-order expansion sum [log 2 + z (1/2 - x)]."""
    X = np.atleast_2d(X)
    z = reconstruction_logits(X, theta1)
    return float((math.log(2.0) + z * (0.5 - X)).sum())


# -- output layer -----------------------------------------------------------

def _check_one_hot(y):
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ConsistencyError("labels must be one-hot rows")
    return y


def taylor_output_terms(h_pi, W_pi, y):
    """Return (L1, L2): L1 holds every label-free term, L2 = sum_k (h_pi y_k) . W_pi_k."""
    y = _check_one_hot(y)
    h_pi = np.atleast_2d(h_pi)
    if h_pi.shape[1] != W_pi.shape[0] or y.shape != (h_pi.shape[0], W_pi.shape[1]):
        raise ShapeError("h_pi, W_pi and y do not chain")
    z = h_pi @ W_pi
    L1 = float((z - 0.5 * np.abs(z) + 0.125 * z ** 2).sum())
    L2 = float((output_coefficients(h_pi, y) * W_pi.T).sum())
    return L1, L2


def taylor_output_loss(h_pi, W_pi, y):
    L1, L2 = taylor_output_terms(h_pi, W_pi, y)
    return L1 - L2


def per_example_output_loss(h_pi, W_pi, y, chi3=None, m=1):
    """Vector of per-row perturbed Taylor losses (chi3=None gives the noiseless form)."""
    y = _check_one_hot(y)
    z = np.atleast_2d(h_pi) @ W_pi
    loss = (z - 0.5 * np.abs(z) + 0.125 * z ** 2 - z * y).sum(axis=1)
    if chi3 is not None:
        loss = loss - float(np.asarray(chi3) @ W_pi.sum(axis=1)) / m
    return loss


def perturbed_output_loss(h_pi, W_pi, y, chi3, m):
    """L1 - L2_bar with L2_bar = sum_k sum_i (h_pi_i y_ik + chi3/m) . W_pi_k."""
    chi3 = np.asarray(chi3, dtype=np.float64)
    if chi3.shape != (W_pi.shape[0],):
        raise ShapeError(f"chi3 has shape {chi3.shape}, expected ({W_pi.shape[0]},)")
    L1, L2 = taylor_output_terms(h_pi, W_pi, y)
    n = np.atleast_2d(h_pi).shape[0]
    noise = n * float(chi3 @ W_pi.sum(axis=1)) / m
    return L1 - (L2 + noise)


def adversarial_objective(benign_losses, adv_losses, xi, m, benign_indices=None, adv_indices=None):
    """(sum benign + xi * sum adversarial) / (m (1 + xi)) over two disjoint batches."""
    if xi < 0:
        raise ConfigError("xi must be nonnegative")
    if benign_indices is not None and adv_indices is not None:
        if set(benign_indices) & set(adv_indices):
            raise PrivacyViolationError("benign and adversarial batches overlap")
    return (float(np.sum(benign_losses)) + xi * float(np.sum(adv_losses))) / (m * (1.0 + xi))


def objective_weights(n_benign, n_adv, xi, m):
    """Per-example weights realising :func:`adversarial_objective` on a stacked batch."""
    scale = 1.0 / (m * (1.0 + xi))
    return np.concatenate([np.full(n_benign, scale), np.full(n_adv, xi * scale)])


# -- accounting -------------------------------------------------------------

@dataclass(frozen=True)
class PrivacyConfig:
    eps1: float
    eps2: float
    m: int
    d: int
    beta: int
    h_pi_size: int

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ConfigError(f"privacy config field {k} must be positive, got {v}")

    @property
    def delta_R(self):
        return sensitivity_reconstruction(self.d, self.beta)

    @property
    def delta_L2(self):
        return sensitivity_output(self.h_pi_size)


@dataclass(frozen=True)
class PrivacyReport:
    eps1: float
    eps2: float
    m: int
    delta_R: float
    delta_L2: float
    theta1_norm_11: float
    gamma: float
    gamma_x: float
    total_eps: float
    gamma_source: str

    def to_text(self):
        return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text):
        kv = {}
        for line in text.splitlines():
            if "=" in line and not line.lstrip().startswith("#"):
                k, v = (s.strip() for s in line.split("=", 1))
                kv[k] = v
        types = {"m": int, "gamma_source": str}
        return cls(**{k: types.get(k, float)(kv[k]) for k in cls.__dataclass_fields__})


def column_norm_11(theta1):
    """Maximum 1-norm over the columns of theta1."""
    return float(np.abs(theta1).sum(axis=0).max())


def row_norm_inf(theta1):
    """Maximum 1-norm over the rows of theta1."""
    return float(np.abs(theta1).sum(axis=1).max())


def _gammas(delta_R, m, norm):
    return 2.0 * delta_R / (m * norm), delta_R / m


def accountant(config, theta1=None, norm_cap=None):
    """Compose eps1 + eps1/gamma_x + eps1/gamma + eps2.

    gamma is measured from ``theta1`` or declared from ``norm_cap`` (an upper
    bound on the column 1-norm enforced during training); give exactly one.
    The result does not depend on the number of training steps.
    """
    if (theta1 is None) == (norm_cap is None):
        raise ConfigError("give exactly one of theta1 or norm_cap")
    if theta1 is not None:
        norm, source = column_norm_11(np.asarray(theta1)), "measured"
    else:
        norm, source = float(norm_cap), "declared"
    if not norm > 0:
        raise DegenerateParamError("theta1 has zero column norm; gamma is undefined")
    dR, dL = config.delta_R, config.delta_L2
    gamma, gamma_x = _gammas(dR, config.m, norm)
    total = config.eps1 * (1.0 + 1.0 / gamma_x + 1.0 / gamma) + config.eps2
    return PrivacyReport(float(config.eps1), float(config.eps2), int(config.m), float(dR), float(dL),
                         norm, gamma, gamma_x, total, source)


def split_budget(eps_total, eps2, d, beta, m, theta1_norm):
    """eps1 = (eps - eps2) / (1 + 1/gamma + 1/gamma_x) so the composed total equals eps."""
    if not eps_total > eps2 > 0:
        raise ConfigError("need eps_total > eps2 > 0")
    gamma, gamma_x = _gammas(sensitivity_reconstruction(d, beta), m, theta1_norm)
    return (eps_total - eps2) / (1.0 + 1.0 / gamma + 1.0 / gamma_x)


def approximation_error_bounds(d, K):
    """Average truncation-error constants (reconstruction, output layer)."""
    e = math.e
    return 4.0 * e * d / (1.0 + e) ** 2, (e * e + 2.0 * e - 1.0) / (e * (1.0 + e) ** 2) * K
