"""Laplace sampling, the one-off training noise draw and inference-time noise streams."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PrivacyViolationError
from .rng import make_rng

_TINY = np.finfo(np.float64).tiny


def laplace_vector(scale, length, rng):
    """I.i.d. Laplace(0, scale) entries by inverse-CDF sampling.

    ``length`` may be an int or a shape tuple; ``rng`` is a numpy Generator.
    """
    if not scale > 0:
        raise ConfigError(f"Laplace scale must be positive, got {scale}")
    size = (length,) if np.isscalar(length) else tuple(length)
    if any(s < 1 for s in size):
        raise ConfigError("Laplace vector length must be at least 1")
    u = rng.random(size)
    u = np.maximum(u, _TINY)
    # F^-1(u) = b*ln(2u) below the median, -b*ln(2(1-u)) above it
    return np.where(u < 0.5, scale * np.log(2.0 * u), -scale * np.log(2.0 * (1.0 - u)))


@dataclass(frozen=True)
class NoiseBundle:
    chi1: np.ndarray
    chi2: np.ndarray
    chi3: np.ndarray
    seed: int

    def fingerprint(self):
        h = hashlib.sha256()
        for a in (self.chi1, self.chi2, self.chi3):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def draw_training_noise(delta_R, eps1, delta_L2, eps2, d, beta, h_pi_size, seed):
    """Draw (chi1, chi2, chi3) once; scales are delta_R/eps1 and delta_L2/eps2."""
    for name, v in (("delta_R", delta_R), ("eps1", eps1), ("delta_L2", delta_L2), ("eps2", eps2)):
        if not v > 0:
            raise ConfigError(f"{name} must be positive, got {v}")
    b1 = delta_R / eps1
    chi1 = laplace_vector(b1, d, make_rng(seed, "noise", "chi1"))
    chi2 = laplace_vector(b1, beta, make_rng(seed, "noise", "chi2"))
    chi3 = laplace_vector(delta_L2 / eps2, h_pi_size, make_rng(seed, "noise", "chi3"))
    for a in (chi1, chi2, chi3):
        a.setflags(write=False)
    return NoiseBundle(chi1, chi2, chi3, int(seed))


class NoiseGuard:
    """Holds the one bundle a training run may use; a second draw is rejected."""

    def __init__(self):
        self._bundle = None

    def draw(self, *args, **kwargs):
        if self._bundle is not None:
            raise PrivacyViolationError("training noise was already drawn for this run")
        self._bundle = draw_training_noise(*args, **kwargs)
        return self._bundle

    def check(self, bundle):
        if self._bundle is None:
            self._bundle = bundle
        elif bundle.fingerprint() != self._bundle.fingerprint():
            raise PrivacyViolationError("training noise changed mid-run")
        return bundle

    @property
    def bundle(self):
        return self._bundle


@dataclass
class InferenceNoiseStream:
    """Fresh draws centred on the training noise, with shift control ``psi``.

    Each call to :func:`next_inference_noise` uses its own sub-stream keyed by
    the draw counter, so draws are independent and reproducible.
    """

    base: NoiseBundle
    psi: float = 2.0
    stream_id: object = 0
    draw_index: int = field(default=0)

    def __post_init__(self):
        if not self.psi > 0:
            raise ConfigError(f"psi must be positive, got {self.psi}")

    def fork(self, stream_id):
        return InferenceNoiseStream(self.base, self.psi, stream_id=(self.stream_id, stream_id))


def next_inference_noise(stream, delta_R, eps1, m, count=None):
    """Return ``(input_noise, hidden_noise)`` for one draw, or ``count`` stacked draws.

    input  = chi1/m   + Lap((delta_R/eps1)/psi)/m
    hidden = 2chi2/m + 2 Lap((delta_R/eps1)/psi)/m
    """
    base = stream.base
    d, beta = base.chi1.shape[0], base.chi2.shape[0]
    rng = make_rng(base.seed, "inference", stream.stream_id, stream.draw_index)
    stream.draw_index += 1
    scale = (delta_R / eps1) / stream.psi
    rows = 1 if count is None else int(count)
    fresh_x = laplace_vector(scale, (rows, d), rng)
    fresh_h = laplace_vector(scale, (rows, beta), rng)
    x_noise = base.chi1 / m + fresh_x / m
    h_noise = 2.0 * base.chi2 / m + 2.0 * fresh_h / m
    if count is None:
        return x_noise[0], h_noise[0]
    return x_noise, h_noise
