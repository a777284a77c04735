"""Shared oracles for the test suite (finite differences, micro instances)."""

import numpy as np

from stobatch.nn import ModelParams, forward
from stobatch.objectives import per_example_output_loss
from stobatch.data import one_hot


def central_difference(f, x, step=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` (modified in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        up = f()
        x[i] = old - step
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * step)
    return g


def relative_error(a, b, floor=1e-6):
    """Max abs difference over the larger magnitude; ``floor`` keeps saturated (tiny) gradients
    from being judged by finite-difference round-off alone."""
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def micro_classifier(rng, d=None, beta=None, width=None, K=None, B=None):
    """Random small network, inputs, labels and noise for classifier-gradient checks."""
    d = d or int(rng.integers(1, 5))
    beta = beta or int(rng.integers(1, 5))
    width = width or int(rng.integers(1, 4))
    K = K or int(rng.integers(2, 4))
    B = B or int(rng.integers(1, 5))
    params = ModelParams(rng.uniform(-0.4, 0.4, (d, beta)),
                         [(rng.normal(0, 0.8, (beta, width)), rng.normal(0, 0.3, width))],
                         rng.normal(0, 0.8, (width, K)))
    x = rng.uniform(-1, 1, (B, d))
    y = one_hot(rng.integers(0, K, B), K)
    chi2 = rng.laplace(0, 1, beta)
    chi3 = rng.laplace(0, 1, width)
    m = B + int(rng.integers(0, 3))
    weights = rng.uniform(0.1, 1.0, B)
    return params, x, y, chi2, chi3, m, weights


def classifier_objective(params, x, y, chi2, chi3, m, weights):
    tr = forward(params, x, 0.0, 2.0 * chi2 / m)
    return float((weights * per_example_output_loss(tr.h_pi, params.w_pi, y, chi3, m)).sum())


def reconstruction_neighbor_gap(x, h, x_new, h_new, row):
    """Coefficient distance when tuple ``row`` of a batch is replaced, computed with explicit loops."""
    n, d = x.shape
    beta = h.shape[1]
    x2, h2 = x.copy(), h.copy()
    x2[row], h2[row] = x_new, h_new
    total = 0.0
    for j in range(d):
        for b in range(beta):
            total += abs(sum(0.5 * h[i, b] for i in range(n)) - sum(0.5 * h2[i, b] for i in range(n)))
        total += abs(sum(x[i, j] for i in range(n)) - sum(x2[i, j] for i in range(n)))
    return total


def output_neighbor_gap(h_pi, y, h_new, y_new, row):
    n, width = h_pi.shape
    K = y.shape[1]
    h2, y2 = h_pi.copy(), y.copy()
    h2[row], y2[row] = h_new, y_new
    total = 0.0
    for k in range(K):
        for u in range(width):
            total += abs(sum(h_pi[i, u] * y[i, k] for i in range(n)) - sum(h2[i, u] * y2[i, k] for i in range(n)))
    return total


def random_sensitivity_instance(rng):
    """One micro batch with a random single-tuple replacement (extreme corners half the time)."""
    n, d, beta = int(rng.integers(1, 6)), int(rng.integers(1, 7)), int(rng.integers(1, 4))
    width, K = int(rng.integers(1, 4)), int(rng.integers(2, 4))

    def draw(shape):
        return rng.choice([-1.0, 1.0], size=shape) if rng.random() < 0.5 else rng.uniform(-1, 1, shape)

    x, h, hp = draw((n, d)), draw((n, beta)), draw((n, width))
    y = one_hot(rng.integers(0, K, n), K)
    row = int(rng.integers(0, n))
    return dict(x=x, h=h, h_pi=hp, y=y, row=row, x_new=draw(d), h_new=draw(beta), hp_new=draw(width),
                y_new=one_hot([int(rng.integers(0, K))], K)[0])


def grid_gap_1d(x, step=1e-3):
    """Per-example gap between grid optima of the truncated and full 1-D reconstruction objectives."""
    from stobatch.objectives import reconstruction_cross_entropy, reconstruction_truncated

    X = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    grid = np.round(np.arange(-1.0, 1.0 + step / 2, step), 12)
    full = min(reconstruction_cross_entropy(X, np.array([[t]])) for t in grid)
    trunc = min(reconstruction_truncated(X, np.array([[t]])) for t in grid)
    return abs(full - trunc) / X.shape[0]


def small_training_setup(eps1=1.0, eps2=1.0, n=400, d=4, m=50, beta=6, width=4, seed=0, **overrides):
    """Synthetic 2-class data, a matching noise bundle and a quick training config."""
    from stobatch.attacks import AttackConfig
    from stobatch.data import synth_dataset
    from stobatch.noise import draw_training_noise
    from stobatch.objectives import sensitivity_output, sensitivity_reconstruction
    from stobatch.training import TrainingConfig

    X, y = synth_dataset(n, d, 2, seed, separation=0.8, spread=0.2)
    noise = draw_training_noise(sensitivity_reconstruction(d, beta), eps1, sensitivity_output(width), eps2,
                                d, beta, width, seed + 100)
    kw = dict(steps=10, m=m, eps1=eps1, eps2=eps2, learning_rate=0.1, lr_theta1=1e-9, hidden_sizes=(width,),
              attack=AttackConfig(mu=0.2, steps=2, kinds=("fgsm", "ifgsm")), mu_max=0.2, seed=seed,
              weight_decay=0.01, theta1_norm_cap=1.0)
    kw.update(overrides)
    return (X, y), noise, TrainingConfig(**kw)


def aligned_stobatch_inputs(n_batches, steps):
    """Trainer i holds (i, i + 1) and round t uses trainer t mod n_batches: the sequential cycle."""
    from stobatch.training import TrainerAssignment

    assignments = [TrainerAssignment(i, (i, (i + 1) % n_batches)) for i in range(n_batches)]
    return assignments, [[t % n_batches] for t in range(steps)]


class CategoricalScorer:
    """Scorer whose every call returns a one-hot draw from fixed class probabilities.

    The true expectation is ``probs``, so confidence-bound coverage can be checked exactly.
    With a degenerate ``probs`` it is the constant classifier.
    """

    def __init__(self, probs, delta_R=54.0, eps1=1.0, m=10, sens=(1.8, 2.7)):
        self.probs = np.asarray(probs, dtype=np.float64)
        self.K = self.probs.shape[0]
        self.delta_R, self.eps1, self.m = delta_R, eps1, m
        self._sens = sens

    def sample_scores(self, x, n, stream):
        rng = stream if isinstance(stream, np.random.Generator) else np.random.default_rng(stream)
        return np.eye(self.K)[rng.choice(self.K, size=n, p=self.probs)]

    def sensitivities(self, mu):
        return self._sens
