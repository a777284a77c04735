"""Dense auto-encoder + classifier with hand-derived gradients.

Architecture, for a (possibly already perturbed) input row ``x_bar``::

    h      = clamp(x_bar @ theta1, -1, 1)          encoder, |h| <= 1
    h_bar  = h + hidden_shift                       2*chi2/m during training
    h_l    = tanh(h_{l-1} @ W_l + b_l)              classifier hidden layers
    logits = h_pi @ W_pi                            h_pi is the last hidden layer
    scores = softmax(logits)
    x_tilde = h_bar @ theta1.T                      reconstruction

All arrays are float64 and every function accepts a single row or a batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ConsistencyError, FormatError, ShapeError
from .rng import make_rng

CHECKPOINT_MAGIC = b"SBCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """Encoder ``theta1`` (d x beta) and classifier ``theta2`` = hidden layers + ``w_pi``.

    The same container is used for gradients.
    """

    theta1: np.ndarray
    hidden: list  # [(W, b), ...]
    w_pi: np.ndarray

    def __post_init__(self):
        self.theta1 = np.asarray(self.theta1, dtype=np.float64)
        self.hidden = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64)) for W, b in self.hidden]
        self.w_pi = np.asarray(self.w_pi, dtype=np.float64)
        if not self.hidden:
            raise ShapeError("classifier needs at least one tanh hidden layer")
        width = self.theta1.shape[1]
        for W, b in self.hidden:
            if W.shape[0] != width or b.shape != (W.shape[1],):
                raise ShapeError(f"hidden layer of shape {W.shape} does not follow width {width}")
            width = W.shape[1]
        if self.w_pi.shape[0] != width:
            raise ShapeError(f"W_pi has {self.w_pi.shape[0]} rows but h_pi has {width} units")

    @property
    def d(self):
        return self.theta1.shape[0]

    @property
    def beta(self):
        return self.theta1.shape[1]

    @property
    def h_pi_size(self):
        return self.w_pi.shape[0]

    @property
    def K(self):
        return self.w_pi.shape[1]

    @property
    def theta2(self):
        return [*self.hidden, self.w_pi]

    def arrays(self):
        out = [self.theta1]
        for W, b in self.hidden:
            out += [W, b]
        out.append(self.w_pi)
        return out

    @classmethod
    def from_arrays(cls, arrays):
        arrays = list(arrays)
        hidden = [(arrays[i], arrays[i + 1]) for i in range(1, len(arrays) - 1, 2)]
        return cls(arrays[0], hidden, arrays[-1])

    def copy(self):
        return ModelParams.from_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self):
        return ModelParams.from_arrays([np.zeros_like(a) for a in self.arrays()])

    def step(self, grad, lr, lr_theta1=None):
        """Return ``self - lr * grad`` (``lr_theta1`` overrides the encoder rate)."""
        lr1 = lr if lr_theta1 is None else lr_theta1
        new = [self.theta1 - lr1 * grad.theta1]
        new += [p - lr * g for p, g in zip(self.arrays()[1:], grad.arrays()[1:])]
        return ModelParams.from_arrays(new)

    def is_finite(self):
        return all(np.isfinite(a).all() for a in self.arrays())

    def max_abs_diff(self, other):
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self.arrays(), other.arrays()))


def init_params(d, beta, hidden_sizes, K, seed):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if d < 1 or beta < 1 or K < 2 or not hidden_sizes or min(hidden_sizes) < 1:
        raise ConfigError("network dimensions must be positive, with at least one hidden layer and K >= 2")
    rng = make_rng(seed, "init")

    def uniform(fan_in, fan_out):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    theta1 = uniform(d, beta)
    hidden, width = [], beta
    for size in hidden_sizes:
        hidden.append((uniform(width, size), np.zeros(size)))
        width = size
    return ModelParams(theta1, hidden, uniform(width, K))


# -- forward pieces ---------------------------------------------------------

def _check_cols(x, n, what):
    if x.shape[-1] != n:
        raise ShapeError(f"{what}: expected trailing dimension {n}, got shape {x.shape}")


def encode(x_bar, theta1):
    x_bar = np.asarray(x_bar, dtype=np.float64)
    _check_cols(x_bar, theta1.shape[0], "encode")
    return np.clip(x_bar @ theta1, -1.0, 1.0)


def noised_hidden(h, chi2, m):
    h = np.asarray(h, dtype=np.float64)
    chi2 = np.asarray(chi2, dtype=np.float64)
    _check_cols(h, chi2.shape[-1], "noised_hidden")
    return h + 2.0 * chi2 / m


def reconstruct(h_bar, theta1):
    h_bar = np.asarray(h_bar, dtype=np.float64)
    _check_cols(h_bar, theta1.shape[1], "reconstruct")
    return h_bar @ theta1.T


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardTrace:
    x_bar: np.ndarray
    pre: np.ndarray  # x_bar @ theta1 before the clamp
    h: np.ndarray
    h_bar: np.ndarray
    layers: list  # tanh activations, the last one is h_pi
    logits: np.ndarray
    scores: np.ndarray
    x_tilde: np.ndarray = field(default=None, repr=False)

    @property
    def h_pi(self):
        return self.layers[-1]


def classify(h_bar, params):
    """Tanh hidden layers then softmax over ``h_pi @ W_pi``; returns (layers, logits, scores)."""
    h_bar = np.asarray(h_bar, dtype=np.float64)
    _check_cols(h_bar, params.beta, "classify")
    layers, act = [], h_bar
    for W, b in params.hidden:
        act = np.tanh(act @ W + b)
        layers.append(act)
    logits = act @ params.w_pi
    return layers, logits, softmax(logits)


def forward(params, x, input_shift=0.0, hidden_shift=0.0, with_reconstruction=False):
    """Full pass for a batch ``x`` (B x d); shifts broadcast against rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_cols(x, params.d, "forward")
    x_bar = x + input_shift
    pre = x_bar @ params.theta1
    h = np.clip(pre, -1.0, 1.0)
    h_bar = h + hidden_shift
    layers, logits, scores = classify(h_bar, params)
    tr = ForwardTrace(x_bar, pre, h, h_bar, layers, logits, scores)
    if with_reconstruction:
        tr.x_tilde = reconstruct(h_bar, params.theta1)
    return tr


# -- gradients --------------------------------------------------------------

def grad_reconstruction(theta1, batch, chi2, m):
    """Exact gradient of the perturbed reconstruction objective w.r.t. theta1.

    With C = 1/2 - x_bar the objective is sum(h_bar * (C @ theta1)); the
    gradient is the direct term C.T @ h_bar (column j: sum_i h_bar_i (1/2 - x_bar_ij))
    plus the path through h = clamp(x_bar @ theta1), which is zero where the
    clamp is saturated.
    """
    X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if X.shape[0] == 0:
        raise ConfigError("reconstruction gradient needs a nonempty batch")
    _check_cols(X, theta1.shape[0], "grad_reconstruction")
    pre = X @ theta1
    h_bar = np.clip(pre, -1.0, 1.0) + 2.0 * np.asarray(chi2) / m
    C = 0.5 - X
    active = np.abs(pre) < 1.0
    return C.T @ h_bar + X.T @ ((C @ theta1) * active)


LOSSES = ("perturbed", "taylor", "xent")


def _dlogits(logits, scores, y, loss):
    if loss == "xent":
        return scores - y
    # d/dz of z - z*y - |z|/2 + z^2/8
    return 1.0 - 0.5 * np.sign(logits) + 0.25 * logits - y


def grad_classifier(params, trace, labels, chi3, m, loss="perturbed", weights=None):
    """Gradients of ``sum_i weights_i * loss_i`` w.r.t. every classifier layer.

    Returns ``(hidden_grads, w_pi_grad)`` with hidden_grads = [(gW, gb), ...].
    """
    if loss not in LOSSES:
        raise ConfigError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    B = trace.logits.shape[0]
    if y.shape != trace.logits.shape:
        raise ConsistencyError(f"labels of shape {y.shape} do not align with logits {trace.logits.shape}")
    w = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (B,):
        raise ConsistencyError("per-example weights do not align with the batch")
    dz = _dlogits(trace.logits, trace.scores, y, loss) * w[:, None]
    g_wpi = trace.h_pi.T @ dz
    if loss == "perturbed":
        # noise term -(1/m) * sum_k chi3 . W_pi[:, k] in every example's loss
        g_wpi = g_wpi - np.outer(np.asarray(chi3, dtype=np.float64), np.ones(params.K)) * (w.sum() / m)
    d_act = dz @ params.w_pi.T
    grads = []
    inputs = [trace.h_bar] + trace.layers[:-1]
    for (W, _), act, inp in zip(reversed(params.hidden), reversed(trace.layers), reversed(inputs)):
        dpre = d_act * (1.0 - act ** 2)
        grads.append((inp.T @ dpre, dpre.sum(axis=0)))
        d_act = dpre @ W.T
    grads.reverse()
    return grads, g_wpi


def cross_entropy(scores, y):
    return -np.log(np.maximum((scores * y).sum(axis=-1), 1e-300))


def input_gradient(params, x, y, input_shift=0.0, hidden_shift=0.0):
    """Per-example cross-entropy loss and its gradient w.r.t. the input rows."""
    tr = forward(params, x, input_shift, hidden_shift)
    y = np.atleast_2d(y)
    d_act = (tr.scores - y) @ params.w_pi.T
    for (W, _), act in zip(reversed(params.hidden), reversed(tr.layers)):
        d_act = (d_act * (1.0 - act ** 2)) @ W.T
    d_pre = d_act * (np.abs(tr.pre) < 1.0)
    return cross_entropy(tr.scores, y), d_pre @ params.theta1.T


class Network:
    """A parameter snapshot plus fixed noise shifts; the object attacks operate on.

    Attacks only ever see this object and input rows, never labels.
    """

    def __init__(self, params, input_shift=0.0, hidden_shift=0.0):
        self.params = params
        self.input_shift = input_shift
        self.hidden_shift = hidden_shift

    @property
    def K(self):
        return self.params.K

    def scores(self, x):
        return forward(self.params, x, self.input_shift, self.hidden_shift).scores

    def predict(self, x):
        return np.argmax(self.scores(x), axis=-1)

    def loss_and_grad(self, x, y):
        return input_gradient(self.params, x, y, self.input_shift, self.hidden_shift)


# -- checkpoints ------------------------------------------------------------
# little-endian: magic "SBCK", u32 version, u32 d, u32 beta, u32 K, u32 n_hidden,
# u32 width per hidden layer, u32 has_noise, [u64 noise seed], then row-major
# f64 blocks: theta1, (W, b) per hidden layer, W_pi, [chi1, chi2, chi3].

def save_checkpoint(path, params, noise=None):
    widths = [W.shape[1] for W, _ in params.hidden]
    header = CHECKPOINT_MAGIC + struct.pack(
        f"<IIIII{len(widths)}II", CHECKPOINT_VERSION, params.d, params.beta, params.K, len(widths), *widths,
        0 if noise is None else 1,
    )
    blocks = params.arrays()
    if noise is not None:
        header += struct.pack("<Q", noise.seed)
        blocks = blocks + [noise.chi1, noise.chi2, noise.chi3]
    with open(path, "wb") as f:
        f.write(header)
        for a in blocks:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(params, noise_or_None)``."""
    from .noise import NoiseBundle

    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a stobatch checkpoint")
    try:
        version, d, beta, K, n_hidden = struct.unpack_from("<IIIII", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 24
        widths = struct.unpack_from(f"<{n_hidden}I", raw, off)
        off += 4 * n_hidden
        (has_noise,) = struct.unpack_from("<I", raw, off)
        off += 4
        seed = None
        if has_noise:
            (seed,) = struct.unpack_from("<Q", raw, off)
            off += 8
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    shapes = [(d, beta)]
    width = beta
    for w in widths:
        shapes += [(width, w), (w,)]
        width = w
    shapes.append((width, K))
    if has_noise:
        shapes += [(d,), (beta,), (width,)]
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        if off + 8 * count > len(raw):
            raise FormatError(f"{path}: truncated payload")
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64))
        off += 8 * count
    n_param = 2 + 2 * n_hidden
    params = ModelParams.from_arrays(arrays[:n_param])
    noise = None
    if has_noise:
        chi = arrays[n_param:]
        for a in chi:
            a.setflags(write=False)
        noise = NoiseBundle(chi[0], chi[1], chi[2], int(seed))
    return params, noise
