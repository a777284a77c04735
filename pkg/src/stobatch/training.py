"""Sequential DP adversarial training and the parameter-server (StoBatch) trainer.

Both modes share :func:`compute_gradients`, so with one trainer and an aligned
batch schedule they produce identical parameter trajectories.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, craft_ensemble_batch
from .data import build_batch_plan, one_hot, perturb_batches
from .errors import (ConfigError, DivergenceError, IncompleteRoundError, PrivacyViolationError,
                     StaleGradientError)
from .nn import ModelParams, Network, forward, grad_classifier, grad_reconstruction, init_params, save_checkpoint
from .noise import NoiseGuard
from .objectives import PrivacyConfig, accountant, objective_weights, per_example_output_loss
from .rng import make_rng

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "mean_loss_benign", "mean_loss_adv", "grad_norm", "mu_t", "messages", "wall_ms")


@dataclass(frozen=True)
class TrainingConfig:
    steps: int
    m: int
    eps1: float
    eps2: float
    learning_rate: float = 1e-2
    lr_theta1: float | None = None
    xi: float = 1.0
    weight_decay: float = 0.0
    center_hidden_shift: bool = True
    hidden_sizes: tuple = (32,)
    attack: AttackConfig = field(default_factory=AttackConfig)
    mu_max: float = 1.0
    trainers: int = 1
    seed: int = 0
    theta1_norm_cap: float | None = None
    clip_mode: str = "envelope"
    loss: str = "perturbed"
    workers: int = 1
    round_timeout: float | None = None
    max_retries: int = 3
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        if self.m < 1 or self.trainers < 1:
            raise ConfigError("batch size and trainer count must be positive")
        if self.xi < 0 or self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("xi, learning rate and weight decay must be nonnegative")
        if not 0 < self.mu_max:
            raise ConfigError("mu_max must be positive")
        if self.clip_mode not in ("envelope", "none"):
            raise ConfigError(f"clip_mode must be 'envelope' or 'none', got {self.clip_mode!r}")
        if self.theta1_norm_cap is not None and not self.theta1_norm_cap > 0:
            raise ConfigError("theta1_norm_cap must be positive")

    def privacy(self, d, beta):
        return PrivacyConfig(self.eps1, self.eps2, self.m, d, beta, self.hidden_sizes[-1])


@dataclass(frozen=True)
class TrainerAssignment:
    trainer_id: int
    batch_pair: tuple  # (benign batch id, adversarial-source batch id)

    def __post_init__(self):
        if self.batch_pair[0] == self.batch_pair[1]:
            raise PrivacyViolationError(f"trainer {self.trainer_id} holds the same batch twice")


@dataclass(frozen=True)
class GradientMessage:
    trainer_id: int
    step: int
    grad: ModelParams
    stats: dict

    @property
    def grad_theta1(self):
        return self.grad.theta1

    @property
    def grad_theta2(self):
        return self.grad.theta2


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    plan_digest: str = ""
    assignment_digests: dict = field(default_factory=dict)
    measured_report: object = None
    dropped_stale: int = 0

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as f:
            for line in header_lines:
                f.write(f"# {line}\n")
            w = csv.writer(f)
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([r[c] for c in LOG_COLUMNS])


def project_theta1(theta1, cap):
    """Rescale columns whose 1-norm exceeds ``cap``."""
    if cap is None:
        return theta1
    norms = np.abs(theta1).sum(axis=0)
    return theta1 * np.minimum(1.0, cap / np.maximum(norms, 1e-300))


def centered_first_layer_step(gW, gb, shift):
    """Descent direction for the first classifier layer written as (h_bar - shift) W + b'.

    The network function is unchanged; only the coordinates gradient descent
    moves in differ, which removes the ill-conditioning a large common offset
    in h_bar causes. ``shift`` must come from perturbed quantities (here the
    batch mean of h_bar). Mapped back to the stored (W, b): dW = gW - shift (x) gb,
    db = gb - shift . dW.
    """
    shift = np.asarray(shift, dtype=np.float64)
    dW = gW - np.outer(shift, gb)
    return dW, gb - shift @ dW


def centered_init(params, perturbed, noise, m, norm_cap=None):
    """Initialise from statistics of the perturbed batches only.

    theta1 columns are made orthogonal to the mean perturbed input, so the
    encoder output is centred and the clamp is not saturated by the common
    shift; the first classifier bias cancels the mean of h_bar.
    """
    params = params.copy()
    rows = np.vstack([perturbed.batch(i).features for i in range(len(perturbed))])
    mean_x = rows.mean(axis=0)
    t1 = params.theta1
    norms = np.abs(t1).sum(axis=0)
    denom = mean_x @ mean_x
    if denom > 0:
        t1 = t1 - np.outer(mean_x, mean_x @ t1) / denom
    target = norms if norm_cap is None else np.full_like(norms, norm_cap)
    params.theta1 = t1 * (target / np.maximum(np.abs(t1).sum(axis=0), 1e-300))
    h_bar = np.clip(rows @ params.theta1, -1.0, 1.0) + 2.0 * noise.chi2 / m
    W, b = params.hidden[0]
    params.hidden[0] = (W, b - h_bar.mean(axis=0) @ W)
    return params


def draw_mu(seed, step, rank, mu_max=1.0):
    """mu_t uniform on (0, mu_max]."""
    return mu_max * (1.0 - make_rng(seed, "mu", step, rank).random())


def compute_gradients(params, benign, y_benign, source, y_source, mu_t, noise, config, step, rank):
    """Gradients of both perturbed objectives on a benign batch plus crafted adversarial batch.

    ``y_*`` are integer labels used only by the loss, never by the attacks.
    """
    if set(benign.indices) & set(source.indices):
        raise PrivacyViolationError("benign and adversarial-source batches overlap")
    m = config.m
    hidden_shift = 2.0 * noise.chi2 / m
    net = Network(params, 0.0, hidden_shift)
    bounds = None
    if config.clip_mode == "envelope":
        centre = noise.chi1 / m
        bounds = (centre - 1.0 - mu_t, centre + 1.0 + mu_t)
    x_adv = craft_ensemble_batch(net, source, config.attack.kinds, mu_t, m, config.attack,
                                 seed=(config.seed, "craft", step, rank), bounds=bounds)
    x_all = np.vstack([benign.features, x_adv])
    K = params.K
    y_all = np.vstack([one_hot(y_benign, K), one_hot(y_source, K)])

    g1 = grad_reconstruction(params.theta1, x_all, noise.chi2, m)
    trace = forward(params, x_all, 0.0, hidden_shift)
    weights = objective_weights(len(benign), len(x_adv), config.xi, m)
    hidden_g, wpi_g = grad_classifier(params, trace, y_all, noise.chi3, m, config.loss, weights)
    if config.center_hidden_shift:
        hidden_g[0] = centered_first_layer_step(*hidden_g[0], trace.h_bar[:len(benign)].mean(axis=0))
    if config.weight_decay:
        # data-independent L2 penalty on W_pi; keeps the linear chi3 term bounded
        wpi_g = wpi_g + config.weight_decay * params.w_pi
    grad = ModelParams(g1, hidden_g, wpi_g)

    losses = per_example_output_loss(trace.h_pi, params.w_pi, y_all, noise.chi3, m)
    nb = len(benign)
    stats = {
        "mean_loss_benign": float(losses[:nb].mean()),
        "mean_loss_adv": float(losses[nb:].mean()),
        "grad_norm": float(np.sqrt(sum((a ** 2).sum() for a in grad.arrays()))),
        "mu_t": float(mu_t),
    }
    return grad, stats


def _apply(params, grad, config):
    new = params.step(grad, config.learning_rate, config.lr_theta1)
    if config.theta1_norm_cap is not None:
        new.theta1 = project_theta1(new.theta1, config.theta1_norm_cap)
    return new


def _check_finite(stats, step):
    if not (np.isfinite(stats["mean_loss_benign"]) and np.isfinite(stats["mean_loss_adv"])):
        raise DivergenceError(step)


def _final_report(config, params, d, beta, log_):
    pc = config.privacy(d, beta)
    measured = accountant(pc, theta1=params.theta1)
    log_.measured_report = measured
    if config.theta1_norm_cap is not None:
        return accountant(pc, norm_cap=config.theta1_norm_cap)
    return measured


def _maybe_checkpoint(config, params, noise, step):
    if config.checkpoint_every and config.checkpoint_dir and step % config.checkpoint_every == 0:
        Path(config.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(Path(config.checkpoint_dir) / f"model_{step}.sbck", params, noise)


def _prepare(config, data, noise, params):
    X, labels = data
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    plan = build_batch_plan(X.shape[0], config.m, config.seed)
    perturbed = perturb_batches(plan, X, noise.chi1, config.m)
    K = int(labels.max()) + 1 if params is None else params.K
    if params is None:
        params = init_params(X.shape[1], noise.chi2.shape[0], list(config.hidden_sizes), max(K, 2), config.seed)
        if config.center_hidden_shift:
            params = centered_init(params, perturbed, noise, config.m, config.theta1_norm_cap)
    if params.beta != noise.chi2.shape[0] or params.h_pi_size != noise.chi3.shape[0] or params.d != X.shape[1]:
        raise ConfigError("noise bundle dimensions do not match the network")
    return X, labels, plan, perturbed, params


def train_sequential(config, data, noise, params=None, guard=None):
    """Batch-by-batch training: benign batch i = t mod (N/m), adversarial source batch i + 1."""
    guard = guard or NoiseGuard()
    guard.check(noise)
    X, labels, plan, perturbed, params = _prepare(config, data, noise, params)
    if len(plan) < 2:
        raise ConfigError("sequential training needs at least two batches")
    run_log = TrainLog(plan_digest=plan.digest())
    for t in range(config.steps):
        t0 = time.perf_counter()
        guard.check(noise)
        i = t % len(plan)
        if i == 0 and plan.digest() != run_log.plan_digest:
            raise PrivacyViolationError("batch plan changed between epochs")
        benign, source = perturbed.batch(i), perturbed.batch(i + 1)
        mu_t = draw_mu(config.seed, t, 0, config.mu_max)
        grad, stats = compute_gradients(params, benign, labels[list(benign.indices)], source,
                                        labels[list(source.indices)], mu_t, noise, config, t, 0)
        _check_finite(stats, t)
        params = _apply(params, grad, config)
        run_log.rows.append({"step": t, **stats, "messages": 1, "wall_ms": round(1e3 * (time.perf_counter() - t0), 3)})
        _maybe_checkpoint(config, params, noise, t + 1)
    return params, _final_report(config, params, X.shape[1], params.beta, run_log), run_log


# -- parameter server -------------------------------------------------------

def default_assignments(n_batches, seed):
    """Shuffle batch ids and hand out consecutive disjoint pairs: N/(2m) trainers."""
    ids = make_rng(seed, "assign").permutation(n_batches)
    return [TrainerAssignment(k, (int(ids[2 * k]), int(ids[2 * k + 1]))) for k in range(n_batches // 2)]


def local_trainer_step(assignment, params, mu_t, noise, config, perturbed, labels, step, rank):
    """One trainer's contribution at ``step``; reads the snapshot, never mutates it."""
    b1, b2 = assignment.batch_pair
    benign, source = perturbed.batch(b1), perturbed.batch(b2)
    grad, stats = compute_gradients(params, benign, labels[list(benign.indices)], source,
                                    labels[list(source.indices)], mu_t, noise, config, step, rank)
    return GradientMessage(assignment.trainer_id, step, grad, stats)


def aggregate(messages, learning_rate, params, expected_ids=None, step=None, lr_theta1=None):
    """Mean gradient in ascending trainer_id order, then one descent step."""
    if not messages:
        raise IncompleteRoundError("no gradient messages")
    ids = sorted(msg.trainer_id for msg in messages)
    if expected_ids is not None and ids != sorted(expected_ids):
        raise IncompleteRoundError(f"expected messages from {sorted(expected_ids)}, got {ids}")
    if len(set(ids)) != len(ids):
        raise IncompleteRoundError("duplicate trainer messages in one round")
    if step is not None and any(msg.step != step for msg in messages):
        raise StaleGradientError(f"round {step} received a message with another step tag")
    ordered = sorted(messages, key=lambda msg: msg.trainer_id)
    total = ordered[0].grad.copy()
    for msg in ordered[1:]:
        total = ModelParams.from_arrays([a + b for a, b in zip(total.arrays(), msg.grad.arrays())])
    mean = ModelParams.from_arrays([a / len(ordered) for a in total.arrays()])
    return params.step(mean, learning_rate, lr_theta1)


class ParameterServer:
    """Owns the global parameters and the step counter for synchronous rounds."""

    def __init__(self, params, config):
        self.params = params
        self.config = config
        self.step = 0

    def snapshot(self):
        return self.params.copy()

    def apply(self, messages, expected_ids):
        new = aggregate(messages, self.config.learning_rate, self.params, expected_ids, self.step,
                        self.config.lr_theta1)
        if self.config.theta1_norm_cap is not None:
            new.theta1 = project_theta1(new.theta1, self.config.theta1_norm_cap)
        self.params = new
        self.step += 1


def train_stobatch(config, data, noise, params=None, assignments=None, schedule=None, guard=None,
                   trainer_fn=local_trainer_step):
    """Synchronous parameter-server training over fixed batch pairs.

    Each step picks ``config.trainers`` trainers without replacement (or follows
    ``schedule[t]``, a list of trainer ids). Every picked trainer gets the
    step-t snapshot and its own mu_t; the server averages their gradients.
    """
    guard = guard or NoiseGuard()
    guard.check(noise)
    X, labels, plan, perturbed, params = _prepare(config, data, noise, params)
    if assignments is None:
        assignments = default_assignments(len(plan), config.seed)
        if config.trainers > len(assignments):
            raise ConfigError(f"{config.trainers} trainers requested but only {len(assignments)} batch pairs exist")
    by_id = {a.trainer_id: a for a in assignments}
    for a in assignments:
        for b in a.batch_pair:
            if not 0 <= b < len(plan):
                raise ConfigError(f"trainer {a.trainer_id} references unknown batch {b}")
    run_log = TrainLog(plan_digest=plan.digest(),
                       assignment_digests={a.trainer_id: a.batch_pair for a in assignments})
    server = ParameterServer(params, config)
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for t in range(config.steps):
            t0 = time.perf_counter()
            guard.check(noise)
            if {a.trainer_id: a.batch_pair for a in assignments} != run_log.assignment_digests:
                raise PrivacyViolationError("trainer batch assignments changed mid-run")
            if schedule is not None:
                picked = sorted(int(i) for i in schedule[t])
            else:
                ids = sorted(by_id)
                picked = sorted(int(i) for i in make_rng(config.seed, "pick", t).choice(ids, config.trainers, replace=False))
            snapshot = server.snapshot()
            mus = {tid: draw_mu(config.seed, t, rank, config.mu_max) for rank, tid in enumerate(picked)}
            ranks = {tid: rank for rank, tid in enumerate(picked)}

            def job(tid):
                return trainer_fn(by_id[tid], snapshot, mus[tid], noise, config, perturbed, labels, server.step, ranks[tid])

            messages = _collect(job, picked, server.step, pool, config, run_log)
            for msg in messages:
                _check_finite(msg.stats, t)
            server.apply(messages, picked)
            run_log.rows.append({
                "step": t,
                "mean_loss_benign": float(np.mean([m_.stats["mean_loss_benign"] for m_ in messages])),
                "mean_loss_adv": float(np.mean([m_.stats["mean_loss_adv"] for m_ in messages])),
                "grad_norm": float(np.mean([m_.stats["grad_norm"] for m_ in messages])),
                "mu_t": float(np.mean([m_.stats["mu_t"] for m_ in messages])),
                "messages": len(messages),
                "wall_ms": round(1e3 * (time.perf_counter() - t0), 3),
            })
            _maybe_checkpoint(config, server.params, noise, t + 1)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    params = server.params
    return params, _final_report(config, params, X.shape[1], params.beta, run_log), run_log


def _collect(job, picked, step, pool, config, run_log):
    """Synchronous barrier: one valid message per picked trainer, stale ones retried."""
    messages = {}
    pending = list(picked)
    for attempt in range(config.max_retries + 1):
        if pool is None:
            results = [(tid, job(tid)) for tid in pending]
        else:
            futures = {pool.submit(job, tid): tid for tid in pending}
            done, not_done = wait(futures, timeout=config.round_timeout)
            if not_done:
                raise IncompleteRoundError(f"round {step}: trainers {sorted(futures[f] for f in not_done)} timed out")
            results = [(futures[f], f.result()) for f in done]
        pending = []
        for tid, msg in results:
            if msg.step != step or msg.trainer_id != tid:
                run_log.dropped_stale += 1
                log.warning("round %d: dropped stale message from trainer %d (tag %d)", step, tid, msg.step)
                pending.append(tid)
            else:
                messages[tid] = msg
        if not pending:
            return [messages[tid] for tid in sorted(messages)]
    raise IncompleteRoundError(f"round {step}: trainers {sorted(pending)} kept sending stale gradients")


def with_steps(config, steps):
    return replace(config, steps=steps)
