from dataclasses import replace

import numpy as np
import pytest

from helpers import aligned_stobatch_inputs, small_training_setup
from stobatch.data import build_batch_plan, perturb_batches
from stobatch.errors import (ConfigError, DivergenceError, IncompleteRoundError, PrivacyViolationError,
                             StaleGradientError)
from stobatch.nn import ModelParams, init_params, load_checkpoint
from stobatch.noise import NoiseGuard
from stobatch.training import (GradientMessage, TrainerAssignment, TrainingConfig, aggregate, centered_first_layer_step,
                               compute_gradients, default_assignments, draw_mu, local_trainer_step, project_theta1,
                               train_sequential, train_stobatch)


def _params(noise, d=4, width=4):
    return init_params(d, noise.chi2.shape[0], (width,), 2, 5)


def _message(tid, step, value, like):
    grad = ModelParams.from_arrays([np.full_like(a, value) for a in like.arrays()])
    return GradientMessage(tid, step, grad, {})


def test_zero_steps_returns_initial_params():
    data, noise, cfg = small_training_setup(steps=0, theta1_norm_cap=None)
    p0 = _params(noise)
    p, report, log_ = train_sequential(cfg, data, noise, params=p0)
    assert p.max_abs_diff(p0) == 0.0 and log_.rows == []
    assert report.total_eps > 0


def test_zero_learning_rate_keeps_params():
    data, noise, cfg = small_training_setup(steps=5, learning_rate=0.0, lr_theta1=0.0, theta1_norm_cap=None)
    p0 = _params(noise)
    assert train_sequential(cfg, data, noise, params=p0)[0].max_abs_diff(p0) == 0.0
    assert train_stobatch(cfg, data, noise, params=p0)[0].max_abs_diff(p0) == 0.0


def test_sequential_is_bit_reproducible(tmp_path):
    blobs = []
    for run in ("a", "b"):
        data, noise, cfg = small_training_setup(steps=12, checkpoint_every=12, checkpoint_dir=str(tmp_path / run))
        train_sequential(cfg, data, noise)
        blobs.append((tmp_path / run / "model_12.sbck").read_bytes())
    assert blobs[0] == blobs[1]


def test_checkpoints_every_k_steps(tmp_path):
    data, noise, cfg = small_training_setup(steps=6, checkpoint_every=2, checkpoint_dir=str(tmp_path))
    p, _, _ = train_sequential(cfg, data, noise)
    assert sorted(f.name for f in tmp_path.iterdir()) == ["model_2.sbck", "model_4.sbck", "model_6.sbck"]
    q, nb = load_checkpoint(tmp_path / "model_6.sbck")
    assert q.max_abs_diff(p) == 0.0 and nb.fingerprint() == noise.fingerprint()


def test_loss_descends_with_generous_budget():
    data, noise, cfg = small_training_setup(eps1=10.0, eps2=10.0, steps=500)
    _, _, log_ = train_sequential(cfg, data, noise)
    first = log_.rows[0]["mean_loss_benign"]
    last = np.mean([r["mean_loss_benign"] for r in log_.rows[-8:]])
    assert last < first


def test_divergence_is_reported_with_step():
    data, noise, cfg = small_training_setup(steps=50, learning_rate=1e6, weight_decay=0.0, eps2=1e-3)
    with pytest.raises(DivergenceError) as info, np.errstate(all="ignore"):
        train_sequential(cfg, data, noise)
    assert 0 <= info.value.step < 50


def test_second_noise_bundle_rejected():
    data, noise, cfg = small_training_setup(steps=1)
    guard = NoiseGuard()
    guard.check(noise)
    _, other, _ = small_training_setup(steps=1, seed=3)
    with pytest.raises(PrivacyViolationError):
        train_sequential(cfg, data, other, guard=guard)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(steps=-1, m=1, eps1=1, eps2=1)
    with pytest.raises(ConfigError):
        TrainingConfig(steps=1, m=0, eps1=1, eps2=1)
    with pytest.raises(ConfigError):
        TrainingConfig(steps=1, m=1, eps1=1, eps2=1, clip_mode="box")


def test_mu_draws_in_unit_interval():
    mus = [draw_mu(0, t, r) for t in range(200) for r in range(3)]
    assert all(0 < v <= 1 for v in mus) and len(set(mus)) == len(mus)
    assert all(0 < draw_mu(1, t, 0, 0.2) <= 0.2 for t in range(50))


def test_project_theta1_caps_columns(rng):
    t = rng.normal(size=(5, 3)) * 4
    p = project_theta1(t, 1.5)
    assert np.all(np.abs(p).sum(axis=0) <= 1.5 + 1e-12)
    small = t * 1e-3
    np.testing.assert_array_equal(project_theta1(small, 1.5), small)


def test_centered_step_preserves_general_gradient_direction(rng):
    # f(W, b) evaluated as (h - s) W' + b' with W' = W and b' = b + s W; descent in (W', b')
    gW, gb, s = rng.normal(size=(3, 2)), rng.normal(size=2), rng.normal(size=3)
    dW, db = centered_first_layer_step(gW, gb, s)
    np.testing.assert_allclose(dW, gW - np.outer(s, gb))
    np.testing.assert_allclose(db, gb - s @ dW)
    np.testing.assert_array_equal(centered_first_layer_step(gW, gb, np.zeros(3))[0], gW)


def test_assignment_with_repeated_batch_rejected():
    with pytest.raises(PrivacyViolationError):
        TrainerAssignment(0, (2, 2))


def test_default_assignments_are_disjoint():
    a = default_assignments(9, 4)
    used = [b for x in a for b in x.batch_pair]
    assert len(a) == 4 and len(used) == len(set(used))


def _perturbed(data, noise, cfg):
    plan = build_batch_plan(len(data[0]), cfg.m, cfg.seed)
    return perturb_batches(plan, data[0], noise.chi1, cfg.m)


def test_overlapping_batches_rejected():
    data, noise, cfg = small_training_setup()
    pp = _perturbed(data, noise, cfg)
    b = pp.batch(0)
    with pytest.raises(PrivacyViolationError):
        compute_gradients(_params(noise), b, data[1][list(b.indices)], b, data[1][list(b.indices)], 0.1, noise, cfg, 0, 0)


def test_local_trainer_is_pure_and_handles_zero_radius():
    data, noise, cfg = small_training_setup()
    pp, p = _perturbed(data, noise, cfg), _params(noise)
    before = p.copy()
    a = TrainerAssignment(3, (1, 4))
    m1 = local_trainer_step(a, p, 0.1, noise, cfg, pp, data[1], 7, 0)
    m2 = local_trainer_step(a, p, 0.1, noise, cfg, pp, data[1], 7, 0)
    assert p.max_abs_diff(before) == 0.0
    assert m1.grad.max_abs_diff(m2.grad) == 0.0 and (m1.trainer_id, m1.step) == (3, 7)
    m0 = local_trainer_step(a, p, 0.0, noise, cfg, pp, data[1], 7, 0)
    assert m0.grad.is_finite() and m0.stats["mu_t"] == 0.0


def test_aggregate_rules():
    p = init_params(2, 3, (2,), 2, 0)
    single = aggregate([_message(0, 0, 1.0, p)], 0.1, p)
    for a, b in zip(single.arrays(), p.arrays()):
        np.testing.assert_allclose(a, b - 0.1)
    dup = aggregate([_message(i, 0, 1.0, p) for i in (4, 1, 2)], 0.1, p)
    assert dup.max_abs_diff(single) == 0.0
    cancel = aggregate([_message(0, 0, 2.5, p), _message(1, 0, -2.5, p)], 0.1, p)
    assert cancel.max_abs_diff(p) == 0.0
    zero = aggregate([_message(0, 0, 0.0, p), _message(1, 0, 0.0, p)], 0.1, p)
    assert zero.max_abs_diff(p) == 0.0


def test_aggregate_order_independent(rng):
    p = init_params(2, 3, (2,), 2, 0)
    msgs = [GradientMessage(i, 0, ModelParams.from_arrays([rng.normal(size=a.shape) for a in p.arrays()]), {})
            for i in range(5)]
    a = aggregate(msgs, 0.3, p)
    b = aggregate(list(reversed(msgs)), 0.3, p)
    assert a.max_abs_diff(b) == 0.0


def test_aggregate_barrier_errors():
    p = init_params(2, 3, (2,), 2, 0)
    with pytest.raises(IncompleteRoundError):
        aggregate([_message(0, 0, 1.0, p)], 0.1, p, expected_ids=[0, 1])
    with pytest.raises(IncompleteRoundError):
        aggregate([], 0.1, p)
    with pytest.raises(StaleGradientError):
        aggregate([_message(0, 3, 1.0, p)], 0.1, p, step=4)


def test_stale_messages_retried_then_accepted():
    data, noise, cfg = small_training_setup(steps=3, trainers=2)
    calls = {"n": 0}

    def flaky(assignment, params, mu_t, noise_, config, perturbed, labels, step, rank):
        msg = local_trainer_step(assignment, params, mu_t, noise_, config, perturbed, labels, step, rank)
        calls["n"] += 1
        if calls["n"] == 1:
            return GradientMessage(msg.trainer_id, step - 1, msg.grad, msg.stats)
        return msg

    p_flaky, _, log_ = train_stobatch(cfg, data, noise, trainer_fn=flaky)
    p_clean, _, _ = train_stobatch(cfg, data, noise)
    assert log_.dropped_stale == 1 and p_flaky.max_abs_diff(p_clean) == 0.0


def test_persistently_stale_trainer_fails_round():
    data, noise, cfg = small_training_setup(steps=2, trainers=2, max_retries=2)

    def stale(assignment, params, mu_t, noise_, config, perturbed, labels, step, rank):
        msg = local_trainer_step(assignment, params, mu_t, noise_, config, perturbed, labels, step, rank)
        return GradientMessage(msg.trainer_id, step + 1, msg.grad, msg.stats)

    with pytest.raises(IncompleteRoundError):
        train_stobatch(cfg, data, noise, trainer_fn=stale)


def test_stobatch_barrier_and_fixed_batches():
    data, noise, cfg = small_training_setup(steps=6, trainers=3)
    _, report, log_ = train_stobatch(cfg, data, noise)
    assert [r["messages"] for r in log_.rows] == [3] * 6
    assert len(log_.assignment_digests) == 4
    _, seq_report, _ = train_sequential(cfg, data, noise)
    assert report == seq_report


def test_stobatch_threads_match_serial():
    data, noise, cfg = small_training_setup(steps=4, trainers=3)
    serial = train_stobatch(cfg, data, noise)[0]
    threaded = train_stobatch(replace(cfg, workers=3), data, noise)[0]
    assert serial.max_abs_diff(threaded) == 0.0


def test_too_many_trainers():
    data, noise, cfg = small_training_setup(steps=1, trainers=5)
    with pytest.raises(ConfigError):
        train_stobatch(cfg, data, noise)


def test_single_trainer_matches_sequential_short(tmp_path):
    steps = 10
    data, noise, cfg = small_training_setup(steps=steps)
    assignments, schedule = aligned_stobatch_inputs(len(data[0]) // cfg.m, steps)
    seq = train_sequential(cfg, data, noise)[0]
    dist = train_stobatch(cfg, data, noise, assignments=assignments, schedule=schedule)[0]
    assert seq.max_abs_diff(dist) <= 1e-9
