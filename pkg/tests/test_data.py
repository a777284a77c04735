import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stobatch.data import (Example, build_batch_plan, load_idx, normalize_signed, one_hot, perturb_batches,
                           pool_images, read_idx, synth_dataset, write_idx)
from stobatch.errors import ConfigError, ConsistencyError, FormatError, PrivacyViolationError, RangeError, ShapeError


def _raw_idx(magic, dims, payload):
    return struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims) + bytes(payload)


def test_hand_built_idx_bytes(tmp_path):
    # byte-level oracle: magic 0x803, dims (1, 2, 2), pixels 0 128 255 64
    p = tmp_path / "img.idx"
    p.write_bytes(bytes.fromhex("00000803" "00000001" "00000002" "00000002" "0080ff40"))
    X, labels = load_idx(p)
    assert labels is None
    assert X.tolist() == [[0.0, 128.0, 255.0, 64.0]]


def test_header_count_echo(tmp_path):
    p = tmp_path / "four.idx"
    p.write_bytes(_raw_idx(0x803, (4, 3, 3), range(36)))
    X, _ = load_idx(p)
    assert X.shape == (4, 9)


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(_raw_idx(0x0, (1, 2, 2), range(4)))
    with pytest.raises(FormatError):
        load_idx(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "short.idx"
    p.write_bytes(_raw_idx(0x803, (2, 2, 2), range(5)))
    with pytest.raises(FormatError):
        load_idx(p)


def test_count_mismatch(tmp_path):
    img, lab = tmp_path / "i.idx", tmp_path / "l.idx"
    img.write_bytes(_raw_idx(0x803, (2, 1, 1), [1, 2]))
    lab.write_bytes(_raw_idx(0x801, (3,), [0, 1, 2]))
    with pytest.raises(ConsistencyError):
        load_idx(img, lab)


def test_gzip_round_trip(tmp_path, rng):
    a = rng.integers(0, 256, size=(5, 4, 4)).astype(np.uint8)
    p = tmp_path / "x-images-idx3-ubyte.gz"
    write_idx(p, a)
    with gzip.open(p) as f:
        assert f.read(4) == bytes.fromhex("00000803")
    np.testing.assert_array_equal(read_idx(p), a)


@pytest.mark.parametrize("raw,expected", [(0, -1.0), (255, 1.0), (127.5, 0.0)])
def test_normalize_endpoints(raw, expected):
    assert normalize_signed(np.array([raw]))[0] == expected


def test_normalize_rejects_out_of_range():
    with pytest.raises(RangeError):
        normalize_signed(np.array([256.0]))
    with pytest.raises(RangeError):
        normalize_signed(np.array([-1.0]))


@given(st.lists(st.floats(0, 255), min_size=1, max_size=50))
def test_normalize_lands_in_box(values):
    out = normalize_signed(np.array(values))
    assert np.all(out >= -1.0) and np.all(out <= 1.0)


def test_pool_images_averages_blocks():
    img = np.arange(16, dtype=float).reshape(1, 16)
    np.testing.assert_allclose(pool_images(img, 4, 2), [[2.5, 4.5, 10.5, 12.5]])


def test_batch_plan_exact_division():
    plan = build_batch_plan(6, 3, 7)
    assert len(plan) == 2 and plan.dropped == ()


def test_batch_plan_remainder_dropped():
    plan = build_batch_plan(10, 3, 7)
    assert len(plan) == 3 and len(plan.dropped) == 1


def test_batch_plan_deterministic():
    assert build_batch_plan(50, 7, 3) == build_batch_plan(50, 7, 3)
    assert build_batch_plan(50, 7, 3).digest() == build_batch_plan(50, 7, 3).digest()


def test_batch_plan_m_too_large():
    with pytest.raises(ConfigError):
        build_batch_plan(3, 4, 0)


@given(st.integers(1, 200), st.integers(1, 50), st.integers(0, 2 ** 32))
def test_batch_plan_partition(n, m, seed):
    if m > n:
        return
    plan = build_batch_plan(n, m, seed)
    seen = [i for b in plan.batches for i in b]
    assert all(len(b) == m for b in plan.batches)
    assert len(seen) == len(set(seen))
    assert sorted(seen + list(plan.dropped)) == list(range(n))


def test_perturb_zero_noise_is_identity(rng):
    X = rng.uniform(-1, 1, (6, 3))
    pp = perturb_batches(build_batch_plan(6, 2, 0), X, np.zeros(3), 2)
    np.testing.assert_array_equal(pp.perturbed_features, X)


def test_perturb_direct_formula():
    pp = perturb_batches(build_batch_plan(1, 1, 0), np.zeros((1, 2)), np.array([2.0, -4.0]), 2)
    np.testing.assert_array_equal(pp.perturbed_features[0], [1.0, -2.0])


def test_perturb_shared_draw_preserves_differences(rng):
    X = rng.uniform(-1, 1, (4, 3))
    X0 = X.copy()
    pp = perturb_batches(build_batch_plan(4, 2, 0), X, rng.laplace(size=3), 2)
    np.testing.assert_allclose(pp.perturbed_features[0] - pp.perturbed_features[1], X[0] - X[1], atol=1e-15)
    np.testing.assert_array_equal(X, X0)


def test_perturb_shape_mismatch():
    with pytest.raises(ShapeError):
        perturb_batches(build_batch_plan(4, 2, 0), np.zeros((4, 3)), np.zeros(2), 2)


def test_perturb_twice_rejected():
    pp = perturb_batches(build_batch_plan(4, 2, 0), np.zeros((4, 3)), np.zeros(3), 2)
    with pytest.raises(PrivacyViolationError):
        perturb_batches(pp, np.zeros((4, 3)), np.zeros(3), 2)


def test_perturbed_batches_are_read_only():
    pp = perturb_batches(build_batch_plan(4, 2, 0), np.zeros((4, 3)), np.ones(3), 2)
    with pytest.raises(ValueError):
        pp.batch(0).features[0, 0] = 5.0


def test_synth_deterministic_and_boxed():
    a = synth_dataset(100, 2, 2, seed=1)
    b = synth_dataset(100, 2, 2, seed=1)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    assert np.all(np.abs(a[0]) <= 1.0)


@given(st.integers(2, 6), st.integers(1, 8), st.integers(0, 1000))
def test_synth_covers_all_classes(K, d, seed):
    _, y = synth_dataset(3 * K, d, K, seed)
    assert np.bincount(y, minlength=K).min() >= 1


def test_synth_bad_dims():
    with pytest.raises(ConfigError):
        synth_dataset(10, 0, 2, 0)
    with pytest.raises(ConfigError):
        synth_dataset(10, 2, 1, 0)


def test_example_invariants():
    Example(np.array([0.5, -1.0]), np.array([0, 1]))
    with pytest.raises(RangeError):
        Example(np.array([1.5]), np.array([1, 0]))
    with pytest.raises(ConsistencyError):
        Example(np.array([0.5]), np.array([1, 1]))


def test_one_hot():
    np.testing.assert_array_equal(one_hot([1, 0], 3), [[0, 1, 0], [1, 0, 0]])
    with pytest.raises(ConsistencyError):
        one_hot([3], 3)
