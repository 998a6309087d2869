"""Noise scaling, determinism, and distribution statistics of the
norm-proportional parameter perturbation."""

import hashlib

import numpy as np
import pytest

from rwpcl.errors import ConfigError
from rwpcl.numcore import Tensor
from rwpcl.perturb import PerturbationConfig, noise_sigma, perturb, tensor_l2_norm


def _checksum(params):
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(params[name].data.tobytes())
    return digest.hexdigest()


def test_l2_norm_three_four_five():
    assert tensor_l2_norm(Tensor([3.0, 4.0])) == pytest.approx(5.0)


def test_l2_norm_zero_tensor():
    assert tensor_l2_norm(Tensor(np.zeros((3, 3)))) == 0.0


def test_l2_norm_matches_float64_summation_oracle():
    rng = np.random.default_rng(0)
    data = rng.standard_normal((10, 10)).astype(np.float32)
    oracle = 0.0
    for value in data.reshape(-1):
        oracle += float(value) * float(value)
    oracle = oracle ** 0.5
    assert tensor_l2_norm(Tensor(data)) == pytest.approx(oracle, rel=1e-5)


def test_epsilon_zero_is_bit_identical():
    rng = np.random.default_rng(1)
    params = {"w": Tensor(rng.standard_normal((4, 5)).astype(np.float32), requires_grad=True)}
    out = perturb(params, PerturbationConfig(epsilon=0.0, seed=3))
    assert np.array_equal(out.tensors["w"].data, params["w"].data)
    assert out.tensors["w"].data is not params["w"].data


def test_sigma_arithmetic():
    cfg = PerturbationConfig(epsilon=0.01, seed=0)
    assert noise_sigma(Tensor([3.0, 4.0]), cfg) == pytest.approx(0.05)


def test_variance_reading_flag():
    cfg = PerturbationConfig(epsilon=0.01, seed=0, noise_scale="variance")
    # sigma = sqrt(eps * norm) = sqrt(0.05)
    assert noise_sigma(Tensor([3.0, 4.0]), cfg) == pytest.approx(0.05 ** 0.5)


def test_noise_moments_over_1e5_elements():
    n = 100_000
    value = 5.0 / np.sqrt(n)  # tensor with exact L2 norm 5
    params = {"w": Tensor(np.full(n, value, dtype=np.float32), requires_grad=True)}
    assert tensor_l2_norm(params["w"]) == pytest.approx(5.0, rel=1e-6)
    cfg = PerturbationConfig(epsilon=0.01, seed=7)
    out = perturb(params, cfg)
    noise = out.tensors["w"].data.astype(np.float64) - params["w"].data.astype(np.float64)
    sigma = 0.05
    assert abs(noise.mean()) < 3.0 * sigma / np.sqrt(n)      # 3-sigma mean test
    assert abs(noise.std() - sigma) / sigma < 0.02           # std within 2%


def test_higher_norm_gets_strictly_larger_sigma():
    rng = np.random.default_rng(2)
    big = Tensor((rng.standard_normal((100, 100)) * 3).astype(np.float32))
    small = Tensor(rng.standard_normal((100, 100)).astype(np.float32))
    assert tensor_l2_norm(big) > tensor_l2_norm(small)
    cfg = PerturbationConfig(epsilon=1e-3, seed=0)
    assert noise_sigma(big, cfg) > noise_sigma(small, cfg)
    # and the realized sample variances agree, over >= 1e4 elements each
    params = {"big": Tensor(big.data.copy(), requires_grad=True),
              "small": Tensor(small.data.copy(), requires_grad=True)}
    out = perturb(params, cfg)
    var_big = (out.tensors["big"].data - big.data).astype(np.float64).var()
    var_small = (out.tensors["small"].data - small.data).astype(np.float64).var()
    assert var_big > var_small


def test_perturb_never_mutates_source():
    rng = np.random.default_rng(3)
    params = {f"t{i}": Tensor(rng.standard_normal((6, 6)).astype(np.float32), requires_grad=True)
              for i in range(3)}
    before = _checksum(params)
    perturb(params, PerturbationConfig(epsilon=0.05, seed=11))
    assert _checksum(params) == before


def test_perturb_deterministic_under_seed():
    rng = np.random.default_rng(4)
    params = {"a": Tensor(rng.standard_normal(50).astype(np.float32), requires_grad=True),
              "b": Tensor(rng.standard_normal((5, 4)).astype(np.float32), requires_grad=True)}
    cfg = PerturbationConfig(epsilon=1e-2, seed=42)
    x = perturb(params, cfg)
    y = perturb(params, cfg)
    for name in params:
        assert np.array_equal(x.tensors[name].data, y.tensors[name].data)
    z = perturb(params, PerturbationConfig(epsilon=1e-2, seed=43))
    assert not np.array_equal(x.tensors["a"].data, z.tensors["a"].data)


def test_include_patterns_limit_noise():
    rng = np.random.default_rng(5)
    params = {"encoder.w": Tensor(rng.standard_normal(20).astype(np.float32), requires_grad=True),
              "projection.w": Tensor(rng.standard_normal(20).astype(np.float32), requires_grad=True)}
    cfg = PerturbationConfig(epsilon=0.1, seed=1, include=("encoder.*",))
    out = perturb(params, cfg)
    assert not np.array_equal(out.tensors["encoder.w"].data, params["encoder.w"].data)
    assert np.array_equal(out.tensors["projection.w"].data, params["projection.w"].data)


def test_negative_epsilon_rejected():
    with pytest.raises(ConfigError):
        PerturbationConfig(epsilon=-1e-3, seed=0)


def test_provenance_recorded():
    params = {"w": Tensor([3.0, 4.0], requires_grad=True)}
    out = perturb(params, PerturbationConfig(epsilon=0.01, seed=9))
    assert out.seed == 9
    assert out.epsilon == 0.01
    assert out.sigmas["w"] == pytest.approx(0.05)
