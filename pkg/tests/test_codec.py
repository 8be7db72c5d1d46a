import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icmaux import autodiff as ad
from icmaux.autodiff import Tensor
from icmaux.codec import (
    BypassCodec,
    CodecConfig,
    CodecModel,
    FactorizedEntropyModel,
    ModelMismatchError,
    PaddingRequiredError,
    bit_allocation_map,
    bit_map_diff,
    logistic_likelihood_np,
    quantize,
    rate_estimate,
    to_latent_code,
)


def logistic_cdf(v, mu, s):
    return 1.0 / (1.0 + math.exp(-(v - mu) / s))


@pytest.fixture(scope="module")
def codec():
    return CodecModel(CodecConfig(seed=3))


# --- encoder / decoder --------------------------------------------------


def test_latent_shape(codec):
    y = codec.encode(Tensor(np.zeros((2, 3, 64, 64), np.float32)))
    assert y.shape == (2, 32, 8, 8)


def test_zero_image_with_zero_final_layer_gives_zero_latent():
    c = CodecModel()
    c.enc[2].weight.data[:] = 0
    c.enc[2].bias.data[:] = 0
    y = c.encode(Tensor(np.zeros((1, 3, 64, 64), np.float32)))
    assert not np.any(y.data)


def test_encode_is_deterministic(codec):
    x = np.random.default_rng(0).uniform(size=(2, 3, 32, 32)).astype(np.float32)
    assert codec.encode(Tensor(x)).data.tobytes() == codec.encode(Tensor(x)).data.tobytes()


def test_encode_requires_multiple_of_factor(codec):
    with pytest.raises(PaddingRequiredError):
        codec.encode(Tensor(np.zeros((1, 3, 60, 64), np.float32)))


def test_decode_range_shape_and_determinism(codec):
    y = np.random.default_rng(1).normal(scale=4, size=(2, 32, 8, 8)).astype(np.float32)
    a = codec.decode(Tensor(y)).data
    b = codec.decode(Tensor(y)).data
    assert a.shape == (2, 3, 64, 64)
    assert a.min() >= 0 and a.max() <= 1
    assert a.tobytes() == b.tobytes()


def test_decode_channel_mismatch(codec):
    with pytest.raises(ad.ShapeError):
        codec.decode(Tensor(np.zeros((1, 16, 8, 8), np.float32)))


def test_decoder_tap_is_penultimate(codec):
    _, tap = codec.decode(Tensor(np.zeros((1, 32, 8, 8), np.float32)), with_tap=True)
    assert tap.shape == (1, codec.penultimate_channels, 32, 32)


def test_parameter_groups(codec):
    groups = {p.group for p in codec.parameters()}
    assert groups == {"encoder", "decoder", "entropy_model"}
    names = [n for n, _ in codec.named_parameters()]
    assert len(names) == len(set(names))


# --- quantization -------------------------------------------------------


def test_round_half_to_even():
    q = quantize(Tensor(np.array([1.4, -0.5, 2.5])), "round")
    np.testing.assert_array_equal(q.data, [1, 0, 2])


def test_noise_within_half():
    y = Tensor(np.linspace(-3, 3, 101))
    q = quantize(y, "noise", np.random.default_rng(0))
    assert np.all(np.abs(q.data - y.data) <= 0.5)
    with pytest.raises(ValueError):
        quantize(y, "noise")


def test_ste_gradient_is_ones():
    y = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
    ad.backward(ad.sum(quantize(y, "ste")))
    np.testing.assert_array_equal(y.grad, np.ones((2, 3)))


# --- likelihood and rate -----------------------------------------------


def test_likelihood_at_mean_unit_scale():
    em = FactorizedEntropyModel(1, init_scale=1.0)
    p = em.likelihood(Tensor(np.zeros((1, 1, 1, 1)))).data.item()
    ref = logistic_cdf(0.5, 0, 1) - logistic_cdf(-0.5, 0, 1)
    assert p == pytest.approx(ref, abs=1e-7)
    assert p == pytest.approx(0.2449, abs=1e-4)


@pytest.mark.parametrize("scale", [0.2, 1.0, 8.0, 40.0])
def test_pmf_sums_to_one(scale):
    em = FactorizedEntropyModel(4, init_scale=scale)
    em.mu.data[:] = [0.0, 3.3, -10.0, 60.0]
    total = em.pmf_table().sum(axis=1)
    np.testing.assert_allclose(total, 1.0, atol=1e-6)


def test_pmf_matches_scalar_cdf_oracle():
    em = FactorizedEntropyModel(2, support=6, init_scale=1.7)
    em.mu.data[:] = [0.4, -1.2]
    pmf = em.pmf_table()
    for c in range(2):
        mu, s = float(em.mu.data[c]), float(em.scales[c])
        for j, v in enumerate(range(-6, 7)):
            hi = 1.0 if v == 6 else logistic_cdf(v + 0.5, mu, s)
            lo = 0.0 if v == -6 else logistic_cdf(v - 0.5, mu, s)
            assert pmf[c, j] == pytest.approx(hi - lo, rel=1e-9, abs=1e-15)


def test_likelihood_bounds_and_floor():
    em = FactorizedEntropyModel(2, init_scale=0.1)
    v = np.array([0.0, 30.0, -64.0, 64.0, 500.0]).reshape(1, 1, 1, 5)
    v = np.concatenate([v, v], axis=1).astype(np.float32)
    p = em.likelihood(Tensor(v)).data
    assert np.all(p > 0) and np.all(p <= 1)
    assert p.min() >= 1e-9


def test_differentiable_likelihood_agrees_with_float64_reference():
    rng = np.random.default_rng(4)
    em = FactorizedEntropyModel(3, init_scale=2.0)
    em.mu.data[:] = rng.normal(size=3)
    v = rng.integers(-70, 70, size=(2, 3, 4, 4)).astype(np.float64)
    v = np.clip(v, -64, 64)
    p = em.likelihood(Tensor(v)).data
    ref = logistic_likelihood_np(v, em.mu.data, em.log_scale.data, 64, 1e-9)
    np.testing.assert_allclose(p, ref, rtol=1e-5, atol=1e-12)


def test_rate_one_bit_symbol():
    em = FactorizedEntropyModel(1, support=1, init_scale=1e-3)
    # half the mass on each side: mu exactly between 0 and 1
    em.mu.data[:] = 0.5
    bits = rate_estimate(Tensor(np.zeros((1, 1, 1, 1))), em).item()
    assert bits == pytest.approx(1.0, abs=1e-6)


def test_rate_of_uniform_pmf_is_log2_k():
    from icmaux.coder import build_cdf_from_pmf

    table = build_cdf_from_pmf(np.full((1, 256), 1 / 256), -128, "u")
    np.testing.assert_allclose(table.code_lengths(np.arange(-128, 128)[None]), 8.0)


def test_rate_matches_scalar_loop():
    rng = np.random.default_rng(6)
    em = FactorizedEntropyModel(3, init_scale=1.3)
    em.mu.data[:] = rng.normal(size=3)
    v = rng.integers(-5, 6, size=(1, 3, 4, 4)).astype(np.float64)
    ref = 0.0
    for c in range(3):
        mu, s = float(em.mu.data[c]), float(em.scales[c])
        for val in v[0, c].ravel():
            ref -= math.log2(max(logistic_cdf(val + 0.5, mu, s) - logistic_cdf(val - 0.5, mu, s), 1e-9))
    assert rate_estimate(Tensor(v), em).item() == pytest.approx(ref, rel=1e-6)  # float32 parameters


def test_rate_gradient_wrt_log_scale():
    rng = np.random.default_rng(8)
    v = rng.integers(-4, 5, size=(2, 3, 3, 3)).astype(np.float64)
    em = FactorizedEntropyModel(3, init_scale=1.5)

    def f(ls):
        em.log_scale = ls
        return rate_estimate(Tensor(v), em)

    assert ad.grad_check(f, np.log([1.5, 0.7, 3.0]), eps=1e-6, tol=1e-6).passed


# --- bit allocation maps ------------------------------------------------


def test_bit_map_constant_for_zero_latent():
    em = FactorizedEntropyModel(4)
    code = to_latent_code(np.zeros((4, 5, 6)), em)
    m = bit_allocation_map(code, em)
    assert m.shape == (5, 6)
    assert np.ptp(m) == 0


def test_bit_map_total_equals_rate():
    rng = np.random.default_rng(2)
    em = FactorizedEntropyModel(3, init_scale=2.0)
    em.mu.data[:] = rng.normal(size=3) * 0.3
    vals = rng.integers(-8, 9, size=(3, 4, 4))
    code = to_latent_code(vals, em)
    total = rate_estimate(Tensor(vals[None].astype(np.float64)), em).item()
    assert bit_allocation_map(code, em).sum() == pytest.approx(total, abs=1e-6)


def test_high_magnitude_region_costs_more():
    em = FactorizedEntropyModel(2, init_scale=1.0)
    vals = np.zeros((2, 4, 4), int)
    vals[:, :2, :2] = 9
    m = bit_allocation_map(to_latent_code(vals, em), em)
    assert m[:2, :2].min() > m[2:, 2:].max()


def test_bit_map_digest_mismatch():
    em, other = FactorizedEntropyModel(2), FactorizedEntropyModel(2, init_scale=3.0)
    with pytest.raises(ModelMismatchError):
        bit_allocation_map(to_latent_code(np.zeros((2, 2, 2)), other), em)


def test_bit_map_diff_properties():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(4, 4)), rng.uniform(size=(4, 4))
    assert not np.any(bit_map_diff(a, a))
    np.testing.assert_array_equal(bit_map_diff(a, b), -bit_map_diff(b, a))
    assert bit_map_diff(a, b).sum() == pytest.approx(a.sum() - b.sum())
    with pytest.raises(ad.ShapeError):
        bit_map_diff(a, np.zeros((3, 4)))


def test_latent_code_clamps_into_support():
    em = FactorizedEntropyModel(1, support=64)
    code = to_latent_code(np.array([[[100.4, -300.0, 2.5]]]), em)
    np.testing.assert_array_equal(code.values, [[[64, -64, 2]]])


# --- bypass -------------------------------------------------------------


def test_bypass_reconstructs_exactly():
    x = np.random.default_rng(1).uniform(size=(1, 3, 8, 8))
    bp = BypassCodec()
    y = bp.quantize_latent(bp.encode(Tensor(x)), "round")
    np.testing.assert_allclose(bp.decode(y).data, x, atol=1e-12)


# --- properties ---------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rate_invariant_to_spatial_permutation(seed):
    rng = np.random.default_rng(seed)
    em = FactorizedEntropyModel(2, init_scale=float(rng.uniform(0.5, 5)))
    v = rng.integers(-10, 11, size=(1, 2, 4, 4)).astype(np.float64)
    perm = rng.permutation(16)
    vp = v.reshape(1, 2, 16)[:, :, perm].reshape(1, 2, 4, 4)
    assert rate_estimate(Tensor(v), em).item() == pytest.approx(rate_estimate(Tensor(vp), em).item(), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-70, 70), st.floats(0.05, 50), st.floats(-200, 200))
def test_likelihood_in_unit_interval(mu, scale, v):
    p = logistic_likelihood_np(np.array([[v]]), np.array([mu]), np.array([math.log(scale)]), 64, 1e-9)
    assert 1e-9 <= p.item() <= 1.0
