import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import TOY
from dfqvit import tensor as T
from dfqvit.errors import ContractError, ParameterError
from dfqvit.quant import (BYPASS_BITS, LayerQuant, QuantizedModel, QuantScheme, check_scheme,
                          dequantize, derive_activation_params, footprint, footprint_from_records,
                          initial_gamma, quantize, report_footprint, scheme_from_json, scheme_records,
                          scheme_to_json)
from dfqvit.vit import quantizable_layers

L_Q = len(quantizable_layers(TOY))

# Multiply-accumulates per image, counted by hand for the toy config:
# N=16 patches, patch_dim=4*4*3=48, d=16, mlp=32, 4 classes.
HAND_MACS = ([16 * 48 * 16]                                        # patch embedding
             + [16 * 16 * 16] * 4 + [16 * 16 * 32, 16 * 32 * 16]   # block 0: q k v proj fc1 fc2
             + [16 * 16 * 16] * 4 + [16 * 16 * 32, 16 * 32 * 16]   # block 1
             + [16 * 4])                                           # head
HAND_PARAMS = [48 * 16] + ([16 * 16] * 4 + [16 * 32, 32 * 16]) * 2 + [16 * 4]


def _uniform(b, gamma=0.01):
    return QuantScheme.build([LayerQuant(b, gamma)] * L_Q)


# -- quantize -------------------------------------------------------------
def test_quantize_zero():
    for b in range(2, 9):
        assert quantize(0.0, 0.37, b) == 0


def test_quantize_simple_value():
    assert quantize(0.5, 0.25, 4) == 2


def test_quantize_clips():
    assert quantize(10.0, 1.0, 3) == 3
    assert quantize(-10.0, 1.0, 3) == -3


def test_quantize_rounds_half_to_even():
    np.testing.assert_array_equal(quantize([0.5, 1.5, 2.5, -0.5, -2.5], 1.0, 8), [0, 2, 2, 0, -2])


def test_quantize_rejects_nonpositive_gamma():
    with pytest.raises(ParameterError):
        quantize(1.0, 0.0, 4)
    with pytest.raises(ParameterError):
        quantize(1.0, -1.0, 4)


finite = st.floats(-1e3, 1e3, allow_nan=False, width=64)
arrays = hnp.arrays(np.float64, hnp.array_shapes(max_dims=2, max_side=16), elements=finite)
gammas = st.floats(1e-4, 10.0)
bits = st.integers(2, 8)


@settings(max_examples=300, deadline=None)
@given(arrays, gammas, bits)
def test_quantize_symmetric_and_bounded(x, gamma, b):
    q = quantize(x, gamma, b)
    qmax = 2 ** (b - 1) - 1
    assert q.dtype.kind == "i"
    assert np.all(np.abs(q) <= qmax)
    np.testing.assert_array_equal(quantize(-x, gamma, b), -q)


@settings(max_examples=300, deadline=None)
@given(arrays, gammas, bits)
def test_dequantization_error_within_half_step(x, gamma, b):
    qmax = 2 ** (b - 1) - 1
    inside = np.abs(x) <= gamma * qmax
    err = np.abs(x - dequantize(quantize(x, gamma, b), gamma))
    assert np.all(err[inside] <= gamma / 2 * (1 + 1e-12))


@settings(max_examples=300, deadline=None)
@given(arrays, gammas, bits)
def test_requantization_is_fixed_point(x, gamma, b):
    q = quantize(x, gamma, b)
    np.testing.assert_array_equal(quantize(dequantize(q, gamma), gamma, b), q)


# -- initial scale ---------------------------------------------------------
def test_initial_gamma_examples():
    assert initial_gamma(np.array([-1.0, 0.3, 1.0]), 2) == pytest.approx(2 / 3, abs=1e-15)
    assert initial_gamma(np.arange(16.0), 4) == 1.0


def test_initial_gamma_matches_brute_force_range():
    rng = np.random.default_rng(0)
    for _ in range(50):
        w = rng.normal(size=(7, 5))
        lo = hi = w[0, 0]
        for v in w.ravel():
            lo, hi = min(lo, v), max(hi, v)
        b = int(rng.integers(2, 9))
        assert initial_gamma(w, b) == (hi - lo) / (2 ** b - 1)


def test_initial_gamma_constant_tensor_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        g = initial_gamma(np.full(4, 2.0), 4)
    assert g == 1e-8 and caught


# -- schemes --------------------------------------------------------------
def test_layerquant_validation():
    for bad in (1, 9, 16):
        with pytest.raises(ParameterError):
            LayerQuant(bad, 0.1)
    with pytest.raises(ParameterError):
        LayerQuant(4, 0.0)
    LayerQuant(BYPASS_BITS, 1.0)


def test_activation_bits_rule():
    s = QuantScheme.build([LayerQuant(4, 0.1), LayerQuant(4, 0.1)])
    assert [a for a, _ in s.act_params] == [8, 8]
    s = QuantScheme.build([LayerQuant(2, 0.1), LayerQuant(3, 0.1)])
    assert [a for a, _ in s.act_params] == [4, 6]


def test_activation_scale_accumulates():
    s = derive_activation_params(QuantScheme([LayerQuant(4, 0.1), LayerQuant(4, 0.2), LayerQuant(4, 0.3)]))
    np.testing.assert_allclose([g for _, g in s.act_params], [0.1, 0.3, 0.6], rtol=1e-15)


def test_check_scheme_rejects_wrong_length_and_stale_acts():
    with pytest.raises(ContractError):
        check_scheme(QuantScheme.build([LayerQuant(4, 0.1)]), TOY)
    stale = QuantScheme(_uniform(4).weight_params, tuple((2, 0.1) for _ in range(L_Q)))
    with pytest.raises(ContractError):
        check_scheme(stale, TOY)


def test_replace_rederives_activations():
    s = _uniform(4).replace(3, LayerQuant(2, 0.5))
    assert s.act_params[3][0] == 4
    assert s.act_params[3][1] == pytest.approx(0.01 * 3 + 0.5)


# -- quantized model ------------------------------------------------------
def test_dequantized_weights_follow_definition(random_model):
    s = _uniform(3, 0.05)
    q = QuantizedModel(random_model, s)
    for name in quantizable_layers(TOY):
        w = random_model.params[name].data
        expect = 0.05 * np.clip(np.round(w / 0.05), -3, 3)
        np.testing.assert_array_equal(q.weights[name].data, expect)


def test_bypass_is_bit_exact(random_model):
    x = np.random.default_rng(0).uniform(size=(4, 16, 16, 3))
    fp, _ = random_model.forward(x)
    q, _ = QuantizedModel(random_model, QuantScheme.bypass(L_Q)).forward(x)
    assert fp.data.tobytes() == q.data.tobytes()


def test_quantized_model_leaves_fp_weights(random_model):
    before = random_model.checksum()
    QuantizedModel(random_model, _uniform(2)).forward(np.zeros((1, 16, 16, 3)))
    assert random_model.checksum() == before


def test_w8a8_close_to_fp(trained_model):
    from dfqvit.evosearch import SearchBudget, SearchSpace
    space = SearchSpace(trained_model, SearchBudget(fixed_bits=8))
    s = QuantScheme.build([LayerQuant(8, space.gamma_init[t][8]) for t in range(L_Q)])
    x = np.random.default_rng(1).uniform(size=(8, 16, 16, 3))
    fp, _ = trained_model.forward(x)
    q, _ = QuantizedModel(trained_model, s).forward(x)
    assert np.max(np.abs(fp.data - q.data)) < 0.2 * np.max(np.abs(fp.data))


# -- footprint ------------------------------------------------------------
def test_fp32_size_of_22m_parameters():
    assert footprint([22_000_000], [1], [32], [32])["size_mb"] == 88.0


def test_single_layer_size():
    assert footprint([1000], [1], [8], [8])["size_mb"] == 0.001


def test_toy_bops_equals_hand_count():
    rng = np.random.default_rng(0)
    for _ in range(20):
        b = [int(v) for v in rng.integers(2, 9, L_Q)]
        s = QuantScheme.build([LayerQuant(v, 0.01) for v in b])
        fp = report_footprint(TOY, s)
        assert fp["bops"] == sum(m * w * min(8, 2 * w) for m, w in zip(HAND_MACS, b))
        assert fp["size_mb"] == sum(p * w for p, w in zip(HAND_PARAMS, b)) / 8e6
        assert fp["avg_bw_weights"] == np.mean(b)


def test_uniform_w4_bops_literal():
    # total MACs 77888, times 4-bit weights and 8-bit activations
    assert sum(HAND_MACS) == 77_888
    assert report_footprint(TOY, _uniform(4))["bops"] == 77_888 * 4 * 8


def test_scheme_json_roundtrip_and_footprint_from_records():
    rng = np.random.default_rng(1)
    s = QuantScheme.build([LayerQuant(int(rng.integers(2, 9)), float(rng.uniform(1e-3, 0.1)))
                           for _ in range(L_Q)])
    text = scheme_to_json(s, TOY)
    assert scheme_from_json(text) == s
    recs = json.loads(text)
    assert set(recs[0]) >= {"layer", "b", "gamma", "b_act", "gamma_act"}
    assert footprint_from_records(recs) == report_footprint(TOY, s)
    assert recs == scheme_records(s, TOY)


def test_scheme_json_rejects_tampered_activation():
    recs = json.loads(scheme_to_json(_uniform(4), TOY))
    recs[2]["b_act"] = 6
    with pytest.raises(ContractError):
        scheme_from_json(json.dumps(recs))


def test_fake_quant_matches_quantize():
    x = np.random.default_rng(3).normal(size=50)
    np.testing.assert_array_equal(T.fake_quant(T.Tensor(x), 0.1, 5).data,
                                  dequantize(quantize(x, 0.1, 5), 0.1))
