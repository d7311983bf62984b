import numpy as np
import pytest

from exceptions import DegenerateBasis, DegenerateFeatures, DegenerateInput, ParameterError
from kernel_engine import (
    arccos_kernel,
    fit_convergence_exponent,
    kernel_ratio,
    mc_kernel_ratio,
    mc_kernel_value,
    mixture_decompose,
    predict_two_hop,
    two_hop_vectors,
)
from models import FactEdit, ModelDims, ModelParams, OneHop, TwoHop
from transformer_engine import init_params, mix

def _unit(rng, d):
    x = rng.normal(size=d)
    return x / np.linalg.norm(x)

def _edits(subject, r1, r2, bridge, target, n):
    edit1 = FactEdit(rel=r1, subject=subject, old_target=(bridge + 1) % n, new_target=bridge)
    edit2 = FactEdit(rel=r2, subject=bridge, old_target=(target + 1) % n, new_target=target)
    return edit1, edit2

def test_kernel_on_itself():
    x = np.array([3.0, 4.0, 0.0])
    assert arccos_kernel(x, x, d=3) == pytest.approx(25.0 / 8.0)

def test_kernel_orthogonal():
    x, y = np.array([2.0, 0.0]), np.array([0.0, 5.0])
    assert arccos_kernel(x, y, d=2) == pytest.approx(10.0 / (6 * np.pi))

def test_kernel_antipodal_is_zero():
    x = np.array([1.0, -2.0, 0.5])
    assert arccos_kernel(x, -x, d=3) == pytest.approx(0.0, abs=1e-15)

def test_kernel_zero_input():
    with pytest.raises(DegenerateInput):
        arccos_kernel(np.zeros(3), np.ones(3), d=3)
    with pytest.raises(DegenerateInput):
        kernel_ratio(np.zeros(3), np.ones(3))

def test_kernel_ratio_closed_forms():
    rng = np.random.default_rng(0)
    x = rng.normal(size=8)
    assert kernel_ratio(x, x) == pytest.approx(1.0)
    assert kernel_ratio(x, -x) == pytest.approx(0.0, abs=1e-15)
    assert kernel_ratio(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(1 / np.pi)

def test_kernel_ratio_drops_prefactor():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=6), rng.normal(size=6)
    assert kernel_ratio(x, y) == pytest.approx(arccos_kernel(x, y, d=6) / arccos_kernel(x, x, d=6))

def test_kernel_symmetric_and_positive_semidefinite():
    rng = np.random.default_rng(2)
    points = rng.normal(size=(10, 16))
    K = np.array([[arccos_kernel(a, b, d=16) for b in points] for a in points])
    np.testing.assert_allclose(K, K.T, atol=1e-14)
    assert np.linalg.eigvalsh(K).min() >= -1e-10

def test_kernel_ratio_bounded_for_unit_vectors():
    rng = np.random.default_rng(3)
    for _ in range(50):
        r = kernel_ratio(_unit(rng, 5), _unit(rng, 5))
        assert 0.0 <= r <= 1.0

def test_mc_ratio_on_itself(raw_params):
    x = np.random.default_rng(4).normal(size=raw_params.dims.d)
    assert mc_kernel_ratio(raw_params, x, x) == 1.0

def test_mc_value_on_itself(raw_params):
    x = np.random.default_rng(5).normal(size=raw_params.dims.d)
    phi = np.maximum(raw_params.U @ x, 0.0)
    assert mc_kernel_value(raw_params, x, x) == pytest.approx(phi @ phi / raw_params.dims.m)

def test_mc_ratio_dead_features(raw_params):
    params = ModelParams(E=raw_params.E, U=np.zeros_like(raw_params.U), V=raw_params.V,
                         W=raw_params.W, dims=raw_params.dims)
    with pytest.raises(DegenerateFeatures):
        mc_kernel_ratio(params, np.ones(raw_params.dims.d), np.ones(raw_params.dims.d))

def _mc_errors(m, seeds, d=64):
    errors = []
    for seed in seeds:
        params = init_params(ModelDims(d=d, m=m, num_entities=2, num_relations=1), seed=seed)
        rng = np.random.default_rng(100 + seed)
        x, y = _unit(rng, d), _unit(rng, d)
        errors.append(abs(mc_kernel_ratio(params, x, y) - kernel_ratio(x, y)))
    return np.array(errors)

@pytest.mark.slow
def test_mc_ratio_converges_at_large_width():
    assert _mc_errors(65536, range(5)).mean() <= 0.02

@pytest.mark.slow
def test_mc_ratio_error_shrinks_with_width():
    seeds = range(9)
    narrow, wide = _mc_errors(1024, seeds), _mc_errors(65536, seeds)
    assert np.sum(narrow > wide) > len(seeds) / 2

def test_two_hop_vectors_match_attention(raw_params):
    eta1, eta2, xi = two_hop_vectors(raw_params, subject=2, r1=0, r2=1, bridge=5)
    np.testing.assert_allclose(eta1, mix(raw_params, OneHop(subject=2, rel=0)), atol=1e-12)
    np.testing.assert_allclose(eta2, mix(raw_params, OneHop(subject=5, rel=1)), atol=1e-12)
    np.testing.assert_allclose(xi, mix(raw_params, TwoHop(subject=2, rel1=0, rel2=1)), atol=1e-12)

def test_predict_two_hop_in_open_unit_interval():
    for seed in range(10):
        params = init_params(ModelDims(d=128, m=16, num_entities=30, num_relations=4), seed=seed)
        edit1, edit2 = _edits(subject=3, r1=0, r2=1, bridge=11, target=20, n=30)
        prediction = predict_two_hop(params, 3, 0, 1, edit1, edit2)
        assert 0.0 < prediction.c1 < 1.0
        assert 0.0 < prediction.c2 < 1.0

def test_predict_two_hop_contrived_identity(raw_params):
    n = raw_params.dims.num_entities
    E = raw_params.E.copy()
    E[n + 1] = (E[0] + E[n + 0]) / 2
    params = ModelParams(E=E, U=raw_params.U, V=np.eye(raw_params.dims.d), W=raw_params.W, dims=raw_params.dims)
    edit1, edit2 = _edits(subject=0, r1=0, r2=1, bridge=4, target=6, n=n)
    assert predict_two_hop(params, 0, 0, 1, edit1, edit2).c1 == pytest.approx(1.0)

def test_predict_two_hop_scale_free(raw_params):
    edit1, edit2 = _edits(subject=1, r1=1, r2=0, bridge=3, target=2, n=8)
    base = predict_two_hop(raw_params, 1, 1, 0, edit1, edit2)
    scaled = ModelParams(E=7.0 * raw_params.E, U=raw_params.U, V=raw_params.V, W=raw_params.W,
                         dims=raw_params.dims)
    other = predict_two_hop(scaled, 1, 1, 0, edit1, edit2)
    assert other.c1 == pytest.approx(base.c1)
    assert other.c2 == pytest.approx(base.c2)

def test_predict_two_hop_rejects_mismatched_edits(raw_params):
    edit1, edit2 = _edits(subject=1, r1=0, r2=1, bridge=3, target=2, n=8)
    with pytest.raises(ParameterError):
        predict_two_hop(raw_params, 2, 0, 1, edit1, edit2)
    wrong_bridge = FactEdit(rel=1, subject=4, old_target=0, new_target=2)
    with pytest.raises(ParameterError):
        predict_two_hop(raw_params, 1, 0, 1, edit1, wrong_bridge)

def test_mixture_exact_multiple():
    w1, w2 = np.array([1.0, -1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0, -1.0])
    result = mixture_decompose(3 * w1, w1, w2)
    assert result.c1_hat == pytest.approx(3.0)
    assert result.c2_hat == pytest.approx(0.0, abs=1e-12)
    assert result.residual_rel == pytest.approx(0.0, abs=1e-12)

def test_mixture_orthogonal_output():
    w1, w2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    assert mixture_decompose(np.array([0.0, 0.0, 2.0]), w1, w2).residual_rel == pytest.approx(1.0)

def test_mixture_zero_output():
    w1, w2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    result = mixture_decompose(np.zeros(2), w1, w2)
    assert (result.c1_hat, result.c2_hat, result.residual_rel) == (0.0, 0.0, 0.0)

def test_mixture_dependent_basis():
    w1 = np.array([1.0, 2.0, 3.0])
    with pytest.raises(DegenerateBasis):
        mixture_decompose(w1, w1, -2 * w1)

def test_convergence_exponent_recovers_slope():
    ms = [2 ** k for k in range(10, 17)]
    errors = [3.0 * m ** -0.5 for m in ms]
    assert fit_convergence_exponent(ms, errors) == pytest.approx(-0.5)

def test_convergence_exponent_needs_two_positive_points():
    with pytest.raises(ParameterError):
        fit_convergence_exponent([1024], [0.1])
    with pytest.raises(ParameterError):
        fit_convergence_exponent([1024, 4096], [0.1, 0.0])
