from __future__ import annotations

import numpy as np
import pytest

from slowfast.errors import AssumptionGateError, InputError, ModelError
from slowfast.measure import ParticleCloud
from slowfast.model import (
    AggregationDiffusionSpec,
    BoxSampler,
    CoefficientSet,
    GradientField,
    build_aggregation_diffusion,
    check_assumptions,
    linear_test,
    model_from_config,
    ou_frozen,
)
from slowfast.monotone_ops import Box, IndicatorOperator, ZeroOperator


def const(value):
    mat = np.atleast_2d(value).astype(float)
    return lambda x, mu, y: np.broadcast_to(mat, np.shape(x)[:-1] + mat.shape)


def one_dim(b1, b2, s1=0.0, s2=1.0):
    return CoefficientSet(b1=b1, sigma1=const(s1), b2=b2, sigma2=const(s2), n=1, m=1, d1=1, d2=1)


ZERO = lambda x, mu, y: 0.0 * x  # noqa: E731


def test_dissipative_example():
    rep = check_assumptions(one_dim(ZERO, lambda x, mu, y: -2.0 * y))
    assert rep.beta == pytest.approx(4.0, abs=1e-6)
    assert rep.lip_sigma2_y == 0.0
    assert rep.alpha == pytest.approx(4.0, abs=1e-6)
    assert rep.gate_ok


def test_zero_slow_coefficients_give_zero_constants():
    rep = check_assumptions(one_dim(ZERO, lambda x, mu, y: -y))
    assert rep.lip_b1_sigma1 == 0.0
    assert rep.growth_b1_sigma1 == 0.0
    assert rep.gate_ok


def test_expansive_fast_drift_fails_gate():
    rep = check_assumptions(one_dim(ZERO, lambda x, mu, y: y))
    assert rep.beta < 0
    assert rep.alpha is None
    assert not rep.flags()["dissipative"]
    with pytest.raises(AssumptionGateError) as info:
        rep.require_gate("test")
    assert info.value.report is rep


def test_alpha_reported_only_when_beta_exceeds_twice_lprime():
    # sigma2(y) = 1.5 y: L' = 2.25, beta = 2 - 2.25 < 2 L'
    coeffs = CoefficientSet(b1=ZERO, sigma1=const(0.0), b2=lambda x, mu, y: -y,
                            sigma2=lambda x, mu, y: 1.5 * y[..., None], n=1, m=1, d1=1, d2=1)
    rep = check_assumptions(coeffs)
    assert rep.lip_sigma2_y == pytest.approx(2.25, abs=1e-9)
    assert rep.alpha is None and not rep.gate_ok
    assert not rep.sigma2_bounded


@pytest.mark.parametrize("params", [
    dict(),
    dict(a=2.0, kappa=1.0, c=3.0, beta=5.0, g=2.0, s1=0.5, s2=0.3),
    dict(a=0.0, kappa=0.0, c=0.5, beta=1.0, g=-1.0),
])
def test_linear_model_constants_match_hand_derivation(params):
    coeffs = linear_test(**params)
    p = coeffs.params
    rep = check_assumptions(coeffs)
    # |db1|^2 <= ((a+k)^2 + k^2 + c^2)(|dx|^2 + W2^2 + |dy|^2), sharp on translations
    assert rep.lip_b1_sigma1 == pytest.approx((p["a"] + p["kappa"]) ** 2 + p["kappa"] ** 2 + p["c"] ** 2,
                                              abs=1e-6)
    assert rep.lip_b2_sigma2_xmu == pytest.approx(p["g"] ** 2, abs=1e-6)
    assert rep.lip_sigma2_y == 0.0
    assert rep.beta == pytest.approx(2 * p["beta"], abs=1e-6)
    assert rep.alpha == pytest.approx(2 * p["beta"], abs=1e-6)
    assert rep.sigma2_bound == pytest.approx(abs(p["s2"]), abs=1e-12)
    assert rep.sigma2_bounded and rep.sigma1_y_independent


def test_estimates_are_lower_bounds_of_true_constants():
    coeffs = linear_test()
    for seed in range(4):
        rep = check_assumptions(coeffs, n_samples=50, seed=seed)
        assert rep.lip_b1_sigma1 <= 3.5 + 1e-9
        assert rep.beta >= 4.0 - 1e-9


def test_coefficient_failure_reports_offending_input():
    def b1(x, mu, y):
        if np.any(x > 1.9):
            raise FloatingPointError("overflow")
        return -x
    with pytest.raises(ModelError) as info:
        check_assumptions(one_dim(b1, lambda x, mu, y: -y))
    x_bad, _ = info.value.offending_input
    assert np.all(x_bad > 1.9)


def test_validate_checks_shapes_and_y_independence():
    bad = CoefficientSet(b1=lambda x, mu, y: np.concatenate([x, x], axis=-1), sigma1=const(0.0), b2=lambda x, mu, y: -y,
                         sigma2=const(1.0), n=1, m=1, d1=1, d2=1)
    with pytest.raises(InputError):
        bad.validate()
    liar = CoefficientSet(b1=ZERO, sigma1=lambda x, mu, y: y[..., None], b2=lambda x, mu, y: -y,
                          sigma2=const(1.0), n=1, m=1, d1=1, d2=1, sigma1_y_independent=True)
    with pytest.raises(InputError):
        liar.validate()
    linear_test().validate()
    ou_frozen(readout="y2").validate()


# -- aggregation-diffusion ----------------------------------------------------

def agg(v1="zero", v2="zero", v3=("linear", 2.0), v4="zero", domain=None, beta=0.0, n=1):
    def g(spec):
        kind, k = (spec, 1.0) if isinstance(spec, str) else spec
        return GradientField(kind, k)
    spec = AggregationDiffusionSpec(g(v1), g(v2), g(v3), g(v4), np.eye(n), np.eye(n),
                                    domain=domain, beta=beta)
    return build_aggregation_diffusion(spec)


def test_aggregation_examples():
    y = np.array([[[0.7]]])
    x = np.array([[[-0.4]]])
    coeffs, A1 = agg(v1="linear")
    assert isinstance(A1, ZeroOperator)
    np.testing.assert_allclose(coeffs.b1(x, ParticleCloud([[5.0], [1.0]]), y), -y)

    coeffs, _ = agg(v1=("tanh", 1.0), v2="linear")
    np.testing.assert_allclose(coeffs.b1(x, ParticleCloud.dirac([0.0]), y), -np.tanh(y) - x)

    coeffs, _ = agg(v4="linear")
    np.testing.assert_allclose(coeffs.b2(np.zeros((1, 1, 1)), ParticleCloud([-1.0, 1.0]), y),
                               -2.0 * y)


def test_aggregation_domain_and_dimension_checks():
    _, A1 = agg(domain=Box([-1.0], [1.0]))
    assert isinstance(A1, IndicatorOperator)
    with pytest.raises(InputError):
        agg(domain=Box([-1.0, -1.0], [1.0, 1.0]))
    with pytest.raises(InputError):
        build_aggregation_diffusion(AggregationDiffusionSpec(
            GradientField(), GradientField(), GradientField("linear"), GradientField(),
            np.eye(2), np.eye(1)))
    with pytest.raises(InputError):
        agg(v3=("linear", 1.0), beta=2.0)


def test_aggregation_dissipativity_bound_holds_on_samples():
    coeffs, _ = agg(v1="linear", v2=("tanh", 1.0), v3=("linear", 3.0), v4=("linear", 1.5), n=2)
    rep = check_assumptions(coeffs)
    assert rep.gate_ok
    alpha = 0.9 * rep.alpha  # the sharp alpha leaves no room for the cross term
    rng = np.random.default_rng(0)
    consts = []
    for scale in (1.0, 4.0, 16.0, 64.0):
        x, mu, y = BoxSampler().draw(rng, 4000, 2, 2, scale=scale)
        b2 = coeffs.b2(x, mu, y)
        s2 = coeffs.sigma2(x, mu, y)
        lhs = 2 * np.sum(y * b2, axis=(1, 2)) + np.sum(s2 ** 2, axis=(1, 2, 3))
        rhs_unit = 1 + np.sum(x ** 2, axis=(1, 2)) + np.mean(np.sum(mu.points ** 2, axis=-1), axis=-1)
        consts.append(np.max((lhs + alpha * np.sum(y ** 2, axis=(1, 2))) / rhs_unit))
    # C stays bounded as the sample box grows
    assert max(consts) <= 2.0 * max(consts[0], 1.0)


def test_aggregation_closed_form_averaged_drift():
    coeffs, _ = agg(v1=("linear", 1.5), v2="linear", v3=("linear", 3.0), v4="linear")
    mu = ParticleCloud([[0.2], [1.0], [-0.6]])
    x = np.array([[[0.5]]])
    # frozen fixed point y* = -(x - mean)/3; b1 = -(1.5 y* + x - mean)
    m = mu.points.mean()
    expected = -(1.5 * (-(0.5 - m) / 3.0) + (0.5 - m))
    assert coeffs.averaged_b1(x, mu)[0, 0, 0] == pytest.approx(expected, abs=1e-14)


def test_model_from_config():
    assert model_from_config("linear_test", {"a": 2.0}).params["a"] == 2.0
    agg_model = model_from_config("aggregation_diffusion", {"grad_v3": {"kind": "linear", "k": 2.0}})
    assert agg_model.name == "aggregation_diffusion"
    with pytest.raises(InputError):
        model_from_config("nope")
    with pytest.raises(InputError):
        model_from_config("linear_test", {"zeta": 1})
    with pytest.raises(InputError):
        model_from_config("aggregation_diffusion", {"grad_v9": {}})
