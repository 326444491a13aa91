import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gprobunet.autodiff import ShapeError, Tensor
from gprobunet.autodiff.gradcheck import check_grad
from gprobunet.distributions import (
    DiagGaussian,
    FullCovGaussian,
    GaussianMixture,
    LowRankGaussian,
    build_cholesky,
    gumbel_softmax_sample,
    kl_closed_form,
    kl_monte_carlo,
    log_prob,
    sample,
    sample_mixture,
)


def _log_normal_pdf(z, mu, cov):
    # independent oracle via slogdet and a dense solve
    d = z - mu
    _, logdet = np.linalg.slogdet(cov)
    return -0.5 * (d @ np.linalg.solve(cov, d) + logdet + len(z) * math.log(2 * math.pi))


# -- build_cholesky ------------------------------------------------------------

def test_build_cholesky_zero_is_identity():
    np.testing.assert_array_equal(build_cholesky(np.zeros((3, 3))).data, np.eye(3))


def test_build_cholesky_hand_example():
    raw = np.array([[math.log(2), 7.0], [1.0, math.log(2)]])
    L = build_cholesky(raw).data
    np.testing.assert_allclose(L, [[2, 0], [1, 2]])
    np.testing.assert_allclose(L @ L.T, [[4, 2], [2, 5]])


@given(arrays(np.float64, (5, 5), elements=st.floats(-3, 3)))
@settings(max_examples=50, deadline=None)
def test_build_cholesky_gives_spd(raw):
    L = build_cholesky(raw).data
    S = L @ L.T
    assert np.max(np.abs(S - S.T)) <= 1e-12
    np.linalg.cholesky(S)
    assert np.all(np.linalg.eigvalsh(S) > 0)


def test_build_cholesky_rejects_non_square():
    with pytest.raises(ShapeError):
        build_cholesky(np.zeros((2, 3)))


# -- sampling ------------------------------------------------------------------

def test_collapsed_sigma_samples_the_mean():
    mu = np.array([1.0, -2.0])
    z = sample(DiagGaussian(mu, np.full(2, -30.0)), np.random.default_rng(0), (10,)).data
    np.testing.assert_allclose(z, np.broadcast_to(mu, (10, 2)), atol=1e-10)


def test_full_cov_empirical_covariance():
    d = FullCovGaussian(np.zeros(2), np.array([[2.0, 0.0], [1.0, 2.0]]))
    z = d.rsample(np.random.default_rng(1), (100_000,)).data
    assert np.abs(np.cov(z.T) - [[4, 2], [2, 5]]).max() < 0.1


def test_low_rank_with_zero_factor_is_standard_normal():
    d = LowRankGaussian(np.zeros(2), np.zeros((2, 1)), np.ones(2))
    np.testing.assert_allclose(d.scale_tril.data, np.eye(2))
    z = d.rsample(np.random.default_rng(2), (100_000,)).data
    assert np.abs(z.mean(axis=0)).max() < 0.02


def test_sample_shapes_are_batched():
    rng = np.random.default_rng(3)
    d = FullCovGaussian.from_raw(rng.normal(size=(4, 3)), rng.normal(size=(4, 3, 3)))
    assert d.rsample(rng, (5, 2)).shape == (5, 2, 4, 3)
    assert d.log_prob(d.rsample(rng, (5,))).shape == (5, 4)


def test_low_rank_cholesky_failure_names_d_entry():
    d = LowRankGaussian.from_raw(np.zeros(2), np.array([[1.0], [1.0]]), np.array([-700.0, -740.0]))
    # both D entries vanish next to 1, leaving the singular PPᵀ
    with pytest.raises(np.linalg.LinAlgError, match=r"D\[1\]"):
        _ = d.scale_tril


def test_invalid_parameters_rejected():
    with pytest.raises(ValueError):
        FullCovGaussian(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        FullCovGaussian(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(ValueError, match=r"D\[1\]"):
        LowRankGaussian.from_raw(np.zeros(2), np.zeros((2, 1)), np.array([0.0, -800.0]))


def _fixed_eps_objective(make, eps):
    def f(*params):
        z = make(*params).rsample_from(eps)
        return (z * z).sum() * 0.5 + z.sum()
    return f


@pytest.mark.parametrize("seed", range(5))
def test_reparameterised_gradients(seed):
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((6, 3))
    mu, raw = rng.normal(size=3), rng.normal(size=3)
    assert check_grad(_fixed_eps_objective(DiagGaussian, eps), [mu, raw]) < 1e-3
    assert check_grad(_fixed_eps_objective(FullCovGaussian.from_raw, eps), [mu, rng.normal(size=(3, 3))]) < 1e-3
    assert check_grad(_fixed_eps_objective(LowRankGaussian.from_raw, eps),
                      [mu, rng.normal(size=(3, 2)), rng.normal(size=3)]) < 1e-3


# -- log_prob ------------------------------------------------------------------

def test_log_prob_standard_normal_origin():
    lp = log_prob(DiagGaussian(np.zeros(1), np.zeros(1)), np.zeros(1))
    assert float(lp.data) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert float(lp.data) == pytest.approx(-0.9189, abs=1e-4)


def test_log_prob_full_cov_at_mean():
    d = FullCovGaussian(np.array([1.0, -1.0]), np.array([[2.0, 0.0], [1.0, 2.0]]))
    expected = -0.5 * math.log((2 * math.pi) ** 2 * 16)
    assert float(d.log_prob(np.array([1.0, -1.0])).data) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_log_prob_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=4)
    for d in (DiagGaussian(rng.normal(size=4), rng.normal(scale=0.3, size=4)),
              FullCovGaussian.from_raw(rng.normal(size=4), rng.normal(scale=0.5, size=(4, 4))),
              LowRankGaussian.from_raw(rng.normal(size=4), rng.normal(size=(4, 2)), rng.normal(size=4))):
        assert float(d.log_prob(z).data) == pytest.approx(_log_normal_pdf(z, d.mean(), d.covariance()), abs=1e-10)


def test_log_prob_dimension_mismatch():
    with pytest.raises(ShapeError):
        DiagGaussian(np.zeros(2), np.zeros(2)).log_prob(np.zeros(3))


def test_mixture_of_identical_components_collapses():
    rng = np.random.default_rng(4)
    c = FullCovGaussian.from_raw(rng.normal(size=2), rng.normal(size=(2, 2)))
    z = rng.normal(size=(7, 2))
    mix = GaussianMixture(rng.normal(size=2), [c, c], tau=0.3)
    np.testing.assert_allclose(mix.log_prob(z).data, c.log_prob(z).data, atol=1e-12)


def test_mixture_with_one_hot_weights_is_component_zero_exactly():
    rng = np.random.default_rng(5)
    cs = [DiagGaussian(rng.normal(size=2), rng.normal(size=2)) for _ in range(3)]
    mix = GaussianMixture(np.array([0.0, -np.inf, -np.inf]), cs, tau=0.5)
    z = rng.normal(size=(5, 2))
    np.testing.assert_array_equal(mix.log_prob(z).data, cs[0].log_prob(z).data)


# -- KL --------------------------------------------------------------------------

def test_kl_identical_standard_normals():
    d = DiagGaussian(np.zeros(3), np.zeros(3))
    assert float(kl_closed_form(d, d).data) == 0.0


def test_kl_unit_shift_is_half():
    q, p = DiagGaussian(np.zeros(1), np.zeros(1)), DiagGaussian(np.ones(1), np.zeros(1))
    assert float(kl_closed_form(q, p).data) == pytest.approx(0.5)
    qf, pf = FullCovGaussian(np.zeros(1), np.eye(1)), FullCovGaussian(np.ones(1), np.eye(1))
    assert float(kl_closed_form(qf, pf).data) == pytest.approx(0.5)


def test_kl_four_dim_full_cov_against_monte_carlo():
    rng = np.random.default_rng(6)
    q = FullCovGaussian.from_raw(rng.normal(size=4), rng.normal(scale=0.4, size=(4, 4)))
    p = FullCovGaussian.from_raw(rng.normal(size=4), rng.normal(scale=0.4, size=(4, 4)))
    mc, se = kl_monte_carlo(q, p, 1_000_000, rng, return_stderr=True)
    assert abs(float(mc.data) - float(kl_closed_form(q, p).data)) < 3 * float(se)


def test_kl_diag_fast_path_matches_general_route():
    rng = np.random.default_rng(7)
    q = DiagGaussian(rng.normal(size=(3, 5)), rng.normal(size=(3, 5)))
    p = DiagGaussian(rng.normal(size=(3, 5)), rng.normal(size=(3, 5)))
    general = kl_closed_form(FullCovGaussian(q.mu, q.scale_tril), FullCovGaussian(p.mu, p.scale_tril))
    np.testing.assert_allclose(kl_closed_form(q, p).data, general.data, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(2, 6))
@settings(max_examples=40, deadline=None)
def test_kl_non_negative_and_zero_for_equal_params(seed, z):
    rng = np.random.default_rng(seed)
    mu, raw = rng.normal(size=z), rng.normal(scale=0.5, size=(z, z))
    q = FullCovGaussian.from_raw(mu, raw)
    assert float(kl_closed_form(q, FullCovGaussian.from_raw(mu.copy(), raw.copy())).data) == pytest.approx(0, abs=1e-10)
    p = LowRankGaussian.from_raw(rng.normal(size=z), rng.normal(size=(z, 1)), rng.normal(size=z))
    assert float(kl_closed_form(q, p).data) >= -1e-10


def test_kl_closed_form_rejects_mixtures_and_dim_mismatch():
    d = DiagGaussian(np.zeros(2), np.zeros(2))
    with pytest.raises(TypeError):
        kl_closed_form(GaussianMixture(np.zeros(1), [d], 0.5), d)
    with pytest.raises(ShapeError):
        kl_closed_form(d, DiagGaussian(np.zeros(3), np.zeros(3)))


def test_kl_monte_carlo_same_object_is_exactly_zero():
    rng = np.random.default_rng(8)
    c = LowRankGaussian.from_raw(rng.normal(size=3), rng.normal(size=(3, 1)), rng.normal(size=3))
    mix = GaussianMixture(rng.normal(size=2), [c, DiagGaussian(np.zeros(3), np.zeros(3))], 0.4)
    for n in (1, 5, 50):
        assert float(kl_monte_carlo(c, c, n, rng).data) == 0.0
        assert float(kl_monte_carlo(mix, mix, n, rng).data) == 0.0


def test_kl_monte_carlo_collapsed_mixture_matches_closed_form():
    rng = np.random.default_rng(9)
    c = FullCovGaussian.from_raw(rng.normal(size=3), rng.normal(scale=0.4, size=(3, 3)))
    p = DiagGaussian(rng.normal(size=3), rng.normal(scale=0.3, size=3))
    mix = GaussianMixture(np.array([0.3, -0.2]), [c, c], tau=0.3)
    mc, se = kl_monte_carlo(mix, p, 10_000, rng, return_stderr=True)
    assert abs(float(mc.data) - float(kl_closed_form(c, p).data)) < 3 * float(se)


def test_kl_monte_carlo_is_differentiable():
    rng = np.random.default_rng(10)

    def f(mu_q, ls_q, mu_p, raw_p):
        q = DiagGaussian(mu_q, ls_q)
        p = FullCovGaussian.from_raw(mu_p, raw_p)
        # common random numbers across finite-difference evaluations
        return kl_monte_carlo(q, p, 50, np.random.default_rng(0))

    inputs = [rng.normal(size=2), rng.normal(scale=0.3, size=2), rng.normal(size=2), rng.normal(scale=0.3, size=(2, 2))]
    assert check_grad(f, inputs) < 1e-3


# -- Gumbel-Softmax and mixtures -----------------------------------------------

def test_dominated_logits_always_pick_first():
    rng = np.random.default_rng(11)
    for tau in (0.1, 0.5, 1.0):
        y = gumbel_softmax_sample(np.tile([20.0, -20.0, -20.0], (10_000, 1)), tau, rng).data
        assert (y[:, 0] == 1).mean() > 0.999


@given(arrays(np.float64, (3, 5), elements=st.floats(-5, 5)), st.floats(0.05, 2.0))
@settings(max_examples=50, deadline=None)
def test_straight_through_forward_is_exact_one_hot(logits, tau):
    y = gumbel_softmax_sample(logits, tau, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 1.0}
    np.testing.assert_array_equal(y.sum(axis=-1), np.ones(3))


def test_soft_mode_lies_on_simplex():
    y = gumbel_softmax_sample(np.zeros((4, 3)), 0.5, np.random.default_rng(12), mode="soft").data
    assert np.all(y > 0)
    np.testing.assert_allclose(y.sum(-1), 1.0)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_non_positive_temperature_rejected(tau):
    with pytest.raises(ValueError):
        gumbel_softmax_sample(np.zeros(3), tau, np.random.default_rng(0))


def test_single_component_mixture_matches_component():
    c = DiagGaussian(np.array([2.0, -1.0]), np.zeros(2))
    z = sample_mixture(GaussianMixture(np.zeros(1), [c], 0.5), np.random.default_rng(13), (100_000,)).data
    assert np.abs(z.mean(axis=0) - [2.0, -1.0]).max() < 0.02


def test_separated_components_follow_weights():
    comps = [DiagGaussian(np.array([10.0]), np.zeros(1)), DiagGaussian(np.array([-10.0]), np.zeros(1))]
    mix = GaussianMixture(np.log([0.7, 0.3]), comps, tau=0.2)
    z = mix.rsample(np.random.default_rng(14), (100_000,)).data[:, 0]
    assert abs((z > 0).mean() - 0.7) < 0.01


def test_identical_components_give_component_moments():
    c = FullCovGaussian(np.array([1.0, 2.0]), np.array([[1.0, 0.0], [0.5, 0.5]]))
    mix = GaussianMixture(np.array([3.0, -1.0, 0.0]), [c, c, c], tau=0.4)
    z = mix.rsample(np.random.default_rng(15), (100_000,)).data
    np.testing.assert_allclose(z.mean(0), c.mean(), atol=0.02)
    np.testing.assert_allclose(np.cov(z.T), c.covariance(), atol=0.03)
    np.testing.assert_allclose(mix.covariance(), c.covariance(), atol=1e-12)


def test_unselected_components_still_get_gradient():
    rng = np.random.default_rng(16)
    mus = [Tensor(rng.normal(size=2), requires_grad=True) for _ in range(3)]
    logits = Tensor(np.zeros(3), requires_grad=True)
    mix = GaussianMixture(logits, [DiagGaussian(m, np.zeros(2)) for m in mus], tau=0.5)
    mix.rsample(rng, (1,)).sum().backward()
    assert all(m.grad is not None for m in mus)
    assert sum(np.any(m.grad != 0) for m in mus) == 1
    assert logits.grad is not None and np.any(logits.grad != 0)


def test_mixture_validation():
    d2, d3 = DiagGaussian(np.zeros(2), np.zeros(2)), DiagGaussian(np.zeros(3), np.zeros(3))
    with pytest.raises(ShapeError):
        GaussianMixture(np.zeros(2), [d2, d3], 0.5)
    with pytest.raises(ShapeError):
        GaussianMixture(np.zeros(3), [d2, d2], 0.5)
    with pytest.raises(ValueError):
        GaussianMixture(np.zeros(0), [], 0.5)
