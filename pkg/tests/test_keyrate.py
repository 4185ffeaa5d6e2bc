import math

import numpy as np
import pytest

from biased_qkd import keyrate
from biased_qkd.keyrate import InfeasibleError
from biased_qkd.schemas import BiasConfig, EpsilonBudget, KeyRateParams

N = 3e7
E_BX, E_BZ = 0.054, 0.012
F_X, F_Z = 1.31, 1.59
P_EPS = 1e-6


def test_binary_entropy_values():
    assert keyrate.binary_entropy(0.0) == 0.0
    assert keyrate.binary_entropy(1.0) == 0.0
    assert keyrate.binary_entropy(0.5) == pytest.approx(1.0)
    assert keyrate.binary_entropy(0.11) == pytest.approx(0.49992, abs=1e-5)


@pytest.mark.parametrize("x", [0.01, 0.054, 0.2, 0.37])
def test_binary_entropy_symmetric_and_concave(x):
    assert keyrate.binary_entropy(x) == pytest.approx(keyrate.binary_entropy(1 - x))
    mid = keyrate.binary_entropy((x + 0.5) / 2)
    assert mid >= (keyrate.binary_entropy(x) + keyrate.binary_entropy(0.5)) / 2


def test_binary_entropy_rejects_out_of_range():
    with pytest.raises(ValueError):
        keyrate.binary_entropy(1.2)


def test_sampling_bound_worked_example():
    bound = keyrate.sampling_bound(0.01, 10000, 0.05)
    assert 0.0051 <= bound <= 0.0052
    assert keyrate.sampling_bound(0.02, 10000, 0.05) == pytest.approx(math.exp(-4 / 0.19), rel=1e-9)
    assert keyrate.sampling_bound(0.02, 10000, 0.05) == pytest.approx(7.2e-10, rel=0.02)


def test_residual_bound_constant():
    assert 2.0**-40 == pytest.approx(9.09e-13, rel=0.005)


@pytest.mark.parametrize("n,e,target", [(10_000, 0.05, 1e-6), (500, 0.012, 5e-7), (3_000_000, 0.3, 0.1)])
def test_solve_epsilon_inverts_the_bound(n, e, target):
    eps = keyrate.solve_epsilon(n, e, target)
    assert keyrate.sampling_bound(eps, n, e) == pytest.approx(target, rel=1e-9)


def test_solve_epsilon_edge_cases():
    with pytest.raises(InfeasibleError):
        keyrate.solve_epsilon(0, 0.05, 1e-6)
    assert keyrate.solve_epsilon(100, 0.05, 1.0) == 0.0
    assert keyrate.solve_epsilon(100, 0.0, 1e-6) == 0.0
    with pytest.raises(ValueError):
        keyrate.solve_epsilon(100, 0.6, 1e-6)


def test_key_rate_noiseless_unbiased():
    assert keyrate.asymptotic_key_rate(0.5, 0.0, 0.0) == pytest.approx(0.5)


def test_key_rate_breaks_even_near_eleven_percent():
    assert keyrate.asymptotic_key_rate(0.5, 0.11, 0.11) == pytest.approx(0.0, abs=1e-3)
    assert keyrate.asymptotic_key_rate(0.5, 0.12, 0.12) < 0


def test_entropy_clamp_flags_large_deviation():
    params = KeyRateParams(q_A=0.5, q_B=0.5, e_bx=0.05, e_bz=0.05, eps_x=0.6, eps_z=0.0)
    terms = keyrate.rate_terms(params)
    assert terms.clamped
    assert terms.x_term == pytest.approx(0.25 * (0.0 - keyrate.binary_entropy(0.05)))


@pytest.mark.parametrize("q", [0.2, 0.5, 0.83])
def test_finite_rate_mirror_symmetry(q):
    """Swapping the basis labels together with the bias leaves the rate unchanged."""
    a, *_ = keyrate.finite_key_rate(BiasConfig.symmetric(q), 1e6, E_BX, E_BZ, F_X, F_Z, P_EPS, split=False)
    b, *_ = keyrate.finite_key_rate(BiasConfig.symmetric(1 - q), 1e6, E_BZ, E_BX, F_Z, F_X, P_EPS, split=False)
    assert a == pytest.approx(b, rel=1e-12)


def test_optimize_split_never_worse_than_even():
    bias = BiasConfig.symmetric(0.9)
    even, *_ = keyrate.finite_key_rate(bias, 1e6, E_BX, E_BZ, F_X, F_Z, P_EPS, split=False)
    best, budget, *_ = keyrate.finite_key_rate(bias, 1e6, E_BX, E_BZ, F_X, F_Z, P_EPS, split=True)
    assert best >= even
    assert budget.P_eps == pytest.approx(P_EPS)


def test_optimal_bias_band():
    result = keyrate.optimize_bias(N, E_BX, E_BZ, F_X, F_Z, P_EPS)
    assert 0.94 <= result.q_star <= 0.99
    assert result.positive
    unbiased, *_ = keyrate.finite_key_rate(BiasConfig.symmetric(0.5), N, E_BX, E_BZ, F_X, F_Z, P_EPS)
    assert result.R > unbiased


def test_curve_is_bimodal_with_z_side_higher():
    curve = keyrate.key_rate_curve(N, E_BX, E_BZ, F_X, F_Z, P_EPS)
    assert list(curve.columns) == ["q", "eps_x", "eps_z", "R"]
    low = curve.loc[curve["q"] < 0.5, "R"].max()
    high = curve.loc[curve["q"] > 0.5, "R"].max()
    assert high > low
    # Local maximum on the X side as well
    x_side = curve.loc[curve["q"] < 0.5, "R"].to_numpy()
    assert x_side.argmax() not in (0, len(x_side) - 1)


def test_worse_x_correction_favours_z_bias():
    curve = keyrate.key_rate_curve(1e7, 0.03, 0.03, 1.5, 1.1, P_EPS)
    low = curve.loc[curve["q"] < 0.5, "R"].max()
    high = curve.loc[curve["q"] > 0.5, "R"].max()
    assert high > low


def test_asymmetric_optimum_close_to_symmetric():
    sym = keyrate.optimize_bias(N, E_BX, E_BZ, F_X, F_Z, P_EPS)
    asym = keyrate.optimize_bias(N, E_BX, E_BZ, F_X, F_Z, P_EPS, asymmetric=True)
    assert asym.R >= sym.R - 1e-4
    assert 0.9 <= asym.q_A_star <= 0.995 and 0.9 <= asym.q_B_star <= 0.995


def test_surface_shape():
    surface = keyrate.key_rate_surface(1e6, E_BX, E_BZ, F_X, F_Z, P_EPS, step=0.1)
    assert list(surface.columns) == ["q_A", "q_B", "R"]
    assert len(surface) == 11 * 11


def test_no_positive_rate_is_floored():
    result = keyrate.optimize_bias(1e3, 0.2, 0.2, 1.2, 1.2, P_EPS, step=0.05)
    assert not result.positive
    assert result.R == 0.0
    assert result.R_raw < 0


def test_secure_length_matches_direct_evaluation():
    n_xx, n_zz = 10_000, 1_000_000
    budget = EpsilonBudget.even(1e-6)
    eps_x, eps_z = keyrate.solve_deviations(n_xx, n_zz, E_BX, E_BZ, budget)
    leak_x, leak_z = 4100, 150_000

    def h(x):
        return -x * math.log2(x) - (1 - x) * math.log2(1 - x)

    direct = n_xx * (1 - h(E_BZ + eps_x)) - leak_x + n_zz * (1 - h(E_BX + eps_z)) - leak_z
    assert keyrate.secure_length(n_xx, n_zz, E_BX, E_BZ, eps_x, eps_z, leak_x, leak_z) == math.floor(direct)


def test_secure_length_floors_at_zero():
    assert keyrate.secure_length(100, 100, 0.05, 0.05, 0.1, 0.1, 500, 500) == 0


def test_session_epsilons_with_empty_basis():
    budget, eps_x, eps_z = keyrate.session_epsilons(0, 5000, 0.0, 0.012, 0, 400, P_EPS)
    assert budget == EpsilonBudget.even(P_EPS)
    assert eps_z == math.inf
    assert np.isfinite(eps_x)
    assert keyrate.secure_length(0, 5000, 0.0, 0.012, eps_x, eps_z, 0, 400) == 0


def test_optimal_rate_never_drops_as_n_grows():
    rates = [keyrate.optimize_bias(n, E_BX, E_BZ, F_X, F_Z, P_EPS, step=0.01).R for n in (1e5, 1e6, 1e7, 3e7, 1e8)]
    assert all(later >= earlier - 1e-9 for earlier, later in zip(rates, rates[1:]))
    assert rates[-1] > rates[1]


def test_secure_length_non_increasing_in_leak_and_deviation():
    n_xx, n_zz = 20_000, 400_000
    base = dict(n_xx=n_xx, n_zz=n_zz, e_bx=E_BX, e_bz=E_BZ, eps_x=0.002, eps_z=0.02, leak_x=8000, leak_z=40_000)
    for name, values in (
        ("leak_x", [0, 4000, 8000, 16_000]),
        ("leak_z", [0, 20_000, 40_000, 80_000]),
        ("eps_x", [0.0, 0.001, 0.002, 0.01, 0.6]),
        ("eps_z", [0.0, 0.01, 0.02, 0.1, 0.6]),
    ):
        lengths = [keyrate.secure_length(**(base | {name: v})) for v in values]
        assert lengths == sorted(lengths, reverse=True), name
