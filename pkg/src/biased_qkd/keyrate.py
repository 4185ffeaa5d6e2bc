"""Key-rate math for the biased-basis protocol.

Covers the binary entropy, the random-sampling bound on the phase-error
estimate and its inversion, the finite-key rate, the exact final-length
formula used by privacy amplification, and the search for the optimal bias.
All functions are pure.
"""

import logging
import math
from typing import Callable, NamedTuple, Optional

import numpy as np
import pandas as pd
from scipy import optimize, special

from biased_qkd.schemas import BiasConfig, EpsilonBudget, KeyRateParams, KeyRateResult

logger = logging.getLogger(__name__)

_LN2 = math.log(2.0)
# Grid values within this distance of the maximum count as ties
_TIE_TOLERANCE = 1e-12


class InfeasibleError(ValueError):
    """A requested quantity cannot be computed from the given counts."""


class RateTerms(NamedTuple):
    x_term: float
    z_term: float
    clamped: bool

    @property
    def total(self) -> float:
        return self.x_term + self.z_term


def binary_entropy(x: float) -> float:
    """h2(x) = -x log2 x - (1-x) log2 (1-x), with 0 log 0 = 0."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary_entropy is defined on [0, 1], got {x}")
    return float((special.entr(x) + special.entr(1.0 - x)) / _LN2)


def _h2(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return (special.entr(x) + special.entr(1.0 - x)) / _LN2


def _check_rate(name: str, e: float) -> None:
    if not 0.0 <= e <= 0.5:
        raise ValueError(f"{name} must lie in [0, 0.5], got {e}")


def sampling_bound(eps: float, n: int, e: float) -> float:
    """Upper bound on Prob{phase error > e + eps} from n samples at bit-error rate e."""
    if n < 1:
        raise ValueError(f"sampling_bound needs n >= 1, got {n}")
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    _check_rate("e", e)
    if e == 0.0:
        logger.warning("sampling_bound evaluated at e = 0; the bound degenerates")
        return 1.0 if eps == 0.0 else 0.0
    return math.exp(-(eps**2) * n / (4.0 * e * (1.0 - e)))


def solve_epsilon(n: int, e: float, target: float) -> float:
    """Smallest deviation eps whose sampling bound equals ``target``."""
    if n <= 0:
        raise InfeasibleError("Cannot bound a phase error from zero samples")
    _check_rate("e", e)
    if target <= 0.0:
        raise ValueError(f"target probability must be positive, got {target}")
    if target >= 1.0:
        return 0.0
    if e == 0.0:
        logger.warning("solve_epsilon at e = 0; returning eps = 0")
        return 0.0
    return math.sqrt(4.0 * e * (1.0 - e) * math.log(1.0 / target) / n)


def _deviation(n, e: float, target) -> np.ndarray:
    """Vectorised solve_epsilon; zero samples give an infinite deviation."""
    n = np.asarray(n, dtype=float)
    target = np.asarray(target, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        eps = np.sqrt(4.0 * e * (1.0 - e) * np.log(1.0 / target) / n)
    return np.where(n > 0, np.nan_to_num(eps, nan=0.0), np.inf)


def solve_deviations(n_xx: int, n_zz: int, e_bx: float, e_bz: float, budget: EpsilonBudget) -> tuple[float, float]:
    """Deviations (eps_x, eps_z) for actual counts.

    X-basis data bound the Z phase error and vice versa. A basis with no
    matched rounds cannot bound anything, so the deviation it feeds is
    infinite and the entropy clamp takes over.
    """
    eps_z = solve_epsilon(n_xx, e_bx, budget.P_eps_z) if n_xx > 0 else math.inf
    eps_x = solve_epsilon(n_zz, e_bz, budget.P_eps_x) if n_zz > 0 else math.inf
    return eps_x, eps_z


def rate_terms(params: KeyRateParams) -> RateTerms:
    """Per-basis contributions to the finite-key rate."""
    arg_x = params.e_bz + params.eps_x
    arg_z = params.e_bx + params.eps_z
    clamped = arg_x > 0.5 or arg_z > 0.5
    if clamped:
        logger.debug(f"Entropy argument clamped to 0.5 (x: {arg_x:.4f}, z: {arg_z:.4f})")
    w_xx = (1.0 - params.q_A) * (1.0 - params.q_B)
    w_zz = params.q_A * params.q_B
    x_term = w_xx * (1.0 - params.f_x * binary_entropy(params.e_bx) - binary_entropy(min(arg_x, 0.5)))
    z_term = w_zz * (1.0 - params.f_z * binary_entropy(params.e_bz) - binary_entropy(min(arg_z, 0.5)))
    return RateTerms(x_term=x_term, z_term=z_term, clamped=clamped)


def key_rate(params: KeyRateParams) -> float:
    """Secure bits per raw bit; may be negative."""
    return rate_terms(params).total


def asymptotic_key_rate(q: float, e_bx: float, e_bz: float, f_x: float = 1.0, f_z: float = 1.0) -> float:
    """Long-key-limit rate for identical biases (no deviations)."""
    return key_rate(KeyRateParams(q_A=q, q_B=q, e_bx=e_bx, e_bz=e_bz, f_x=f_x, f_z=f_z))


def _finite_rate(q_A, q_B, N, e_bx, e_bz, f_x, f_z, P_x, P_z):
    """Vectorised finite-key rate with deviations sized from expected counts."""
    w_xx = (1.0 - np.asarray(q_A)) * (1.0 - np.asarray(q_B))
    w_zz = np.asarray(q_A) * np.asarray(q_B)
    eps_z = _deviation(N * w_xx, e_bx, P_z)
    eps_x = _deviation(N * w_zz, e_bz, P_x)
    h_x = _h2(np.minimum(e_bz + eps_x, 0.5))
    h_z = _h2(np.minimum(e_bx + eps_z, 0.5))
    R = w_xx * (1.0 - f_x * _h2(e_bx) - h_x) + w_zz * (1.0 - f_z * _h2(e_bz) - h_z)
    return R, eps_x, eps_z


def optimize_split(objective: Callable[[EpsilonBudget], float], P_eps: float) -> EpsilonBudget:
    """Split P_eps between the two estimates so that ``objective`` is largest.

    The even split is always a candidate, so the result is never worse than it.
    """
    def value(fraction_x: float) -> float:
        return objective(EpsilonBudget.split(P_eps, fraction_x))

    res = optimize.minimize_scalar(
        lambda t: -value(t), bounds=(1e-6, 1.0 - 1e-6), method="bounded", options={"xatol": 1e-7}
    )
    best_fraction = 0.5
    if res.success and -res.fun > value(0.5):
        best_fraction = float(res.x)
    return EpsilonBudget.split(P_eps, best_fraction)


def finite_key_rate(
    bias: BiasConfig,
    N: float,
    e_bx: float,
    e_bz: float,
    f_x: float,
    f_z: float,
    P_eps: float,
    split: bool = True,
) -> tuple[float, EpsilonBudget, float, float]:
    """Rate at a fixed bias with deviations sized from the expected counts.

    Returns (R, budget, eps_x, eps_z). With ``split`` the P_eps split is
    co-optimised, otherwise it is even.
    """
    def rate(budget: EpsilonBudget) -> float:
        R, _, _ = _finite_rate(bias.q_A, bias.q_B, N, e_bx, e_bz, f_x, f_z, budget.P_eps_x, budget.P_eps_z)
        return float(R)

    budget = optimize_split(rate, P_eps) if split else EpsilonBudget.even(P_eps)
    R, eps_x, eps_z = _finite_rate(bias.q_A, bias.q_B, N, e_bx, e_bz, f_x, f_z, budget.P_eps_x, budget.P_eps_z)
    return float(R), budget, float(eps_x), float(eps_z)


def _validate_search(N: float, e_bx: float, e_bz: float, f_x: float, f_z: float, P_eps: float) -> None:
    if N < 1:
        raise ValueError(f"N must be at least 1, got {N}")
    _check_rate("e_bx", e_bx)
    _check_rate("e_bz", e_bz)
    if f_x < 1.0 or f_z < 1.0:
        raise ValueError("Error-correction inefficiencies must be >= 1")
    if not 0.0 < P_eps < 1.0:
        raise ValueError(f"P_eps must lie in (0, 1), got {P_eps}")


def _grid(q_min: float, q_max: float, step: float) -> np.ndarray:
    return np.linspace(q_min, q_max, int(round((q_max - q_min) / step)) + 1)


def _result(bias: BiasConfig, N, e_bx, e_bz, f_x, f_z, P_eps, split: bool) -> KeyRateResult:
    R, budget, eps_x, eps_z = finite_key_rate(bias, N, e_bx, e_bz, f_x, f_z, P_eps, split)
    positive = R > 0.0
    if not positive:
        logger.warning(f"No positive rate for N={N:g}, e_bx={e_bx}, e_bz={e_bz}")
    return KeyRateResult(
        R=max(R, 0.0),
        R_raw=R,
        q_A_star=bias.q_A,
        q_B_star=bias.q_B,
        eps_x_star=eps_x,
        eps_z_star=eps_z,
        budget=budget,
        positive=positive,
    )


def optimize_bias(
    N: float,
    e_bx: float,
    e_bz: float,
    f_x: float,
    f_z: float,
    P_eps: float,
    *,
    asymmetric: bool = False,
    split: bool = True,
    step: float = 0.005,
    q_min: float = 0.01,
    q_max: float = 0.99,
) -> KeyRateResult:
    """Bias that maximises the finite-key rate.

    A coarse grid over q (step ``step``) picks the best point, ties going to
    the larger q, and a golden-section search inside the neighbouring grid
    cells refines it. With ``asymmetric`` the search runs over (q_A, q_B) on a
    grid no finer than 0.01 and is refined by Nelder-Mead.
    """
    _validate_search(N, e_bx, e_bz, f_x, f_z, P_eps)
    if asymmetric:
        return _optimize_asymmetric(N, e_bx, e_bz, f_x, f_z, P_eps, split, max(step, 0.01), q_min, q_max)

    def rate_at(q: float) -> float:
        return finite_key_rate(BiasConfig.symmetric(q), N, e_bx, e_bz, f_x, f_z, P_eps, split)[0]

    qs = _grid(q_min, q_max, step)
    values = np.array([rate_at(q) for q in qs])
    idx = int(np.flatnonzero(values >= values.max() - _TIE_TOLERANCE)[-1])
    q_best = float(qs[idx])

    if 0 < idx < len(qs) - 1:
        try:
            res = optimize.minimize_scalar(
                lambda q: -rate_at(q),
                bracket=(qs[idx - 1], qs[idx], qs[idx + 1]),
                method="golden",
                options={"xtol": 1e-8},
            )
            if qs[idx - 1] <= res.x <= qs[idx + 1] and -res.fun > values[idx]:
                q_best = float(res.x)
        except (ValueError, RuntimeError):
            # flat neighbourhood, keep the grid point
            pass

    return _result(BiasConfig.symmetric(q_best), N, e_bx, e_bz, f_x, f_z, P_eps, split)


def _optimize_asymmetric(N, e_bx, e_bz, f_x, f_z, P_eps, split, step, q_min, q_max) -> KeyRateResult:
    qs = _grid(q_min, q_max, step)
    fractions = np.linspace(0.02, 0.98, 49) if split else np.array([0.5])
    q_a, q_b, t = np.meshgrid(qs, qs, fractions, indexing="ij")
    R, _, _ = _finite_rate(q_a, q_b, N, e_bx, e_bz, f_x, f_z, P_eps * t, P_eps * (1.0 - t))
    best_t = R.argmax(axis=2)
    surface = R.max(axis=2)

    # Ties go to the pair biased furthest towards Z
    candidates = np.argwhere(surface >= surface.max() - _TIE_TOLERANCE)
    i, j = max(candidates, key=lambda ij: (qs[ij[0]] + qs[ij[1]], qs[ij[0]]))
    x0 = np.array([qs[i], qs[j], fractions[best_t[i, j]]])

    def neg_rate(x: np.ndarray) -> float:
        fx = x[2] if split else 0.5
        value, _, _ = _finite_rate(x[0], x[1], N, e_bx, e_bz, f_x, f_z, P_eps * fx, P_eps * (1.0 - fx))
        return -float(value)

    res = optimize.minimize(
        neg_rate,
        x0,
        method="Nelder-Mead",
        bounds=[(q_min, q_max), (q_min, q_max), (1e-6, 1.0 - 1e-6)],
        options={"xatol": 1e-7, "fatol": 1e-12},
    )
    best = res.x if res.fun < neg_rate(x0) else x0
    return _result(BiasConfig(q_A=float(best[0]), q_B=float(best[1])), N, e_bx, e_bz, f_x, f_z, P_eps, split)


def key_rate_curve(
    N: float,
    e_bx: float,
    e_bz: float,
    f_x: float,
    f_z: float,
    P_eps: float,
    qs: Optional[np.ndarray] = None,
    split: bool = True,
) -> pd.DataFrame:
    """Rate against a symmetric bias, one row per q: ``q,eps_x,eps_z,R``."""
    _validate_search(N, e_bx, e_bz, f_x, f_z, P_eps)
    qs = _grid(0.01, 0.99, 0.005) if qs is None else np.asarray(qs, dtype=float)
    rows = []
    for q in qs:
        R, _, eps_x, eps_z = finite_key_rate(BiasConfig.symmetric(float(q)), N, e_bx, e_bz, f_x, f_z, P_eps, split)
        rows.append({"q": float(q), "eps_x": eps_x, "eps_z": eps_z, "R": R})
    return pd.DataFrame(rows, columns=["q", "eps_x", "eps_z", "R"])


def key_rate_surface(
    N: float,
    e_bx: float,
    e_bz: float,
    f_x: float,
    f_z: float,
    P_eps: float,
    step: float = 0.01,
    split: bool = True,
) -> pd.DataFrame:
    """Rate over independent biases, one row per pair: ``q_A,q_B,R``."""
    _validate_search(N, e_bx, e_bz, f_x, f_z, P_eps)
    qs = _grid(0.01, 0.99, step)
    fractions = np.linspace(0.02, 0.98, 49) if split else np.array([0.5])
    q_a, q_b, t = np.meshgrid(qs, qs, fractions, indexing="ij")
    R, _, _ = _finite_rate(q_a, q_b, N, e_bx, e_bz, f_x, f_z, P_eps * t, P_eps * (1.0 - t))
    surface = R.max(axis=2)
    grid_a, grid_b = np.meshgrid(qs, qs, indexing="ij")
    return pd.DataFrame({"q_A": grid_a.ravel(), "q_B": grid_b.ravel(), "R": surface.ravel()})


def secure_bits(
    n_xx: int,
    n_zz: int,
    e_bx: float,
    e_bz: float,
    eps_x: float,
    eps_z: float,
    leak_x: int,
    leak_z: int,
) -> float:
    """Unfloored secret-bit count; may be negative."""
    for name, n, leak in (("x", n_xx, leak_x), ("z", n_zz, leak_z)):
        if n < 0 or leak < 0:
            raise ValueError(f"Counts must be non-negative (basis {name})")
    _check_rate("e_bx", e_bx)
    _check_rate("e_bz", e_bz)
    if eps_x < 0 or eps_z < 0:
        raise ValueError("Deviations must be non-negative")
    x_bits = n_xx * (1.0 - binary_entropy(min(e_bz + eps_x, 0.5))) - leak_x
    z_bits = n_zz * (1.0 - binary_entropy(min(e_bx + eps_z, 0.5))) - leak_z
    return x_bits + z_bits


def secure_length(
    n_xx: int,
    n_zz: int,
    e_bx: float,
    e_bz: float,
    eps_x: float,
    eps_z: float,
    leak_x: int,
    leak_z: int,
) -> int:
    """Final key length from end-of-session counts and exact leak.

    A leak larger than the key it was revealed about is allowed; the length
    simply floors at zero.
    """
    return max(0, math.floor(secure_bits(n_xx, n_zz, e_bx, e_bz, eps_x, eps_z, leak_x, leak_z)))


def session_epsilons(
    n_xx: int,
    n_zz: int,
    e_bx: float,
    e_bz: float,
    leak_x: int,
    leak_z: int,
    P_eps: float,
    split: bool = True,
) -> tuple[EpsilonBudget, float, float]:
    """Budget and deviations from actual end-of-session counts.

    With ``split`` the budget is divided so that the secure length is largest.
    """
    _check_rate("e_bx", e_bx)
    _check_rate("e_bz", e_bz)

    def bits(budget: EpsilonBudget) -> float:
        eps_x, eps_z = solve_deviations(n_xx, n_zz, e_bx, e_bz, budget)
        return secure_bits(n_xx, n_zz, e_bx, e_bz, eps_x, eps_z, leak_x, leak_z)

    budget = optimize_split(bits, P_eps) if split and n_xx and n_zz else EpsilonBudget.even(P_eps)
    eps_x, eps_z = solve_deviations(n_xx, n_zz, e_bx, e_bz, budget)
    return budget, eps_x, eps_z
