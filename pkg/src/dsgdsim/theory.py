"""Closed-form convergence quantities for the adaptive asynchronous scheme.

beta^(-NB) and the near-cancelling square root in the step-size ceiling span
many orders of magnitude, so every formula is evaluated with mpmath at 50
significant digits and rounded to a double only on return.

Two mixing constants are in circulation for the same role: ``c`` (the form
the step-size ceiling is stated with) and ``c_proof`` = 2 c (the form the
product-deviation bound uses). Both are exposed; ceiling and round-count
threshold default to ``c``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import mpmath as mp

__all__ = [
    "ParameterRangeError",
    "TheoryParams",
    "MixingConstants",
    "mixing_constants",
    "eta_max",
    "eta_max_given_mixing",
    "ergodic_grad_bound",
    "linear_speedup_eta",
    "linear_speedup_k_threshold",
    "k_threshold_given_mixing",
    "constants_table",
]

_DPS = 50


class ParameterRangeError(ValueError):
    pass


@dataclass(frozen=True)
class TheoryParams:
    beta: float
    n: int
    b: int
    lipschitz: float
    sigma_l: float = 0.0
    varsigma: float = 0.0
    f0_gap: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.beta < 1.0):
            raise ParameterRangeError(f"beta must be in (0,1), got {self.beta}")
        if self.n < 2 or self.b < 1:
            raise ParameterRangeError(f"need n >= 2 and b >= 1, got n={self.n}, b={self.b}")
        if self.lipschitz <= 0.0:
            raise ParameterRangeError(f"lipschitz must be positive, got {self.lipschitz}")
        if self.sigma_l < 0.0 or self.varsigma < 0.0 or self.f0_gap < 0.0:
            raise ParameterRangeError("sigma_l, varsigma and f0_gap must be non-negative")


class MixingConstants(NamedTuple):
    q: float
    c: float
    c_proof: float


def _to_float(x: mp.mpf, what: str) -> float:
    out = float(x)
    if not (out == out) or out in (float("inf"), float("-inf")):
        raise ParameterRangeError(f"{what} is not representable as a double (got {x})")
    return out


def mixing_constants(beta: float, n: int, b: int) -> MixingConstants:
    """Geometric mixing rate q = (1 - beta^(NB))^(1/NB) and the matching
    amplitude constants c = (1 + beta^(-NB)) / (1 - beta^(NB)), c_proof = 2c."""
    if not (0.0 < beta < 1.0):
        raise ParameterRangeError(f"beta must be in (0,1), got {beta}")
    if n < 2 or b < 1:
        raise ParameterRangeError(f"need n >= 2 and b >= 1, got n={n}, b={b}")
    with mp.workdps(_DPS):
        nb = n * b
        beta_nb = mp.power(mp.mpf(beta), nb)
        one_minus = 1 - beta_nb
        q = mp.power(one_minus, mp.mpf(1) / nb)
        c = (1 + 1 / beta_nb) / one_minus
        q_float = _to_float(q, "q")
        if q_float >= 1.0:
            # Mathematically q < 1, but beta^(NB) is so small here that the
            # double rounding hits 1.0 and every (1-q) term downstream
            # degenerates; treat it like the overflow guard.
            raise ParameterRangeError(
                f"q rounds to 1.0 in double precision for beta={beta}, NB={nb}"
            )
        return MixingConstants(
            q=q_float,
            c=_to_float(c, "c"),
            c_proof=_to_float(2 * c, "c_proof"),
        )


def _eta_max_mp(q: mp.mpf, c: mp.mpf, lip: mp.mpf, n: int) -> mp.mpf:
    root = mp.sqrt((1 - q) ** 2 / (30 * c**2 * lip**2 * n) + mp.mpf(9) * n**4 / 16)
    return min(root - mp.mpf(3) * n**2 / 4, 1 / lip)


def eta_max(params: TheoryParams) -> float:
    """Largest constant step size for which the ergodic gradient bound is
    guaranteed: min(sqrt((1-q)^2/(30 c^2 L^2 N) + 9N^4/16) - 3N^2/4, 1/L)."""
    qc = mixing_constants(params.beta, params.n, params.b)
    return eta_max_given_mixing(qc.q, qc.c, params.lipschitz, params.n)


def eta_max_given_mixing(q: float, c: float, lipschitz: float, n: int) -> float:
    if not (0.0 < q < 1.0):
        raise ParameterRangeError(f"q must be in (0,1), got {q}")
    if c <= 0.0 or lipschitz <= 0.0 or n < 1:
        raise ParameterRangeError("need c > 0, lipschitz > 0 and n >= 1")
    with mp.workdps(_DPS):
        val = _eta_max_mp(mp.mpf(q), mp.mpf(c), mp.mpf(lipschitz), n)
        return _to_float(val, "eta_max")


def ergodic_grad_bound(params: TheoryParams, eta: float, k_total: int) -> float:
    """Guaranteed level of (1/K) sum_k ||grad F(w_bar(k))||^2:
    6 gap / (eta K) + (9L + 2) eta sigma_L^2 / (3N) + 2 eta varsigma^2 / N."""
    if eta <= 0.0:
        raise ParameterRangeError(f"eta must be positive, got {eta}")
    if k_total < 1:
        raise ParameterRangeError(f"k_total must be >= 1, got {k_total}")
    ceiling = eta_max(params)
    if eta > ceiling:
        warnings.warn(
            f"eta = {eta} exceeds the guaranteed ceiling {ceiling}; "
            "the bound is not certified at this step size",
            stacklevel=2,
        )
    with mp.workdps(_DPS):
        e = mp.mpf(eta)
        lip = mp.mpf(params.lipschitz)
        n = mp.mpf(params.n)
        val = (
            6 * mp.mpf(params.f0_gap) / (e * k_total)
            + (9 * lip + 2) * e / (3 * n) * mp.mpf(params.sigma_l) ** 2
            + 2 * e / n * mp.mpf(params.varsigma) ** 2
        )
        return _to_float(val, "ergodic_grad_bound")


def linear_speedup_eta(n: int, k_total: int) -> float:
    """Step size sqrt(N/K) that yields the 1/sqrt(NK) ergodic rate."""
    if n < 1 or k_total < 1:
        raise ParameterRangeError(f"need n >= 1 and k_total >= 1, got {n}, {k_total}")
    with mp.workdps(_DPS):
        return _to_float(mp.sqrt(mp.mpf(n) / k_total), "linear_speedup_eta")


def linear_speedup_k_threshold(params: TheoryParams) -> float:
    """Minimum number of rounds before sqrt(N/K) falls under the step-size
    ceiling: 2N / ((1-q)^2/(30 c^2 L^2 N) + 9N^4/16 - sqrt(3) N^(3/2) (1-q)/(c L sqrt(40)))."""
    qc = mixing_constants(params.beta, params.n, params.b)
    return k_threshold_given_mixing(qc.q, qc.c, params.lipschitz, params.n)


def k_threshold_given_mixing(q: float, c: float, lipschitz: float, n: int) -> float:
    if not (0.0 < q < 1.0):
        raise ParameterRangeError(f"q must be in (0,1), got {q}")
    if c <= 0.0 or lipschitz <= 0.0 or n < 1:
        raise ParameterRangeError("need c > 0, lipschitz > 0 and n >= 1")
    with mp.workdps(_DPS):
        qm = mp.mpf(q)
        cm = mp.mpf(c)
        lip = mp.mpf(lipschitz)
        nm = mp.mpf(n)
        denom = (
            (1 - qm) ** 2 / (30 * cm**2 * lip**2 * nm)
            + mp.mpf(9) * nm**4 / 16
            - mp.sqrt(3) * nm ** mp.mpf(1.5) * (1 - qm) / (cm * lip * mp.sqrt(40))
        )
        if denom <= 0:
            raise ParameterRangeError(
                f"round-count threshold undefined: denominator {float(denom)} is not positive"
            )
        return _to_float(2 * nm / denom, "linear_speedup_k_threshold")


def constants_table(params: TheoryParams, eta: float | None = None, k_total: int | None = None) -> str:
    """Human-readable summary used by the CLI."""
    qc = mixing_constants(params.beta, params.n, params.b)
    ceiling = eta_max(params)
    rows = [
        ("beta", params.beta),
        ("n_workers", params.n),
        ("b_window", params.b),
        ("lipschitz", params.lipschitz),
        ("sigma_l", params.sigma_l),
        ("varsigma", params.varsigma),
        ("f0_gap", params.f0_gap),
        ("q", qc.q),
        ("c", qc.c),
        ("c_proof", qc.c_proof),
        ("eta_max", ceiling),
    ]
    try:
        rows.append(("k_threshold", linear_speedup_k_threshold(params)))
    except ParameterRangeError as exc:
        rows.append(("k_threshold", f"range error: {exc}"))
    if eta is not None and k_total is not None:
        rows.append(("rhs_bound", ergodic_grad_bound(params, eta, k_total)))
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)
