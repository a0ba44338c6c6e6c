"""Closed-form Riccati coefficients for the opportunity process of the Heston market.

For each asset j the opportunity process factorizes as
    L_t = prod_j exp(chi0_j(t) + chi1_j(t) * Y2_j(t)),
where chi1 solves a scalar Riccati ODE and chi0 is its integral against kappa*theta.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .market import HestonParams

DENSE_POINTS = 10_001


@dataclass(frozen=True)
class RiccatiConstants:
    a: float  # -mu^2
    b: float  # -kappa - 2 rho sigma mu
    c: float  # sigma^2 (1 - 2 rho^2) / 2
    d: float  # sqrt(b^2 - 4ac)
    f: float  # kappa theta

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.a, self.b, self.c, self.d, self.f)


def riccati_constants(params: HestonParams, j: int = 0, rtol: float = 1e-12) -> RiccatiConstants:
    mu, kap, sig, rho = (float(params.mu_bar[j]), float(params.kappa[j]),
                         float(params.sigma[j]), float(params.rho[j]))
    a = -mu ** 2
    b = -kap - 2.0 * rho * sig * mu
    c = 0.5 * sig ** 2 * (1.0 - 2.0 * rho ** 2)
    if abs(c) <= rtol * max(sig ** 2, 1e-300):
        raise ValueError(f"component {j}: degenerate Riccati constant c=0 (rho^2=1/2 or sigma=0) unsupported")
    disc = b * b - 4.0 * a * c
    if disc < 0:
        raise ValueError(f"component {j}: negative discriminant {disc}")
    d = float(np.sqrt(disc))
    if d <= rtol * max(abs(b), np.sqrt(abs(a * c)), 1e-300):
        raise ValueError(f"component {j}: degenerate Riccati constant d=0 unsupported")
    return RiccatiConstants(a=a, b=b, c=c, d=d, f=kap * float(params.theta[j]))


def chi_from_constants(k: RiccatiConstants, tau) -> tuple[np.ndarray, np.ndarray]:
    """(chi0, chi1) at time-to-maturity ``tau``.

    Written with e = exp(-d tau) so nothing overflows for large d*tau:
        chi1 = 2a(1-e) / ((b+d)e - (b-d))
        chi0 = -(f/c) [ (b+d) tau / 2 + log(1 - (b+d)(1-e)/(2d)) ]
    """
    tau = np.asarray(tau, dtype=float)
    one_minus_e = -np.expm1(-k.d * tau)
    e = 1.0 - one_minus_e
    den = (k.b + k.d) * e - (k.b - k.d)
    chi1 = 2.0 * k.a * one_minus_e / den
    chi0 = -(k.f / k.c) * (0.5 * (k.b + k.d) * tau
                           + np.log1p(-(k.b + k.d) * one_minus_e / (2.0 * k.d)))
    return chi0, chi1


def chi(t, params: HestonParams, j: int = 0) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(t, dtype=float)
    if np.any(t < -1e-12) or np.any(t > params.maturity + 1e-12):
        raise ValueError("t must lie in [0, T]")
    return chi_from_constants(riccati_constants(params, j), params.maturity - t)


def riccati_rhs(psi, params: HestonParams, j: int = 0):
    """d psi / dt of the scalar Riccati ODE (integrated backwards from psi(T)=0)."""
    mu, kap, sig, rho = params.mu_bar[j], params.kappa[j], params.sigma[j], params.rho[j]
    return (kap * psi - 0.5 * sig ** 2 * psi ** 2 + mu ** 2 + 2.0 * sig * rho * mu * psi
            + sig ** 2 * rho ** 2 * psi ** 2)


@dataclass
class RiccatiCurves:
    """chi0/chi1 for every component on a dense uniform grid."""

    params: HestonParams
    t: np.ndarray
    chi0_grid: np.ndarray  # (n_points, m)
    chi1_grid: np.ndarray  # (n_points, m)
    constants: tuple[RiccatiConstants, ...]

    @classmethod
    def build(cls, params: HestonParams, n_points: int = DENSE_POINTS) -> "RiccatiCurves":
        t = np.linspace(0.0, params.maturity, n_points)
        consts = tuple(riccati_constants(params, j) for j in range(params.m))
        c0 = np.empty((n_points, params.m))
        c1 = np.empty((n_points, params.m))
        for j, k in enumerate(consts):
            c0[:, j], c1[:, j] = chi_from_constants(k, params.maturity - t)
        return cls(params=params, t=t, chi0_grid=c0, chi1_grid=c1, constants=consts)

    def _interp(self, grid: np.ndarray, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.stack([np.interp(t, self.t, grid[:, j]) for j in range(grid.shape[1])], axis=-1)
        return out

    def chi0(self, t) -> np.ndarray:
        return self._interp(self.chi0_grid, t)

    def chi1(self, t) -> np.ndarray:
        return self._interp(self.chi1_grid, t)

    def to_csv(self, path: str | Path) -> None:
        m = self.params.m
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"chi0_{j}" for j in range(m)] + [f"chi1_{j}" for j in range(m)])
            for i, ti in enumerate(self.t):
                w.writerow([repr(float(ti))] + [repr(float(v)) for v in self.chi0_grid[i]]
                           + [repr(float(v)) for v in self.chi1_grid[i]])


def _exact_chi(params: HestonParams, t) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(t, dtype=float)
    c0, c1 = [], []
    for j in range(params.m):
        a, b = chi(t, params, j)
        c0.append(a)
        c1.append(b)
    return np.stack(c0, axis=-1), np.stack(c1, axis=-1)


def opportunity_process(params: HestonParams, t, y_sq: np.ndarray) -> np.ndarray:
    """L(t, y^2) as a product over components; ``y_sq`` has m on its last axis."""
    y_sq = np.asarray(y_sq, dtype=float)
    if np.allclose(params.mu_bar, 0.0):
        return np.ones(y_sq.shape[:-1])
    c0, c1 = _exact_chi(params, t)
    return np.exp(np.sum(c0 + c1 * y_sq, axis=-1))


def bsre_controls(params: HestonParams, t, y_sq: np.ndarray, L=None) -> tuple[np.ndarray, np.ndarray]:
    """Controls (Lambda1, Lambda2) of the stochastic Riccati equation at (t, y^2)."""
    y_sq = np.asarray(y_sq, dtype=float)
    if L is None:
        L = opportunity_process(params, t, y_sq)
    if np.allclose(params.mu_bar, 0.0):
        z = np.zeros_like(y_sq)
        return z, z.copy()
    _, c1 = _exact_chi(params, t)
    base = np.asarray(L)[..., None] * np.sqrt(np.maximum(y_sq, 0.0)) * params.sigma * c1
    return base * params.rho, base * np.sqrt(1.0 - params.rho ** 2)


def bsre_drift(phi: np.ndarray, lam1: np.ndarray, L: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|phi|^2 L + 2 phi.Lambda1 + |Lambda1|^2 / max(L, floor); the dL/dt term of the BSRE."""
    Lc = np.maximum(L, floor)
    return (np.sum(phi * phi, axis=-1) * L + 2.0 * np.sum(phi * lam1, axis=-1)
            + np.sum(lam1 * lam1, axis=-1) / Lc)


def kappa_mv(params: HestonParams, chi1_t: np.ndarray) -> np.ndarray:
    """Mean-reversion speed of the variance under the variance-optimal measure."""
    return (params.kappa + params.rho * params.sigma * params.mu_bar
            - chi1_t * params.sigma ** 2 * (1.0 - params.rho ** 2))
