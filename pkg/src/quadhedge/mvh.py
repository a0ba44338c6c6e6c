"""Mean-variance hedging: stochastic Riccati equation, extended BSDE, optimal strategy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import BsdeRunResult, BsdeSpec, SolverConfig, roll_forward, train
from .hedge import HedgeRun, invert_vol
from .market import HestonParams, PathBatch, market_price_of_risk, payoff, validate

L_FLOOR = 1e-6
ALARM_BAND = 0.05  # L above 1 + band counts as a clamp event
ALARM_RATE = 0.01


def bsre_spec(params: HestonParams) -> BsdeSpec:
    m = params.m

    def prepare(paths: PathBatch):
        return {"phi": market_price_of_risk(params, np.swapaxes(paths.y_sq, 0, 1))}  # (N+1, B, m)

    def driver(n, aux, L, z):
        phi = aux["phi"][n]
        lam1 = z[:, :m]
        active = L > L_FLOOR
        Lc = np.where(active, L, L_FLOOR)
        phi2 = np.sum(phi * phi, axis=-1)
        l1sq = np.sum(lam1 * lam1, axis=-1)
        drift = phi2 * L + 2.0 * np.sum(phi * lam1, axis=-1) + l1sq / Lc
        dh_dy = -(phi2 - np.where(active, l1sq / (Lc * Lc), 0.0))
        dh_dz = np.zeros_like(z)
        dh_dz[:, :m] = -(2.0 * phi + 2.0 * lam1 / Lc[:, None])
        return -drift, dh_dy, dh_dz

    return BsdeSpec(name="bsre", driver=driver, terminal=lambda paths: np.ones(paths.batch_size),
                    prepare=prepare, divides_by_y=True)


def clamp_rate(L: np.ndarray, band: float = ALARM_BAND) -> float:
    """Fraction of (path, step) pairs where L left (floor, 1 + band]."""
    return float(np.mean((L <= L_FLOOR) | (L > 1.0 + band)))


@dataclass
class BsreOutcome:
    result: BsdeRunResult
    clamp_rate: float

    @property
    def unreliable(self) -> bool:
        return self.clamp_rate > ALARM_RATE


def solve_bsre(params: HestonParams, cfg: SolverConfig, seed: int) -> BsreOutcome:
    validate(params, mvh=True).raise_if_failed()
    res = train(bsre_spec(params), params, cfg, seed)
    return BsreOutcome(result=res, clamp_rate=clamp_rate(res.Y))


def roll_bsre(bsre: BsdeRunResult, params: HestonParams, paths: PathBatch):
    """Frozen BSRE networks rolled on ``paths``: L (B, N+1) and Lambda (B, N, 2m)."""
    spec = bsre_spec(params)
    L, lam, _ = roll_forward(spec, paths, bsre.nets if paths.n_steps > 1 else None, bsre.y0, bsre.z0, bsre.scaler,
                              scale=bsre.config.control_scale)
    return L, lam


def extended_spec(params: HestonParams, bsre: BsdeRunResult, terminal=None) -> BsdeSpec:
    m = params.m
    terminal = terminal or (lambda paths: payoff(paths.s_tilde[:, -1], params, paths.terminal_discount()))

    def prepare(paths: PathBatch):
        L, lam = roll_bsre(bsre, params, paths)
        phi = market_price_of_risk(params, np.swapaxes(paths.y_sq, 0, 1))
        ratio = np.swapaxes(lam[:, :, m:], 0, 1) / np.maximum(L[:, :-1], L_FLOOR).T[:, :, None]
        dz = np.concatenate([-phi[:-1], ratio], axis=-1)  # (N, B, 2m): dh/dz
        return {"dh_dz": dz, "L": L, "lam": lam}

    def driver(n, aux, x, z):
        g = aux["dh_dz"][n]
        return np.sum(g * z, axis=-1), np.zeros_like(x), g

    return BsdeSpec(name="mvh_extended", driver=driver, terminal=terminal, prepare=prepare)


def solve_extended_bsde(params: HestonParams, cfg: SolverConfig, bsre: BsreOutcome | BsdeRunResult | None,
                        seed: int, terminal=None) -> BsdeRunResult:
    if bsre is None:
        raise ValueError("the extended BSDE needs a trained BSRE")
    res = bsre.result if isinstance(bsre, BsreOutcome) else bsre
    if not np.isfinite(res.y0) or not np.all(np.isfinite(res.Y)):
        raise ValueError("BSRE result is not finite; refusing to run the extended BSDE")
    if res.n_steps != cfg.n_steps:
        raise ValueError("BSRE and extended BSDE must share the time grid")
    return train(extended_spec(params, res, terminal), params, cfg, seed)


def optimal_units(params: HestonParams, s: np.ndarray, y_sq: np.ndarray, lam1: np.ndarray, L: np.ndarray,
                  x: np.ndarray, v: np.ndarray, eta1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """MVH units diag(S)^-1 (sigma^-1)^T [(phi + Lambda1/L)(X - V) + eta1], row-wise.

    Returns (xi, singular) where ``singular`` marks rows with a zero volatility.
    """
    phi = market_price_of_risk(params, y_sq)
    Ln = np.maximum(L, L_FLOOR)
    coef = (phi + lam1 / Ln[:, None]) * (x - v)[:, None] + eta1
    u, singular = invert_vol(params.A, y_sq, coef)
    return u / s, singular


@dataclass
class MvhRun:
    bsre: BsdeRunResult
    ext: BsdeRunResult
    L: np.ndarray  # (B, N+1)
    lam: np.ndarray  # (B, N, 2m)
    X: np.ndarray  # (B, N+1)
    eta: np.ndarray  # (B, N, 2m)
    nu: np.ndarray  # (B, N, m), Girsanov kernel for B under the variance-optimal measure
    hedge: HedgeRun
    terminal_error: float  # mean (V_N - H)^2
    clamp_rate: float

    @property
    def price(self) -> float:
        return self.ext.y0

    @property
    def L0(self) -> float:
        return self.bsre.y0


def extract_strategy(params: HestonParams, bsre: BsdeRunResult, ext: BsdeRunResult,
                     paths: PathBatch | None = None, terminal=None) -> MvhRun:
    """Optimal MVH strategy and self-financing wealth along ``paths`` (default: eval paths)."""
    m = params.m
    if paths is None:
        paths = ext.eval_paths
    spec = extended_spec(params, bsre, terminal)
    aux = spec.prepare(paths)
    X, eta, _ = roll_forward(spec, paths, ext.nets if paths.n_steps > 1 else None, ext.y0, ext.z0,
                             ext.scaler, aux=aux, scale=ext.config.control_scale)
    L, lam = aux["L"], aux["lam"]
    B, N = paths.batch_size, paths.n_steps
    S, Y2 = paths.s_tilde, paths.y_sq
    xi = np.zeros((B, N, m))
    psi = np.zeros((B, N))
    V = np.empty((B, N + 1))
    V[:, 0] = ext.y0
    flags = np.zeros(B, dtype=bool)
    prev = np.zeros((B, m))
    A = params.A
    for n in range(N):
        y2 = Y2[:, n]
        xi_n, singular = optimal_units(params, S[:, n], y2, lam[:, n, :m], L[:, n], X[:, n], V[:, n],
                                       eta[:, n, :m])
        xi_n[singular] = prev[singular]
        flags |= singular
        xi[:, n] = xi_n
        psi[:, n] = X[:, n] - np.sum(xi_n * S[:, n], axis=-1)
        # self-financing Euler step: gains xi^T diag(S) A (diag(Y^2) mu dt + diag(Y) dW)
        y = np.sqrt(y2)
        dS_rel = np.einsum("ij,bj->bi", A, y2 * params.mu_bar * paths.dt + y * paths.dW[:, n])
        V[:, n + 1] = V[:, n] + np.sum(xi_n * S[:, n] * dS_rel, axis=-1)
        prev = xi_n
    H = spec.terminal(paths)
    nu = -lam[:, :, m:] / np.maximum(L[:, :-1], L_FLOOR)[:, :, None]
    hedge = HedgeRun(label="mvh", price=X, xi=xi, psi=psi, value=V, flags=flags)
    return MvhRun(bsre=bsre, ext=ext, L=L, lam=lam, X=X, eta=eta, nu=nu, hedge=hedge,
                  terminal_error=float(np.mean((V[:, -1] - H) ** 2)), clamp_rate=clamp_rate(L))
