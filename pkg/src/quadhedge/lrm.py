"""Local risk minimization via the linear BSDE of the Follmer-Schweizer decomposition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import BsdeRunResult, BsdeSpec, SolverConfig, roll_forward, train
from .hedge import HedgeRun, invert_vol
from .market import HestonParams, PathBatch, market_price_of_risk, payoff, validate


def fs_spec(params: HestonParams, terminal=None) -> BsdeSpec:
    m = params.m
    terminal = terminal or (lambda paths: payoff(paths.s_tilde[:, -1], params, paths.terminal_discount()))

    def prepare(paths: PathBatch):
        phi = market_price_of_risk(params, np.swapaxes(paths.y_sq[:, :-1], 0, 1))
        return {"dh_dz": np.concatenate([-phi, np.zeros_like(phi)], axis=-1)}

    def driver(n, aux, x, z):
        g = aux["dh_dz"][n]
        return np.sum(g[:, :m] * z[:, :m], axis=-1), np.zeros_like(x), g

    return BsdeSpec(name="lrm", driver=driver, terminal=terminal, prepare=prepare)


def solve_fs_bsde(params: HestonParams, cfg: SolverConfig, seed: int, terminal=None) -> BsdeRunResult:
    rep = validate(params, mvh=False)
    rep.raise_if_failed()
    return train(fs_spec(params, terminal), params, cfg, seed)


def lrm_units(params: HestonParams, s: np.ndarray, y_sq: np.ndarray, eta1: np.ndarray):
    """Units from eta1 = sigma^T diag(S) xi, i.e. xi = diag(S)^-1 (sigma^T)^-1 eta1."""
    u, singular = invert_vol(params.A, y_sq, eta1)
    return u / s, singular


@dataclass
class LrmRun:
    bsde: BsdeRunResult
    X: np.ndarray  # (B, N+1)
    eta: np.ndarray  # (B, N, 2m)
    hedge: HedgeRun
    cost: np.ndarray  # (B, N+1)
    fs_residual: np.ndarray  # (B,) payoff minus the discretized decomposition
    gains: np.ndarray  # (B,) sum of xi^T dS
    orthogonal_part: np.ndarray  # (B,) sum of eta2^T dB
    tradable_part: np.ndarray  # (B,) sum of eta1^T dW

    @property
    def price(self) -> float:
        return self.bsde.y0

    @property
    def xi(self) -> np.ndarray:
        return self.hedge.xi

    @property
    def psi(self) -> np.ndarray:
        return self.hedge.psi


def extract_strategy(params: HestonParams, run: BsdeRunResult, paths: PathBatch | None = None,
                     terminal=None) -> LrmRun:
    m = params.m
    if paths is None:
        paths = run.eval_paths
    spec = fs_spec(params, terminal)
    X, eta, _ = roll_forward(spec, paths, run.nets if paths.n_steps > 1 else None, run.y0, run.z0, run.scaler,
                             scale=run.config.control_scale)
    B, N = paths.batch_size, paths.n_steps
    S = paths.s_tilde
    xi = np.zeros((B, N, m))
    prev = np.zeros((B, m))
    flags = np.zeros(B, dtype=bool)
    for n in range(N):
        x, singular = lrm_units(params, S[:, n], paths.y_sq[:, n], eta[:, n, :m])
        x[singular] = prev[singular]
        flags |= singular
        xi[:, n] = x
        prev = x
    psi = X[:, :-1] - np.sum(xi * S[:, :-1], axis=-1)
    dS = np.diff(S, axis=1)
    step_gains = np.sum(xi * dS, axis=-1)
    cum_gains = np.concatenate([np.zeros((B, 1)), np.cumsum(step_gains, axis=1)], axis=1)
    cost = X - cum_gains
    ortho = np.sum(eta[:, :, m:] * paths.dB, axis=(1, 2))
    H = spec.terminal(paths)
    resid = H - (run.y0 + cum_gains[:, -1] + ortho)
    value = np.concatenate([X[:, :-1], H[:, None]], axis=1)
    hedge = HedgeRun(label="lrm", price=X, xi=xi, psi=psi, value=value, flags=flags, cost=cost)
    return LrmRun(bsde=run, X=X, eta=eta, hedge=hedge, cost=cost, fs_residual=resid,
                  gains=cum_gains[:, -1], orthogonal_part=ortho,
                  tradable_part=np.sum(eta[:, :, :m] * paths.dW, axis=(1, 2)))


def cost_martingale_stat(run: LrmRun) -> tuple[float, float]:
    """Mean of C_N - C_0 and its standard error."""
    d = run.cost[:, -1] - run.cost[:, 0]
    return float(d.mean()), float(d.std(ddof=1) / np.sqrt(d.size))


def orthogonality_stat(run: LrmRun) -> tuple[float, float]:
    """Sample covariance of the orthogonal part with the tradable martingale part, and its standard error."""
    a = run.orthogonal_part - run.orthogonal_part.mean()
    b = run.tradable_part - run.tradable_part.mean()
    prod = a * b
    return float(prod.mean()), float(prod.std(ddof=1) / np.sqrt(prod.size))
