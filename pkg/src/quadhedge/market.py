"""Multi-dimensional Heston market: parameters, coefficients, path simulation, payoff."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

MEASURES = ("P", "Q_mv", "Q_lr")

# Paths are drawn in fixed-size blocks, each with its own generator keyed by
# (seed..., block index); path p always receives the same draws regardless of
# the batch size or of how blocks are distributed across workers.
BLOCK_SIZE = 128


_VECTOR_FIELDS = ("mu_bar", "kappa", "theta", "sigma", "rho", "s0", "y0_sq")


@dataclass(frozen=True)
class HestonParams:
    A: np.ndarray
    mu_bar: np.ndarray
    kappa: np.ndarray
    theta: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray
    s0: np.ndarray
    y0_sq: np.ndarray
    strike: float = 100.0
    maturity: float = 1.0
    r_bar: np.ndarray | None = None

    def __post_init__(self):
        m = max(np.size(getattr(self, name)) for name in _VECTOR_FIELDS)
        if np.ndim(self.A) == 2:
            m = max(m, np.shape(self.A)[0])
        for name in ("mu_bar", "kappa", "theta", "sigma", "rho", "s0", "y0_sq"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (m,)).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        r_bar = np.zeros(m) if self.r_bar is None else self.r_bar
        r_bar = np.broadcast_to(np.asarray(r_bar, dtype=float), (m,)).copy()
        r_bar.setflags(write=False)
        object.__setattr__(self, "r_bar", r_bar)
        A = np.asarray(self.A, dtype=float)
        if A.ndim < 2:
            A = np.diag(np.broadcast_to(A, (m,)))
        if A.shape != (m, m):
            raise ValueError(f"A must be {m}x{m}, got {A.shape}")
        A = A.copy()
        A.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "strike", float(self.strike))
        object.__setattr__(self, "maturity", float(self.maturity))

    @property
    def m(self) -> int:
        return self.mu_bar.size

    @property
    def is_diagonal(self) -> bool:
        return bool(np.all(self.A == np.diag(np.diag(self.A))))

    @classmethod
    def table1(cls, m: int = 1, **overrides) -> "HestonParams":
        """The experimental configuration shared by every portfolio dimension."""
        kw = dict(
            A=np.eye(m), mu_bar=np.full(m, 0.1), kappa=np.full(m, 0.5),
            theta=np.full(m, 0.05), sigma=np.full(m, 0.1), rho=np.full(m, -0.45),
            s0=np.full(m, 100.0), y0_sq=np.full(m, 0.025), strike=100.0, maturity=1.0,
        )
        kw.update(overrides)
        return cls(**kw)

    def component(self, j: int) -> "HestonParams":
        """One-asset model of component ``j`` (meaningful for diagonal ``A``)."""
        return HestonParams(
            A=self.A[j:j + 1, j:j + 1], mu_bar=self.mu_bar[j:j + 1], kappa=self.kappa[j:j + 1],
            theta=self.theta[j:j + 1], sigma=self.sigma[j:j + 1], rho=self.rho[j:j + 1],
            s0=self.s0[j:j + 1], y0_sq=self.y0_sq[j:j + 1], strike=self.strike,
            maturity=self.maturity, r_bar=self.r_bar[j:j + 1],
        )

    def replace(self, **changes) -> "HestonParams":
        kw = self.to_dict()
        kw.update(changes)
        return HestonParams(**kw)

    def to_dict(self) -> dict:
        out = {}
        for name in ("A", "mu_bar", "kappa", "theta", "sigma", "rho", "s0", "y0_sq", "r_bar"):
            out[name] = np.asarray(getattr(self, name)).tolist()
        out["strike"] = self.strike
        out["maturity"] = self.maturity
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "HestonParams":
        data = dict(data)
        m = int(data.pop("m", np.atleast_1d(data["mu_bar"]).size))
        for name in ("mu_bar", "kappa", "theta", "sigma", "rho", "s0", "y0_sq", "r_bar"):
            if name in data and data[name] is not None:
                data[name] = np.broadcast_to(np.asarray(data[name], dtype=float), (m,))
        if "A" not in data:
            data["A"] = np.eye(m)
        return cls(**data)


def save_params(params: HestonParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=2))


def load_params(path: str | Path) -> HestonParams:
    return HestonParams.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ValidationReport:
    checks: dict[str, bool] = field(default_factory=dict)
    details: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.checks.items() if not v]

    def raise_if_failed(self) -> None:
        if not self.ok:
            msg = "; ".join(f"{k}: {self.details.get(k, 'failed')}" for k in self.failures)
            raise ValueError(f"invalid Heston parameters: {msg}")


def validate(params: HestonParams, mvh: bool = True) -> ValidationReport:
    """Check the model invariants; failures are reported, never repaired.

    ``mvh`` adds the rho^2 < 1/2 condition needed for the Riccati solution.
    """
    rep = ValidationReport()
    lhs = 2.0 * params.kappa * params.theta
    rhs = params.sigma ** 2
    rep.checks["feller"] = bool(np.all(lhs > rhs))
    rep.details["feller"] = f"2*kappa*theta={lhs.tolist()} vs sigma^2={rhs.tolist()}"
    rep.checks["rho_range"] = bool(np.all(np.abs(params.rho) <= 1.0))
    rep.details["rho_range"] = f"rho={params.rho.tolist()}"
    if mvh:
        rep.checks["rho_sq_below_half"] = bool(np.all(params.rho ** 2 < 0.5))
        rep.details["rho_sq_below_half"] = f"rho^2={(params.rho ** 2).tolist()}"
    cond = np.linalg.cond(params.A)
    rep.checks["A_invertible"] = bool(np.isfinite(cond) and cond < 1e12)
    rep.details["A_invertible"] = f"cond(A)={cond:.3g}"
    rep.checks["y0_positive"] = bool(np.all(params.y0_sq > 0))
    rep.checks["s0_positive"] = bool(np.all(params.s0 > 0))
    rep.checks["strike_positive"] = params.strike > 0
    rep.checks["maturity_positive"] = params.maturity > 0
    rep.checks["nonnegative_rates"] = bool(
        np.all(params.kappa >= 0) and np.all(params.theta >= 0) and np.all(params.sigma >= 0))
    return rep


def payoff(s_terminal: np.ndarray, params: HestonParams, discount: np.ndarray | float = 1.0) -> np.ndarray:
    """Basket call ``max(sum_i s_i - m K, 0)`` on the last axis.

    ``s_terminal`` holds discounted prices, so the strike is discounted too.
    """
    s = np.asarray(s_terminal, dtype=float)
    if s.shape[-1] != params.m:
        raise ValueError(f"expected {params.m} assets on the last axis, got {s.shape[-1]}")
    return np.maximum(s.sum(axis=-1) - params.m * params.strike * discount, 0.0)


@dataclass(frozen=True)
class MarketCoeffs:
    sigma_t: np.ndarray
    phi: np.ndarray
    drift_s: np.ndarray
    r_t: float


def coeffs_at(params: HestonParams, s_tilde: np.ndarray, y_sq: np.ndarray) -> MarketCoeffs:
    y_sq = np.asarray(y_sq, dtype=float)
    s_tilde = np.asarray(s_tilde, dtype=float)
    if np.any(y_sq < 0):
        raise ValueError("variance must be non-negative")
    y = np.sqrt(y_sq)
    return MarketCoeffs(
        sigma_t=params.A * y[None, :],
        phi=y * params.mu_bar,
        drift_s=s_tilde * (params.A @ (y_sq * params.mu_bar)),
        r_t=float(params.r_bar @ y_sq),
    )


def market_price_of_risk(params: HestonParams, y_sq: np.ndarray) -> np.ndarray:
    """phi = diag(Y) mu_bar, broadcast over leading axes."""
    return np.sqrt(np.maximum(y_sq, 0.0)) * params.mu_bar


@dataclass
class PathBatch:
    s_tilde: np.ndarray  # (B, N+1, m)
    y_sq: np.ndarray  # (B, N+1, m)
    dW: np.ndarray  # (B, N, m)
    dB: np.ndarray  # (B, N, m)
    dt: float
    measure: str
    discount: np.ndarray | None = None  # (B, N+1); None means identically 1

    @property
    def n_steps(self) -> int:
        return self.dW.shape[1]

    @property
    def batch_size(self) -> int:
        return self.dW.shape[0]

    @property
    def m(self) -> int:
        return self.dW.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    @property
    def state(self) -> np.ndarray:
        """Forward process (S~, Y^2) stacked on the last axis: (B, N+1, 2m)."""
        return np.concatenate([self.s_tilde, self.y_sq], axis=-1)

    @property
    def increments(self) -> np.ndarray:
        """Brownian increments (dW, dB): (B, N, 2m)."""
        return np.concatenate([self.dW, self.dB], axis=-1)

    def terminal_discount(self) -> np.ndarray | float:
        return 1.0 if self.discount is None else self.discount[:, -1]

    def to_csv(self, path: str | Path) -> None:
        B, N, m = self.batch_size, self.n_steps, self.m
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "step", "asset", "s_tilde", "y_sq", "dW", "dB"])
            for b in range(B):
                for n in range(N + 1):
                    for i in range(m):
                        dw = repr(float(self.dW[b, n, i])) if n < N else ""
                        db = repr(float(self.dB[b, n, i])) if n < N else ""
                        w.writerow([b, n, i, repr(float(self.s_tilde[b, n, i])),
                                    repr(float(self.y_sq[b, n, i])), dw, db])

    def save(self, path: str | Path) -> None:
        extra = {} if self.discount is None else {"discount": self.discount}
        np.savez(path, s_tilde=self.s_tilde, y_sq=self.y_sq, dW=self.dW, dB=self.dB,
                 dt=self.dt, measure=self.measure, **extra)

    @classmethod
    def load(cls, path: str | Path) -> "PathBatch":
        with np.load(path) as z:
            return cls(s_tilde=z["s_tilde"], y_sq=z["y_sq"], dW=z["dW"], dB=z["dB"],
                       dt=float(z["dt"]), measure=str(z["measure"]),
                       discount=z["discount"] if "discount" in z else None)


def _seed_key(seed: int | Sequence[int]) -> list[int]:
    return [int(s) for s in np.atleast_1d(seed)]


def standard_normals(seed: int | Sequence[int], batch_size: int, n_steps: int, m: int,
                     antithetic: bool = False, first_block: int = 0) -> np.ndarray:
    """Gaussian draws of shape (B, N, 2m): W components first, then B components.

    Path p of the batch belongs to block ``first_block + p // BLOCK_SIZE``.
    """
    key = _seed_key(seed)
    n_blocks = -(-batch_size // BLOCK_SIZE)
    out = np.empty((n_blocks * BLOCK_SIZE, n_steps, 2 * m))
    for b in range(n_blocks):
        rng = np.random.default_rng(key + [first_block + b])
        if antithetic:
            half = rng.standard_normal((BLOCK_SIZE // 2, n_steps, 2 * m))
            out[b * BLOCK_SIZE:(b + 1) * BLOCK_SIZE] = np.concatenate([half, -half])
        else:
            out[b * BLOCK_SIZE:(b + 1) * BLOCK_SIZE] = rng.standard_normal((BLOCK_SIZE, n_steps, 2 * m))
    return out[:batch_size]


def _chi1_function(params: HestonParams, chi1) -> Callable[[float], np.ndarray]:
    if chi1 is None:
        from .riccati import RiccatiCurves

        return RiccatiCurves.build(params).chi1
    if hasattr(chi1, "chi1"):
        return chi1.chi1
    return chi1


def simulate(params: HestonParams, n_steps: int, batch_size: int, seed: int | Sequence[int],
             measure: str = "P", chi1=None, normals: np.ndarray | None = None,
             antithetic: bool = False, keep_paths: bool = True) -> PathBatch:
    """Euler-Maruyama paths with full-truncation variance.

    Under ``Q_mv`` the variance mean reversion is time dependent and needs the
    Riccati coefficient ``chi1`` (a callable ``t -> m-vector`` or an object with
    a ``chi1`` method); it is built from ``params`` when omitted. ``normals``
    overrides the generator with explicit (B, N, 2m) standard normal draws.

    With ``keep_paths=False`` only the initial and terminal slices are stored.
    """
    if measure not in MEASURES:
        raise ValueError(f"unknown measure {measure!r}; expected one of {MEASURES}")
    m = params.m
    if measure == "Q_mv":
        if not params.is_diagonal:
            raise ValueError("Q_mv simulation requires a diagonal A")
        chi1_fn = _chi1_function(params, chi1)
    if normals is None:
        normals = standard_normals(seed, batch_size, n_steps, m, antithetic=antithetic)
    else:
        normals = np.asarray(normals, dtype=float)
        if normals.shape != (batch_size, n_steps, 2 * m):
            raise ValueError(f"normals must have shape {(batch_size, n_steps, 2 * m)}")
    dt = params.maturity / n_steps
    sqdt = np.sqrt(dt)
    dW = normals[:, :, :m] * sqdt
    dB = normals[:, :, m:] * sqdt

    A = params.A
    kappa, theta, sig, rho, mu = params.kappa, params.theta, params.sigma, params.rho, params.mu_bar
    rho_c = np.sqrt(1.0 - rho ** 2)
    with_rate = bool(np.any(params.r_bar != 0))

    n_keep = n_steps + 1 if keep_paths else 2
    S = np.empty((batch_size, n_keep, m))
    V = np.empty((batch_size, n_keep, m))
    disc = np.ones((batch_size, n_keep)) if with_rate else None

    s = np.broadcast_to(params.s0, (batch_size, m)).copy()
    v = np.broadcast_to(params.y0_sq, (batch_size, m)).copy()  # raw, may dip below 0
    log_disc = np.zeros(batch_size)
    S[:, 0], V[:, 0] = s, v
    for n in range(n_steps):
        t = n * dt
        vp = np.maximum(v, 0.0)
        y = np.sqrt(vp)
        dw, db = dW[:, n], dB[:, n]
        shock = np.einsum("ij,bj->bi", A, y * dw)
        if measure == "P":
            s_drift = np.einsum("ij,bj->bi", A, vp * mu)
            v_drift = kappa * (theta - vp)
        elif measure == "Q_lr":
            s_drift = 0.0
            v_drift = kappa * (theta - vp) - sig * rho * mu * vp
        else:
            k_t = kappa + rho * sig * mu - chi1_fn(t) * sig ** 2 * (1.0 - rho ** 2)
            s_drift = 0.0
            v_drift = kappa * theta - k_t * vp
        if with_rate:
            log_disc -= (vp @ params.r_bar) * dt
        s = s + s * (s_drift * dt + shock)
        v = v + v_drift * dt + sig * y * (rho * dw + rho_c * db)
        k = n + 1 if keep_paths else (1 if n == n_steps - 1 else None)
        if k is not None:
            S[:, k] = s
            V[:, k] = np.maximum(v, 0.0)
            if with_rate:
                disc[:, k] = np.exp(log_disc)
    return PathBatch(s_tilde=S, y_sq=V, dW=dW if keep_paths else dW[:, :0],
                     dB=dB if keep_paths else dB[:, :0], dt=dt, measure=measure, discount=disc)
