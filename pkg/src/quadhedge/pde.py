"""One-asset Heston PDE benchmark with the modified Craig-Sneyd ADI scheme.

The value f(t, v, s) (v is the variance) solves, in time to maturity tau = T - t,

    f_tau = 1/2 v (sigma^2 f_vv + 2 rho sigma s f_vs + s^2 f_ss) + (kappa theta - k(t) v) f_v,

with k(t) = kappa + rho sigma mu for the minimal measure and additionally
- chi1(t) sigma^2 (1 - rho^2) for the variance-optimal one. Boundaries: f = 0 at
s = 0, f_s = 1 at s = S_max, f = s at v = V_max; at v = 0 the equation is used
with a one-sided v-derivative.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .hedge import HedgeRun
from .market import HestonParams, PathBatch

MODES = ("MVH", "LRM")
UPWIND_FROM = 1.0  # v above this uses a backward (upwind) first derivative


@dataclass
class PdeGrid:
    s: np.ndarray  # (m_s + 1,)
    v: np.ndarray  # (m_y + 1,)
    strike: float
    maturity: float = 1.0
    mode: str = ""
    t: np.ndarray = field(default_factory=lambda: np.zeros(0))  # calendar times of stored slices
    f: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)))  # (n_slices, m_y + 1, m_s + 1)
    params: HestonParams | None = None
    chi1: object = None

    @property
    def m_s(self) -> int:
        return self.s.size - 1

    @property
    def m_y(self) -> int:
        return self.v.size - 1

    def to_csv(self, path: str | Path, slices=None) -> None:
        idx = range(self.t.size) if slices is None else slices
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "y", "s", "f"])
            for k in idx:
                for j, vj in enumerate(self.v):
                    for i, si in enumerate(self.s):
                        w.writerow([repr(float(self.t[k])), repr(float(vj)), repr(float(si)),
                                    repr(float(self.f[k, j, i]))])


def build_grid(strike: float, m_s: int = 200, m_y: int = 100, s_max_mult: float = 8.0, v_max: float = 5.0,
               c_frac: float = 0.2, d_frac: float = 1.0 / 500.0) -> PdeGrid:
    """sinh-stretched meshes, dense around s = K and v = 0."""
    if m_s < 16 or m_y < 16:
        raise ValueError("grid too coarse: need m_s, m_y >= 16")
    s_max = s_max_mult * strike
    c = c_frac * strike
    xi = np.linspace(np.arcsinh(-strike / c), np.arcsinh((s_max - strike) / c), m_s + 1)
    s = strike + c * np.sinh(xi)
    s[0], s[-1] = 0.0, s_max
    d = d_frac * v_max
    v = d * np.sinh(np.linspace(0.0, np.arcsinh(v_max / d), m_y + 1))
    v[0], v[-1] = 0.0, v_max
    return PdeGrid(s=s, v=v, strike=float(strike))


def _central_weights(x: np.ndarray):
    """First and second derivative weights at interior nodes 1..n-1: arrays (n-1, 3)."""
    h0 = np.diff(x)[:-1]
    h1 = np.diff(x)[1:]
    b = np.stack([-h1 / (h0 * (h0 + h1)), (h1 - h0) / (h0 * h1), h0 / (h1 * (h0 + h1))], axis=1)
    d = np.stack([2.0 / (h0 * (h0 + h1)), -2.0 / (h0 * h1), 2.0 / (h1 * (h0 + h1))], axis=1)
    return b, d


class _Operators:
    """Split operators F = F0 + F1 + F2 on the unknowns U[j, i], j < m_y, 1 <= i < m_s."""

    def __init__(self, grid: PdeGrid, params: HestonParams):
        s, v = grid.s, grid.v
        self.s, self.v = s, v
        self.h_last = s[-1] - s[-2]
        kap, th = float(params.kappa[0]), float(params.theta[0])
        sig, rho = float(params.sigma[0]), float(params.rho[0])
        self.kth = kap * th
        my, ms = grid.m_y, grid.m_s
        self.shape = (my, ms - 1)

        # s-direction: 1/2 v s^2 f_ss, tridiagonal per v-row
        _, ds = _central_weights(s)  # rows for i = 1..m_s-1
        coef = 0.5 * v[:my, None] * s[None, 1:-1] ** 2  # (my, ms-1)
        self.a1_lo = coef * ds[None, :, 0]
        self.a1_di = coef * ds[None, :, 1]
        self.a1_up = coef * ds[None, :, 2]
        # f at s_max is f(s_max - h) + h: fold into the diagonal plus a constant
        self.a1_di[:, -1] += self.a1_up[:, -1]
        self.b1 = np.zeros(self.shape)
        self.b1[:, -1] = self.a1_up[:, -1] * self.h_last
        self.a1_lo[:, 0] = 0.0  # f(s=0) = 0
        self.a1_up[:, -1] = 0.0

        # v-direction: dense (my x my) pieces, A2(t) = A2c + k(t) A2l
        bv, dv = _central_weights(v)
        A2c = np.zeros((my, my + 1))
        A2l = np.zeros((my, my + 1))
        for j in range(my):
            if j == 0:
                h1, h2 = v[1] - v[0], v[2] - v[1]
                w = np.array([(-2 * h1 - h2) / (h1 * (h1 + h2)), (h1 + h2) / (h1 * h2), -h1 / (h2 * (h1 + h2))])
                A2c[0, 0:3] += self.kth * w  # drift kth - k*0; diffusion vanishes
                continue
            A2c[j, j - 1:j + 2] += 0.5 * sig ** 2 * v[j] * dv[j - 1]
            if v[j] > UPWIND_FROM and j >= 2:
                hm, hj = v[j - 1] - v[j - 2], v[j] - v[j - 1]
                w = np.array([hj / (hm * (hm + hj)), -(hm + hj) / (hm * hj), (hm + 2 * hj) / (hj * (hm + hj))])
                A2c[j, j - 2:j + 1] += self.kth * w
                A2l[j, j - 2:j + 1] += -v[j] * w
            else:
                A2c[j, j - 1:j + 2] += self.kth * bv[j - 1]
                A2l[j, j - 1:j + 2] += -v[j] * bv[j - 1]
        # column my is the Dirichlet value f = s
        self.A2c, self.A2l = A2c[:, :my], A2l[:, :my]
        self.b2c = np.outer(A2c[:, my], s[1:-1])
        self.b2l = np.outer(A2l[:, my], s[1:-1])

        # mixed term rho sigma v s f_vs, 9-point product stencil, explicit only
        self.bv, self.bs = bv, _central_weights(s)[0]
        self.c0 = rho * sig * v[1:my, None] * s[None, 1:-1]

    def full(self, U: np.ndarray) -> np.ndarray:
        my, ms1 = self.shape
        F = np.empty((my + 1, ms1 + 2))
        F[:my, 1:-1] = U
        F[:my, 0] = 0.0
        F[:my, -1] = U[:, -1] + self.h_last
        F[my] = self.s
        return F

    def F0(self, U: np.ndarray) -> np.ndarray:
        F = self.full(U)
        out = np.zeros(self.shape)
        bv, bs = self.bv, self.bs
        my = self.shape[0]
        acc = np.zeros((my - 1, self.shape[1]))
        for a in range(3):
            for b in range(3):
                acc += (bv[:my - 1, a][:, None] * bs[None, :, b]) * F[a:a + my - 1, b:b + self.shape[1]]
        out[1:] = self.c0 * acc
        return out

    def F1(self, U: np.ndarray) -> np.ndarray:
        out = self.a1_di * U + self.b1
        out[:, 1:] += self.a1_lo[:, 1:] * U[:, :-1]
        out[:, :-1] += self.a1_up[:, :-1] * U[:, 1:]
        return out

    def A2(self, k: float) -> np.ndarray:
        return self.A2c + k * self.A2l

    def b2(self, k: float) -> np.ndarray:
        return self.b2c + k * self.b2l

    def F2(self, U: np.ndarray, k: float) -> np.ndarray:
        return self.A2(k) @ U + self.b2(k)

    def solve1(self, rhs: np.ndarray, w: float) -> np.ndarray:
        """(I - w A1) X = rhs, one tridiagonal system per v-row (Thomas, vectorized over rows)."""
        lo = -w * self.a1_lo
        di = 1.0 - w * self.a1_di
        up = -w * self.a1_up
        n = rhs.shape[1]
        cp = np.empty_like(rhs)
        dp = np.empty_like(rhs)
        cp[:, 0] = up[:, 0] / di[:, 0]
        dp[:, 0] = rhs[:, 0] / di[:, 0]
        for i in range(1, n):
            den = di[:, i] - lo[:, i] * cp[:, i - 1]
            cp[:, i] = up[:, i] / den
            dp[:, i] = (rhs[:, i] - lo[:, i] * dp[:, i - 1]) / den
        x = np.empty_like(rhs)
        x[:, -1] = dp[:, -1]
        for i in range(n - 2, -1, -1):
            x[:, i] = dp[:, i] - cp[:, i] * x[:, i + 1]
        return x

    def solve2(self, rhs: np.ndarray, w: float, k: float) -> np.ndarray:
        M = np.eye(self.shape[0]) - w * self.A2(k)
        return lu_solve(lu_factor(M), rhs)


def _kappa_path(params: HestonParams, mode: str, chi1):
    kap, sig, rho, mu = (float(params.kappa[0]), float(params.sigma[0]), float(params.rho[0]),
                         float(params.mu_bar[0]))
    base = kap + rho * sig * mu
    if mode == "LRM":
        return lambda t: base
    if chi1 is None:
        from .riccati import RiccatiCurves

        chi1 = RiccatiCurves.build(params)
    fn = chi1.chi1 if hasattr(chi1, "chi1") else chi1
    return lambda t: base - float(np.asarray(fn(t)).reshape(-1)[0]) * sig ** 2 * (1.0 - rho ** 2)


def solve_pde(params: HestonParams, mode: str, grid: PdeGrid | None = None, n_time: int = 200,
              theta: float = 1.0 / 3.0, chi1=None, store: str = "all") -> PdeGrid:
    """March from the payoff at t = T back to t = 0 with MCS steps.

    ``store='all'`` keeps every time level (needed by the strategy benchmark);
    ``'last'`` keeps only t = 0 and t = T.
    """
    if params.m != 1 or not np.allclose(params.A, 1.0):
        raise ValueError("the PDE benchmark needs a single asset with A = [[1]]")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if grid is None:
        grid = build_grid(params.strike)
    ops = _Operators(grid, params)
    k_of_t = _kappa_path(params, mode, chi1)
    T = params.maturity
    dt = T / n_time
    bound = 10.0 * grid.s[-1]

    U = np.maximum(grid.s[1:-1] - params.strike, 0.0)[None, :].repeat(grid.m_y, axis=0)
    slices = [ops.full(U)]
    times = [T]
    for n in range(1, n_time + 1):
        t_old, t_new = T - (n - 1) * dt, T - n * dt  # calendar times
        k_old, k_new = k_of_t(t_old), k_of_t(t_new)
        F0u, F1u, F2u = ops.F0(U), ops.F1(U), ops.F2(U, k_old)
        w = theta * dt
        Y0 = U + dt * (F0u + F1u + F2u)
        Y1 = ops.solve1(Y0 - w * F1u + w * ops.b1, w)
        Y2 = ops.solve2(Y1 - w * F2u + w * ops.b2(k_new), w, k_new)
        F0y = ops.F0(Y2)
        Yh0 = Y0 + w * (F0y - F0u)
        Yt0 = Yh0 + (0.5 - theta) * dt * (F0y + ops.F1(Y2) + ops.F2(Y2, k_new) - F0u - F1u - F2u)
        Yt1 = ops.solve1(Yt0 - w * F1u + w * ops.b1, w)
        U = ops.solve2(Yt1 - w * F2u + w * ops.b2(k_new), w, k_new)
        if not np.all(np.isfinite(U)) or np.max(np.abs(U)) > bound:
            raise FloatingPointError(f"PDE march unstable at step {n} (t={t_new:.6g})")
        if store == "all" or n == n_time:
            slices.append(ops.full(U))
            times.append(t_new)
    grid.t = np.array(times[::-1])
    grid.f = np.stack(slices[::-1])
    grid.mode = mode
    grid.params = params
    grid.chi1 = chi1
    return grid


def nodal_derivatives(grid: PdeGrid, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(f_v, f_s) at every node: central inside, one-sided at the edges."""
    return np.gradient(f, grid.v, axis=0, edge_order=1), np.gradient(f, grid.s, axis=1, edge_order=1)


@dataclass
class InterpResult:
    f: np.ndarray
    f_v: np.ndarray
    f_s: np.ndarray
    clamped: np.ndarray


def _slice_weights(grid: PdeGrid, t: float):
    if t < grid.t[0] - 1e-12 or t > grid.t[-1] + 1e-12:
        raise ValueError(f"t={t} outside the stored slices")
    k = int(np.clip(np.searchsorted(grid.t, t, side="right") - 1, 0, grid.t.size - 2))
    span = grid.t[k + 1] - grid.t[k]
    a = float(np.clip((t - grid.t[k]) / span, 0.0, 1.0))
    if abs(grid.t[k + 1] - t) <= 1e-12 * max(1.0, abs(t)):
        return [(k + 1, 1.0)]
    if a == 0.0:
        return [(k, 1.0)]
    return [(k, 1.0 - a), (k + 1, a)]


def _bilinear(x: np.ndarray, xq: np.ndarray):
    i = np.clip(np.searchsorted(x, xq, side="right") - 1, 0, x.size - 2)
    w = (xq - x[i]) / (x[i + 1] - x[i])
    return i, w


def interpolate(grid: PdeGrid, t: float, y_sq, s) -> InterpResult:
    """Bilinear value and derivatives at variance ``y_sq`` and price ``s``.

    Queries outside [0, V_max] x [0, S_max] are clamped to the boundary and flagged.
    """
    y_sq = np.atleast_1d(np.asarray(y_sq, dtype=float))
    s = np.atleast_1d(np.asarray(s, dtype=float))
    vq = np.clip(y_sq, grid.v[0], grid.v[-1])
    sq = np.clip(s, grid.s[0], grid.s[-1])
    clamped = (vq != y_sq) | (sq != s)
    j, wv = _bilinear(grid.v, vq)
    i, ws = _bilinear(grid.s, sq)
    out = [np.zeros_like(vq) for _ in range(3)]
    for k, wt in _slice_weights(grid, t):
        f = grid.f[k]
        fv, fs = nodal_derivatives(grid, f)
        for n, arr in enumerate((f, fv, fs)):
            val = ((1 - wv) * (1 - ws) * arr[j, i] + (1 - wv) * ws * arr[j, i + 1]
                   + wv * (1 - ws) * arr[j + 1, i] + wv * ws * arr[j + 1, i + 1])
            out[n] += wt * val
    return InterpResult(f=out[0], f_v=out[1], f_s=out[2], clamped=clamped)


def price_at(grid: PdeGrid, t: float, y_sq: float, s: float) -> float:
    return float(interpolate(grid, t, y_sq, s).f[0])


def benchmark_strategies(grid: PdeGrid, paths: PathBatch, mode: str | None = None,
                         initial_wealth: float | None = None) -> HedgeRun:
    """CK (mean-variance) or HPS (local risk) strategy along ``paths`` from the PDE solution."""
    mode = mode or grid.mode
    p = grid.params
    if p is None or mode != grid.mode:
        raise ValueError("grid must be solved in the requested mode")
    if paths.m != 1:
        raise ValueError("PDE benchmark is one-dimensional")
    rho, sig, mu = float(p.rho[0]), float(p.sigma[0]), float(p.mu_bar[0])
    B, N = paths.batch_size, paths.n_steps
    S = paths.s_tilde[:, :, 0]
    Y2 = paths.y_sq[:, :, 0]
    price = np.empty((B, N + 1))
    xi = np.empty((B, N, 1))
    psi = np.empty((B, N))
    V = np.empty((B, N + 1))
    flags = np.zeros(B, dtype=bool)
    if mode == "MVH":
        k_chi = grid.chi1
        if k_chi is None:
            from .riccati import RiccatiCurves

            k_chi = RiccatiCurves.build(p)
        chi1_fn = k_chi.chi1 if hasattr(k_chi, "chi1") else k_chi
    for n in range(N + 1):
        t = min(n * paths.dt, grid.t[-1])
        r = interpolate(grid, t, Y2[:, n], S[:, n])
        flags |= r.clamped
        price[:, n] = r.f
        if n == 0:
            V[:, 0] = r.f if initial_wealth is None else initial_wealth
        if n == N:
            break
        x = r.f_s + rho * sig * r.f_v / S[:, n]
        if mode == "MVH":
            c1 = float(np.asarray(chi1_fn(t)).reshape(-1)[0])
            x = x + (mu + rho * sig * c1) / S[:, n] * (r.f - V[:, n])
        xi[:, n, 0] = x
        psi[:, n] = r.f - x * S[:, n]
        V[:, n + 1] = V[:, n] + x * (S[:, n + 1] - S[:, n])
    if mode == "LRM":
        V = price.copy()
    return HedgeRun(label="ck" if mode == "MVH" else "hps", price=price, xi=xi, psi=psi, value=V, flags=flags)
