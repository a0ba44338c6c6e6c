"""Hedging-run container shared by the deep pipelines and the PDE benchmark."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class HedgeRun:
    label: str
    price: np.ndarray  # (B, N+1)
    xi: np.ndarray  # (B, N, m) risky units
    psi: np.ndarray  # (B, N) cash units
    value: np.ndarray  # (B, N+1) wealth (MVH) or portfolio value (LRM)
    flags: np.ndarray = field(default=None)  # (B,) path-level warnings
    cost: np.ndarray | None = None  # (B, N+1), LRM only

    def __post_init__(self):
        if self.flags is None:
            self.flags = np.zeros(self.price.shape[0], dtype=bool)

    @property
    def n_steps(self) -> int:
        return self.xi.shape[1]

    def to_csv(self, path: str | Path, max_paths: int | None = None) -> None:
        B, N, m = self.xi.shape
        B = B if max_paths is None else min(B, max_paths)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "step", "price", "wealth"] + [f"xi_{i}" for i in range(m)] + ["psi", "flag"])
            for b in range(B):
                for n in range(N + 1):
                    xi = [repr(float(v)) for v in self.xi[b, n]] if n < N else [""] * m
                    psi = repr(float(self.psi[b, n])) if n < N else ""
                    w.writerow([b, n, repr(float(self.price[b, n])), repr(float(self.value[b, n]))]
                               + xi + [psi, int(self.flags[b])])


def invert_vol(A: np.ndarray, y_sq: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve (A diag(y))^T u = rhs row-wise; rows with a zero volatility are flagged."""
    y = np.sqrt(np.maximum(y_sq, 0.0))
    singular = np.any(y <= 0.0, axis=-1)
    safe = np.where(y > 0.0, y, 1.0)
    w = rhs / safe
    if np.array_equal(A, np.diag(np.diag(A))):
        u = w / np.diag(A)
    else:
        u = np.linalg.solve(A.T, w.T).T
    u[singular] = 0.0
    return u, singular


@dataclass
class MseReport:
    price: np.ndarray  # (N+1,)
    cash: np.ndarray  # (N,)
    shares: np.ndarray  # (N,)

    @property
    def mean_price(self) -> float:
        return float(self.price.mean())

    @property
    def mean_cash(self) -> float:
        return float(self.cash.mean())

    @property
    def mean_shares(self) -> float:
        return float(self.shares.mean())

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "mse_price", "mse_cash", "mse_shares"])
            for n in range(self.price.size):
                c = repr(float(self.cash[n])) if n < self.cash.size else ""
                s = repr(float(self.shares[n])) if n < self.shares.size else ""
                w.writerow([n, repr(float(self.price[n])), c, s])


def mse_over_time(deep: HedgeRun, bench: HedgeRun) -> MseReport:
    """Per-step mean over paths of squared differences, for price, cash units and shares."""
    for name in ("price", "psi", "xi"):
        if getattr(deep, name).shape != getattr(bench, name).shape:
            raise ValueError(f"shape mismatch in {name}: {getattr(deep, name).shape} vs {getattr(bench, name).shape}")
    return MseReport(
        price=np.mean((deep.price - bench.price) ** 2, axis=0),
        cash=np.mean((deep.psi - bench.psi) ** 2, axis=0),
        shares=np.mean(np.sum((deep.xi - bench.xi) ** 2, axis=-1), axis=0),
    )
