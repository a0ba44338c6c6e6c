"""Monte Carlo price oracles under the two pricing measures."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .market import BLOCK_SIZE, HestonParams, market_price_of_risk, payoff, simulate, standard_normals

CHUNK_BLOCKS = 64  # 8192 paths per simulation call


@dataclass(frozen=True)
class McEstimate:
    price: float
    std_err: float
    batch: int
    steps: int
    measure: str
    seed: int
    s_mean: tuple[float, ...] = ()  # sample mean of S~_T per asset
    s_std_err: tuple[float, ...] = ()

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _chunks(batch_size: int):
    n_blocks = -(-batch_size // BLOCK_SIZE)
    for b0 in range(0, n_blocks, CHUNK_BLOCKS):
        nb = min(CHUNK_BLOCKS, n_blocks - b0)
        size = min(nb * BLOCK_SIZE, batch_size - b0 * BLOCK_SIZE)
        yield b0, size


def terminal_samples(params: HestonParams, measure: str, batch_size: int, n_steps: int, seed: int,
                     antithetic: bool = False, chi1=None) -> tuple[np.ndarray, np.ndarray]:
    """Terminal discounted prices (B, m) and discount factors (B,), simulated chunk by chunk."""
    if measure == "Q_mv" and chi1 is None:
        from .riccati import RiccatiCurves

        chi1 = RiccatiCurves.build(params)
    s_out = np.empty((batch_size, params.m))
    d_out = np.ones(batch_size)
    for b0, size in _chunks(batch_size):
        z = standard_normals(seed, size, n_steps, params.m, antithetic=antithetic, first_block=b0)
        pb = simulate(params, n_steps, size, seed, measure, chi1=chi1, normals=z, keep_paths=False)
        lo = b0 * BLOCK_SIZE
        s_out[lo:lo + size] = pb.s_tilde[:, -1]
        if pb.discount is not None:
            d_out[lo:lo + size] = pb.discount[:, -1]
    return s_out, d_out


def _estimate(values: np.ndarray, s_t: np.ndarray, batch: int, steps: int, measure: str, seed: int) -> McEstimate:
    n = values.size
    return McEstimate(
        price=float(values.mean()), std_err=float(values.std(ddof=1) / np.sqrt(n)), batch=batch, steps=steps,
        measure=measure, seed=seed,
        s_mean=tuple(float(v) for v in s_t.mean(axis=0)),
        s_std_err=tuple(float(v) for v in s_t.std(axis=0, ddof=1) / np.sqrt(n)),
    )


def price(params: HestonParams, measure: str, batch_size: int = 100_000, n_steps: int = 100, seed: int = 0,
          antithetic: bool = False, chi1=None) -> McEstimate:
    """Plain Monte Carlo price of the basket call under ``Q_mv`` or ``Q_lr`` (or ``P``)."""
    s_t, disc = terminal_samples(params, measure, batch_size, n_steps, seed, antithetic, chi1)
    values = payoff(s_t, params, disc)
    return _estimate(values, s_t, batch_size, n_steps, measure, seed)


def price_lr_weighted(params: HestonParams, batch_size: int = 10_000, n_steps: int = 100,
                      seed: int = 0) -> McEstimate:
    """Minimal-martingale-measure price from P-paths weighted by the discrete Girsanov density

        exp(-sum phi_n . dW_n - 1/2 sum |phi_n|^2 dt),

    which is exact for the Euler chain since phi_n only depends on the past.
    """
    values = np.empty(batch_size)
    s_w = np.empty((batch_size, params.m))
    for b0, size in _chunks(batch_size):
        z = standard_normals(seed, size, n_steps, params.m, first_block=b0)
        pb = simulate(params, n_steps, size, seed, "P", normals=z)
        phi = market_price_of_risk(params, pb.y_sq[:, :-1])
        log_w = -np.sum(phi * pb.dW, axis=(1, 2)) - 0.5 * np.sum(phi * phi, axis=(1, 2)) * pb.dt
        w = np.exp(log_w)
        lo = b0 * BLOCK_SIZE
        values[lo:lo + size] = w * payoff(pb.s_tilde[:, -1], params, pb.terminal_discount())
        s_w[lo:lo + size] = w[:, None] * pb.s_tilde[:, -1]
    return _estimate(values, s_w, batch_size, n_steps, "Q_lr(P-weighted)", seed)


@dataclass(frozen=True)
class RelErrReport:
    reference: float
    candidate: float
    rel_err_pct: float


def relative_error(reference: float, candidate: float) -> RelErrReport:
    if not np.isfinite(reference) or abs(reference) < 1e-12:
        raise ValueError("reference value is zero or not finite; relative error undefined")
    return RelErrReport(reference=float(reference), candidate=float(candidate),
                        rel_err_pct=abs(candidate - reference) / abs(reference) * 100.0)


def mc_vs_deep_report(mc: McEstimate | float, deep_price: float) -> RelErrReport:
    ref = mc.price if isinstance(mc, McEstimate) else float(mc)
    return relative_error(ref, deep_price)
