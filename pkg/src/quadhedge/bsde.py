"""Deep BSDE solver: forward roll of the backward variable with per-step network controls.

The discretized backward equation is rolled forward in time,

    Y_{n+1} = Y_n - h_n(Y_n, Z_n) dt + Z_n . dW_n,

with Y_0 a trainable scalar, Z_0 a trainable vector and Z_n = net_n(X_n) for n >= 1.
The loss is the mean squared terminal mismatch. Gradients come from an explicit
adjoint recursion through the roll followed by the networks' reverse pass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .market import HestonParams, PathBatch, simulate
from .nn import Adam, Mlp

# driver(n, aux, y, z) -> (h, dh/dy, dh/dz) with shapes (B,), (B,), (B, q)
Driver = Callable[[int, Any, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass
class BsdeSpec:
    name: str
    driver: Driver
    terminal: Callable[[PathBatch], np.ndarray]
    prepare: Callable[[PathBatch], Any] = lambda paths: None
    divides_by_y: bool = False


@dataclass
class SolverConfig:
    n_steps: int = 10
    iterations: int = 8000
    partial: int = 4000  # iteration at which lr1 switches to lr2
    lr1: float = 5e-2
    lr2: float = 5e-3
    batch: int = 128
    eval_batch: int = 10_000
    y0_range: tuple[float, float] = (0.5, 2.0)
    hidden_layers: int = 4
    width: int | None = None  # default 2m + 20
    z0_scale: float = 0.0
    zero_output_layer: bool = True
    control_scale: float = 1.0  # controls are control_scale * (raw z0 or network output)
    pilot_batch: int = 1024

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        d = dict(d)
        if "y0_range" in d:
            d["y0_range"] = tuple(d["y0_range"])
        return cls(**d)


class BsdeDivergence(FloatingPointError):
    def __init__(self, message: str, loss_trace: list[float]):
        super().__init__(message)
        self.loss_trace = loss_trace


@dataclass
class FeatureScaler:
    """Fixed per-step affine normalization of the network inputs, from a pilot batch."""

    mean: np.ndarray  # (N+1, q)
    std: np.ndarray  # (N+1, q)

    @classmethod
    def fit(cls, paths: PathBatch) -> "FeatureScaler":
        x = paths.state
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean=mean, std=std)

    def __call__(self, state: np.ndarray) -> np.ndarray:
        """(B, N+1, q) states -> (N-1, B, q) normalized inputs for steps 1..N-1."""
        x = (state[:, 1:-1] - self.mean[1:-1]) / self.std[1:-1]
        return np.ascontiguousarray(np.swapaxes(x, 0, 1))


@dataclass
class BsdeRunResult:
    name: str
    y0: float
    z0: np.ndarray
    nets: Mlp
    scaler: FeatureScaler
    loss_trace: np.ndarray
    eval_loss: float
    eval_paths: PathBatch
    Y: np.ndarray  # (B_eval, N+1)
    Z: np.ndarray  # (B_eval, N, q)
    wall_time: float = 0.0
    config: SolverConfig = field(default_factory=SolverConfig)
    aux: Any = None

    @property
    def n_steps(self) -> int:
        return self.Z.shape[1]


def roll_forward(spec: BsdeSpec, paths: PathBatch, nets: Mlp | None, y0, z0, scaler: FeatureScaler | None = None,
                 aux=None, controls: np.ndarray | None = None, scale: float = 1.0):
    """Roll the backward variable along ``paths``.

    Returns (Y, Z, extra) with Y of shape (B, N+1), Z of shape (B, N, q) and
    ``extra`` holding the per-step driver sensitivities and the network cache.
    ``controls`` (N-1, B, q) overrides the network output when given; ``scale``
    multiplies z0 and the network output (not an explicit ``controls`` array).
    """
    B, N = paths.batch_size, paths.n_steps
    dw = np.swapaxes(paths.increments, 0, 1)  # (N, B, q)
    q = dw.shape[-1]
    if aux is None:
        aux = spec.prepare(paths)
    cache = None
    if controls is None:
        if N > 1:
            if nets is None or scaler is None:
                raise ValueError("networks and feature scaler required for N > 1")
            controls, cache = nets.forward(scaler(paths.state))
            controls = scale * controls
        else:
            controls = np.zeros((0, B, q))
    Z = np.empty((N, B, q))
    Z[0] = np.broadcast_to(scale * np.asarray(z0, dtype=float), (B, q))
    Z[1:] = controls
    Y = np.empty((N + 1, B))
    Y[0] = float(np.asarray(y0).reshape(-1)[0])
    dh_dy = np.empty((N, B))
    dh_dz = np.empty((N, B, q))
    dt = paths.dt
    for n in range(N):
        h, hy, hz = spec.driver(n, aux, Y[n], Z[n])
        Y[n + 1] = Y[n] - h * dt + np.sum(Z[n] * dw[n], axis=-1)
        if not np.all(np.isfinite(Y[n + 1])):
            raise FloatingPointError(f"{spec.name}: non-finite backward value at step {n + 1}")
        dh_dy[n] = hy
        dh_dz[n] = hz
    extra = {"dh_dy": dh_dy, "dh_dz": dh_dz, "cache": cache, "dw": dw, "aux": aux}
    return Y.T.copy(), np.swapaxes(Z, 0, 1).copy(), extra


def loss_and_grads(spec: BsdeSpec, paths: PathBatch, nets: Mlp | None, y0, z0, scaler, scale: float = 1.0):
    """Mean squared terminal mismatch and its gradients w.r.t. (y0, z0, net params)."""
    Y, Z, ex = roll_forward(spec, paths, nets, y0, z0, scaler, scale=scale)
    target = spec.terminal(paths)
    resid = target - Y[:, -1]
    B, N = Y.shape[0], Y.shape[1] - 1
    loss = float(np.mean(resid ** 2))
    a = -2.0 * resid / B  # d loss / d Y_N
    dt = paths.dt
    dZ = np.empty((N, B, Z.shape[-1]))
    for n in range(N - 1, -1, -1):
        dZ[n] = a[:, None] * (-ex["dh_dz"][n] * dt + ex["dw"][n])
        a = a * (1.0 - ex["dh_dy"][n] * dt)
    dZ *= scale
    g_y0 = np.array([a.sum()])
    g_z0 = dZ[0].sum(axis=0)
    g_net = nets.backward(ex["cache"], dZ[1:])[0] if ex["cache"] is not None else []
    return loss, [g_y0, g_z0] + g_net, (Y, Z)


def build_nets(m: int, n_steps: int, cfg: SolverConfig, rng: np.random.Generator) -> Mlp:
    width = cfg.width or 2 * m + 20
    dims = [2 * m] + [width] * cfg.hidden_layers + [2 * m]
    nets = Mlp.init(dims, rng, n_stack=max(n_steps - 1, 1))
    if cfg.zero_output_layer:
        # controls start at 0; a random output layer makes the BSRE quadratic term blow up at lr 5e-2
        nets.weights[-1][...] = 0.0
    return nets


def train(spec: BsdeSpec, params: HestonParams, cfg: SolverConfig, seed: int,
          callback: Callable[[int, float], None] | None = None) -> BsdeRunResult:
    """Minimize E|terminal - Y_N|^2 with fresh P-paths each iteration.

    Seeds: training batch ``it`` uses (seed, 0, it); evaluation uses (seed, 1);
    initialization (seed, 2); the normalization pilot batch (seed, 3).
    """
    t0 = time.perf_counter()
    m, N = params.m, cfg.n_steps
    rng = np.random.default_rng([seed, 2])
    y0 = np.array([rng.uniform(*cfg.y0_range)])
    z0 = rng.uniform(-cfg.z0_scale, cfg.z0_scale, size=2 * m) if cfg.z0_scale > 0 else np.zeros(2 * m)
    nets = build_nets(m, N, cfg, rng)
    scaler = FeatureScaler.fit(simulate(params, N, cfg.pilot_batch, [seed, 3], "P"))
    trainable = [y0, z0] + (nets.params if N > 1 else [])
    opt = Adam(lr1=cfg.lr1, lr2=cfg.lr2, switch=cfg.partial)
    trace: list[float] = []
    for it in range(cfg.iterations):
        paths = simulate(params, N, cfg.batch, [seed, 0, it], "P")
        try:
            loss, grads, _ = loss_and_grads(spec, paths, nets if N > 1 else None, y0, z0, scaler,
                                            cfg.control_scale)
            if not np.isfinite(loss):
                raise FloatingPointError(f"{spec.name}: loss is {loss} at iteration {it}")
            opt.step(trainable, grads[:len(trainable)])
        except FloatingPointError as exc:
            raise BsdeDivergence(str(exc), trace) from exc
        trace.append(loss)
        if callback is not None:
            callback(it, loss)
    return evaluate(spec, params, cfg, seed, y0, z0, nets, scaler, np.array(trace), time.perf_counter() - t0)


def evaluate(spec: BsdeSpec, params: HestonParams, cfg: SolverConfig, seed: int, y0, z0, nets: Mlp,
             scaler: FeatureScaler, trace=np.array([]), wall_time: float = 0.0,
             paths: PathBatch | None = None) -> BsdeRunResult:
    if paths is None:
        paths = simulate(params, cfg.n_steps, cfg.eval_batch, [seed, 1], "P")
    aux = spec.prepare(paths)
    Y, Z, _ = roll_forward(spec, paths, nets if cfg.n_steps > 1 else None, y0, z0, scaler, aux=aux,
                           scale=cfg.control_scale)
    eval_loss = float(np.mean((spec.terminal(paths) - Y[:, -1]) ** 2))
    return BsdeRunResult(name=spec.name, y0=float(np.asarray(y0).reshape(-1)[0]), z0=np.array(z0, dtype=float),
                         nets=nets, scaler=scaler, loss_trace=np.asarray(trace), eval_loss=eval_loss,
                         eval_paths=paths, Y=Y, Z=Z, wall_time=wall_time, config=cfg, aux=aux)


def controls_on(result: BsdeRunResult, paths: PathBatch) -> np.ndarray:
    """Network controls of a trained run on new paths, shape (B, N, q) including Z_0."""
    B, N = paths.batch_size, paths.n_steps
    Z = np.empty((N, B, result.z0.size))
    c = result.config.control_scale
    Z[0] = c * result.z0
    if N > 1:
        Z[1:] = c * result.nets(result.scaler(paths.state))
    return np.swapaxes(Z, 0, 1)
