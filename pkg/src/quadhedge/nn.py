"""Feedforward ReLU networks with hand-written reverse mode, plus Adam.

A single ``Mlp`` object may hold a stack of S independent networks with identical
architecture; weights then carry a leading stack axis and inputs have shape
(S, batch, in). The deep BSDE solver uses one stack for all time steps so each
forward/backward pass is a handful of batched matmuls.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class Mlp:
    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix")
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 3 or b.shape != (w.shape[0], w.shape[2]):
                raise ValueError("weights must be (S, in, out) and biases (S, out)")

    @classmethod
    def init(cls, dims: list[int], rng: np.random.Generator, n_stack: int = 1) -> "Mlp":
        """Glorot-uniform weights, zero biases. ``dims`` = [in, hidden..., out]."""
        ws, bs = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            ws.append(rng.uniform(-lim, lim, size=(n_stack, fan_in, fan_out)))
            bs.append(np.zeros((n_stack, fan_out)))
        return cls(ws, bs)

    @property
    def n_stack(self) -> int:
        return self.weights[0].shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[2]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray):
        """Returns (output, cache). ``x`` is (S, B, in), or (B, in) when S == 1."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 2
        if squeeze:
            if self.n_stack != 1:
                raise ValueError("2-D input only allowed for a single network")
            x = x[None]
        if x.shape[-1] != self.in_dim or x.shape[0] != self.n_stack:
            raise ValueError(f"input shape {x.shape} incompatible with ({self.n_stack}, B, {self.in_dim})")
        acts = [x]
        h = x
        n_layers = len(self.weights)
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = np.matmul(h, w) + b[:, None, :]
            if k < n_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        out = h[0] if squeeze else h
        return out, (acts, squeeze)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, dout: np.ndarray):
        """Gradients (same order as ``params``) and d/dx for upstream ``dout``."""
        acts, squeeze = cache
        g = np.asarray(dout, dtype=float)
        if squeeze:
            g = g[None]
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            if k < len(self.weights) - 1:
                # ReLU derivative; the subgradient at exactly 0 is taken as 0
                g = g * (acts[k + 1] > 0.0)
            grads_w[k] = np.matmul(np.swapaxes(acts[k], 1, 2), g)
            grads_b[k] = g.sum(axis=1)
            g = np.matmul(g, np.swapaxes(self.weights[k], 1, 2))
        grads = []
        for gw, gb in zip(grads_w, grads_b):
            grads += [gw, gb]
        return grads, (g[0] if squeeze else g)

    def to_dict(self) -> dict:
        return {"weights": [w.tolist() for w in self.weights], "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        return cls([np.array(w) for w in d["weights"]], [np.array(b) for b in d["biases"]])


def lr_schedule(iteration: int, lr1: float = 5e-2, lr2: float = 5e-3, switch: int = 4000) -> float:
    return lr1 if iteration < switch else lr2


@dataclass
class Adam:
    """Adam over a flat list of arrays, updated in place."""

    lr1: float = 5e-2
    lr2: float = 5e-3
    switch: int = 4000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iteration: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def lr(self) -> float:
        return lr_schedule(self.iteration, self.lr1, self.lr2, self.switch)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ValueError("parameter/gradient count mismatch")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != np.shape(g):
                raise ValueError(f"gradient {i} has shape {np.shape(g)}, expected {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {i} at iteration {self.iteration}")
        lr = self.lr()
        t = self.iteration + 1
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.iteration += 1

    def state_dict(self) -> dict:
        return {"iteration": self.iteration, "lr1": self.lr1, "lr2": self.lr2, "switch": self.switch,
                "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v]}


def save_checkpoint(path: str | Path, named: dict[str, np.ndarray], iteration: int) -> None:
    payload = {"iteration": iteration,
               "tensors": {k: {"shape": list(np.shape(v)), "data": np.ravel(v).tolist()} for k, v in named.items()}}
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], int]:
    payload = json.loads(Path(path).read_text())
    tensors = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in payload["tensors"].items()}
    return tensors, int(payload["iteration"])


def write_loss_csv(path: str | Path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "log10_loss"])
        for i, loss in enumerate(losses):
            loss = float(loss)
            w.writerow([i, repr(loss), repr(float(np.log10(loss))) if loss > 0 else "-inf"])
