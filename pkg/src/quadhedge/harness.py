"""Experiment orchestration: presets, pipeline runs, report persistence and summaries."""

from __future__ import annotations

import json
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lrm, mc, mvh, pde
from .bsde import SolverConfig
from .hedge import mse_over_time
from .market import HestonParams
from .mc import relative_error
from .nn import write_loss_csv
from .riccati import RiccatiCurves, opportunity_process

METHODS = ("mvh", "lrm", "mc", "pde", "riccati")
BSRE_CONTROL_SCALE = 0.01


@dataclass
class ExperimentConfig:
    params: HestonParams = field(default_factory=HestonParams.table1)
    solver: SolverConfig = field(default_factory=SolverConfig)
    method: str = "mvh"
    seed: int = 0
    out_dir: str = "runs/out"
    bsre_control_scale: float = BSRE_CONTROL_SCALE
    mc_batch: int = 100_000
    mc_steps: int = 100
    pde_m_s: int = 200
    pde_m_y: int = 100
    pde_n_time: int = 200
    payoff_override: float | None = None  # constant claim instead of the basket call
    hedge_csv_paths: int = 100
    preset: str = ""

    def bsre_solver(self) -> SolverConfig:
        d = self.solver.to_dict()
        d.update(control_scale=self.bsre_control_scale, y0_range=(0.5, 2.0))
        return SolverConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k not in ("params", "solver")}
        d["params"] = self.params.to_dict()
        d["solver"] = self.solver.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        base = preset(d.pop("preset")) if d.get("preset") else cls()
        if "params" in d:
            d["params"] = HestonParams.from_dict(d["params"])
        if "solver" in d:
            sd = base.solver.to_dict()
            sd.update(d["solver"])
            d["solver"] = SolverConfig.from_dict(sd)
        kw = {k: v for k, v in base.__dict__.items()}
        kw.update(d)
        return cls(**kw)


def preset(name: str) -> ExperimentConfig:
    """Named configurations: the experimental rows (table1-m*), 'quick' and the full-scale N=100 run 'full'."""
    if name.startswith("table1-m"):
        m = int(name[len("table1-m"):])
        if m not in (1, 5, 20, 100):
            raise ValueError(f"unknown preset {name!r}")
        return ExperimentConfig(params=HestonParams.table1(m), solver=SolverConfig(n_steps=10), preset=name)
    if name == "quick":
        return ExperimentConfig(params=HestonParams.table1(1),
                                solver=SolverConfig(n_steps=10, iterations=4000, partial=2000),
                                mc_batch=20_000, preset=name)
    if name == "full":
        return ExperimentConfig(params=HestonParams.table1(1), solver=SolverConfig(n_steps=100), preset=name)
    raise ValueError(f"unknown preset {name!r}")


def load_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RunReport:
    method: str
    config: dict
    prices: dict = field(default_factory=dict)
    L: dict = field(default_factory=dict)
    rel_errors: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    losses: dict = field(default_factory=dict)
    mse: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    failed_stage: str | None = None

    @property
    def ok(self) -> bool:
        return self.failed_stage is None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def save(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / "report.json"
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        return cls(**json.loads(Path(path).read_text()))

    def summary(self) -> str:
        """Table-shaped text; every number is printed with repr so it parses back exactly."""
        lines = [f"method: {self.method}"]
        for section in ("L", "prices", "rel_errors", "diagnostics", "timings"):
            for k, v in getattr(self, section).items():
                if isinstance(v, (int, float)) and not isinstance(v, bool):
                    lines.append(f"{section}.{k}: {float(v)!r}")
        for k, v in self.stages.items():
            lines.append(f"stage.{k}: {v}")
        return "\n".join(lines)


def parse_summary(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        key, _, val = line.partition(": ")
        if "." in key and not key.startswith("stage."):
            out[key] = float(val)
    return out


class _Runner:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.report = RunReport(method=cfg.method, config=cfg.to_dict())

    def stage(self, name: str, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            self.report.stages[name] = f"failed: {type(exc).__name__}: {exc}"
            self.report.failed_stage = name
            self.report.diagnostics.setdefault("traceback", traceback.format_exc(limit=5))
            trace = getattr(exc, "loss_trace", None)
            if trace is not None:
                write_loss_csv(self.out / f"loss_{name}.csv", trace)
            raise _StageFailed(name) from exc
        self.report.timings[name] = time.perf_counter() - t0
        self.report.stages[name] = "ok"
        return result

    @property
    def terminal(self):
        c = self.cfg.payoff_override
        if c is None:
            return None
        return lambda paths: np.full(paths.batch_size, float(c))

    def mc_price(self, measure: str) -> mc.McEstimate:
        cfg = self.cfg
        if cfg.payoff_override is not None:
            return mc.McEstimate(price=float(cfg.payoff_override), std_err=0.0, batch=cfg.mc_batch,
                                 steps=cfg.mc_steps, measure=measure, seed=cfg.seed)
        return mc.price(cfg.params, measure, cfg.mc_batch, cfg.mc_steps, seed=cfg.seed)

    def record_mc(self, est: mc.McEstimate, tag: str):
        self.report.prices[f"mc_{tag}"] = est.price
        self.report.prices[f"mc_{tag}_std_err"] = est.std_err

    def pde_available(self) -> bool:
        p = self.cfg.params
        return p.m == 1 and np.allclose(p.A, 1.0) and self.cfg.payoff_override is None

    def solve_pde(self, mode: str):
        cfg = self.cfg
        grid = pde.build_grid(cfg.params.strike, cfg.pde_m_s, cfg.pde_m_y)
        g = pde.solve_pde(cfg.params, mode, grid, cfg.pde_n_time)
        self.report.prices[f"pde_{mode.lower()}"] = pde.price_at(g, 0.0, float(cfg.params.y0_sq[0]),
                                                                float(cfg.params.s0[0]))
        return g

    def y_init_range(self, mc_ref: float) -> tuple[float, float]:
        return (0.95 * mc_ref, 1.05 * mc_ref) if mc_ref != 0 else (-0.05, 0.05)

    def write_hedge(self, run, tag: str):
        run.to_csv(self.out / f"hedge_run_{tag}.csv", max_paths=self.cfg.hedge_csv_paths)

    def write_mse(self, deep, bench, tag: str):
        rep = mse_over_time(deep, bench)
        rep.to_csv(self.out / f"mse_{tag}.csv")
        self.report.mse[tag] = {"price": rep.price.tolist(), "cash": rep.cash.tolist(),
                                "shares": rep.shares.tolist(), "mean_price": rep.mean_price,
                                "mean_cash": rep.mean_cash, "mean_shares": rep.mean_shares}
        self.report.diagnostics[f"mse_{tag}_mean_shares"] = rep.mean_shares
        self.report.diagnostics[f"mse_{tag}_mean_cash"] = rep.mean_cash
        self.report.diagnostics[f"mse_{tag}_mean_price"] = rep.mean_price

    # -- methods ---------------------------------------------------------
    def riccati(self):
        p = self.cfg.params
        curves = self.stage("riccati", lambda: RiccatiCurves.build(p))
        curves.to_csv(self.out / "riccati_curves.csv")
        self.report.L["closed_form"] = float(opportunity_process(p, 0.0, p.y0_sq))
        return curves

    def mc(self):
        for measure, tag in (("Q_mv", "mv"), ("Q_lr", "lr")):
            self.record_mc(self.stage(f"mc_{tag}", lambda: self.mc_price(measure)), tag)

    def pde(self):
        if not self.pde_available():
            self.report.stages["pde"] = "failed: the PDE benchmark needs m = 1, A = [[1]] and the basket call"
            raise _StageFailed("pde")
        for mode in ("MVH", "LRM"):
            self.stage(f"pde_{mode.lower()}", lambda: self.solve_pde(mode))

    def mvh(self):
        cfg, p, rep = self.cfg, self.cfg.params, self.report
        self.riccati()
        est = self.stage("mc_mv", lambda: self.mc_price("Q_mv"))
        self.record_mc(est, "mv")
        outcome = self.stage("bsre", lambda: mvh.solve_bsre(p, cfg.bsre_solver(), cfg.seed))
        write_loss_csv(self.out / "loss_bsre.csv", outcome.result.loss_trace)
        rep.losses["bsre"] = outcome.result.loss_trace.tolist()
        rep.L["deep"] = outcome.result.y0
        rep.diagnostics["bsre_eval_loss"] = outcome.result.eval_loss
        rep.diagnostics["bsre_clamp_rate"] = outcome.clamp_rate
        rep.diagnostics["bsre_unreliable"] = float(outcome.unreliable)
        if "closed_form" in rep.L:
            rep.rel_errors["L_deep_vs_closed_form"] = relative_error(rep.L["closed_form"], rep.L["deep"]).rel_err_pct
        scfg = SolverConfig.from_dict({**cfg.solver.to_dict(), "y0_range": self.y_init_range(est.price)})
        ext = self.stage("extended_bsde", lambda: mvh.solve_extended_bsde(p, scfg, outcome, cfg.seed,
                                                                          terminal=self.terminal))
        write_loss_csv(self.out / "loss_extended_bsde.csv", ext.loss_trace)
        rep.losses["extended_bsde"] = ext.loss_trace.tolist()
        rep.prices["deep_mvh"] = ext.y0
        rep.diagnostics["extended_eval_loss"] = ext.eval_loss
        rep.rel_errors["deep_vs_mc"] = relative_error(est.price, ext.y0).rel_err_pct
        run = self.stage("mvh_strategy", lambda: mvh.extract_strategy(p, outcome.result, ext, terminal=self.terminal))
        rep.diagnostics["terminal_hedging_error"] = run.terminal_error
        rep.diagnostics["strategy_flag_rate"] = float(run.hedge.flags.mean())
        self.write_hedge(run.hedge, "mvh")
        if self.pde_available():
            grid = self.stage("pde_mvh", lambda: self.solve_pde("MVH"))
            rep.rel_errors["pde_vs_mc"] = relative_error(est.price, rep.prices["pde_mvh"]).rel_err_pct
            rep.rel_errors["deep_vs_pde"] = relative_error(rep.prices["pde_mvh"], ext.y0).rel_err_pct
            bench = self.stage("ck_benchmark", lambda: pde.benchmark_strategies(
                grid, ext.eval_paths, "MVH", initial_wealth=ext.y0))
            self.write_hedge(bench, "ck")
            self.write_mse(run.hedge, bench, "mvh")

    def lrm(self):
        cfg, p, rep = self.cfg, self.cfg.params, self.report
        est = self.stage("mc_lr", lambda: self.mc_price("Q_lr"))
        self.record_mc(est, "lr")
        scfg = SolverConfig.from_dict({**cfg.solver.to_dict(), "y0_range": self.y_init_range(est.price)})
        res = self.stage("fs_bsde", lambda: lrm.solve_fs_bsde(p, scfg, cfg.seed, terminal=self.terminal))
        write_loss_csv(self.out / "loss_fs_bsde.csv", res.loss_trace)
        rep.losses["fs_bsde"] = res.loss_trace.tolist()
        rep.prices["deep_lrm"] = res.y0
        rep.diagnostics["fs_eval_loss"] = res.eval_loss
        rep.rel_errors["deep_vs_mc"] = relative_error(est.price, res.y0).rel_err_pct
        run = self.stage("lrm_strategy", lambda: lrm.extract_strategy(p, res, terminal=self.terminal))
        mean, se = lrm.cost_martingale_stat(run)
        rep.diagnostics["cost_increment_mean"] = mean
        rep.diagnostics["cost_increment_std_err"] = se
        rep.diagnostics["fs_residual_mean"] = float(run.fs_residual.mean())
        self.write_hedge(run.hedge, "lrm")
        if self.pde_available():
            grid = self.stage("pde_lrm", lambda: self.solve_pde("LRM"))
            rep.rel_errors["pde_vs_mc"] = relative_error(est.price, rep.prices["pde_lrm"]).rel_err_pct
            rep.rel_errors["deep_vs_pde"] = relative_error(rep.prices["pde_lrm"], res.y0).rel_err_pct
            bench = self.stage("hps_benchmark", lambda: pde.benchmark_strategies(grid, res.eval_paths, "LRM"))
            self.write_hedge(bench, "hps")
            self.write_mse(run.hedge, bench, "lrm")


class _StageFailed(RuntimeError):
    def __init__(self, stage: str):
        super().__init__(stage)
        self.stage = stage


def run(cfg: ExperimentConfig, echo: bool = False) -> RunReport:
    """Execute ``cfg.method``; the report is persisted even when a stage fails."""
    if cfg.method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    runner = _Runner(cfg)
    try:
        getattr(runner, cfg.method)()
    except _StageFailed as exc:
        runner.report.failed_stage = exc.stage
        runner.report.stages.setdefault(exc.stage, f"failed: {exc.__cause__}")
    runner.report.save(runner.out)
    if echo:
        print(runner.report.summary())
    return runner.report
