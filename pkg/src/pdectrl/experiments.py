"""Datasets, training runs and benchmark comparisons driven by a RunConfig."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import adjoint, pde
from .config import ConfigError, RunConfig
from .control import ControlProblem, phase2_steady, phase2_time, true_objective
from .optim import LbfgsConfig
from .surrogate import OperatorSurrogate, TimeSurrogate

log = logging.getLogger(__name__)

POISSON_INITS = ("xy(1-x)(1-y)", "x+y", "xy")
WAVE_INIT = {"amp": 1.0, "center": 0.5, "width": 0.1}


def grid_and_spec(cfg: RunConfig) -> tuple[pde.Grid, pde.PdeSpec]:
    p = cfg["problem"]
    n = p["resolution"]
    if cfg.kind == "poisson":
        return pde.Grid(2, n), pde.PdeSpec("poisson")
    if cfg.kind == "wave":
        return pde.Grid(1, n), pde.PdeSpec.wave(a=p["a"], T=p["T"])
    return pde.Grid(1, n), pde.PdeSpec.burgers(nu=p["nu"], T=p["T"], dt_control=p["dt"])


# ---------------------------------------------------------------- data

def generate_dataset(cfg: RunConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Training and test pairs from the reference solver.

    Poisson and wave give ``m_*`` / ``u_*`` fields; Burgers gives control
    sequences ``m_*`` ``(N, n, nx)`` with state trajectories ``u_*``
    ``(N, n+1, nx)`` on the full grid.
    """
    grid, spec = grid_and_spec(cfg)
    t = cfg["phase1"]
    rng = np.random.default_rng(cfg["problem"]["seed"] if seed is None else seed)
    if cfg.kind == "poisson":
        M = np.array([pde.sample_fourier_control(rng, grid) for _ in range(t["n_train"] + t["n_test"])])
        U = np.array([pde.solve_poisson(m, grid) for m in M])
    elif cfg.kind == "wave":
        M = np.array([pde.sample_gaussian_pulse(rng, grid) for _ in range(t["n_train"] + t["n_test"])])
        U = np.array([pde.solve_wave(m, grid, spec)[-1] for m in M])
    else:
        train = _burgers_trajectories(rng, grid, spec, t["n_initial"], t["n_forces"])
        test = _burgers_trajectories(rng, grid, spec, t["n_test"], 1)
        return {"m_train": train[0], "u_train": train[1], "m_test": test[0], "u_test": test[1]}
    k = t["n_train"]
    return {"m_train": M[:k], "u_train": U[:k], "m_test": M[k:], "u_test": U[k:]}


def _burgers_trajectories(rng, grid, spec, n_initial, n_forces):
    """Every initial state paired with ``n_forces`` forces held fixed in time."""
    n = spec.n_control
    controls, states = [], []
    for _ in range(n_initial):
        u0 = pde.burgers_initial(rng, grid)
        for _ in range(n_forces):
            m = np.repeat(pde.sample_gaussian_bumps(rng, grid)[None], n, axis=0)
            controls.append(m)
            states.append(pde.burgers_trajectory(u0, m, grid, spec))
    return np.array(controls), np.array(states)


# ---------------------------------------------------------------- training

def build_surrogate(cfg: RunConfig):
    t = cfg["phase1"]
    common = dict(channels=tuple(t["channels"]), kernel_size=t["kernel_size"],
                  activation=t["activation"], lr=t["lr"], weight_decay=t["weight_decay"],
                  step_size=t["step_size"], gamma=t["gamma"], epochs=t["epochs"],
                  batch_size=t["batch_size"], seed=t["seed"])
    grid, _ = grid_and_spec(cfg)
    if cfg.kind == "burgers":
        return TimeSurrogate(nx=grid.n - 2, **common)
    return OperatorSurrogate(ndim=grid.ndim, n=grid.n, mode=t["mode"], lambda_rec=t["lambda_rec"],
                             latent_channels=t["latent_channels"], mask=t["mask"], **common)


def train_surrogate(cfg: RunConfig, data: dict[str, np.ndarray], on_epoch=None):
    model = build_surrogate(cfg)
    if cfg.kind == "burgers":
        return model.fit(data["m_train"][..., 1:-1], data["u_train"][..., 1:-1],
                         data["m_test"][..., 1:-1], data["u_test"][..., 1:-1], on_epoch=on_epoch)
    y = data["u_train"] if cfg["phase1"]["mode"] == "supervised" else None
    return model.fit(data["m_train"], y, data["m_test"], data["u_test"], on_epoch=on_epoch)


# ---------------------------------------------------------------- problems

def initial_control(name: str, grid: pde.Grid, shape=None) -> np.ndarray:
    """Named initial guess: ``xy(1-x)(1-y)``, ``x+y``, ``xy``, ``pulse``,
    ``zero`` or ``constant:<c>`` (constant on interior nodes)."""
    mesh = grid.mesh()
    shape = shape or grid.shape
    if name.startswith("constant:"):
        try:
            c = float(name.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad constant initial control {name!r}") from None
        base = pde.zero_boundary(np.full(grid.shape, c))
    elif name == "zero":
        base = grid.zeros()
    elif name == "pulse":
        base = pde.zero_boundary(pde.gaussian(grid.x, **WAVE_INIT))
    elif grid.ndim == 2 and name in POISSON_INITS:
        X, Y = mesh
        base = {"xy(1-x)(1-y)": X * Y * (1 - X) * (1 - Y), "x+y": X + Y, "xy": X * Y}[name]
    else:
        raise ConfigError(f"unknown initial control {name!r} for a {grid.ndim}D problem")
    return np.broadcast_to(base, shape).copy()


def lbfgs_config(cfg: RunConfig) -> LbfgsConfig:
    c = cfg["phase2"]
    return LbfgsConfig(memory=c["memory"], lr=c["lbfgs_lr"], c1=c["c1"], c2=c["c2"],
                       max_iters=c["max_iters"], tolerance_change=c["tolerance_change"])


@dataclass
class Case:
    """One benchmark instance: the problem and, when known, the optimum."""

    problem: ControlProblem
    m_star: np.ndarray | None
    u_star: np.ndarray | None


def benchmark_cases(cfg: RunConfig, seed: int | None = None) -> list[Case]:
    """Poisson: the analytic problem. Wave and Burgers: ``samples`` targets
    produced by random reference controls (drawn from the training laws)."""
    grid, spec = grid_and_spec(cfg)
    p, c = cfg["problem"], cfg["phase2"]
    if cfg.kind == "poisson":
        prob = ControlProblem(pde=spec, grid=grid, u_d=pde.poisson_target(grid), alpha=p["alpha"],
                              lambda2=c["lambda2"], obj_weight=c["obj_weight"])
        m_star, u_star = pde.poisson_optimal_control(grid, p["alpha"])
        return [Case(prob, m_star, u_star)]
    # distinct stream from the training data
    rng = np.random.default_rng([p["seed"] if seed is None else seed, 1])
    cases = []
    for _ in range(p["samples"]):
        if cfg.kind == "wave":
            target = pde.solve_wave(pde.sample_gaussian_pulse(rng, grid), grid, spec)[-1]
            prob = ControlProblem(pde=spec, grid=grid, u_d=target, alpha=p["alpha"],
                                  lambda2=c["lambda2"], obj_weight=c["obj_weight"])
        else:
            u0 = pde.burgers_initial(rng, grid)
            force = np.repeat(pde.sample_gaussian_bumps(rng, grid)[None], spec.n_control, axis=0)
            target = pde.burgers_trajectory(u0, force, grid, spec)[-1]
            prob = ControlProblem(pde=spec, grid=grid, u_d=target, alpha=p["alpha"],
                                  lambda2=c["lambda2"], obj_weight=c["obj_weight"], u0=u0)
        cases.append(Case(prob, None, target))
    return cases


# ---------------------------------------------------------------- runs

@dataclass
class RunRecord:
    method: str
    m_init: str
    objective: float
    rel_m: float
    rel_u: float
    iterations: int
    wall_time: float
    m: np.ndarray
    history: list[dict]


def _rel(grid, a, b):
    if b is None:
        return math.nan
    return grid.norm(a - b) / grid.norm(b)


def _final_state(prob: ControlProblem, m):
    g = prob.grid
    if prob.pde.kind == "poisson":
        return pde.solve_poisson(m, g, tol=1e-12)
    if prob.pde.kind == "wave":
        return pde.solve_wave(m, g, prob.pde)[-1]
    return pde.burgers_trajectory(prob.u0, m, g, prob.pde)[-1]


def run_method(method: str, case: Case, m_init: np.ndarray, cfg: RunConfig, model=None,
               init_name: str = "") -> RunRecord:
    """Solve one case with ``surrogate`` or ``adjoint``; metrics use the
    reference solver on the returned control."""
    prob = case.problem
    lb = lbfgs_config(cfg)
    start = time.perf_counter()
    if method == "surrogate":
        if model is None:
            raise ValueError("surrogate runs need a trained model")
        if prob.pde.kind == "burgers":
            res = phase2_time(model, prob, m_init=m_init, cfg=lb)
        else:
            res = phase2_steady(model, prob, m_init, lb)
    elif method == "adjoint":
        res = adjoint.adjoint_control(prob, m_init, lb)
    else:
        raise ValueError(f"unknown method {method!r}")
    wall = time.perf_counter() - start
    m = res.m
    try:
        obj = true_objective(prob, m)
        u = _final_state(prob, m)
    except pde.InstabilityError:
        obj, u = math.inf, np.full(prob.grid.shape, np.nan)
    g = prob.grid
    rel_m = _rel(g, m, case.m_star) if case.m_star is not None else math.nan
    return RunRecord(method, init_name, obj, rel_m, _rel(g, u, case.u_star), res.result.n_iter,
                     wall, m, res.history)


def compare(cfg: RunConfig, model, methods=("surrogate", "adjoint")) -> list[RunRecord]:
    """All methods on all benchmark cases (and all named inits for Poisson)."""
    records = []
    cases = benchmark_cases(cfg)
    grid = cases[0].problem.grid
    inits = POISSON_INITS if cfg.kind == "poisson" else (cfg["phase2"]["m_init"],)
    for name in inits:
        for i, case in enumerate(cases):
            m0 = initial_control(name, grid, case.problem.control_shape)
            for method in methods:
                rec = run_method(method, case, m0, cfg, model, name)
                log.info("%s %s case %d: objective %.4e rel_m %.4e (%d it, %.2fs)", method, name, i,
                         rec.objective, rec.rel_m, rec.iterations, rec.wall_time)
                records.append(rec)
    return records


REPORT_COLUMNS = ("problem", "m_init", "method", "n", "objective_mean", "objective_std",
                  "rel_m_mean", "rel_m_std", "rel_u_mean", "rel_u_std", "iterations_mean")
TIMING_COLUMNS = ("problem", "m_init", "method", "n", "wall_mean", "wall_std", "wall_median")


def _groups(records):
    keys = []
    for r in records:
        if (r.m_init, r.method) not in keys:
            keys.append((r.m_init, r.method))
    return [(k, [r for r in records if (r.m_init, r.method) == k]) for k in keys]


def report_rows(kind: str, records: list[RunRecord]) -> list[list]:
    """Deterministic summary rows (no timings)."""
    rows = []
    for (init, method), rs in _groups(records):
        obj = np.array([r.objective for r in rs])
        rm = np.array([r.rel_m for r in rs])
        ru = np.array([r.rel_u for r in rs])
        it = np.array([r.iterations for r in rs], dtype=float)
        rows.append([kind, init, method, len(rs), obj.mean(), obj.std(), rm.mean(), rm.std(),
                     ru.mean(), ru.std(), it.mean()])
    return rows


def timing_rows(kind: str, records: list[RunRecord]) -> list[list]:
    rows = []
    for (init, method), rs in _groups(records):
        w = np.array([r.wall_time for r in rs])
        rows.append([kind, init, method, len(rs), w.mean(), w.std(), float(np.median(w))])
    return rows
