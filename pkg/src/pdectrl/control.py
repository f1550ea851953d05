"""Phase 2: optimal-control search through a frozen surrogate."""
from __future__ import annotations

import contextlib
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import pde
from . import tensor as T
from .optim import LbfgsConfig, LbfgsResult, lbfgs_minimize
from .surrogate import relative_error

HISTORY_COLUMNS = ("iter", "J_obj", "J_rec", "J_total", "step_length", "grad_norm", "wall_ms")


@dataclass
class ControlProblem:
    """Target, penalty and regularizer weights for one control problem.

    ``u_d``, ``u0`` and ``bounds`` live on the full ``grid`` (boundary nodes
    included). For Burgers the control is a stack of ``pde.n_control``
    fields, one per control interval.
    """

    pde: pde.PdeSpec
    grid: pde.Grid
    u_d: np.ndarray
    alpha: float = 0.0
    lambda2: float = 0.0
    obj_weight: float = 1.0
    bounds: tuple[np.ndarray, np.ndarray] | None = None
    u0: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u_d = np.asarray(self.u_d, dtype=np.float64)
        if self.u_d.shape != self.grid.shape:
            raise ValueError(f"target has shape {self.u_d.shape}, grid is {self.grid.shape}")
        if self.alpha < 0 or self.lambda2 < 0 or self.obj_weight <= 0:
            raise ValueError("alpha and lambda2 must be >= 0, obj_weight > 0")
        if self.bounds is not None:
            lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
            if np.any(lo > hi):
                raise ValueError("bounds must satisfy m_a <= m_b pointwise")
            self.bounds = (lo, hi)
        if self.pde.kind == "burgers" and self.u0 is None:
            raise ValueError("Burgers problems need an initial state u0")

    @property
    def objective_kind(self) -> str:
        return {"poisson": "tracking", "wave": "terminal", "burgers": "terminal+penalty"}[self.pde.kind]

    @property
    def control_shape(self) -> tuple[int, ...]:
        if self.pde.kind == "burgers":
            return (self.pde.n_control, self.grid.n)
        return self.grid.shape

    @classmethod
    def poisson(cls, n: int = 64, alpha: float = 1e-6, lambda2: float = 0.005, **kw):
        g = pde.Grid(2, n)
        return cls(pde=pde.PdeSpec("poisson"), grid=g, u_d=pde.poisson_target(g),
                   alpha=alpha, lambda2=lambda2, **kw)

    @classmethod
    def wave(cls, u_d, n: int = 64, lambda2: float = 0.001, spec=None, **kw):
        return cls(pde=spec or pde.PdeSpec.wave(), grid=pde.Grid(1, n), u_d=u_d,
                   lambda2=lambda2, **kw)

    @classmethod
    def burgers(cls, u0, u_d, n: int = 130, alpha: float = 0.01, lambda2: float = 0.3,
                obj_weight: float = 10.0, spec=None, **kw):
        return cls(pde=spec or pde.PdeSpec.burgers(), grid=pde.Grid(1, n), u_d=u_d,
                   alpha=alpha, lambda2=lambda2, obj_weight=obj_weight, u0=u0, **kw)


def true_objective(prob: ControlProblem, m: np.ndarray) -> float:
    """Objective of ``m`` evaluated with the finite-difference solver."""
    g = prob.grid
    m = np.asarray(m, dtype=np.float64)
    if m.shape != prob.control_shape:
        raise ValueError(f"control has shape {m.shape}, expected {prob.control_shape}")
    w = g.h ** g.ndim
    if prob.pde.kind == "poisson":
        u = pde.solve_poisson(m, g, tol=1e-12)
        return 0.5 * w * float(np.sum((u - prob.u_d) ** 2)) + 0.5 * prob.alpha * w * float(np.sum(m ** 2))
    if prob.pde.kind == "wave":
        u = pde.solve_wave(m, g, prob.pde)[-1]
        return 0.5 * w * float(np.sum((u - prob.u_d) ** 2)) + 0.5 * prob.alpha * w * float(np.sum(m ** 2))
    u = pde.burgers_trajectory(prob.u0, m, g, prob.pde)[-1]
    return (0.5 * w * float(np.sum((u - prob.u_d) ** 2))
            + 0.5 * prob.alpha * w * prob.pde.dt_control * float(np.sum(m ** 2)))


@contextlib.contextmanager
def frozen(module: torch.nn.Module):
    """Take the network parameters off the tape for the duration."""
    flags = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in flags:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in flags:
            p.requires_grad_(flag)


def _net(s):
    net = getattr(s, "network_", None)
    if net is None:
        raise RuntimeError(f"{type(s).__name__} is not fitted")
    return net


def j_obj_steady(s, prob: ControlProblem, m: torch.Tensor) -> torch.Tensor:
    """Tracking term through the surrogate plus the control penalty."""
    if tuple(m.shape) != prob.grid.shape:
        raise ValueError(f"control has shape {tuple(m.shape)}, target is {prob.grid.shape}")
    w = prob.grid.h ** prob.grid.ndim
    u = _net(s).solve(m)
    out = 0.5 * w * torch.sum((u - T.as_tensor(prob.u_d)) ** 2)
    if prob.alpha:
        out = out + 0.5 * prob.alpha * w * torch.sum(m ** 2)
    return out


def j_rec(s, m: torch.Tensor) -> torch.Tensor:
    """Relative reconstruction error of ``m`` under the frozen autoencoder."""
    return relative_error(_net(s).reconstruct(m), m, ndim=m.dim())


def j_total(s, prob: ControlProblem, m: torch.Tensor) -> torch.Tensor:
    out = prob.obj_weight * j_obj_steady(s, prob, m)
    if prob.lambda2:
        out = out + prob.lambda2 * j_rec(s, m)
    return out


@dataclass
class Phase2Result:
    m: np.ndarray
    u: np.ndarray
    history: list[dict]
    result: LbfgsResult

    @property
    def wall_time(self) -> float:
        return self.result.wall_time


def _torch_objective(terms, shape):
    """Wrap ``terms(m) -> (J_obj, J_rec)`` into an L-BFGS callback."""

    def fun(x):
        m = T.as_tensor(x.reshape(shape), requires_grad=True)
        j_o, j_r, total = terms(m)
        (g,) = torch.autograd.grad(total, m)
        info = {"J_obj": j_o.item(), "J_rec": j_r.item() if j_r is not None else math.nan,
                "J_total": total.item()}
        return total.item(), g.numpy().reshape(-1), info

    return fun


def phase2_steady(s, prob: ControlProblem, m_init, cfg: LbfgsConfig | None = None) -> Phase2Result:
    """Minimise ``j_total`` over the control from ``m_init``."""
    m_init = np.asarray(m_init, dtype=np.float64)
    if m_init.shape != prob.grid.shape:
        raise ValueError(f"m_init has shape {m_init.shape}, expected {prob.grid.shape}")
    net = _net(s)

    def terms(m):
        j_o = j_obj_steady(s, prob, m)
        j_r = j_rec(s, m) if prob.lambda2 else None
        total = prob.obj_weight * j_o + (prob.lambda2 * j_r if j_r is not None else 0.0)
        return j_o, j_r, total

    with frozen(net):
        res = lbfgs_minimize(_torch_objective(terms, m_init.shape), m_init, cfg, prob.bounds)
        with torch.no_grad():
            u = net.solve(T.as_tensor(res.x)).numpy()
    return Phase2Result(m=res.x, u=u, history=res.history, result=res)


def _interior(a, nx):
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] == nx:
        return a
    if a.shape[-1] == nx + 2:
        return a[..., 1:-1]
    raise ValueError(f"expected last axis of {nx} or {nx + 2} points, got {a.shape[-1]}")


def phase2_time(ts, prob: ControlProblem, u0=None, m_init=None,
                cfg: LbfgsConfig | None = None) -> Phase2Result:
    """Optimise all control slices jointly through the latent rollout.

    Fields may be given on the full grid or on interior points only; the
    returned controls and rollout are padded back onto the full grid.
    """
    net = _net(ts)
    nx = ts.nx
    if prob.grid.n != nx + 2:
        raise ValueError(f"surrogate covers {nx} interior points, grid has {prob.grid.n} nodes")
    u0 = _interior(prob.u0 if u0 is None else u0, nx)
    m_init = _interior(m_init, nx)
    if m_init.ndim != 2:
        raise ValueError("m_init must be a (slices, points) array")
    u_d = T.as_tensor(_interior(prob.u_d, nx))
    u0_t = T.as_tensor(u0)
    h, dt = prob.grid.h, prob.pde.dt_control

    def terms(m):
        states = net.rollout(u0_t, m)
        j_o = 0.5 * h * torch.sum((states[-1] - u_d) ** 2)
        if prob.alpha:
            j_o = j_o + 0.5 * prob.alpha * h * dt * torch.sum(m ** 2)
        total = prob.obj_weight * j_o
        j_r = None
        if prob.lambda2:
            state_rec = net.state_rec(net.state_enc(states))
            ctrl_rec = net.control_rec(net.control_enc(m))
            j_r = relative_error(state_rec, states, ndim=1).sum() + relative_error(ctrl_rec, m, ndim=1).sum()
            total = total + prob.lambda2 * j_r
        return j_o, j_r, total

    bounds = None
    if prob.bounds is not None:
        bounds = tuple(_interior(b, nx) for b in prob.bounds)
    with frozen(net):
        res = lbfgs_minimize(_torch_objective(terms, m_init.shape), m_init, cfg, bounds)
        with torch.no_grad():
            states = net.rollout(u0_t, T.as_tensor(res.x)).numpy()
    pad = [(0, 0), (1, 1)]
    return Phase2Result(m=np.pad(res.x, pad), u=np.pad(states, pad), history=res.history, result=res)


def write_history_csv(history: list[dict], path) -> None:
    """History rows as CSV; ``J_total`` falls back to the raw objective."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            full = {"J_total": row.get("f"), "J_obj": row.get("f"), "J_rec": math.nan, **row}
            w.writerow([full["iter"]] + [repr(float(full[c])) for c in HISTORY_COLUMNS[1:]])
    tmp.replace(path)
