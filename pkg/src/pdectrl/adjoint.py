"""Discrete adjoints of the reference solvers and the adjoint-driven baseline.

Each gradient is the exact derivative of the implemented discrete
objective (see :func:`pdectrl.control.true_objective`), so it agrees with
finite differences of that objective up to rounding.
"""
from __future__ import annotations

import math

import numpy as np

from . import pde
from .control import ControlProblem, Phase2Result, true_objective
from .optim import LbfgsConfig, lbfgs_minimize

POISSON_TOL = 1e-12


def _check(prob: ControlProblem, kind: str, m):
    if prob.pde.kind != kind:
        raise ValueError(f"expected a {kind} problem, got {prob.pde.kind}")
    m = np.asarray(m, dtype=np.float64)
    if m.shape != prob.control_shape:
        raise ValueError(f"control has shape {m.shape}, expected {prob.control_shape}")
    return m


def poisson_grad(m, prob: ControlProblem) -> np.ndarray:
    """L2 gradient ``S(Sm - u_d) + alpha m`` of the Poisson objective.

    The Euclidean gradient of the grid objective is this times ``h**2``.
    """
    m = _check(prob, "poisson", m)
    u = pde.solve_poisson(m, prob.grid, tol=POISSON_TOL)
    p = pde.solve_poisson(pde.zero_boundary(u - prob.u_d), prob.grid, tol=POISSON_TOL)
    return p + prob.alpha * m


def _second_difference_t(w: np.ndarray, h: float) -> np.ndarray:
    """Transpose of :func:`pde.second_difference`."""
    r = np.zeros_like(w)
    c = w[1:-1] / h ** 2
    r[2:] += c
    r[1:-1] -= 2.0 * c
    r[:-2] += c
    return r


def wave_grad(m, prob: ControlProblem, traj: np.ndarray | None = None) -> np.ndarray:
    """Gradient of ``0.5 h sum (u(T) - u_d)^2`` w.r.t. the initial velocity.

    Runs the leapfrog recursion backwards with the source linearised at the
    stored forward states.
    """
    m = _check(prob, "wave", m)
    g, spec = prob.grid, prob.pde
    if traj is None:
        traj = pde.solve_wave(m, g, spec)
    dt, nt = pde.wave_time_step(g, spec)
    a2, h = spec.a ** 2, g.h
    bar = np.zeros_like(traj)
    bar[nt] = h * (traj[nt] - prob.u_d)
    for k in range(nt - 1, 0, -1):
        w = bar[k + 1].copy()
        w[[0, -1]] = 0.0
        bar[k] += 2.0 * w + dt ** 2 * (a2 * _second_difference_t(w, h) - pde.wave_source_prime(traj[k]) * w)
        bar[k - 1] -= w
    w = bar[1].copy()
    w[[0, -1]] = 0.0
    grad = dt * w
    if prob.alpha:
        grad = grad + prob.alpha * h * m
    return grad


def _burgers_substep_t(u: np.ndarray, ubar: np.ndarray, dt: float, h: float, nu: float):
    """Reverse of ``u + dt * burgers_rhs(u, m)``: returns (u_bar, m_bar)."""
    out = ubar.copy()
    r = dt * ubar[1:-1]
    c = u[1:-1]
    back = (c - u[:-2]) / h
    fwd = (u[2:] - c) / h
    pos, neg = np.maximum(c, 0.0), np.minimum(c, 0.0)
    dconv = (c > 0) * back + (c < 0) * fwd + pos / h - neg / h
    out[1:-1] += r * (-dconv - 2.0 * nu / h ** 2)
    out[:-2] += r * (pos / h + nu / h ** 2)
    out[2:] += r * (-neg / h + nu / h ** 2)
    mbar = np.zeros_like(u)
    mbar[1:-1] = r
    return out, mbar


def burgers_grad(m, prob: ControlProblem) -> np.ndarray:
    """Gradient of the Burgers objective w.r.t. every control slice.

    Reverse-mode sweep through every explicit substep of the stored forward
    trajectory, plus the space-time penalty ``alpha h dt m``.
    """
    m = _check(prob, "burgers", m)
    g, spec = prob.grid, prob.pde
    ns = pde.burgers_substeps(g, spec)
    dt = spec.dt_control / ns
    cur = pde.zero_boundary(prob.u0)
    sweeps = []
    for mj in m:
        cur, hist = pde.burgers_step(cur, mj, g, spec, return_substeps=True)
        sweeps.append(hist)
    ubar = g.h * (cur - prob.u_d)
    grad = np.zeros_like(m)
    for j in range(len(m) - 1, -1, -1):
        hist = sweeps[j]
        for s in range(ns - 1, -1, -1):
            ubar, mbar = _burgers_substep_t(hist[s], ubar, dt, g.h, spec.nu)
            grad[j] += mbar
        # zero_boundary at the start of each interval
        ubar[[0, -1]] = 0.0
    if prob.alpha:
        grad += prob.alpha * g.h * spec.dt_control * m
    return grad


def objective_and_grad(prob: ControlProblem, m) -> tuple[float, np.ndarray]:
    """True objective and its Euclidean gradient on the grid."""
    kind = prob.pde.kind
    if kind == "poisson":
        return true_objective(prob, m), prob.grid.h ** 2 * poisson_grad(m, prob)
    if kind == "wave":
        m = _check(prob, "wave", m)
        traj = pde.solve_wave(m, prob.grid, prob.pde)
        w = prob.grid.h
        f = 0.5 * w * float(np.sum((traj[-1] - prob.u_d) ** 2)) + 0.5 * prob.alpha * w * float(np.sum(m ** 2))
        return f, wave_grad(m, prob, traj)
    return true_objective(prob, m), burgers_grad(m, prob)


def adjoint_control(prob: ControlProblem, m_init, cfg: LbfgsConfig | None = None) -> Phase2Result:
    """L-BFGS on the true discrete objective with adjoint gradients.

    An unstable Burgers trial point is reported to the line search as an
    infinite objective so the step is shortened.
    """
    m_init = np.asarray(m_init, dtype=np.float64)
    shape = prob.control_shape
    if m_init.shape != shape:
        raise ValueError(f"m_init has shape {m_init.shape}, expected {shape}")

    def fun(x):
        try:
            f, g = objective_and_grad(prob, x.reshape(shape))
        except pde.InstabilityError:
            return math.inf, np.zeros(x.size), {"J_obj": math.inf, "J_rec": math.nan, "J_total": math.inf}
        return f, g.reshape(-1), {"J_obj": f, "J_rec": math.nan, "J_total": f}

    res = lbfgs_minimize(fun, m_init, cfg, prob.bounds)
    m = res.x.reshape(shape)
    if prob.pde.kind == "poisson":
        u = pde.solve_poisson(m, prob.grid, tol=POISSON_TOL)
    elif prob.pde.kind == "wave":
        u = pde.solve_wave(m, prob.grid, prob.pde)[-1]
    else:
        u = pde.burgers_trajectory(prob.u0, m, prob.grid, prob.pde)[1:]
    return Phase2Result(m=m, u=u, history=res.history, result=res)
