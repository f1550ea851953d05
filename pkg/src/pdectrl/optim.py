"""L-BFGS with a strong Wolfe line search, optionally projected onto a box.

Objectives are callables ``fun(x) -> (f, g)`` or ``(f, g, info)`` on flat
float64 vectors; ``info`` (a dict of floats) is copied into the history.
"""
from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class LbfgsConfig:
    memory: int = 10
    lr: float = 1.0
    c1: float = 1e-4
    c2: float = 0.9
    max_iters: int = 100
    tolerance_change: float = 1e-9
    tolerance_grad: float = 0.0
    max_ls: int = 25

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError(f"need 0 < c1 < c2 < 1, got c1={self.c1}, c2={self.c2}")
        if self.memory < 1 or self.max_iters < 1 or self.max_ls < 1:
            raise ValueError("memory, max_iters and max_ls must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    history: list[dict] = field(default_factory=list)
    n_iter: int = 0
    n_eval: int = 0
    status: str = ""
    line_search_failed: bool = False
    wall_time: float = 0.0


def _call(fun, x):
    out = fun(x)
    if len(out) == 3:
        f, g, info = out
    else:
        (f, g), info = out, {}
    return float(f), np.asarray(g, dtype=np.float64).reshape(-1), dict(info)


def _cubic_min(a, fa, da, b, fb, db, lo, hi):
    """Minimiser of the cubic through two points with slopes, clamped to [lo, hi]."""
    d1 = da + db - 3 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc >= 0:
        d2 = math.sqrt(disc) * (1 if b > a else -1)
        t = b - (b - a) * ((db + d2 - d1) / (db - da + 2 * d2))
        if math.isfinite(t):
            return min(max(t, lo), hi)
    return 0.5 * (lo + hi)


def strong_wolfe(phi, f0, d0, alpha, c1=1e-4, c2=0.9, max_evals=25):
    """Step length satisfying the strong Wolfe conditions.

    ``phi(a)`` returns ``(f, slope, payload)``. Returns ``(alpha, f, payload,
    n_evals, ok)``; on failure the best Armijo point seen (if any) is returned
    with ``ok=False``, or ``alpha=0`` when none decreased the objective.
    """
    evals = 0
    best = (0.0, f0, None)

    def armijo(a, f):
        return f <= f0 + c1 * a * d0

    def note(a, f, p):
        nonlocal best
        if armijo(a, f) and f < best[1]:
            best = (a, f, p)

    a_prev, f_prev, d_prev = 0.0, f0, d0
    a = alpha
    bracket = None
    while evals < max_evals:
        f, d, p = phi(a)
        evals += 1
        note(a, f, p)
        if not math.isfinite(f) or not armijo(a, f) or (evals > 1 and f >= f_prev):
            bracket = (a_prev, f_prev, d_prev, a, f, d)
            break
        if abs(d) <= -c2 * d0:
            return a, f, p, evals, True
        if d >= 0:
            bracket = (a, f, d, a_prev, f_prev, d_prev)
            break
        a_prev, f_prev, d_prev = a, f, d
        a = 2.0 * a
    if bracket is None:
        return best[0], best[1], best[2], evals, False

    lo, flo, dlo, hi, fhi, dhi = bracket
    while evals < max_evals:
        left, right = min(lo, hi), max(lo, hi)
        width = right - left
        if width <= 1e-16 * max(1.0, right):
            break
        if math.isfinite(fhi) and math.isfinite(dhi):
            a = _cubic_min(lo, flo, dlo, hi, fhi, dhi, left + 0.1 * width, right - 0.1 * width)
        else:
            a = 0.5 * (lo + hi)
        f, d, p = phi(a)
        evals += 1
        note(a, f, p)
        if not math.isfinite(f) or not armijo(a, f) or f >= flo:
            hi, fhi, dhi = a, f, d
        else:
            if abs(d) <= -c2 * d0:
                return a, f, p, evals, True
            if d * (hi - lo) >= 0:
                hi, fhi, dhi = lo, flo, dlo
            lo, flo, dlo = a, f, d
    return best[0], best[1], best[2], evals, False


def lbfgs_minimize(fun, x0, cfg: LbfgsConfig | None = None, bounds=None) -> LbfgsResult:
    """Minimise ``fun`` from ``x0``.

    With ``bounds=(lower, upper)`` every trial point is clamped to the box
    and curvature pairs with ``s.y <= 0`` are discarded (projected L-BFGS).
    Stops when the largest coordinate change of an accepted step, or the
    objective decrease it brings, falls below ``cfg.tolerance_change``;
    when the projected-gradient max-norm reaches
    ``cfg.tolerance_grad``, or after ``cfg.max_iters`` iterations.
    """
    cfg = cfg or LbfgsConfig()
    t_start = time.perf_counter()
    shape = np.shape(x0)
    x = np.array(x0, dtype=np.float64).reshape(-1)
    lo = hi = None
    if bounds is not None:
        lo = np.broadcast_to(np.asarray(bounds[0], dtype=np.float64).reshape(-1) if np.ndim(bounds[0]) else bounds[0], x.shape)
        hi = np.broadcast_to(np.asarray(bounds[1], dtype=np.float64).reshape(-1) if np.ndim(bounds[1]) else bounds[1], x.shape)
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        x = np.clip(x, lo, hi)

    def project(v):
        return v if lo is None else np.clip(v, lo, hi)

    f, g, info = _call(fun, x)
    if not math.isfinite(f):
        raise ValueError("objective is not finite at the initial point")
    n_eval = 1
    history = [{"iter": 0, "f": f, "step_length": 0.0, "grad_norm": float(np.linalg.norm(g)),
                "wall_ms": 1e3 * (time.perf_counter() - t_start), **info}]
    pairs: deque = deque(maxlen=cfg.memory)
    status, ls_failed = "max_iters", False
    k = 0
    for k in range(1, cfg.max_iters + 1):
        pg = g.copy()
        if lo is not None:
            # coordinates pinned at a bound with the gradient pushing outward
            pg[(x <= lo) & (g > 0)] = 0.0
            pg[(x >= hi) & (g < 0)] = 0.0
        if np.max(np.abs(pg), initial=0.0) <= cfg.tolerance_grad:
            status = "gradient"
            k -= 1
            break
        d = _two_loop(pg, pairs)
        if lo is not None:
            d[(x <= lo) & (d < 0)] = 0.0
            d[(x >= hi) & (d > 0)] = 0.0
        slope = float(d @ g)
        if not slope < 0:
            pairs.clear()
            d = -pg
            slope = float(d @ g)
        if pairs:
            alpha0 = cfg.lr
        else:
            alpha0 = cfg.lr * min(1.0, 1.0 / np.sum(np.abs(pg)))

        def phi(a, x=x, d=d):
            xt = project(x + a * d)
            ft, gt, it = _call(fun, xt)
            return ft, float(gt @ d), (xt, gt, it)

        alpha, f_new, payload, evals, ok = strong_wolfe(phi, f, slope, alpha0, cfg.c1, cfg.c2, cfg.max_ls)
        n_eval += evals
        if payload is None:
            status, ls_failed = "line_search_failed", True
            break
        x_new, g_new, info = payload
        s, y = x_new - x, g_new - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / float(s @ y)))
        change = float(np.max(np.abs(s)))
        f_drop = abs(f - f_new)
        x, f, g = x_new, f_new, g_new
        history.append({"iter": k, "f": f, "step_length": float(alpha),
                        "grad_norm": float(np.linalg.norm(g)),
                        "wall_ms": 1e3 * (time.perf_counter() - t_start), **info})
        if not ok:
            status, ls_failed = "line_search_failed", True
            break
        if change < cfg.tolerance_change or f_drop < cfg.tolerance_change:
            status = "tolerance_change"
            break
    return LbfgsResult(x=x.reshape(shape), f=f, history=history, n_iter=k, n_eval=n_eval,
                       status=status, line_search_failed=ls_failed,
                       wall_time=time.perf_counter() - t_start)


def _two_loop(g, pairs):
    q = -g.copy()
    if not pairs:
        return q
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y, _ = pairs[-1]
    q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q
