"""Empirical check of the surrogate control-error bound.

The bound ``||m* - m_h*|| < C a^-1 (1 + a^-1/2) ||u_d|| eps`` has a constant
``C`` that cannot be computed, so the verifier samples the operator error
``eps`` and a Lipschitz estimate, and gates on the monotone trend of the
control error as the surrogate improves.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import pde
from . import tensor as T
from .control import ControlProblem, phase2_steady
from .optim import LbfgsConfig


def _solver(s):
    """Batch map ``m -> u`` from an estimator or a callable."""
    if hasattr(s, "predict"):
        return s.predict
    if callable(s):
        return lambda M: np.array([s(m) for m in M])
    raise TypeError(f"cannot evaluate {type(s).__name__} as an operator")


@dataclass
class OperatorError:
    max: float
    mean: float


def estimate_operator_error(s, oracle, samples, grid: pde.Grid) -> OperatorError:
    """Sampled ``||(S - S_h)(m/||m||)||`` over the given controls."""
    M = np.asarray(samples, dtype=np.float64)
    norms = np.array([grid.norm(m) for m in M])
    if len(M) == 0 or np.any(norms == 0):
        raise ValueError("samples must be non-empty and nonzero")
    unit = M / norms.reshape((-1,) + (1,) * grid.ndim)
    approx = _solver(s)(unit)
    exact = _solver(oracle)(unit)
    errs = np.array([grid.norm(a - b) for a, b in zip(approx, exact)])
    return OperatorError(float(errs.max()), float(errs.mean()))


def estimate_lipschitz(s, pairs, grid: pde.Grid) -> float:
    """Largest ``||S_h m1 - S_h m2|| / ||m1 - m2||`` over the pairs."""
    pairs = [(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)) for a, b in pairs]
    pairs = [(a, b) for a, b in pairs if grid.norm(a - b) > 0]
    if not pairs:
        return 0.0
    A = np.array([a for a, _ in pairs])
    B = np.array([b for _, b in pairs])
    f = _solver(s)
    ua, ub = f(A), f(B)
    return float(max(grid.norm(x - y) / grid.norm(a - b) for x, y, a, b in zip(ua, ub, A, B)))


def bound_rhs(C: float, alpha: float, ud_norm: float, eps: float) -> float:
    if alpha <= 0:
        raise ValueError("the bound needs alpha > 0")
    return C / alpha * (1.0 + alpha ** -0.5) * ud_norm * eps


@dataclass
class BoundEstimate:
    eps: float
    eps_mean: float
    lipschitz: float
    control_error: float
    bound_rhs: float
    label: str = ""

    @property
    def within_bound(self) -> bool:
        return self.control_error <= self.bound_rhs


@dataclass
class BoundReport:
    estimates: list[BoundEstimate]
    eps_decreasing: bool
    inversions: int
    trend_ok: bool
    bound_holds: bool

    @property
    def passed(self) -> bool:
        return self.eps_decreasing and self.trend_ok


def count_inversions(values) -> int:
    """Adjacent increases in a sequence that should be non-increasing."""
    return int(sum(b > a for a, b in zip(values, values[1:])))


def verify_bound(checkpoints, prob: ControlProblem, m_init, samples, pairs,
                 cfg: LbfgsConfig | None = None, labels=None) -> BoundReport:
    """Run Phase 2 per checkpoint and collect the bound ingredients.

    ``checkpoints`` are fitted surrogates ordered by increasing training.
    """
    if len(checkpoints) < 3:
        raise ValueError(f"need at least 3 checkpoints, got {len(checkpoints)}")
    if prob.pde.kind != "poisson":
        raise ValueError("the bound verifier runs on the Poisson problem")
    g = prob.grid
    m_star, _ = pde.poisson_optimal_control(g, prob.alpha)
    ud_norm = g.norm(prob.u_d)
    oracle = ExactPoissonSurrogate(g)
    labels = labels or [str(i) for i in range(len(checkpoints))]
    out = []
    for s, label in zip(checkpoints, labels):
        err = estimate_operator_error(s, oracle, samples, g)
        lip = estimate_lipschitz(s, pairs, g)
        res = phase2_steady(s, prob, m_init, cfg)
        ce = g.norm(res.m - m_star)
        out.append(BoundEstimate(err.max, err.mean, lip, ce,
                                 bound_rhs(max(lip, 1.0), prob.alpha, ud_norm, err.max), label))
    eps = [e.eps for e in out]
    ce = [e.control_error for e in out]
    inv = count_inversions(ce)
    return BoundReport(out, all(b < a for a, b in zip(eps, eps[1:])), inv, inv <= 1,
                       all(e.within_bound for e in out))


class _ExactPoissonNet(nn.Module):
    def __init__(self, grid: pde.Grid):
        super().__init__()
        k = grid.n - 2
        h2 = grid.h ** 2
        lap = (np.diag(np.full(k, 2.0)) - np.diag(np.ones(k - 1), 1) - np.diag(np.ones(k - 1), -1)) / h2
        A = np.kron(lap, np.eye(k)) + np.kron(np.eye(k), lap)
        self.register_buffer("inv", T.as_tensor(np.linalg.inv(A)))
        self.n = grid.n

    def solve(self, m):
        k = self.n - 2
        inner = m[..., 1:-1, 1:-1].reshape(m.shape[:-2] + (k * k,))
        u = (inner @ self.inv.T).reshape(m.shape[:-2] + (k, k))
        return torch.nn.functional.pad(u, (1, 1, 1, 1))

    def reconstruct(self, m):
        return m


class ExactPoissonSurrogate:
    """The finite-difference solution operator behind the surrogate interface.

    Uses a dense inverse, so keep ``grid.n`` small (<= 40). Reconstruction
    is the identity, making ``J_rec`` vanish.
    """

    def __init__(self, grid: pde.Grid):
        if grid.ndim != 2:
            raise ValueError("exact surrogate is for the 2D Poisson problem")
        self.grid = grid
        self._net = None

    @property
    def network_(self):
        if self._net is None:
            self._net = _ExactPoissonNet(self.grid)
        return self._net

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.grid.n <= 40:
            with torch.no_grad():
                return self.network_.solve(T.as_tensor(X)).numpy()
        return np.array([pde.solve_poisson(m, self.grid, tol=1e-12) for m in X])
