"""Uniform-grid finite differences: operators, reference solvers, samplers.

Fields are plain numpy arrays laid out on a :class:`Grid` (row index = x for
2D problems). Dirichlet boundaries are stored explicitly and kept at zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class SolverError(RuntimeError):
    """A reference solver failed to converge or went unstable."""


@dataclass(frozen=True)
class Grid:
    ndim: int
    n: int
    domain: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.ndim not in (1, 2):
            raise ValueError(f"ndim must be 1 or 2, got {self.ndim}")
        if self.n < 3:
            raise ValueError(f"need at least 3 points per axis, got {self.n}")
        if not self.domain[1] > self.domain[0]:
            raise ValueError(f"empty domain {self.domain}")

    @property
    def h(self) -> float:
        a, b = self.domain
        return (b - a) / (self.n - 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.ndim

    @property
    def x(self) -> np.ndarray:
        return np.linspace(*self.domain, self.n)

    def mesh(self) -> tuple[np.ndarray, ...]:
        if self.ndim == 1:
            return (self.x,)
        return tuple(np.meshgrid(self.x, self.x, indexing="ij"))

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def norm(self, v: np.ndarray) -> float:
        """Discrete L2 norm, rectangle rule over every grid node."""
        return float(np.sqrt(self.h ** self.ndim * np.sum(np.asarray(v) ** 2)))


@dataclass(frozen=True)
class PdeSpec:
    """Physical and discretization parameters for one PDE family.

    ``nt`` (wave) and ``substeps`` (Burgers) are derived from the stability
    limits when left as ``None``.
    """

    kind: str
    # wave
    a: float = 1.0 / 3.0
    T: float = 5.0
    nt: int | None = None
    cfl: float = 0.5
    # burgers
    nu: float = 0.01
    dt_control: float = 0.1
    substeps: int | None = None
    u_cap: float = 2.0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in ("poisson", "wave", "burgers"):
            raise ValueError(f"unknown PDE kind {self.kind!r}")

    @classmethod
    def wave(cls, **kw) -> "PdeSpec":
        return cls(kind="wave", **kw)

    @classmethod
    def burgers(cls, **kw) -> "PdeSpec":
        kw.setdefault("T", 1.0)
        return cls(kind="burgers", **kw)

    @property
    def n_control(self) -> int:
        return int(round(self.T / self.dt_control))


def zero_boundary(v: np.ndarray) -> np.ndarray:
    out = np.array(v, dtype=np.float64, copy=True)
    if out.ndim == 1:
        out[[0, -1]] = 0.0
    else:
        out[[0, -1], :] = 0.0
        out[:, [0, -1]] = 0.0
    return out


# ---------------------------------------------------------------- Poisson

def laplacian_kernel(h: float) -> np.ndarray:
    return np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]) / h ** 2


def laplacian2d(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Five-point Laplacian on interior nodes; boundary entries are 0."""
    if grid.ndim != 2 or np.ndim(u) != 2:
        raise ValueError("laplacian2d needs a 2D field")
    out = np.zeros_like(u, dtype=np.float64)
    out[1:-1, 1:-1] = (
        u[2:, 1:-1] + u[:-2, 1:-1] + u[1:-1, 2:] + u[1:-1, :-2] - 4.0 * u[1:-1, 1:-1]
    ) / grid.h ** 2
    return out


def boundary_distance_mask(grid: Grid) -> np.ndarray:
    """Distance to the nearest boundary node, scaled to peak at 1."""
    idx = np.arange(grid.n)
    d1 = np.minimum(idx, grid.n - 1 - idx).astype(np.float64)
    if grid.ndim == 1:
        d = d1
    else:
        d = np.minimum.outer(d1, d1)
    return d / d.max()


def smooth_boundary_mask(grid: Grid) -> np.ndarray:
    """Product of ``4 t (1 - t)`` over the axes (``t`` the scaled coordinate).

    Vanishes on the boundary like the distance mask but is smooth, so the
    discrete Laplacian of a masked field has no ridges along the diagonals.
    """
    a, b = grid.domain
    t = (grid.x - a) / (b - a)
    w = 4.0 * t * (1.0 - t)
    w[[0, -1]] = 0.0
    if grid.ndim == 1:
        return w
    return np.multiply.outer(w, w)


MASKS = {"distance": boundary_distance_mask, "smooth": smooth_boundary_mask}


def solve_poisson(m: np.ndarray, grid: Grid, tol: float = 1e-10,
                  max_iter: int | None = None) -> np.ndarray:
    """Solve ``-Δu = m`` with ``u = 0`` on the boundary by conjugate gradients.

    Stops once ``||-Δ_h u - m||_2 <= tol * ||m||_2`` over interior nodes.
    """
    if grid.ndim != 2 or np.shape(m) != grid.shape:
        raise ValueError(f"expected a {grid.shape} field, got {np.shape(m)}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(m, dtype=np.float64)[1:-1, 1:-1].copy()
    bnorm = np.linalg.norm(b)
    u = grid.zeros()
    if bnorm == 0.0:
        return u
    h2 = grid.h ** 2
    k = grid.n - 2
    max_iter = max_iter or 10 * k * k
    pad = np.zeros((k + 2, k + 2))

    def apply(x):
        pad[1:-1, 1:-1] = x
        return (4.0 * x - pad[2:, 1:-1] - pad[:-2, 1:-1] - pad[1:-1, 2:] - pad[1:-1, :-2]) / h2

    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(np.sum(r * r))
    for _ in range(max_iter):
        if math.sqrt(rr) <= tol * bnorm:
            break
        Ap = apply(p)
        step = rr / float(np.sum(p * Ap))
        x += step * p
        r -= step * Ap
        rr_new = float(np.sum(r * r))
        p = r + (rr_new / rr) * p
        rr = rr_new
    else:
        # recursive residual can drift; confirm with the true one
        res = np.linalg.norm(b - apply(x))
        if res > tol * bnorm:
            raise SolverError(f"CG did not converge in {max_iter} iterations "
                              f"(relative residual {res / bnorm:.3e})")
    u[1:-1, 1:-1] = x
    return u


def poisson_target(grid: Grid) -> np.ndarray:
    """Desired state ``sin(πx) sin(πy) / (2π²)`` of the benchmark problem."""
    X, Y = grid.mesh()
    return np.sin(np.pi * X) * np.sin(np.pi * Y) / (2 * np.pi ** 2)


def poisson_optimal_control(grid: Grid, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Analytic optimum ``(m*, u*)`` for :func:`poisson_target`."""
    X, Y = grid.mesh()
    m = np.sin(np.pi * X) * np.sin(np.pi * Y) / (1.0 + 4.0 * alpha * np.pi ** 4)
    return m, m / (2 * np.pi ** 2)


# ---------------------------------------------------------------- wave

def wave_source(u):
    return u + u ** 3


def wave_source_prime(u):
    return 1.0 + 3.0 * u ** 2


def second_difference(u: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(u)
    out[..., 1:-1] = (u[..., 2:] - 2.0 * u[..., 1:-1] + u[..., :-2]) / h ** 2
    return out


def wave_time_step(grid: Grid, spec: PdeSpec) -> tuple[float, int]:
    """Time step and step count covering ``[0, T]`` exactly."""
    limit = grid.h / spec.a
    nt = spec.nt if spec.nt is not None else math.ceil(spec.T / (spec.cfl * limit))
    dt = spec.T / nt
    if dt > 0.5 * limit * (1 + 1e-12):
        raise ValueError(f"wave time step {dt:.4g} violates stability; need dt <= {0.5 * limit:.4g} "
                         f"(nt >= {math.ceil(spec.T / (0.5 * limit))})")
    return dt, nt


def solve_wave(m: np.ndarray, grid: Grid, spec: PdeSpec) -> np.ndarray:
    """Leapfrog solve of ``u_tt = a² u_xx - u - u³`` from rest with velocity ``m``.

    Returns every time slice, shape ``(nt + 1, n)``; the last row is ``u(T)``.
    """
    if grid.ndim != 1 or np.shape(m) != grid.shape:
        raise ValueError(f"expected a {grid.shape} field, got {np.shape(m)}")
    dt, nt = wave_time_step(grid, spec)
    a2, h = spec.a ** 2, grid.h
    traj = np.zeros((nt + 1, grid.n))
    u0 = traj[0]
    u1 = u0 + dt * np.asarray(m, dtype=np.float64) \
        + 0.5 * dt ** 2 * (a2 * second_difference(u0, h) - wave_source(u0))
    u1[[0, -1]] = 0.0
    traj[1] = u1
    for k in range(1, nt):
        uk = traj[k]
        nxt = 2.0 * uk - traj[k - 1] + dt ** 2 * (a2 * second_difference(uk, h) - wave_source(uk))
        nxt[[0, -1]] = 0.0
        traj[k + 1] = nxt
    return traj


# ---------------------------------------------------------------- Burgers

class InstabilityError(SolverError):
    pass


def burgers_substeps(grid: Grid, spec: PdeSpec) -> int:
    if spec.substeps is not None:
        return spec.substeps
    # combined upwind + diffusion limit; stricter than either bound alone
    dt_max = 0.9 / (2 * spec.nu / grid.h ** 2 + spec.u_cap / grid.h)
    return math.ceil(spec.dt_control / dt_max)


def burgers_rhs(u: np.ndarray, m: np.ndarray, h: float, nu: float) -> np.ndarray:
    """Upwind convection, central diffusion, plus forcing; zero at the ends."""
    out = np.zeros_like(u)
    c = u[1:-1]
    back = (c - u[:-2]) / h
    fwd = (u[2:] - c) / h
    conv = np.maximum(c, 0.0) * back + np.minimum(c, 0.0) * fwd
    diff = (u[2:] - 2.0 * c + u[:-2]) / h ** 2
    out[1:-1] = -conv + nu * diff + m[1:-1]
    return out


def burgers_step(u: np.ndarray, m: np.ndarray, grid: Grid, spec: PdeSpec,
                 return_substeps: bool = False):
    """Advance one control interval with explicit substeps."""
    if grid.ndim != 1 or np.shape(u) != grid.shape or np.shape(m) != grid.shape:
        raise ValueError(f"expected {grid.shape} fields, got {np.shape(u)} and {np.shape(m)}")
    ns = burgers_substeps(grid, spec)
    dt = spec.dt_control / ns
    cur = zero_boundary(u)
    m = np.asarray(m, dtype=np.float64)
    hist = [cur]
    for _ in range(ns):
        cur = cur + dt * burgers_rhs(cur, m, grid.h, spec.nu)
        if not np.all(np.isfinite(cur)) or np.max(np.abs(cur)) > 1e3:
            raise InstabilityError("Burgers solution blew up (|u| > 1e3)")
        if return_substeps:
            hist.append(cur)
    if return_substeps:
        return cur, np.array(hist)
    return cur


def burgers_trajectory(u0: np.ndarray, controls: np.ndarray, grid: Grid, spec: PdeSpec) -> np.ndarray:
    """States at every control time, shape ``(len(controls) + 1, n)``."""
    states = [zero_boundary(u0)]
    for m in controls:
        states.append(burgers_step(states[-1], m, grid, spec))
    return np.array(states)


# ---------------------------------------------------------------- samplers

def gaussian(x: np.ndarray, amp: float, center: float, width: float) -> np.ndarray:
    return amp * np.exp(-((x - center) ** 2) / (2 * width ** 2))


def sample_fourier_control(rng: np.random.Generator, grid: Grid, max_freq: int = 3,
                           coeffs: np.ndarray | None = None) -> np.ndarray:
    """Random sine series with frequencies ``1..max_freq`` in each direction."""
    if max_freq < 1:
        raise ValueError("max_freq must be >= 1")
    if coeffs is None:
        coeffs = rng.uniform(-1.0, 1.0, size=(max_freq, max_freq))
    k = np.arange(1, max_freq + 1)
    sx = np.sin(np.pi * np.outer(grid.x, k))
    m = sx @ coeffs @ sx.T
    return zero_boundary(m)


PULSE_RANGES = {"amp": (0.5, 2.0), "center": (0.2, 0.8), "width": (0.05, 0.15)}
BUMP_RANGES = {"amp": (-1.0, 1.0), "center": (0.2, 0.8), "width": (0.05, 0.15)}
BURGERS_INITIAL_RANGES = {"amp": (0.5, 1.0), "left": (0.2, 0.4), "right": (0.6, 0.8),
                          "width": (0.05, 0.1)}


def _draw(rng, ranges):
    return {k: rng.uniform(*v) for k, v in ranges.items()}


def sample_gaussian_pulse(rng: np.random.Generator, grid: Grid) -> np.ndarray:
    p = _draw(rng, PULSE_RANGES)
    return zero_boundary(gaussian(grid.x, p["amp"], p["center"], p["width"]))


def sample_gaussian_bumps(rng: np.random.Generator, grid: Grid, k: int | None = None) -> np.ndarray:
    """Sum of ``k`` signed Gaussians; ``k`` is drawn from 1..7 when omitted."""
    if k is None:
        k = int(rng.integers(1, 8))
    out = np.zeros(grid.n)
    for _ in range(k):
        p = _draw(rng, BUMP_RANGES)
        out += gaussian(grid.x, p["amp"], p["center"], p["width"])
    return zero_boundary(out)


def two_wave_profile(x: np.ndarray, amp_left: float, center_left: float,
                     amp_right: float, center_right: float, width: float) -> np.ndarray:
    """Positive bump on the left plus negative bump on the right."""
    return zero_boundary(gaussian(x, amp_left, center_left, width)
                         - gaussian(x, amp_right, center_right, width))


def burgers_initial(rng: np.random.Generator, grid: Grid) -> np.ndarray:
    r = BURGERS_INITIAL_RANGES
    return two_wave_profile(grid.x, rng.uniform(*r["amp"]), rng.uniform(*r["left"]),
                            rng.uniform(*r["amp"]), rng.uniform(*r["right"]),
                            rng.uniform(*r["width"]))
