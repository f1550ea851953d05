import numpy as np
import pytest

from pdectrl import adjoint, pde
from pdectrl.control import ControlProblem, true_objective
from pdectrl.optim import LbfgsConfig


def directional_gap(prob, m, d, eps=1e-6):
    """Relative gap between the adjoint directional derivative and central FD."""
    _, g = adjoint.objective_and_grad(prob, m)
    fd = (true_objective(prob, m + eps * d) - true_objective(prob, m - eps * d)) / (2 * eps)
    return abs(float(np.sum(g * d)) - fd) / max(abs(fd), 1e-300)


def small_wave(rng, n=32):
    g = pde.Grid(1, n)
    spec = pde.PdeSpec.wave(T=1.0)
    target = pde.solve_wave(pde.sample_gaussian_pulse(rng, g), g, spec)[-1]
    return ControlProblem.wave(target, n=n, spec=spec, alpha=1e-3)


def small_burgers(rng, n=34):
    g = pde.Grid(1, n)
    spec = pde.PdeSpec.burgers(T=0.3)
    u0 = pde.burgers_initial(rng, g)
    force = np.repeat(pde.sample_gaussian_bumps(rng, g)[None], spec.n_control, axis=0)
    target = pde.burgers_trajectory(u0, force, g, spec)[-1]
    return ControlProblem.burgers(u0, target, n=n, spec=spec)


def test_poisson_directional(rng):
    prob = ControlProblem.poisson(n=17, alpha=1e-3)
    m = pde.sample_fourier_control(rng, prob.grid)
    for _ in range(3):
        d = pde.zero_boundary(rng.normal(size=prob.grid.shape))
        assert directional_gap(prob, m, d, eps=1e-3) < 1e-6


def test_wave_directional(rng):
    prob = small_wave(rng)
    m = pde.sample_gaussian_pulse(rng, prob.grid)
    for _ in range(3):
        d = pde.zero_boundary(rng.normal(size=prob.grid.shape))
        assert directional_gap(prob, m, d) < 1e-6


def test_burgers_directional(rng):
    prob = small_burgers(rng)
    m = 0.1 * rng.normal(size=prob.control_shape)
    m[:, [0, -1]] = 0.0
    for _ in range(3):
        d = rng.normal(size=prob.control_shape)
        d[:, [0, -1]] = 0.0
        assert directional_gap(prob, m, d) < 1e-5


def test_poisson_gradient_at_optimum_is_second_order():
    norms = []
    for n in (17, 33, 65):
        prob = ControlProblem.poisson(n=n, alpha=1e-3)
        m_star, _ = pde.poisson_optimal_control(prob.grid, prob.alpha)
        norms.append(prob.grid.norm(adjoint.poisson_grad(m_star, prob)))
    rates = np.log2(np.array(norms[:-1]) / np.array(norms[1:]))
    assert np.all(rates > 1.8)


def test_adjoint_control_recovers_poisson_optimum():
    prob = ControlProblem.poisson(n=17, alpha=1e-3)
    m_star, _ = pde.poisson_optimal_control(prob.grid, prob.alpha)
    res = adjoint.adjoint_control(prob, prob.grid.zeros(), LbfgsConfig(tolerance_change=1e-14))
    assert prob.grid.norm(res.m - m_star) / prob.grid.norm(m_star) < 1e-2
    fs = [r["J_obj"] for r in res.history]
    assert all(b <= a for a, b in zip(fs, fs[1:]))


def test_adjoint_shape_checks(rng):
    prob = ControlProblem.poisson(n=9)
    with pytest.raises(ValueError, match="shape"):
        adjoint.adjoint_control(prob, np.zeros((9, 8)))
    with pytest.raises(ValueError, match="expected a wave"):
        adjoint.wave_grad(np.zeros((9, 9)), prob)
