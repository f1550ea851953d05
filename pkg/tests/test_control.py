import numpy as np
import pytest
import torch

from pdectrl import pde
from pdectrl import tensor as T
from pdectrl.bound import ExactPoissonSurrogate
from pdectrl.control import (HISTORY_COLUMNS, ControlProblem, frozen, j_total, phase2_steady, phase2_time,
                             true_objective, write_history_csv)
from pdectrl.optim import LbfgsConfig
from pdectrl.surrogate import OperatorSurrogate, TimeSurrogate


def test_problem_validation():
    g = pde.Grid(2, 9)
    with pytest.raises(ValueError, match="target"):
        ControlProblem(pde.PdeSpec("poisson"), g, np.zeros((9, 8)))
    with pytest.raises(ValueError, match=">= 0"):
        ControlProblem.poisson(n=9, alpha=-1)
    with pytest.raises(ValueError, match="m_a <= m_b"):
        ControlProblem.poisson(n=9, bounds=(np.ones(g.shape), np.zeros(g.shape)))
    with pytest.raises(ValueError, match="u0"):
        ControlProblem(pde.PdeSpec.burgers(), pde.Grid(1, 10), np.zeros(10))
    b = ControlProblem.burgers(np.zeros(10), np.zeros(10), n=10)
    assert b.control_shape == (10, 10) and b.objective_kind == "terminal+penalty"


def test_true_objective_at_analytic_optimum():
    # J(m*) = 1/2 ||S m* - u_d||^2 + alpha/2 ||m*||^2 with the continuum values
    prob = ControlProblem.poisson(n=65, alpha=1e-6)
    m, _ = pde.poisson_optimal_control(prob.grid, prob.alpha)
    a = prob.alpha
    c = 4 * a * np.pi ** 4 / (1 + 4 * a * np.pi ** 4)
    exact = 0.5 * (c / (2 * np.pi ** 2)) ** 2 / 4 + 0.5 * a / (1 + 4 * a * np.pi ** 4) ** 2 / 4
    assert true_objective(prob, m) == pytest.approx(exact, rel=1e-2)
    with pytest.raises(ValueError, match="shape"):
        true_objective(prob, np.zeros((3, 3)))


def test_exact_surrogate_phase2_matches_analytic():
    prob = ControlProblem.poisson(n=17, alpha=1e-3, lambda2=0.0)
    s = ExactPoissonSurrogate(prob.grid)
    m_star, _ = pde.poisson_optimal_control(prob.grid, prob.alpha)
    res = phase2_steady(s, prob, prob.grid.zeros(), LbfgsConfig(tolerance_change=1e-14))
    assert prob.grid.norm(res.m - m_star) / prob.grid.norm(m_star) < 1e-2
    assert true_objective(prob, res.m) <= true_objective(prob, m_star) * (1 + 1e-6)


def _tiny_surrogate(rng, n=8):
    g = pde.Grid(2, n)
    M = np.array([pde.sample_fourier_control(rng, g) for _ in range(6)])
    U = np.array([pde.solve_poisson(m, g) for m in M])
    return OperatorSurrogate(n=n, channels=(2, 2, 2, 2), latent_channels=2, epochs=2, batch_size=3).fit(M, U)


def test_j_total_gradient_and_frozen(rng):
    s = _tiny_surrogate(rng)
    prob = ControlProblem.poisson(n=8, alpha=1e-2, lambda2=0.3)
    m0 = pde.sample_fourier_control(rng, prob.grid)
    assert T.grad_check(lambda m: j_total(s, prob, m), m0) < 1e-4
    with frozen(s.network_):
        assert not any(p.requires_grad for p in s.network_.parameters())
    assert all(p.requires_grad for p in s.network_.parameters())


def test_phase2_steady_history(rng, tmp_path):
    s = _tiny_surrogate(rng)
    prob = ControlProblem.poisson(n=8, lambda2=0.01)
    before = [p.clone() for p in s.network_.parameters()]
    res = phase2_steady(s, prob, pde.sample_fourier_control(rng, prob.grid), LbfgsConfig(max_iters=10))
    assert all(torch.equal(a, b) for a, b in zip(before, s.network_.parameters()))
    tot = [r["J_total"] for r in res.history]
    assert all(b <= a for a, b in zip(tot, tot[1:]))
    assert all(r["J_total"] == pytest.approx(prob.obj_weight * r["J_obj"] + prob.lambda2 * r["J_rec"])
               for r in res.history)
    p = tmp_path / "h.csv"
    write_history_csv(res.history, p)
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(HISTORY_COLUMNS) and len(lines) == len(res.history) + 1
    with pytest.raises(ValueError, match="m_init"):
        phase2_steady(s, prob, np.zeros((4, 4)))
    with pytest.raises(RuntimeError, match="not fitted"):
        phase2_steady(OperatorSurrogate(n=8), prob, prob.grid.zeros())


def test_phase2_time_pads_and_decreases(rng):
    nx, n = 8, 3
    ts = TimeSurrogate(nx=nx, channels=(2, 2, 2, 2), kernel_size=3, epochs=1)
    ts.fit(rng.normal(size=(2, n, nx)), rng.normal(size=(2, n + 1, nx)))
    g = pde.Grid(1, nx + 2)
    spec = pde.PdeSpec.burgers(T=0.3)
    u0 = pde.zero_boundary(rng.normal(size=g.n))
    prob = ControlProblem.burgers(u0, pde.zero_boundary(rng.normal(size=g.n)), n=g.n, spec=spec)
    res = phase2_time(ts, prob, m_init=np.full((n, g.n), 0.1), cfg=LbfgsConfig(max_iters=5))
    assert res.m.shape == (n, g.n) and res.u.shape == (n, g.n)
    assert np.all(res.m[:, [0, -1]] == 0)
    tot = [r["J_total"] for r in res.history]
    assert all(b <= a for a, b in zip(tot, tot[1:]))
    with pytest.raises(ValueError, match="interior"):
        phase2_time(ts, ControlProblem.burgers(np.zeros(12), np.zeros(12), n=12, spec=spec),
                    m_init=np.zeros((n, 12)))
