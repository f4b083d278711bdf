import numpy as np
import pytest

from rdfl.errors import Infeasible, InfeasibleSpec, SingularKKT
from rdfl.numerics import finite_difference_jacobian
from rdfl.optlayer import (ConvexProgram, build_matching_program, build_newsvendor_program,
                           degenerate_rows, kkt_matrix, kkt_sensitivity, program_from_json,
                           program_to_json, solve)


def box(n, lo=-10.0, hi=10.0, reg_eps=1.0):
    G = np.vstack([np.eye(n), -np.eye(n)])
    h = np.concatenate([np.full(n, hi), np.full(n, -lo)])
    return ConvexProgram(n, reg_eps, G, h)


def assert_kkt(program, c, sol, tol=1e-7):
    r = sol.residuals(program, c)
    assert program.is_feasible(sol.x, tol)
    assert sol.duals.min() >= -1e-9
    assert r["complementarity"] <= tol
    assert r["stationarity"] <= tol
    assert sol.kkt_residual <= tol


def test_box_interior_optimum():
    sol = solve(box(1), np.array([2.0]))
    np.testing.assert_allclose(sol.x, [-1.0], atol=1e-9)


def test_newsvendor_cheapest_saturates():
    prog = build_newsvendor_program(2, 1.0, 2.0, [0, 0], [1, 1], reg_eps=1e-6)
    c = np.array([1.0, 2.0])
    sol = solve(prog, c)
    np.testing.assert_allclose(sol.x, [1.0, 0.0], atol=1e-6)
    assert sol.objective_value == pytest.approx(1.0, abs=1e-5)
    assert_kkt(prog, c, sol)


def test_matching_two_players_diagonal():
    prog = build_matching_program(2, 2.0, reg_eps=1e-4)
    q = np.array([1.0, 2.0, 3.0, 1.0])
    sol = solve(prog, q)
    np.testing.assert_allclose(sol.x, [1, 0, 0, 1], atol=1e-6)
    assert_kkt(prog, q, sol)


def test_newsvendor_witness_is_feasible():
    prog = build_newsvendor_program(2, 1.0, 2.0, [0, 0], [1, 1])
    assert prog.is_feasible(np.array([0.5, 0.5]))


@pytest.mark.parametrize("n,dim", [(10, 32), (50, 152), (100, 302)])
def test_newsvendor_kkt_dimension(n, dim):
    prog = build_newsvendor_program(n, 3 * n, 6 * n, np.zeros(n), np.full(n, 10.0))
    assert prog.kkt_dim == dim
    assert prog.n_ineq == 2 + 2 * n


@pytest.mark.parametrize("p,dim", [(4, 57), (15, 706), (30, 2761)])
def test_matching_kkt_dimension(p, dim):
    prog = build_matching_program(p, p / 2)
    assert prog.kkt_dim == dim
    assert prog.n == p * p


def test_matching_kkt_matrix_shape():
    prog = build_matching_program(4, 2.0)
    sol = solve(prog, np.linspace(0.1, 1.0, 16))
    assert kkt_matrix(prog, sol).shape == (57, 57)


@pytest.mark.parametrize("args", [
    (2, 3.0, 1.0, [0, 0], [1, 1]),  # T1 > T2
    (2, 1.0, 2.0, [1, 0], [0, 1]),  # s1 > s2
    (2, 5.0, 6.0, [0, 0], [1, 1]),  # box cannot reach T1
])
def test_newsvendor_contradictory_bounds(args):
    with pytest.raises(InfeasibleSpec):
        build_newsvendor_program(*args)


def test_matching_bad_service_level():
    with pytest.raises(InfeasibleSpec):
        build_matching_program(3, 4.0)


def test_generic_infeasible_and_unbounded_specs():
    with pytest.raises(InfeasibleSpec):
        ConvexProgram(1, 1.0, np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]))
    with pytest.raises(InfeasibleSpec):
        ConvexProgram(1, 1.0, np.array([[1.0]]), np.array([1.0]))


def test_solve_detects_infeasible_unchecked_program():
    prog = ConvexProgram(1, 1.0, np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]), check=False)
    with pytest.raises(Infeasible):
        solve(prog, np.array([0.0]))


def test_solve_rejects_bad_cost():
    with pytest.raises(ValueError):
        solve(box(2), np.ones(3))


@pytest.mark.parametrize("seed", range(20))
def test_solution_invariants_and_argmin(seed):
    rng = np.random.default_rng(seed)
    n = 6
    prog = build_newsvendor_program(n, 2.0 * n, 5.0 * n, np.zeros(n), np.full(n, 8.0), 1e-2)
    c = rng.uniform(-1.0, 2.0, size=n)
    sol = solve(prog, c)
    assert_kkt(prog, c, sol)
    best = prog.objective(sol.x, c)
    pts = rng.uniform(0, 8, size=(4000, n))
    pts = pts[(pts.sum(1) >= 2 * n) & (pts.sum(1) <= 5 * n)][:100]
    assert len(pts) == 100
    assert all(best <= prog.objective(p, c) + 1e-6 for p in pts)


@pytest.mark.parametrize("seed", range(5))
def test_matching_solution_invariants(seed):
    rng = np.random.default_rng(seed)
    prog = build_matching_program(4, 2.0, 1e-2)
    c = rng.uniform(0.1, 1.0, size=16)
    assert_kkt(prog, c, solve(prog, c))


def test_interior_sensitivity_closed_form():
    for eps in (1.0, 1e-2):
        prog = box(3, reg_eps=eps)
        sol = solve(prog, np.array([0.01, -0.02, 0.005]))
        np.testing.assert_allclose(kkt_sensitivity(prog, sol), -np.eye(3) / (2 * eps),
                                   rtol=1e-6, atol=1e-9)


def test_sensitivity_scales_with_regulariser():
    c = np.array([0.01, -0.02])
    J1 = kkt_sensitivity(box(2, reg_eps=0.5), solve(box(2, reg_eps=0.5), c))
    J2 = kkt_sensitivity(box(2, reg_eps=1.0), solve(box(2, reg_eps=1.0), c))
    np.testing.assert_allclose(J2, 0.5 * J1, rtol=1e-6)


def test_pinned_coordinate_has_zero_row():
    prog = box(2, lo=0.0, hi=1.0, reg_eps=1.0)
    sol = solve(prog, np.array([-5.0, -0.4]))
    assert sol.x[0] == pytest.approx(1.0)
    J = kkt_sensitivity(prog, sol)
    np.testing.assert_allclose(J[0], 0.0, atol=1e-8)
    assert J[1, 1] == pytest.approx(-0.5, rel=1e-6)


def test_degenerate_active_set_raises():
    prog = box(1, lo=0.0, hi=1.0, reg_eps=1.0)
    sol = solve(prog, np.array([-2.0]))  # unconstrained optimum sits exactly on the bound
    assert degenerate_rows(sol).size
    with pytest.raises(SingularKKT):
        kkt_sensitivity(prog, sol)


def fd_cases(count=30, n=4):
    rng = np.random.default_rng(11)
    prog = build_newsvendor_program(n, 2.0 * n, 8.0 * n, np.zeros(n), np.full(n, 10.0), 1e-2)
    found = 0
    while found < count:
        c = rng.uniform(-0.4, 0.2, size=n)
        sol = solve(prog, c)
        if np.min(np.maximum(sol.duals, sol.slack)) > 1e-4 and not degenerate_rows(sol).size:
            found += 1
            yield prog, c, sol


def test_sensitivity_matches_finite_differences():
    worst = 0.0
    for prog, c, sol in fd_cases():
        J = kkt_sensitivity(prog, sol)
        J_fd = finite_difference_jacobian(lambda y: solve(prog, y).x, c, h=1e-6)
        worst = max(worst, np.abs(J - J_fd).max() / max(np.abs(J_fd).max(), 1.0))
    assert worst <= 1e-3


def test_program_json_roundtrip():
    for prog in (build_newsvendor_program(3, 2.0, 5.0, [0, 0, 0], [2, 2, 2], 0.05),
                 build_matching_program(3, 1.5, 0.02), box(2)):
        back = program_from_json(program_to_json(prog))
        np.testing.assert_array_equal(back.ineq_G, prog.ineq_G)
        np.testing.assert_array_equal(back.ineq_h, prog.ineq_h)
        assert back.reg_eps == prog.reg_eps
        assert back.problem_tag == prog.problem_tag


@pytest.mark.parametrize("prog", [
    build_newsvendor_program(5, 10.0, 30.0, np.zeros(5), np.full(5, 10.0)),
    build_matching_program(3, 1.5),
    box(3),
])
def test_center_is_strictly_feasible(prog):
    x = prog.center()
    assert np.all(prog.ineq_G @ x < prog.ineq_h)


def test_implied_tight_rows_keep_sensitivity():
    # x_00 = 1 makes its row sum, column sum and upper bound tight at once
    prog = build_matching_program(2, 1.0, reg_eps=1e-2)
    c = np.array([-1.0, 0.5, 0.5, 0.6])
    sol = solve(prog, c)
    np.testing.assert_allclose(sol.x, [1, 0, 0, 0], atol=1e-9)
    J = kkt_sensitivity(prog, sol)
    J_fd = finite_difference_jacobian(lambda y: solve(prog, y).x, c, h=1e-6)
    np.testing.assert_allclose(J, J_fd, atol=1e-6)


def test_dependent_active_rows_still_polish():
    prog = build_matching_program(3, 1.5, reg_eps=1e-2)
    c = np.array([-1.0, 1.0, 1.0, 1.0, -0.2, 1.0, 1.0, 1.0, -0.2])
    assert_kkt(prog, c, solve(prog, c))
