"""Regularised linear programs and their KKT sensitivities.

A :class:`ConvexProgram` is ``min_x c.x + reg_eps |x|^2  s.t.  G x <= h``
where only ``c`` changes between solves. :func:`solve` returns primal and
dual solutions from an interior-point method; :func:`kkt_sensitivity`
differentiates the optimum with respect to ``c`` by linearising
stationarity and complementary slackness::

    M = [[2 eps I,     G^T     ],
         [diag(mu) G,  diag(Gx - h)]]

and keeping the first ``n`` rows of ``-M^{-1} [I; 0]``.
"""

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from . import _ipm
from .errors import Infeasible, InfeasibleSpec, MaxIterations, SingularKKT, SingularMatrix
from .numerics import lu_solve

TAGS = ("newsvendor", "matching", "generic")

SOLVER_TOL = 1e-10
SOLVER_MAX_ITER = 100
# A row whose dual and slack are within this ratio of each other has no
# strict complementarity winner: the active set is degenerate there.
DEGENERACY_RATIO = 1e-3
DEGENERACY_FLOOR = 1e-9
ACCEPT_TOL = 1e-7


@dataclass
class ConvexProgram:
    n: int
    reg_eps: float
    ineq_G: np.ndarray
    ineq_h: np.ndarray
    problem_tag: str = "generic"
    meta: dict = field(default_factory=dict)
    check: bool = True

    def __post_init__(self):
        self.ineq_G = np.ascontiguousarray(self.ineq_G, dtype=float).reshape(-1, self.n)
        self.ineq_h = np.ascontiguousarray(self.ineq_h, dtype=float)
        if self.ineq_h.shape != (self.ineq_G.shape[0],):
            raise InfeasibleSpec(
                f"G has {self.ineq_G.shape[0]} rows but h has shape {self.ineq_h.shape}"
            )
        if self.reg_eps < 0:
            raise ValueError("reg_eps must be non-negative")
        if self.problem_tag not in TAGS:
            raise ValueError(f"problem_tag must be one of {TAGS}")
        if not (np.isfinite(self.ineq_G).all() and np.isfinite(self.ineq_h).all()):
            raise InfeasibleSpec("constraint data must be finite")
        if self.check:
            _check_feasible_bounded(self.ineq_G, self.ineq_h)

    @property
    def n_ineq(self):
        return self.ineq_G.shape[0]

    @property
    def kkt_dim(self):
        return self.n + self.n_ineq

    def objective(self, x, c):
        x = np.asarray(x, dtype=float)
        return float(np.dot(c, x) + self.reg_eps * np.dot(x, x))

    def objective_grad(self, x, c):
        return np.asarray(c, dtype=float) + 2.0 * self.reg_eps * np.asarray(x, dtype=float)

    def is_feasible(self, x, tol=1e-7):
        return bool(np.all(self.ineq_G @ x <= self.ineq_h + tol))

    def center(self):
        """Deterministic interior start point for the recursive loop.

        Newsvendor: box midpoint moved along the all-ones direction into the
        total-quantity band. Matching: the uniform fractional assignment
        scaled to satisfy the service lower bound. Generic: Chebyshev centre.
        """
        if getattr(self, "_center", None) is None:
            self._center = self._compute_center()
        return self._center.copy()

    def _compute_center(self):
        if self.problem_tag == "newsvendor":
            s1 = np.asarray(self.meta["s1"], dtype=float)
            s2 = np.asarray(self.meta["s2"], dtype=float)
            T1, T2 = self.meta["T1"], self.meta["T2"]
            target = 0.5 * (T1 + T2)
            lo, hi = 0.0, 1.0
            # bisection on x(t) = s1 + t (s2 - s1), whose total is monotone in t
            total = lambda t: float(np.sum(s1 + t * (s2 - s1)))
            if total(1.0) <= target:
                return s2.copy()
            if total(0.0) >= target:
                return s1.copy()
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if total(mid) < target:
                    lo = mid
                else:
                    hi = mid
            return s1 + 0.5 * (lo + hi) * (s2 - s1)
        if self.problem_tag == "matching":
            p, S = self.meta["players"], self.meta["S"]
            # total between S and p, every row/column sum below one
            return np.full(p * p, 0.5 * (S / p ** 2 + 1.0 / p))
        return _chebyshev_center(self.ineq_G, self.ineq_h)


@dataclass
class PrimalDualSolution:
    x: np.ndarray
    duals: np.ndarray
    slack: np.ndarray
    objective_value: float
    kkt_residual: float
    iterations: int = 0
    mu: float = 0.0

    def residuals(self, program, c):
        """Stationarity, feasibility and complementarity residuals (inf-norm)."""
        G, h = program.ineq_G, program.ineq_h
        gap = G @ self.x - h
        stat = c + 2.0 * program.reg_eps * self.x + self.duals @ G
        return {
            "stationarity": float(np.abs(stat).max()),
            "feasibility": max(0.0, float(gap.max())),
            "dual_feasibility": max(0.0, -float(self.duals.min())),
            "complementarity": float(np.abs(self.duals * gap).max()),
        }


def _check_feasible_bounded(G, h):
    m, n = G.shape
    if m == 0:
        raise InfeasibleSpec("a program without constraints has an unbounded region")
    res = scipy.optimize.linprog(np.zeros(n), A_ub=G, b_ub=h, bounds=[(None, None)] * n,
                                 method="highs")
    if res.status == 2:
        raise InfeasibleSpec("constraints G x <= h admit no point")
    if res.status != 0:
        raise InfeasibleSpec(f"feasibility phase failed: {res.message}")
    # Bounded iff G has full column rank and some y > 0 has G^T y = 0.
    if np.linalg.matrix_rank(G) < n:
        raise InfeasibleSpec("feasible region is unbounded (G lacks full column rank)")
    res = scipy.optimize.linprog(np.ones(m), A_eq=G.T, b_eq=np.zeros(n),
                                 bounds=[(1.0, None)] * m, method="highs")
    if res.status != 0:
        raise InfeasibleSpec("feasible region is unbounded")


def _chebyshev_center(G, h):
    m, n = G.shape
    norms = np.linalg.norm(G, axis=1)
    res = scipy.optimize.linprog(
        np.r_[np.zeros(n), -1.0],
        A_ub=np.column_stack([G, norms]), b_ub=h,
        bounds=[(None, None)] * n + [(0.0, None)], method="highs",
    )
    if res.status != 0:
        raise Infeasible(f"no interior point: {res.message}")
    return res.x[:n]


def build_newsvendor_program(n, T1, T2, s1, s2, reg_eps=1e-2):
    """Order-quantity program: total in ``[T1, T2]`` and per-product box ``[s1, s2]``.

    Rows are ordered ``-1.x <= -T1``, ``1.x <= T2``, ``-x <= -s1``, ``x <= s2``.
    """
    s1 = np.broadcast_to(np.asarray(s1, dtype=float), (n,)).copy()
    s2 = np.broadcast_to(np.asarray(s2, dtype=float), (n,)).copy()
    if T1 > T2:
        raise InfeasibleSpec(f"T1={T1} exceeds T2={T2}")
    if np.any(s1 > s2):
        raise InfeasibleSpec("s1 exceeds s2 for some product")
    if s1.sum() > T2 or s2.sum() < T1:
        raise InfeasibleSpec("per-product bounds cannot meet the total-quantity band")
    ones = np.ones((1, n))
    eye = np.eye(n)
    G = np.vstack([-ones, ones, -eye, eye])
    h = np.concatenate([[-T1, T2], -s1, s2])
    meta = {"T1": float(T1), "T2": float(T2), "s1": s1.tolist(), "s2": s2.tolist()}
    return ConvexProgram(n, float(reg_eps), G, h, "newsvendor", meta, check=False)


def matching_operators(players):
    """Column-sum and row-sum operators on the row-major flattened assignment."""
    p = players
    A = np.tile(np.eye(p), (1, p))
    B = np.kron(np.eye(p), np.ones((1, p)))
    return A, B


def build_matching_program(players, S, reg_eps=1e-2):
    """Relaxed bipartite matching over ``z = vec(x)`` (row-major, drivers by riders).

    Rows: ``A z <= 1`` (riders), ``B z <= 1`` (drivers), ``-1.z <= -S``,
    ``-z <= 0``, ``z <= 1``.
    """
    if players < 1:
        raise InfeasibleSpec("need at least one player on each side")
    if not 0 <= S <= players:
        raise InfeasibleSpec(f"service level S={S} outside [0, {players}]")
    if reg_eps <= 0:
        raise ValueError("matching programs need reg_eps > 0")
    p = players
    n = p * p
    A, B = matching_operators(p)
    G = np.vstack([A, B, -np.ones((1, n)), -np.eye(n), np.eye(n)])
    h = np.concatenate([np.ones(2 * p), [-S], np.zeros(n), np.ones(n)])
    meta = {"players": int(p), "S": float(S)}
    return ConvexProgram(n, float(reg_eps), G, h, "matching", meta, check=False)


def program_to_dict(program):
    if program.problem_tag == "newsvendor":
        return {"tag": "newsvendor", "n": program.n, **program.meta, "reg_eps": program.reg_eps}
    if program.problem_tag == "matching":
        return {"tag": "matching", "players": program.meta["players"],
                "S": program.meta["S"], "reg_eps": program.reg_eps}
    return {"tag": "generic", "n": program.n, "reg_eps": program.reg_eps,
            "G": program.ineq_G.tolist(), "h": program.ineq_h.tolist()}


def program_from_dict(spec):
    tag = spec.get("tag")
    if tag == "newsvendor":
        return build_newsvendor_program(spec["n"], spec["T1"], spec["T2"], spec["s1"],
                                        spec["s2"], spec.get("reg_eps", 1e-2))
    if tag == "matching":
        return build_matching_program(spec["players"], spec["S"], spec.get("reg_eps", 1e-2))
    if tag == "generic":
        return ConvexProgram(spec["n"], spec["reg_eps"], np.array(spec["G"]),
                             np.array(spec["h"]))
    raise ValueError(f"unknown program tag {tag!r}")


def program_to_json(program):
    return json.dumps(program_to_dict(program))


def program_from_json(text):
    return program_from_dict(json.loads(text))


def solve(program, c, tol=SOLVER_TOL, max_iter=SOLVER_MAX_ITER, polish=True):
    """Minimise ``c.x + reg_eps |x|^2`` over the program's polytope.

    A Mehrotra interior point identifies the active set; with ``polish`` the
    answer is then recomputed exactly from the equality-constrained KKT
    system on that set (falling back to the interior-point iterate when the
    active set cannot be confirmed).
    """
    c = np.ascontiguousarray(c, dtype=float)
    if c.shape != (program.n,):
        raise ValueError(f"cost vector must have length {program.n}, got {c.shape}")
    if not np.isfinite(c).all():
        raise ValueError("cost vector has non-finite entries")
    G, h = program.ineq_G, program.ineq_h
    x, z, s, iters, status, mu = _ipm.ipm_kernel(G, h, c, 2.0 * program.reg_eps, tol, max_iter)

    sol = PrimalDualSolution(
        x=x, duals=z, slack=s,
        objective_value=program.objective(x, c),
        kkt_residual=0.0, iterations=int(iters), mu=float(mu),
    )
    res = sol.residuals(program, c)
    sol.kkt_residual = max(res.values())
    if polish:
        # The interior point leaves x accurate only to about sqrt(mu) on rows
        # that are close to degenerate (or stalls there); finish with an exact
        # solve on the identified active set.
        polished = _polish(program, c, sol)
        if polished is not None:
            polished.iterations = int(iters)
            return polished
    if status != _ipm.STATUS_OPTIMAL:
        if sol.kkt_residual > ACCEPT_TOL:
            if res["feasibility"] > 1e-6:
                raise Infeasible("interior point found no feasible point")
            raise MaxIterations(
                f"interior point stopped after {iters} iterations "
                f"(mu={mu:.2e}, kkt residual={sol.kkt_residual:.2e})",
                solution=sol,
            )
    return sol


def _polish(program, c, sol, max_rounds=10):
    """Exact solve of the equality-constrained QP on a guessed active set.

    Starts from rows with ``dual > slack`` and repairs the guess by adding
    violated rows and dropping rows with negative multipliers. Rows left with
    a zero multiplier (typical when the guess holds dependent rows) are then
    pruned if the smaller set is still consistent. Returns ``None`` if no
    consistent active set is found or the result is less accurate than the
    interior-point iterate.
    """
    scale = 1.0 + float(np.abs(program.ineq_h).max(initial=0.0))
    active = sol.duals > sol.slack
    seen = set()
    for _ in range(max_rounds):
        key = active.tobytes()
        if key in seen:
            return None
        seen.add(key)
        out = _equality_qp(program, c, active)
        if out is None:
            return None
        x, z, slack = out
        violated = slack < -1e-12 * scale
        negative = z < 0.0
        if not violated.any() and not negative.any():
            break
        active = (active | violated) & ~negative
    else:
        return None
    idle = active & (z <= 1e-14 * scale)
    if idle.any():
        out = _equality_qp(program, c, active & ~idle)
        if out is not None and not (out[2] < -1e-12 * scale).any() and not (out[1] < 0.0).any():
            x, z, slack = out
    out = PrimalDualSolution(x=x, duals=z, slack=np.maximum(slack, 0.0),
                             objective_value=program.objective(x, c), kkt_residual=0.0,
                             mu=0.0)
    out.kkt_residual = max(out.residuals(program, c).values())
    if out.kkt_residual > max(sol.kkt_residual, ACCEPT_TOL):
        return None
    return out


def _equality_qp(program, c, active):
    """Primal point, multipliers and slacks with the ``active`` rows held tight.

    Returns ``None`` when the active rows cannot all hold with equality.
    """
    n = program.n
    G, h = program.ineq_G, program.ineq_h
    rows = np.flatnonzero(active)
    k = rows.size
    K = np.zeros((n + k, n + k))
    K[:n, :n] = 2.0 * program.reg_eps * np.eye(n)
    K[:n, n:] = G[rows].T
    K[n:, :n] = G[rows]
    rhs = np.concatenate([-c, h[rows]])
    try:
        sol_vec = lu_solve(K, rhs)
    except SingularMatrix:
        # dependent active rows: x is still unique, the multipliers are not
        sol_vec = np.linalg.lstsq(K, rhs, rcond=None)[0]
        if np.abs(G[rows] @ sol_vec[:n] - h[rows]).max() > 1e-9 * (1.0 + np.abs(h).max()):
            return None
    x = sol_vec[:n]
    z = np.zeros(program.n_ineq)
    z[rows] = sol_vec[n:]
    if k and z[rows].min() < 0.0 and np.linalg.matrix_rank(G[rows]) < k:
        z[rows] = scipy.optimize.nnls(G[rows].T, -c - 2.0 * program.reg_eps * x)[0]
    slack = h - G @ x
    slack[rows] = 0.0
    return x, z, slack


def kkt_matrix(program, sol, rows=None):
    """Assemble the linearised stationarity/complementarity matrix ``M``.

    ``rows`` restricts the constraint block to a subset of inequality rows.
    """
    n = program.n
    rows = np.arange(program.n_ineq) if rows is None else np.asarray(rows)
    G = program.ineq_G[rows]
    m = rows.size
    M = np.empty((n + m, n + m))
    M[:n, :n] = 2.0 * program.reg_eps * np.eye(n)
    M[:n, n:] = G.T
    M[n:, :n] = sol.duals[rows, None] * G
    M[n:, n:] = np.diag(-sol.slack[rows])
    return M


def redundant_rows(program, sol, rows):
    """Subset of ``rows`` that are tight with zero multiplier and implied.

    A tight row whose normal lies in the span of the rows carrying positive
    multipliers does not change the active face (an entry at 1 makes its row
    sum, column sum and upper bound all tight in a matching), so it can be
    left out of ``M`` without changing ``dx*/dc``.
    """
    mu, s = np.abs(sol.duals), np.abs(sol.slack)
    scale = max(1.0, float(mu.max(initial=0.0)), float(s.max(initial=0.0)))
    zero = np.maximum(mu, s) <= DEGENERACY_FLOOR * scale
    strong = np.flatnonzero((mu > s) & ~zero)
    G = program.ineq_G
    out = []
    for r in rows:
        if not zero[r]:
            continue
        g = G[r]
        if strong.size:
            coef = np.linalg.lstsq(G[strong].T, g, rcond=None)[0]
            if np.abs(G[strong].T @ coef - g).max() <= 1e-9 * (1.0 + np.abs(g).max()):
                out.append(r)
    return np.array(out, dtype=int)


def degenerate_rows(sol, ratio=DEGENERACY_RATIO, floor=DEGENERACY_FLOOR):
    """Indices of rows where neither dual nor slack clearly dominates.

    A row is degenerate when the smaller of (dual, slack) exceeds ``ratio``
    times the larger, or when both vanish below ``floor`` times the overall
    scale (exact active-set solutions put one of them at zero).
    """
    mu, s = np.abs(sol.duals), np.abs(sol.slack)
    big = np.maximum(mu, s)
    small = np.minimum(mu, s)
    scale = max(1.0, float(mu.max(initial=0.0)), float(s.max(initial=0.0)))
    return np.flatnonzero((small > ratio * big) | (big <= floor * scale))


def kkt_sensitivity(program, sol, check_degenerate=True):
    """Jacobian ``dx*/dc`` (``n x n``) at a primal-dual solution.

    ``check_degenerate=False`` skips the active-set test; only meant for
    guards such as contraction estimates, never for training gradients.
    """
    bad = degenerate_rows(sol) if check_degenerate else ()
    if len(bad):
        rest = np.setdiff1d(bad, redundant_rows(program, sol, bad))
        if rest.size:
            raise SingularKKT(
                f"degenerate active set at constraint rows {rest[:5].tolist()}"
                f" (dual {sol.duals[rest[0]]:.2e}, slack {sol.slack[rest[0]]:.2e})"
            )
        return face_sensitivity(program, sol)
    n = program.n
    M = kkt_matrix(program, sol)
    rhs = np.zeros((M.shape[0], n))
    rhs[:n] = np.eye(n)
    try:
        X = lu_solve(M, rhs)
    except SingularMatrix as exc:
        if not check_degenerate:
            raise SingularKKT(str(exc)) from exc
        # dependent rows that all carry positive multipliers
        return face_sensitivity(program, sol)
    return -X[:n]


def face_sensitivity(program, sol):
    """``dx*/dc = -P / (2 reg_eps)`` with ``P`` the projector onto the active face.

    Valid when the multipliers put the cost in the relative interior of the
    normal cone, which is what the degeneracy screen establishes; ``M`` is
    singular there whenever the tight rows are linearly dependent.
    """
    mu, s = np.abs(sol.duals), np.abs(sol.slack)
    scale = max(1.0, float(mu.max(initial=0.0)), float(s.max(initial=0.0)))
    A = program.ineq_G[s <= DEGENERACY_FLOOR * scale]
    P = np.eye(program.n)
    if A.shape[0]:
        P -= np.linalg.pinv(A) @ A
    return -P / (2.0 * program.reg_eps)
