"""Prediction/optimisation feedback loops and their two gradient schemes.

A recursive layer maps a decision to the next decision,
``x_next = Phi(x, v) = G(F(x, v))``. Training differentiates either a
K-step unrolling of the loop (reverse accumulation through every step) or
the loop's fixed point (one adjoint solve against ``I - dPhi/dx``).
"""

import json
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import NotConverged, SingularKKT, UnstableEquilibrium
from .numerics import lu_solve, spectral_radius_estimate
from .optlayer import kkt_sensitivity, solve
from .predictor import (PredictorGradients, predictor_forward, predictor_input_jacobian,
                        predictor_param_vjp)

# instrumentation: how often each forward scheme ran (scheme-isolation checks)
call_counts = Counter()

UNSTABLE_MARGIN = 1e-6


@dataclass
class StepRecord:
    """Everything one application of the layer needs for its backward pass."""
    x_in: np.ndarray
    x_out: np.ndarray
    c: np.ndarray
    tape: object = None
    solution: object = None
    cache: dict = field(default_factory=dict)


class RecursiveLayer:
    """Contract shared by production layers and test doubles.

    Subclasses implement :meth:`step`, :meth:`jacobian` and
    :meth:`param_vjp`; gradients may be any object supporting ``+`` and
    scalar ``*`` (numpy arrays or :class:`PredictorGradients`).
    """

    n: int

    def step(self, x, v) -> StepRecord:
        raise NotImplementedError

    def jacobian(self, record) -> np.ndarray:
        raise NotImplementedError

    def param_vjp(self, record, upstream):
        raise NotImplementedError

    def zero_grad(self):
        raise NotImplementedError

    def __call__(self, x, v=None):
        return self.step(x, v).x_out


class AffineLayer(RecursiveLayer):
    """``Phi(x) = A x + theta`` with ``A`` a scalar or a square matrix."""

    def __init__(self, A, theta):
        self.theta = np.atleast_1d(np.asarray(theta, dtype=float))
        self.n = self.theta.size
        A = np.asarray(A, dtype=float)
        self.A = A * np.eye(self.n) if A.ndim == 0 else A

    def step(self, x, v=None):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = self.A @ x + self.theta
        return StepRecord(x_in=x, x_out=out, c=out)

    def jacobian(self, record):
        return self.A

    def param_vjp(self, record, upstream):
        return np.asarray(upstream, dtype=float).copy()

    def zero_grad(self):
        return np.zeros(self.n)

    def with_theta(self, theta):
        return AffineLayer(self.A, theta)


class DecisionLayer(RecursiveLayer):
    """``G(F_theta(x, v))`` for an MLP predictor and a regularised LP.

    With ``feedback=False`` the predictor's decision input is held at zero,
    which gives the sequential (non-recursive) baselines.
    """

    def __init__(self, params, program, feedback=True, solver_tol=None):
        self.params = params
        self.program = program
        self.feedback = feedback
        self.n = program.n
        self._solve_kw = {} if solver_tol is None else {"tol": solver_tol}

    def step(self, x, v):
        x = np.asarray(x, dtype=float)
        x_feed = x if self.feedback else np.zeros_like(x)
        c, tape = predictor_forward(self.params, x_feed, v)
        sol = solve(self.program, c, **self._solve_kw)
        return StepRecord(x_in=x, x_out=sol.x, c=c, tape=tape, solution=sol)

    def solver_jacobian(self, record):
        if "J_G" not in record.cache:
            record.cache["J_G"] = kkt_sensitivity(self.program, record.solution)
        return record.cache["J_G"]

    def jacobian(self, record):
        if "J" not in record.cache:
            if self.feedback:
                J_F = predictor_input_jacobian(self.params, record.tape)
                record.cache["J"] = self.solver_jacobian(record) @ J_F
            else:
                record.cache["J"] = np.zeros((self.n, self.n))
        return record.cache["J"]

    def param_vjp(self, record, upstream):
        w = self.solver_jacobian(record).T @ upstream
        return predictor_param_vjp(self.params, record.tape, w)

    def zero_grad(self):
        return PredictorGradients.zeros_like(self.params)


@dataclass
class UnrollTrace:
    x_seq: list
    c_seq: list
    records: list
    residuals: list

    @property
    def K(self):
        return len(self.records)

    @property
    def tapes(self):
        return [r.tape for r in self.records]

    def jacobians(self, layer):
        return [layer.jacobian(r) for r in self.records]


@dataclass
class EquilibriumResult:
    x_star: np.ndarray
    c_star: np.ndarray
    x_out: np.ndarray
    residual: float
    iterations: int
    converged: bool
    rho_hat: float
    residuals: list
    record: StepRecord = None


def unroll_forward(layer, x0, v, K):
    """Apply the layer ``K`` times from ``x0``, keeping every step's record."""
    if K < 0:
        raise ValueError("K must be non-negative")
    call_counts["unroll_forward"] += 1
    if K > 1:
        call_counts["unroll_forward:K>1"] += 1
    x = np.asarray(x0, dtype=float)
    x_seq, c_seq, records, residuals = [x], [], [], []
    for i in range(1, K + 1):
        try:
            rec = layer.step(x, v)
        except Exception as exc:
            exc.unroll_step = i
            if hasattr(exc, "add_note"):
                exc.add_note(f"during unrolling step {i} of {K}")
            raise
        records.append(rec)
        c_seq.append(rec.c)
        residuals.append(float(np.max(np.abs(rec.x_out - x))))
        x = rec.x_out
        x_seq.append(x)
    return UnrollTrace(x_seq, c_seq, records, residuals)


def unroll_gradient(layer, trace, loss_grad):
    """Reverse accumulation through every unrolled step.

    The adjoint starts at ``dL/dx_K``; each step contributes its parameter
    VJP and passes ``a^T dPhi/dx`` to the step before it.
    """
    if trace.K < 1:
        raise ValueError("cannot differentiate an empty unroll")
    a = np.asarray(loss_grad, dtype=float)
    grad = layer.zero_grad()
    for i in range(trace.K, 0, -1):
        rec = trace.records[i - 1]
        grad = grad + layer.param_vjp(rec, a)
        if i > 1:
            a = layer.jacobian(rec).T @ a
    return grad


def fixed_point_solve(layer, x0, v, tol=0.2, max_iter=100, damping=0.5, strict=False,
                      rho_iters=200):
    """Damped Picard iteration ``x <- (1 - b) x + b Phi(x)`` until ``|x - Phi(x)| <= tol``.

    The spectral radius of the loop Jacobian is estimated at the final
    iterate. Non-convergence returns ``converged=False`` unless ``strict``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    call_counts["fixed_point_solve"] += 1
    x = np.asarray(x0, dtype=float)
    residuals = []
    converged = False
    rec = None
    it = 0
    for it in range(max_iter + 1):
        rec = layer.step(x, v)
        r = float(np.max(np.abs(rec.x_out - x)))
        residuals.append(r)
        if r <= tol:
            converged = True
            break
        if it == max_iter or not np.isfinite(r):
            break
        x = (1.0 - damping) * x + damping * rec.x_out

    try:
        rho = spectral_radius_estimate(layer.jacobian(rec), max_iters=rho_iters).rho
    except SingularKKT:
        rho = np.nan
    result = EquilibriumResult(
        x_star=x, c_star=rec.c, x_out=rec.x_out, residual=residuals[-1], iterations=it,
        converged=converged, rho_hat=rho, residuals=residuals, record=rec,
    )
    if strict and not converged:
        raise NotConverged(
            f"fixed point not reached in {max_iter} iterations "
            f"(residual {residuals[-1]:.3e}, rho_hat {rho:.3f})", result=result)
    return result


def implicit_gradient(layer, eq, v, loss_grad, fallback_to_unroll=False, fallback_K=10):
    """Gradient at the equilibrium: solve ``u^T (I - J) = dL/dx`` then one VJP.

    ``v`` is only used by the optional unrolling fallback.
    """
    if not eq.converged:
        raise NotConverged("implicit gradient needs a converged equilibrium", result=eq)
    if not np.isfinite(eq.rho_hat) or eq.rho_hat >= 1.0 - UNSTABLE_MARGIN:
        if fallback_to_unroll:
            warnings.warn(f"rho_hat={eq.rho_hat:.3f}; falling back to unrolling")
            trace = unroll_forward(layer, eq.x_star, v, fallback_K)
            return unroll_gradient(layer, trace, loss_grad)
        raise UnstableEquilibrium(
            f"loop Jacobian has spectral radius estimate {eq.rho_hat:.4f} >= 1",
            rho_hat=eq.rho_hat)
    J = layer.jacobian(eq.record)
    u = lu_solve((np.eye(J.shape[0]) - J).T, np.asarray(loss_grad, dtype=float))
    return layer.param_vjp(eq.record, u)


def adjoint_vector(layer, eq, loss_grad):
    """The adjoint ``u`` solving ``u^T (I - J) = loss_grad^T`` at ``eq``."""
    J = layer.jacobian(eq.record)
    return lu_solve((np.eye(J.shape[0]) - J).T, np.asarray(loss_grad, dtype=float))


def neumann_truncated_inverse(J, K):
    """Partial Neumann sum ``I + J + ... + J^K`` (Horner form)."""
    J = np.asarray(J, dtype=float)
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise ValueError("J must be square")
    eye = np.eye(J.shape[0])
    S = eye.copy()
    for _ in range(K):
        S = eye + J @ S
    return S


def as_vector(grad):
    if isinstance(grad, np.ndarray):
        return grad.ravel()
    return grad.to_vector()


@dataclass
class EquivalenceReport:
    rho_hat: float
    entries: list
    fitted_ratio: float
    implicit_norm: float = 0.0

    def to_dict(self):
        return {
            "rho_hat": self.rho_hat,
            "entries": [dict(e) for e in self.entries],
            "fitted_ratio": self.fitted_ratio,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def fit_decay_ratio(Ks, errors, floor=1e-13):
    """Geometric rate from a least-squares fit of ``log e_K`` against ``K``."""
    Ks = np.asarray(Ks, dtype=float)
    errors = np.asarray(errors, dtype=float)
    keep = errors > floor
    if keep.sum() < 2:
        return float("nan")
    slope = np.polyfit(Ks[keep], np.log(errors[keep]), 1)[0]
    return float(np.exp(slope))


def gradient_equivalence_report(layer, x0, v, loss_grad, K_list, tol=1e-10, max_iter=2000,
                                damping=1.0):
    """Compare unrolled gradients for each ``K`` with the implicit gradient."""
    eq = fixed_point_solve(layer, x0, v, tol=tol, max_iter=max_iter, damping=damping)
    g_imp = as_vector(implicit_gradient(layer, eq, v, loss_grad))
    norm = float(np.linalg.norm(g_imp))
    entries = []
    for K in K_list:
        trace = unroll_forward(layer, x0, v, K)
        g_exp = as_vector(unroll_gradient(layer, trace, loss_grad))
        gap = float(np.linalg.norm(g_exp - g_imp))
        entries.append({"K": int(K), "rel_err": gap / norm if norm > 0 else gap,
                        "abs_err": gap})
    ratio = fit_decay_ratio([e["K"] for e in entries], [e["rel_err"] for e in entries])
    return EquivalenceReport(float(eq.rho_hat), entries, ratio, norm)
