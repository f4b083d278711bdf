"""Benchmark worlds: recursive newsvendor and recursive bipartite matching.

Each world has a true cost response ``c(x, v)`` that reacts to the decision
it produced. A sample's ground truth is the closed-loop equilibrium of
``x -> solve(c(x, v))``; ``c_true`` is the cost at that equilibrium and
``x_oracle`` the decision it induces.
"""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, ParseError, WorldModelDiverges
from .numerics import finite_difference_jacobian, spectral_radius_estimate
from .optlayer import build_matching_program, build_newsvendor_program, kkt_sensitivity, solve
from .predictor import PredictorGradients, predictor_forward, predictor_param_vjp
from .recursive import RecursiveLayer, StepRecord, fixed_point_solve

log = logging.getLogger(__name__)

ORACLE_TOL = 1e-8


@dataclass
class Sample:
    v: np.ndarray
    c_true: np.ndarray
    x_oracle: np.ndarray


@dataclass
class Dataset:
    samples: list
    split: dict = field(default_factory=lambda: {"train": [], "val": [], "test": []})

    def __len__(self):
        return len(self.samples)

    def subset(self, name):
        return [self.samples[i] for i in self.split[name]]

    @property
    def V(self):
        return np.array([s.v for s in self.samples])

    @property
    def C(self):
        return np.array([s.c_true for s in self.samples])

    @property
    def X(self):
        return np.array([s.x_oracle for s in self.samples])


def make_split(N, seed, ratios=(8, 1, 1)):
    """Seeded shuffle cut into train/val/test by ``ratios``."""
    order = np.random.default_rng([int(seed), 0x5EED]).permutation(N)
    total = sum(ratios)
    n_train = N * ratios[0] // total
    n_val = N * ratios[1] // total
    return {
        "train": sorted(order[:n_train].tolist()),
        "val": sorted(order[n_train:n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val:].tolist()),
    }


# --- newsvendor -------------------------------------------------------------

@dataclass
class TrueWorldModel:
    """``c(x) = alpha * (1 + 0.1 W v) - beta * tanh(x / s) + noise``, clipped at ``c_min``."""
    alpha: np.ndarray
    beta: np.ndarray
    W: np.ndarray
    noise_sigma: float = 0.0
    response_scale: float = 5.0
    c_min: float = 0.1

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        self.W = np.asarray(self.W, dtype=float)
        if np.any(self.alpha < 0) or np.any(self.beta < 0):
            raise ValueError("alpha and beta must be nonnegative")
        if self.W.shape[0] != self.alpha.size or self.beta.shape != self.alpha.shape:
            raise DimensionMismatch("alpha, beta and W rows must share the product count")
        if self.response_scale <= 0:
            raise ValueError("response_scale must be positive")

    @property
    def n(self):
        return self.alpha.size

    @property
    def d(self):
        return self.W.shape[1]

    def base(self, v):
        return self.alpha * (1.0 + 0.1 * (self.W @ v))

    def response(self, x, v, noise):
        raw = self.base(v) - self.beta * np.tanh(x / self.response_scale) + noise
        return np.maximum(raw, self.c_min), raw < self.c_min

    def response_jacobian(self, x, clipped):
        t = np.tanh(x / self.response_scale)
        d = -self.beta * (1.0 - t * t) / self.response_scale
        return np.diag(np.where(clipped, 0.0, d))

    def loop_gain(self, reg_eps):
        """Worst-case slope of the loop on unconstrained coordinates."""
        return float(np.max(self.beta) / (2.0 * reg_eps * self.response_scale))

    def to_dict(self):
        return {"alpha": self.alpha.tolist(), "beta": self.beta.tolist(), "W": self.W.tolist(),
                "noise_sigma": self.noise_sigma, "response_scale": self.response_scale,
                "c_min": self.c_min}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def default_newsvendor_world(n, d=5, rho_target=0.5, reg_eps=1e-2, noise_sigma=0.005,
                             response_scale=5.0, seed=0):
    """World whose loop gain on free coordinates is ``rho_target``."""
    rng = np.random.default_rng([int(seed), 0xA1FA])
    alpha = 1.0 + 0.1 * rng.uniform(size=n)
    W = rng.standard_normal((n, d)) / math.sqrt(d)
    beta = np.full(n, rho_target * 2.0 * reg_eps * response_scale)
    return TrueWorldModel(alpha, beta, W, noise_sigma, response_scale)


def default_newsvendor_program(n, reg_eps=1e-2):
    """Box ``0 <= x <= 10`` with total order quantity in ``[3n, 6n]``."""
    return build_newsvendor_program(n, 3.0 * n, 6.0 * n, np.zeros(n), np.full(n, 10.0),
                                    reg_eps)


class TrueLoop(RecursiveLayer):
    """The world's own closed loop for one sample: ``x -> solve(c(x, v))``."""

    def __init__(self, world, program, noise):
        self.world = world
        self.program = program
        self.noise = noise
        self.n = program.n

    def step(self, x, v):
        c, clipped = self.world.response(x, v, self.noise)
        sol = solve(self.program, c)
        return StepRecord(x_in=np.asarray(x, dtype=float), x_out=sol.x, c=c, solution=sol,
                          cache={"clipped": clipped})

    def jacobian(self, record):
        J_c = self.world.response_jacobian(record.x_in, record.cache["clipped"])
        return kkt_sensitivity(self.program, record.solution, check_degenerate=False) @ J_c


def _loop_rho(loop, eq, v):
    """Contraction estimate at the equilibrium.

    A degenerate active set leaves the KKT matrix singular; the slope of the
    loop is then measured by central differences instead.
    """
    if np.isfinite(eq.rho_hat):
        return eq.rho_hat
    J = finite_difference_jacobian(lambda x: loop(x, v), eq.x_out, h=1e-6)
    return spectral_radius_estimate(J).rho


def _closed_loop_sample(loop, v, x0, index):
    eq = fixed_point_solve(loop, x0, v, tol=ORACLE_TOL, max_iter=1000, damping=1.0)
    if not eq.converged and not eq.rho_hat < 1.0:
        raise WorldModelDiverges(
            f"sample {index}: true loop is not a contraction (rho_hat={eq.rho_hat:.3f})")
    if not eq.converged:
        eq = fixed_point_solve(loop, eq.x_star, v, tol=ORACLE_TOL, max_iter=2000, damping=0.5)
    if eq.converged:
        eq.rho_hat = _loop_rho(loop, eq, v)
    if not eq.converged or not eq.rho_hat < 1.0:
        raise WorldModelDiverges(
            f"sample {index}: closed loop failed (residual {eq.residual:.2e}, "
            f"rho_hat={eq.rho_hat:.3f})")
    return Sample(v=v, c_true=eq.record.c, x_oracle=eq.record.x_out)


def generate_newsvendor_dataset(n, d, N, world, program, seed, ratios=(8, 1, 1)):
    """Draw ``v ~ U[0,1]^d`` per sample and solve the true closed loop."""
    if program.problem_tag != "newsvendor" or program.n != n:
        raise DimensionMismatch(f"need a newsvendor program with n={n}")
    if world.n != n or world.d != d:
        raise DimensionMismatch("world model dimensions disagree with (n, d)")
    x0 = program.center()
    samples, n_clipped = [], 0
    for i in range(N):
        rng = np.random.default_rng([int(seed), i])
        v = rng.uniform(size=d)
        noise = world.noise_sigma * rng.standard_normal(n)
        loop = TrueLoop(world, program, noise)
        s = _closed_loop_sample(loop, v, x0, i)
        n_clipped += int(np.sum(world.response(s.x_oracle, v, noise)[1]))
        samples.append(s)
    if n_clipped:
        log.info("clipped %d prices at c_min=%g", n_clipped, world.c_min)
    return Dataset(samples, make_split(N, seed, ratios))


# --- matching ---------------------------------------------------------------

@dataclass
class MatchingWorld:
    """Generalised pickup cost ``c_ij = r_i + r_j`` for drivers ``i`` and riders ``j``.

    Features per sample: driver position and urgency, rider position, peak
    and fatigue, each in ``[0, 1]``. Regrets grow with the pickup distance
    and, through ``feedback * tanh(x_ij / s)``, with how much of the pair is
    already assigned.
    """
    players: int
    pickup: float = 1.0
    feedback: float = 0.01
    response_scale: float = 1.0
    noise_sigma: float = 0.0
    base_cost: float = 0.2

    @property
    def n(self):
        return self.players ** 2

    @property
    def d(self):
        return 5 * self.players

    def unpack(self, v):
        p = self.players
        return v[:p], v[p:2 * p], v[2 * p:3 * p], v[3 * p:4 * p], v[4 * p:5 * p]

    def base(self, v):
        pos_d, urg, pos_r, peak, fat = self.unpack(v)
        dist = np.abs(pos_d[:, None] - pos_r[None, :])
        r_driver = self.pickup * dist * (1.0 + urg[:, None])
        r_rider = self.pickup * dist * (1.0 + peak[None, :]) + self.base_cost
        return (r_driver + r_rider).ravel()

    def fatigue_weight(self, v):
        fat = self.unpack(v)[4]
        return np.tile(1.0 + fat, self.players)

    def response(self, x, v, noise):
        w = self.feedback * self.fatigue_weight(v)
        return self.base(v) + w * np.tanh(x / self.response_scale) + noise, None

    def response_jacobian(self, x, v):
        t = np.tanh(x / self.response_scale)
        w = self.feedback * self.fatigue_weight(v)
        return np.diag(w * (1.0 - t * t) / self.response_scale)

    def to_dict(self):
        return {"players": self.players, "pickup": self.pickup, "feedback": self.feedback,
                "response_scale": self.response_scale, "noise_sigma": self.noise_sigma,
                "base_cost": self.base_cost}


class MatchingLoop(TrueLoop):
    def step(self, x, v):
        c, _ = self.world.response(x, v, self.noise)
        sol = solve(self.program, c)
        return StepRecord(x_in=np.asarray(x, dtype=float), x_out=sol.x, c=c, solution=sol,
                          cache={"v": v})

    def jacobian(self, record):
        J_c = self.world.response_jacobian(record.x_in, record.cache["v"])
        return kkt_sensitivity(self.program, record.solution, check_degenerate=False) @ J_c


def generate_matching_dataset(players, d, N, world, program, seed, ratios=(8, 1, 1)):
    """Uniform synthetic covariates; ground truth from the true matching loop."""
    if program.problem_tag != "matching" or program.meta["players"] != players:
        raise DimensionMismatch(f"need a matching program with players={players}")
    if d != world.d:
        raise DimensionMismatch(f"matching features have dimension {world.d}, got {d}")
    x0 = program.center()
    samples = []
    for i in range(N):
        rng = np.random.default_rng([int(seed), i])
        v = rng.uniform(size=d)
        noise = world.noise_sigma * rng.standard_normal(world.n)
        samples.append(_closed_loop_sample(MatchingLoop(world, program, noise), v, x0, i))
    return Dataset(samples, make_split(N, seed, ratios))


# --- CSV --------------------------------------------------------------------

def save_dataset_csv(dataset, path):
    """Write ``v_*`` then ``c_*`` columns, one sample per line, exact float text."""
    d = dataset.samples[0].v.size if dataset.samples else 0
    n = dataset.samples[0].c_true.size if dataset.samples else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"v_{j}" for j in range(d)] + [f"c_{j}" for j in range(n)])
        for s in dataset.samples:
            w.writerow([repr(float(a)) for a in s.v] + [repr(float(a)) for a in s.c_true])


def load_dataset_csv(path, program, seed=0, d=None, ratios=(8, 1, 1)):
    """Parse a dataset CSV and solve for each sample's oracle decision."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("missing header", row=1)
    header = [h.strip() for h in rows[0]]
    v_cols = [h for h in header if h.startswith("v_")]
    c_cols = [h for h in header if h.startswith("c_")]
    if header != v_cols + c_cols:
        raise ParseError("header must list v_* columns then c_* columns", row=1)
    for prefix, cols in (("v", v_cols), ("c", c_cols)):
        if cols != [f"{prefix}_{j}" for j in range(len(cols))]:
            raise ParseError(f"{prefix}_* columns must be numbered from 0", row=1)
    if len(c_cols) != program.n:
        raise DimensionMismatch(f"CSV has {len(c_cols)} cost columns, program has {program.n}")
    if d is not None and len(v_cols) != d:
        raise DimensionMismatch(f"CSV has {len(v_cols)} feature columns, expected {d}")

    dv = len(v_cols)
    samples = []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DimensionMismatch(f"row {r} has {len(row)} fields, header has {len(header)}")
        vals = np.empty(len(row))
        for j, text in enumerate(row):
            try:
                vals[j] = float(text)
            except ValueError:
                raise ParseError(f"row {r}, column {header[j]}: not a number: {text!r}",
                                 row=r, column=header[j]) from None
            if not math.isfinite(vals[j]):
                raise ParseError(f"row {r}, column {header[j]}: non-finite value",
                                 row=r, column=header[j])
        c = vals[dv:]
        samples.append(Sample(v=vals[:dv], c_true=c, x_oracle=solve(program, c).x))
    return Dataset(samples, make_split(len(samples), seed, ratios))


# --- metrics, losses and baselines -------------------------------------------

def decision_rmse(x_pred, x_oracle):
    """Root mean square error over all samples and coordinates."""
    if len(x_pred) != len(x_oracle):
        raise DimensionMismatch(f"{len(x_pred)} predictions vs {len(x_oracle)} oracles")
    if not len(x_pred):
        return 0.0
    a = [np.asarray(x, dtype=float) for x in x_pred]
    b = [np.asarray(x, dtype=float) for x in x_oracle]
    if any(p.shape != q.shape for p, q in zip(a, b)):
        raise DimensionMismatch("decision vectors differ in shape")
    sq = sum(float(np.sum((p - q) ** 2)) for p, q in zip(a, b))
    return math.sqrt(sq / sum(p.size for p in a))


def regret_loss(program, x_hat, c_true, x_true=None):
    """Regret ``g(x_hat, c) - g(x*(c), c)`` and its gradient with respect to ``x_hat``.

    ``x_hat`` is the decision induced by the prediction. ``x_true`` may be
    passed to avoid re-solving for the oracle.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    c_true = np.asarray(c_true, dtype=float)
    if x_hat.shape != c_true.shape:
        raise DimensionMismatch("decision and cost vectors differ in length")
    if x_true is None:
        x_true = solve(program, c_true).x
    value = program.objective(x_hat, c_true) - program.objective(x_true, c_true)
    return value, program.objective_grad(x_hat, c_true)


def decision_mse_loss(x_hat, x_oracle):
    diff = np.asarray(x_hat, dtype=float) - np.asarray(x_oracle, dtype=float)
    return float(diff @ diff), 2.0 * diff


LOSS_MODES = ("regret", "decision_mse")


def decision_loss(program, x_hat, sample, loss_mode):
    if loss_mode == "regret":
        return regret_loss(program, x_hat, sample.c_true, sample.x_oracle)
    if loss_mode == "decision_mse":
        return decision_mse_loss(x_hat, sample.x_oracle)
    raise ValueError(f"unknown loss mode {loss_mode!r}")


@dataclass
class StepResult:
    grads: PredictorGradients
    loss: float
    x: np.ndarray
    c_hat: np.ndarray


def masked_forward(params, sample, decision_input=None):
    """Predictor evaluated with its decision input zero-masked."""
    x_in = np.zeros(params.n_decision)
    return predictor_forward(params, x_in, sample.v)


def pto_baseline_step(params, sample, program, loss_mode="mse", decision_input=None):
    """Prediction-MSE gradient ``|c_hat - c_true|^2`` on exogenous features only.

    ``decision_input`` is accepted and ignored: the decision slot is masked.
    """
    c_hat, tape = masked_forward(params, sample, decision_input)
    diff = c_hat - sample.c_true
    grads = predictor_param_vjp(params, tape, 2.0 * diff)
    return StepResult(grads, float(diff @ diff), None, c_hat)


def sdfl_baseline_step(params, sample, program, loss_mode="regret", decision_input=None):
    """One prediction and one solve, differentiated through the KKT system."""
    c_hat, tape = masked_forward(params, sample, decision_input)
    sol = solve(program, c_hat)
    loss, g_x = decision_loss(program, sol.x, sample, loss_mode)
    w = kkt_sensitivity(program, sol).T @ g_x
    return StepResult(predictor_param_vjp(params, tape, w), float(loss), sol.x, c_hat)


def newsvendor_setup(n, d=5, rho_target=0.5, reg_eps=1e-2, noise_sigma=0.005, seed=0,
                     response_scale=5.0):
    """Program plus world for the standard recursive newsvendor benchmark."""
    program = default_newsvendor_program(n, reg_eps)
    world = default_newsvendor_world(n, d, rho_target, reg_eps, noise_sigma, response_scale,
                                     seed=seed)
    return program, world


def matching_setup(players, S=None, reg_eps=1e-2, rho_target=0.5, noise_sigma=0.0):
    S = 0.5 * players if S is None else S
    program = build_matching_program(players, S, reg_eps)
    # cost spreads of a few reg_eps keep optima fractional; at unit scale almost
    # every optimum is a degenerate vertex and no sample is differentiable
    pickup = 4.0 * reg_eps
    world = MatchingWorld(players, pickup=pickup, base_cost=0.2 * pickup,
                          feedback=rho_target * 2.0 * reg_eps, noise_sigma=noise_sigma)
    return program, world
