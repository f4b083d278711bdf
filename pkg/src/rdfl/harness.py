"""Run configuration, training loops, artifacts and experiment suites."""

import csv
import dataclasses
import json
import logging
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NotConverged, SingularKKT, TrainingAborted, UnstableEquilibrium
from .numerics import finite_difference_gradient
from .optlayer import build_newsvendor_program, degenerate_rows, solve
from .predictor import AdamState, adam_step, init_mlp, predictor_forward, save_checkpoint
from .problems import (LOSS_MODES, decision_loss, decision_rmse,
                       generate_matching_dataset, generate_newsvendor_dataset,
                       load_dataset_csv, matching_setup, newsvendor_setup, pto_baseline_step,
                       save_dataset_csv, sdfl_baseline_step)
from .recursive import (DecisionLayer, as_vector, fixed_point_solve,
                        gradient_equivalence_report, implicit_gradient, unroll_forward,
                        unroll_gradient)

log = logging.getLogger(__name__)

SCHEMES = ("rdfl_unroll", "rdfl_implicit", "sdfl", "pto")
SKIPPABLE = (SingularKKT, UnstableEquilibrium, NotConverged)
METRIC_COLUMNS = ("epoch", "train_loss", "train_rmse", "val_rmse", "mean_fp_iters",
                  "mean_rho_hat", "skipped")


@dataclass
class RunConfig:
    """One training run. Defaults follow the standard protocol (batch 8, lr 1e-3, K=10)."""
    seed: int
    problem: str = "newsvendor"
    n: int = 10
    players: int = 4
    d: int = 5
    N: int = 1000
    reg_eps: float = 1e-2
    rho_target: float = 0.5
    noise_sigma: float = 0.005
    response_scale: float = 5.0
    world_seed: int = 0
    data_seed: int = None
    data_csv: str = None
    scheme: str = "rdfl_unroll"
    K: int = 10
    tol: float = 0.2
    damping: float = 0.5
    max_iter: int = 100
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 5e-4
    loss_mode: str = "regret"
    hidden: int = 32
    x0_init: str = "center"
    eval_K: int = None
    eval_tol: float = None
    fallback_to_unroll: bool = False
    max_skip_fraction: float = 0.2
    equivalence_K: list = field(default_factory=lambda: [1, 5, 10, 20, 30])

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("seed is mandatory")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.problem not in ("newsvendor", "matching"):
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.x0_init not in ("center", "random"):
            raise ValueError("x0_init must be 'center' or 'random'")
        if self.K < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("K and batch_size must be positive, epochs nonnegative")
        if self.problem == "matching" and self.d != 5 * self.players:
            self.d = 5 * self.players

    @property
    def resolved_data_seed(self):
        return self.seed if self.data_seed is None else self.data_seed

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, **kw):
        return dataclasses.replace(self, **{k: v for k, v in kw.items() if v is not None})


def n_threads():
    """Worker count from ``RDFL_THREADS`` (0 or unset means one per core)."""
    k = int(os.environ.get("RDFL_THREADS", "0") or 0)
    return k if k > 0 else (os.cpu_count() or 1)


# --- problem assembly ----------------------------------------------------------

def build_problem(cfg):
    """Program and world model described by ``cfg``."""
    if cfg.problem == "newsvendor":
        return newsvendor_setup(cfg.n, cfg.d, cfg.rho_target, cfg.reg_eps, cfg.noise_sigma,
                                seed=cfg.world_seed, response_scale=cfg.response_scale)
    return matching_setup(cfg.players, reg_eps=cfg.reg_eps, rho_target=cfg.rho_target,
                          noise_sigma=cfg.noise_sigma)


def build_dataset(cfg, program=None, world=None):
    if program is None:
        program, world = build_problem(cfg)
    seed = cfg.resolved_data_seed
    if cfg.data_csv:
        return load_dataset_csv(cfg.data_csv, program, seed=seed, d=cfg.d)
    if cfg.problem == "newsvendor":
        return generate_newsvendor_dataset(cfg.n, cfg.d, cfg.N, world, program, seed)
    return generate_matching_dataset(cfg.players, cfg.d, cfg.N, world, program, seed)


def _softplus_inv(y):
    return np.where(y > 30.0, y, np.log(np.expm1(np.maximum(y, 1e-12))))


def init_predictor(cfg, dataset, program):
    """Kaiming-initialised MLP with input/output standardisation from the train split.

    The weights reading the decision input start at zero, so every scheme
    begins from the same feature-only predictor and the loop starts as a
    contraction.
    """
    positive = cfg.problem == "newsvendor"
    params = init_mlp(program.n, cfg.d, hidden=(cfg.hidden,), seed=cfg.seed,
                      output="softplus" if positive else "linear")
    params.weights[0][:, :program.n] = 0.0
    train = dataset.subset("train") or dataset.samples
    if train:
        X = np.array([s.x_oracle for s in train])
        V = np.array([s.v for s in train])
        C = np.array([s.c_true for s in train])
        inputs = np.hstack([X, V])
        params.input_offset = inputs.mean(axis=0)
        params.input_scale = np.maximum(inputs.std(axis=0), 1e-2 * (1.0 + np.abs(inputs).max()))
        c_mean = C.mean(axis=0)
        params.output_scale = np.maximum(C.std(axis=0), 1e-6)
        params.output_offset = _softplus_inv(c_mean) if positive else c_mean
    return params


def initial_decision(cfg, program, index):
    x0 = program.center()
    if cfg.x0_init == "random":
        rng = np.random.default_rng([int(cfg.seed), int(index), 0x1417])
        if program.problem_tag == "newsvendor":
            x0 = rng.uniform(program.meta["s1"], program.meta["s2"])
        elif program.problem_tag == "matching":
            x0 = rng.uniform(size=program.n)
    return x0


# --- per-sample gradients ----------------------------------------------------------

@dataclass
class SampleOutcome:
    grads: object
    loss: float
    x: np.ndarray
    fp_iters: float = float("nan")
    rho_hat: float = float("nan")


def sample_gradient(cfg, params, program, sample, x0):
    """Forward and backward pass of ``cfg.scheme`` on one sample."""
    scheme = cfg.scheme
    if scheme == "pto":
        r = pto_baseline_step(params, sample, program)
        return SampleOutcome(r.grads, r.loss, solve(program, r.c_hat).x)
    if scheme == "sdfl":
        r = sdfl_baseline_step(params, sample, program, cfg.loss_mode)
        return SampleOutcome(r.grads, r.loss, r.x)
    layer = DecisionLayer(params, program, feedback=True)
    if scheme == "rdfl_unroll":
        trace = unroll_forward(layer, x0, sample.v, cfg.K)
        x = trace.x_seq[-1]
        loss, g_x = decision_loss(program, x, sample, cfg.loss_mode)
        return SampleOutcome(unroll_gradient(layer, trace, g_x), loss, x)
    eq = fixed_point_solve(layer, x0, sample.v, tol=cfg.tol, max_iter=cfg.max_iter,
                           damping=cfg.damping, strict=True)
    loss, g_x = decision_loss(program, eq.x_out, sample, cfg.loss_mode)
    grads = implicit_gradient(layer, eq, sample.v, g_x, cfg.fallback_to_unroll, cfg.K)
    return SampleOutcome(grads, loss, eq.x_out, eq.iterations, eq.rho_hat)


def predict_decision(cfg, params, program, sample, x0):
    """Deployed decision of the trained model under its own scheme."""
    if cfg.scheme in ("pto", "sdfl"):
        c_hat, _ = predictor_forward(params, np.zeros(program.n), sample.v)
        return solve(program, c_hat).x
    layer = DecisionLayer(params, program, feedback=True)
    if cfg.scheme == "rdfl_unroll":
        K = cfg.eval_K or cfg.K
        return unroll_forward(layer, x0, sample.v, K).x_seq[-1]
    tol = cfg.eval_tol or cfg.tol
    return fixed_point_solve(layer, x0, sample.v, tol=tol, max_iter=cfg.max_iter,
                             damping=cfg.damping).x_out


def evaluate(cfg, params, program, samples, indices):
    preds = [predict_decision(cfg, params, program, s, initial_decision(cfg, program, i))
             for s, i in zip(samples, indices)]
    return preds, decision_rmse(preds, [s.x_oracle for s in samples])


# --- training ----------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_rmse: float
    val_rmse: float
    mean_fp_iters: float
    mean_rho_hat: float
    skipped: int
    seconds: float


@dataclass
class RunArtifact:
    config: RunConfig
    params: object = None
    best_params: object = None
    metrics: list = field(default_factory=list)
    test_rmse: float = float("nan")
    test_predictions: list = field(default_factory=list)
    test_oracle: list = field(default_factory=list)
    best_epoch: int = 0
    skipped_total: int = 0
    equivalence: dict = None
    world: dict = None

    @property
    def seconds_per_epoch(self):
        ts = [m.seconds for m in self.metrics]
        return float(np.mean(ts)) if ts else 0.0


def _batch_outcomes(cfg, params, program, dataset, batch, pool):
    def one(i):
        x0 = initial_decision(cfg, program, i)
        try:
            out = sample_gradient(cfg, params, program, dataset.samples[i], x0)
        except SKIPPABLE as exc:
            return exc
        if not np.all(np.isfinite(as_vector(out.grads))):
            return SingularKKT("non-finite gradient")
        return out
    if pool is None:
        return [one(i) for i in batch]
    return list(pool.map(one, batch))


def train(cfg, dataset=None, out_dir=None, verbose=False):
    """Train ``cfg.scheme`` and return a :class:`RunArtifact` (also written to ``out_dir``)."""
    program, world = build_problem(cfg)
    if dataset is None:
        dataset = build_dataset(cfg, program, world)
    params = init_predictor(cfg, dataset, program)
    state = AdamState.zeros_like(params)
    art = RunArtifact(cfg, params=params, best_params=params.copy(),
                      world=world.to_dict() if world is not None else None)

    val_idx = dataset.split["val"]
    val = [dataset.samples[i] for i in val_idx]
    best_val = evaluate(cfg, params, program, val, val_idx)[1] if val else float("inf")
    train_idx = list(dataset.split["train"])
    workers = n_threads()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = np.random.default_rng([int(cfg.seed), epoch]).permutation(len(train_idx))
            t0 = time.perf_counter()
            losses, sq, n_coord, iters, rhos, skipped = [], 0.0, 0, [], [], 0
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_idx[j] for j in order[start:start + cfg.batch_size]]
                outcomes = _batch_outcomes(cfg, params, program, dataset, batch, pool)
                total, count = None, 0
                for i, out in zip(batch, outcomes):
                    if isinstance(out, Exception):
                        skipped += 1
                        warnings.warn(f"epoch {epoch}: skipped sample {i}: {out}")
                        continue
                    total = out.grads if total is None else total + out.grads
                    count += 1
                    losses.append(out.loss)
                    diff = out.x - dataset.samples[i].x_oracle
                    sq += float(diff @ diff)
                    n_coord += diff.size
                    iters.append(out.fp_iters)
                    rhos.append(out.rho_hat)
                if count:
                    params, state = adam_step(params, total * (1.0 / count), state,
                                              lr=cfg.lr, weight_decay=cfg.weight_decay)
            seconds = time.perf_counter() - t0
            if skipped > cfg.max_skip_fraction * max(len(train_idx), 1):
                raise TrainingAborted(
                    f"epoch {epoch}: {skipped} of {len(train_idx)} samples skipped "
                    f"(limit {cfg.max_skip_fraction:.0%})")
            val_rmse = evaluate(cfg, params, program, val, val_idx)[1] if val else float("nan")
            m = EpochMetrics(
                epoch=epoch,
                train_loss=float(np.mean(losses)) if losses else float("nan"),
                train_rmse=math.sqrt(sq / n_coord) if n_coord else float("nan"),
                val_rmse=val_rmse,
                mean_fp_iters=float(np.mean(iters)) if iters else float("nan"),
                mean_rho_hat=float(np.mean(rhos)) if rhos else float("nan"),
                skipped=skipped,
                seconds=max(seconds, 1e-9),
            )
            art.metrics.append(m)
            art.skipped_total += skipped
            if verbose:
                print(f"[{cfg.scheme} seed={cfg.seed}] epoch {epoch}: "
                      f"train_rmse={m.train_rmse:.4f} val_rmse={m.val_rmse:.4f} "
                      f"({seconds:.1f}s)", flush=True)
            if val and val_rmse < best_val:
                best_val = val_rmse
                art.best_params = params.copy()
                art.best_epoch = epoch
    finally:
        if pool is not None:
            pool.shutdown()

    art.params = params
    test_idx = dataset.split["test"]
    test = [dataset.samples[i] for i in test_idx]
    if test:
        preds, art.test_rmse = evaluate(cfg, art.best_params, program, test, test_idx)
        art.test_predictions = preds
        art.test_oracle = [s.x_oracle for s in test]
    if cfg.scheme.startswith("rdfl") and test:
        art.equivalence = _equivalence_snapshot(cfg, art.best_params, program, test[0],
                                                test_idx[0])
    if out_dir is not None:
        write_artifact(art, out_dir)
    return art


def _equivalence_snapshot(cfg, params, program, sample, index):
    layer = DecisionLayer(params, program, feedback=True)
    x0 = initial_decision(cfg, program, index)
    g = program.objective_grad(sample.x_oracle, sample.c_true)
    try:
        return gradient_equivalence_report(layer, x0, sample.v, g, cfg.equivalence_K,
                                           tol=1e-10, max_iter=2000,
                                           damping=cfg.damping).to_dict()
    except (SingularKKT, UnstableEquilibrium, NotConverged) as exc:
        return {"error": type(exc).__name__, "message": str(exc)}


# --- artifacts --------------------------------------------------------------------

def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_artifact(art, out_dir):
    """``metrics.csv``, ``timings.csv``, ``summary.json``, checkpoint, QQ data, equivalence."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in art.metrics:
            w.writerow([_fmt(getattr(m, c)) for c in METRIC_COLUMNS])
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "seconds"])
        for m in art.metrics:
            w.writerow([m.epoch, f"{m.seconds:.6f}"])
    save_checkpoint(art.best_params, out / "checkpoint")
    write_qq(out / "qq_quantiles.csv", {art.config.scheme: art.test_predictions},
             art.test_oracle)
    if art.equivalence is not None:
        (out / "equivalence.json").write_text(json.dumps(art.equivalence, indent=2) + "\n")
    (out / "summary.json").write_text(json.dumps(summary_dict(art), indent=2) + "\n")


def summary_dict(art):
    return {
        "config": art.config.to_dict(),
        "world": art.world,
        "scheme": art.config.scheme,
        "epochs": len(art.metrics),
        "best_epoch": art.best_epoch,
        "test_rmse": art.test_rmse,
        "final_val_rmse": art.metrics[-1].val_rmse if art.metrics else None,
        "seconds_per_epoch": art.seconds_per_epoch,
        "skipped_total": art.skipped_total,
    }


QQ_LEVELS = np.linspace(0.01, 0.99, 99)


def decision_quantiles(decisions):
    if not len(decisions):
        return np.full(QQ_LEVELS.size, np.nan)
    return np.quantile(np.concatenate([np.ravel(x) for x in decisions]), QQ_LEVELS)


def write_qq(path, predictions_by_scheme, oracle):
    cols = {"level": QQ_LEVELS, "oracle": decision_quantiles(oracle)}
    for name, preds in predictions_by_scheme.items():
        cols[name] = decision_quantiles(preds)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(cols))
        for row in zip(*cols.values()):
            w.writerow([repr(float(a)) for a in row])


def emit_report(artifacts, out_dir):
    """Scheme-level comparison table, QQ data and JSON summary from run artifacts.

    Each artifact may be a :class:`RunArtifact` or a run directory.
    """
    runs = [a if isinstance(a, RunArtifact) else load_run_summary(a) for a in artifacts]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in runs:
        cfg = r.config
        rows.append({
            "scheme": cfg.scheme, "problem": cfg.problem,
            "size": cfg.n if cfg.problem == "newsvendor" else cfg.players,
            "seed": cfg.seed, "K": cfg.K, "test_rmse": r.test_rmse,
            "seconds_per_epoch": r.seconds_per_epoch,
        })
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["scheme"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    by_scheme = {}
    for r in runs:
        by_scheme.setdefault(r.config.scheme, []).extend(r.test_predictions)
    oracle = runs[0].test_oracle if runs else []
    write_qq(out / "qq_quantiles.csv", by_scheme, oracle)
    medians = {}
    for row in rows:
        medians.setdefault(row["scheme"], []).append(row["test_rmse"])
    summary = {
        "runs": rows,
        "median_test_rmse": {k: float(np.median(v)) for k, v in medians.items()},
        "median_seconds_per_epoch": {
            k: float(np.median([r["seconds_per_epoch"] for r in rows if r["scheme"] == k]))
            for k in medians},
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def load_run_summary(run_dir):
    """Rebuild the reportable parts of a run from its output directory."""
    run_dir = Path(run_dir)
    s = json.loads((run_dir / "summary.json").read_text())
    cfg = RunConfig.from_dict(s["config"])
    art = RunArtifact(cfg, test_rmse=s["test_rmse"], best_epoch=s["best_epoch"])
    with open(run_dir / "metrics.csv") as fh:
        metric_rows = list(csv.DictReader(fh))
    with open(run_dir / "timings.csv") as fh:
        secs = {int(r["epoch"]): float(r["seconds"]) for r in csv.DictReader(fh)}
    for r in metric_rows:
        e = int(r["epoch"])
        art.metrics.append(EpochMetrics(
            e, float(r["train_loss"]), float(r["train_rmse"]), float(r["val_rmse"]),
            float(r["mean_fp_iters"]), float(r["mean_rho_hat"]), int(r["skipped"]),
            secs.get(e, 0.0)))
    return art


# --- suites ----------------------------------------------------------------------

def sensitivity_suite(cfg, K_list=(5, 10, 15, 20, 25), out_dir=None, dataset=None):
    """Unrolling-depth sweep: one ``rdfl_unroll`` run per ``K``."""
    program, world = build_problem(cfg)
    if dataset is None:
        dataset = build_dataset(cfg, program, world)
    rows = []
    for K in K_list:
        run_cfg = cfg.with_overrides(scheme="rdfl_unroll", K=int(K))
        art = train(run_cfg, dataset=dataset)
        rows.append({"K": int(K), "test_rmse": art.test_rmse,
                     "seconds_per_epoch": art.seconds_per_epoch})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sensitivity.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["K", "test_rmse", "seconds_per_epoch"],
                               lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return rows


def bench_suite(cfg, schemes=SCHEMES, sizes=None, seeds=None, out_dir=None):
    """Scale table: every scheme at every size and seed, summarised by :func:`emit_report`."""
    sizes = sizes or [cfg.n if cfg.problem == "newsvendor" else cfg.players]
    seeds = seeds or [cfg.seed]
    artifacts = []
    for size in sizes:
        for seed in seeds:
            size_kw = {"n": size} if cfg.problem == "newsvendor" else {"players": size,
                                                                       "d": 5 * size}
            base = cfg.with_overrides(seed=seed, **size_kw)
            program, world = build_problem(base)
            dataset = build_dataset(base, program, world)
            for scheme in schemes:
                run_cfg = base.with_overrides(scheme=scheme)
                run_dir = None if out_dir is None else Path(out_dir) / f"{scheme}_s{size}_seed{seed}"
                artifacts.append(train(run_cfg, dataset=dataset, out_dir=run_dir))
    summary = emit_report(artifacts, out_dir) if out_dir is not None else None
    return artifacts, summary


# --- gradient checks ------------------------------------------------------------------

@dataclass
class GradcheckInstance:
    layer: DecisionLayer
    program: object
    x0: np.ndarray
    v: np.ndarray
    c_true: np.ndarray


def random_gradcheck_instance(seed, n=4, d=3, reg_eps=1e-2, rho=0.5, hidden=8):
    """Small newsvendor loop with a random predictor scaled to a target contraction.

    The predictor's decision-input weights are rescaled until the loop
    Jacobian at the equilibrium has spectral radius about ``rho``.
    """
    rng = np.random.default_rng([int(seed), 0x6C4E])
    s2 = np.full(n, 10.0)
    program = build_newsvendor_program(n, 2.0 * n, 8.0 * n, np.zeros(n), s2, reg_eps)
    params = init_mlp(n, d, hidden=(hidden,), seed=int(rng.integers(2**31)),
                      output="softplus")
    params.input_offset = np.concatenate([np.full(n, 5.0), np.full(d, 0.5)])
    params.input_scale = np.concatenate([np.full(n, 3.0), np.full(d, 0.3)])
    params.output_offset = np.full(n, _softplus_inv(np.array(1.0)).item())
    params.output_scale = np.full(n, 0.05)
    v = rng.uniform(size=d)
    c_true = 1.0 + 0.05 * rng.standard_normal(n)
    x0 = program.center()
    layer = DecisionLayer(params, program)
    # rescale the feedback weights towards the target contraction
    for _ in range(3):
        eq = fixed_point_solve(layer, x0, v, tol=1e-10, max_iter=500, damping=0.5)
        if not np.isfinite(eq.rho_hat) or eq.rho_hat == 0.0:
            break
        params.weights[0][:, :n] *= rho / eq.rho_hat
        layer = DecisionLayer(params, program)
    return GradcheckInstance(layer, program, x0, v, c_true)


def _well_posed(layer, records, gap=1e-4, kink=1e-6):
    for rec in records:
        if any(np.min(np.abs(a)) < kink for a in rec.tape.preacts):
            return False
        sol = rec.solution
        if np.min(np.maximum(sol.duals, sol.slack)) < gap or degenerate_rows(sol).size:
            return False
    return True


def max_rel_error(g, g_ref):
    """Largest entry-wise error relative to the largest reference entry."""
    g, g_ref = np.asarray(g), np.asarray(g_ref)
    scale = max(float(np.max(np.abs(g_ref))), 1e-12)
    return float(np.max(np.abs(g - g_ref))) / scale


def gradcheck_instance(inst, K=5, h=1e-5, fp_tol=1e-10, wrong_vjp=False):
    """FD check of both gradient schemes on one instance.

    Returns ``None`` when the instance sits near a kink or active-set switch,
    otherwise ``{"unroll": err, "implicit": err, "rho_hat": rho}``.
    """
    layer, program, x0, v, c_true = inst.layer, inst.program, inst.x0, inst.v, inst.c_true
    params = layer.params
    theta0 = params.to_vector()

    def layer_at(theta):
        return DecisionLayer(params.with_vector(theta), program)

    def regret_grad(x):
        return program.objective_grad(x, c_true)

    trace = unroll_forward(layer, x0, v, K)
    eq = fixed_point_solve(layer, x0, v, tol=fp_tol, max_iter=2000, damping=0.5)
    if not eq.converged or not _well_posed(layer, trace.records + [eq.record]):
        return None
    try:
        g_unroll = as_vector(unroll_gradient(layer, trace, regret_grad(trace.x_seq[-1])))
        g_impl = as_vector(implicit_gradient(layer, eq, v, regret_grad(eq.x_out)))
    except (SingularKKT, UnstableEquilibrium):
        return None
    if wrong_vjp:
        g_unroll = g_unroll * 1.01
        g_impl = g_impl * 1.01

    def f_unroll(theta):
        x = unroll_forward(layer_at(theta), x0, v, K).x_seq[-1]
        return program.objective(x, c_true)

    def f_implicit(theta):
        e = fixed_point_solve(layer_at(theta), eq.x_star, v, tol=fp_tol, max_iter=2000,
                              damping=1.0, rho_iters=1)
        return program.objective(e.x_out, c_true)

    fd_unroll = finite_difference_gradient(f_unroll, theta0, h)
    fd_impl = finite_difference_gradient(f_implicit, theta0, h)
    return {"unroll": max_rel_error(g_unroll, fd_unroll),
            "implicit": max_rel_error(g_impl, fd_impl),
            "rho_hat": float(eq.rho_hat)}


def gradcheck_suite(n_instances=30, K=5, seed=0, threshold=1e-3, wrong_vjp=False,
                    max_draws=None):
    """Run :func:`gradcheck_instance` on ``n_instances`` well-posed random draws."""
    results, draw = [], 0
    max_draws = max_draws or 10 * n_instances
    while len(results) < n_instances and draw < max_draws:
        inst = random_gradcheck_instance(seed * 100003 + draw)
        draw += 1
        r = gradcheck_instance(inst, K=K, wrong_vjp=wrong_vjp)
        if r is not None:
            results.append(r)
    worst_u = max((r["unroll"] for r in results), default=float("nan"))
    worst_i = max((r["implicit"] for r in results), default=float("nan"))
    return {
        "instances": len(results), "draws": draw, "threshold": threshold,
        "max_rel_err_unroll": worst_u, "max_rel_err_implicit": worst_i,
        "passed": len(results) == n_instances and worst_u <= threshold
        and worst_i <= threshold,
        "results": results,
    }


def equivalence_suite(seed=0, K_list=(1, 5, 10, 15, 20, 25, 30), rho=0.5, n=4):
    """Gradient-equivalence report on one random newsvendor loop."""
    inst = random_gradcheck_instance(seed, n=n, rho=rho)
    g = inst.program.objective_grad(inst.program.center(), inst.c_true)
    return gradient_equivalence_report(inst.layer, inst.x0, inst.v, g, list(K_list),
                                       damping=0.5)


def generate_data(cfg, out_dir):
    """Write the configured dataset and its world model to ``out_dir``."""
    program, world = build_problem(cfg)
    dataset = build_dataset(cfg, program, world)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset_csv(dataset, out / "dataset.csv")
    (out / "world.json").write_text(json.dumps(
        {"world": world.to_dict(), "config": cfg.to_dict()}, indent=2) + "\n")
    return dataset
