"""Multilayer perceptron mapping (decision, features) to predicted costs.

The network is evaluated on the concatenation ``[x; v]`` after a fixed
standardisation ``(input - input_offset) / input_scale``. Hidden layers use
a leaky rectifier. The output is ``output_offset + output_scale * z`` and,
when ``output == "softplus"``, passed through ``output_floor + softplus(.)``
so predicted costs stay positive. Offsets and scales are fixed buffers set
from data; only weights and biases are trained.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch

CHECKPOINT_FORMAT = "rdfl-checkpoint-v1"


@dataclass
class MlpParams:
    weights: list
    biases: list
    n_decision: int
    slope: float = 0.01
    output: str = "linear"
    output_floor: float = 0.0
    input_offset: np.ndarray = None
    input_scale: np.ndarray = None
    output_offset: np.ndarray = None
    output_scale: np.ndarray = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("need one bias per weight matrix and at least one layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeMismatch(f"layer {k}: weight {W.shape} vs bias {b.shape}")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeMismatch(
                    f"layer {k} expects {W.shape[1]} inputs, previous layer gives "
                    f"{self.weights[k - 1].shape[0]}"
                )
        if self.weights[-1].shape[0] != self.n_decision:
            raise ShapeMismatch("output dimension must equal the decision dimension")
        if self.output not in ("linear", "softplus"):
            raise ValueError(f"unknown output transform {self.output!r}")
        n_in, n_out = self.weights[0].shape[1], self.n_decision
        if self.input_offset is None:
            self.input_offset = np.zeros(n_in)
        if self.input_scale is None:
            self.input_scale = np.ones(n_in)
        if self.output_offset is None:
            self.output_offset = np.zeros(n_out)
        if self.output_scale is None:
            self.output_scale = np.ones(n_out)

    @property
    def layer_dims(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_features(self):
        return self.layer_dims[0] - self.n_decision

    def copy(self):
        return replace(
            self,
            weights=[W.copy() for W in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def to_vector(self):
        return np.concatenate(
            [a.ravel() for pair in zip(self.weights, self.biases) for a in pair]
        )

    def with_vector(self, theta):
        """Return a copy whose trainable entries are taken from ``theta``."""
        theta = np.asarray(theta, dtype=float)
        total = sum(W.size + b.size for W, b in zip(self.weights, self.biases))
        if theta.shape != (total,):
            raise ShapeMismatch(f"expected {total} parameters, got {theta.size}")
        weights, biases, k = [], [], 0
        for W, b in zip(self.weights, self.biases):
            weights.append(theta[k:k + W.size].reshape(W.shape))
            k += W.size
            biases.append(theta[k:k + b.size].copy())
            k += b.size
        return replace(self, weights=weights, biases=biases)


@dataclass
class PredictorGradients:
    weights: list
    biases: list

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(W) for W in params.weights],
                   [np.zeros_like(b) for b in params.biases])

    def __add__(self, other):
        return PredictorGradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def __mul__(self, scalar):
        return PredictorGradients([scalar * a for a in self.weights],
                                  [scalar * a for a in self.biases])

    __rmul__ = __mul__

    def to_vector(self):
        return np.concatenate(
            [a.ravel() for pair in zip(self.weights, self.biases) for a in pair]
        )


@dataclass
class Tape:
    """Forward record: standardised input, hidden pre-activations, activations."""
    inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)
    out_deriv: np.ndarray = None


def _leaky(a, slope):
    return np.where(a > 0.0, a, slope * a)


def _leaky_deriv(a, slope):
    return np.where(a > 0.0, 1.0, slope)


def init_mlp(n_decision, n_features, hidden=(32,), seed=0, slope=0.01, output="linear",
             output_floor=0.0):
    """Kaiming-uniform initialisation for a leaky-rectifier MLP.

    Weight bound is ``gain * sqrt(3 / fan_in)`` with leaky-ReLU gain
    ``sqrt(2 / (1 + slope**2))``; biases use ``1 / sqrt(fan_in)``.
    """
    rng = np.random.default_rng(seed)
    dims = [n_decision + n_features, *hidden, n_decision]
    gain = np.sqrt(2.0 / (1.0 + slope ** 2))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = gain * np.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        b_bound = 1.0 / np.sqrt(fan_in)
        biases.append(rng.uniform(-b_bound, b_bound, size=fan_out))
    return MlpParams(weights, biases, n_decision=n_decision, slope=slope, output=output,
                     output_floor=output_floor)


def predictor_forward(params, x, v):
    """Evaluate the network on ``[x; v]``. Returns ``(c_hat, tape)``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if x.shape != (params.n_decision,) or v.shape != (params.n_features,):
        raise ShapeMismatch(
            f"expected x of length {params.n_decision} and v of length "
            f"{params.n_features}, got {x.shape} and {v.shape}"
        )
    tape = Tape()
    h = (np.concatenate([x, v]) - params.input_offset) / params.input_scale
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        tape.inputs.append(h)
        a = W @ h + b
        if k < last:
            tape.preacts.append(a)
            h = _leaky(a, params.slope)
        else:
            h = a
    z = params.output_offset + params.output_scale * h
    if params.output == "softplus":
        c_hat = params.output_floor + np.logaddexp(0.0, z)
        tape.out_deriv = params.output_scale / (1.0 + np.exp(-z))
    else:
        c_hat = z
        tape.out_deriv = params.output_scale.copy()
    return c_hat, tape


def predictor_input_jacobian(params, tape):
    """Jacobian of the prediction with respect to the decision input ``x``."""
    n = params.n_decision
    M = np.zeros((params.layer_dims[0], n))
    M[np.arange(n), np.arange(n)] = 1.0 / params.input_scale[:n]
    for k, W in enumerate(params.weights):
        M = W @ M
        if k < len(tape.preacts):
            M *= _leaky_deriv(tape.preacts[k], params.slope)[:, None]
    return tape.out_deriv[:, None] * M


def predictor_param_vjp(params, tape, upstream):
    """Gradient of ``upstream . c_hat`` with respect to every weight and bias."""
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (params.n_decision,):
        raise ShapeMismatch(f"upstream must have length {params.n_decision}")
    g = upstream * tape.out_deriv
    n_layers = len(params.weights)
    dW, db = [None] * n_layers, [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        dW[k] = np.outer(g, tape.inputs[k])
        db[k] = g
        if k:
            g = (params.weights[k].T @ g) * _leaky_deriv(tape.preacts[k - 1], params.slope)
    return PredictorGradients(dW, db)


def predictor_input_vjp(params, tape, upstream):
    """``upstream^T dc/dx`` without forming the Jacobian."""
    g = np.asarray(upstream, dtype=float) * tape.out_deriv
    for k in range(len(params.weights) - 1, -1, -1):
        g = params.weights[k].T @ g
        if k:
            g = g * _leaky_deriv(tape.preacts[k - 1], params.slope)
    n = params.n_decision
    return g[:n] / params.input_scale[:n]


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        shapes = [a for pair in zip(params.weights, params.biases) for a in pair]
        return cls([np.zeros_like(a) for a in shapes], [np.zeros_like(a) for a in shapes])


def adam_step(params, grads, state, lr=1e-3, weight_decay=5e-4, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update with decoupled weight decay. Returns ``(params, state)``."""
    if state is None:
        state = AdamState.zeros_like(params)
    b1, b2 = betas
    t = state.t + 1
    p_list = [a for pair in zip(params.weights, params.biases) for a in pair]
    g_list = [a for pair in zip(grads.weights, grads.biases) for a in pair]
    if len(p_list) != len(g_list) or any(p.shape != g.shape for p, g in zip(p_list, g_list)):
        raise ShapeMismatch("gradients are not congruent with the parameters")
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_list, g_list, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p.append(p - lr * weight_decay * p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    out = replace(params, weights=new_p[0::2], biases=new_p[1::2])
    return out, AdamState(new_m, new_v, t)


sgd_adam_step = adam_step


def _named_tensors(params):
    tensors = []
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        tensors += [(f"layer{k}.weight", W), (f"layer{k}.bias", b)]
    tensors += [
        ("input_offset", params.input_offset),
        ("input_scale", params.input_scale),
        ("output_offset", params.output_offset),
        ("output_scale", params.output_scale),
    ]
    return tensors


def save_checkpoint(params, path):
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.json`` manifest.

    ``path`` is given without suffix. Tensors are stored back to back in
    manifest order, each row-major.
    """
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, arr in _named_tensors(params):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": "<f8",
        "n_decision": params.n_decision,
        "slope": params.slope,
        "output": params.output,
        "output_floor": params.output_floor,
        "n_layers": len(params.weights),
        "tensors": entries,
    }
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unknown checkpoint format {manifest.get('format')!r}")
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    named = {
        e["name"]: flat[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"]).astype(float)
        for e in manifest["tensors"]
    }
    L = manifest["n_layers"]
    return MlpParams(
        weights=[named[f"layer{k}.weight"] for k in range(L)],
        biases=[named[f"layer{k}.bias"] for k in range(L)],
        n_decision=manifest["n_decision"],
        slope=manifest["slope"],
        output=manifest["output"],
        output_floor=manifest["output_floor"],
        input_offset=named["input_offset"],
        input_scale=named["input_scale"],
        output_offset=named["output_offset"],
        output_scale=named["output_scale"],
    )
