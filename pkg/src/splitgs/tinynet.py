"""Small fully connected networks with hand-written backprop, Adam and the
exponential learning-rate schedule."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, InvalidParameterError, TrainingDivergenceError

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Mlp:
    """ReLU MLP with an identity output layer.

    ``widths`` lists every layer size, input first: ``[in, h, h, out]``.
    Hidden weights are drawn U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the final
    layer starts at zero so the network initially outputs exactly zero.
    """

    def __init__(self, widths, rng=None, zero_last=True, dtype=np.float64):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise InvalidParameterError(f"bad layer widths {widths}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.widths = widths
        self.weights = []
        self.biases = []
        n_layers = len(widths) - 1
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            if zero_last and i == n_layers - 1:
                W = np.zeros((fan_in, fan_out), dtype=dtype)
                b = np.zeros(fan_out, dtype=dtype)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                W = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)
                b = rng.uniform(-bound, bound, fan_out).astype(dtype)
            self.weights.append(W)
            self.biases.append(b)
        self._version = 0

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]

    def parameters(self):
        """Name -> array mapping (arrays are shared, not copied)."""
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        return out

    def load_parameters(self, params):
        for i in range(len(self.weights)):
            self.weights[i] = np.asarray(params[f"W{i}"])
            self.biases[i] = np.asarray(params[f"b{i}"])
        self.touch()

    def touch(self):
        """Invalidate caches after an in-place parameter update."""
        self._version += 1

    def copy(self):
        other = Mlp.__new__(Mlp)
        other.widths = list(self.widths)
        other.weights = [W.copy() for W in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other._version = 0
        return other

    def astype(self, dtype):
        other = self.copy()
        other.weights = [W.astype(dtype) for W in other.weights]
        other.biases = [b.astype(dtype) for b in other.biases]
        return other

    def __call__(self, x):
        return mlp_forward(self, x)[0]


@dataclass
class MlpCache:
    net_id: int
    version: int
    inputs: list
    preacts: list


def mlp_forward(net: Mlp, x):
    """Forward pass for a single vector or a batch of row vectors."""
    x = np.asarray(x)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != net.n_in:
        raise ContractViolationError(f"input width {h.shape[1]} != {net.n_in}")
    inputs, preacts = [], []
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ W + b
        preacts.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    cache = MlpCache(id(net), net._version, inputs, preacts)
    return (h[0] if single else h), cache


def mlp_backward(net: Mlp, cache: MlpCache, dy):
    """Reverse-mode pass.  Returns (dL/dx, {name: dL/dparam})."""
    if cache.net_id != id(net) or cache.version != net._version:
        raise ContractViolationError("stale MLP cache: parameters changed since forward")
    dy = np.asarray(dy)
    single = dy.ndim == 1
    g = np.atleast_2d(dy)
    grads = {}
    for i in range(len(net.weights) - 1, -1, -1):
        if i != len(net.weights) - 1:
            g = g * (cache.preacts[i] > 0)
        grads[f"W{i}"] = cache.inputs[i].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ net.weights[i].T
    return (g[0] if single else g), grads


@dataclass
class AdamState:
    """Moments per parameter name.  ``step`` counts calls, ``counts`` holds
    the per-parameter update count used for bias correction, so arrays that
    join the optimization late start with a fresh correction."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    counts: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr, lr_scale=None,
              beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """Bias-corrected Adam update applied in place to ``params`` (name -> array).

    Only names present in ``grads`` are updated.  ``lr_scale`` optionally maps
    names to learning-rate multipliers.
    """
    bad = {k: int(np.size(g) - np.count_nonzero(np.isfinite(g))) for k, g in grads.items()
           if not np.all(np.isfinite(g))}
    if bad:
        raise TrainingDivergenceError(f"non-finite gradients in {sorted(bad)}", bad)
    state.step += 1
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ContractViolationError(f"{name}: grad shape {g.shape} != param {p.shape}")
        t = state.counts.get(name, 0) + 1
        state.counts[name] = t
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        m = state.m.get(name)
        if m is None or m.shape != p.shape:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step_lr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        p -= step_lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    lr_initial: float = 8e-4
    lr_final: float = 1.6e-6
    total_steps: int = 1

    def __post_init__(self):
        if not (self.lr_initial >= self.lr_final > 0):
            raise InvalidParameterError("need lr_initial >= lr_final > 0")
        if self.total_steps < 0:
            raise InvalidParameterError("total_steps must be >= 0")


def lr_at(sched: LrSchedule, step: int) -> float:
    """Log-linear interpolation from lr_initial (step 0) to lr_final (last step)."""
    if step < 0 or step > sched.total_steps:
        log.warning("lr_at: step %s outside [0, %s], clamping", step, sched.total_steps)
        step = min(max(step, 0), sched.total_steps)
    if step == 0:
        return sched.lr_initial
    if step == sched.total_steps:
        return sched.lr_final
    frac = step / sched.total_steps
    return sched.lr_initial * (sched.lr_final / sched.lr_initial) ** frac
