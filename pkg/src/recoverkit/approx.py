"""Small feed-forward networks with hand-written backpropagation.

Parameters live in one flat float64 vector (per layer: weights row-major
with shape ``(fan_in, fan_out)``, then biases).  Every trainer in the package
builds on the functions here, so they are kept dependency-free apart from
numpy.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_ACTIVATIONS = ("tanh", "linear")


class DimensionError(ValueError):
    """Input or upstream vector has the wrong length."""


class NumericalError(ArithmeticError):
    def __init__(self, msg, layer=None):
        super().__init__(msg if layer is None else f"{msg} (layer {layer})")
        self.layer = layer


class NetFormatError(ValueError):
    """A saved network file is malformed or inconsistent with its spec."""


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden_layers: tuple = ()
    output_dim: int = 1
    hidden_activation: str = "tanh"
    output_activation: str = "linear"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        dims = (self.input_dim, *self.hidden_layers, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise DimensionError(f"all layer sizes must be >= 1, got {dims}")
        if self.hidden_activation != "tanh":
            raise ValueError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation not in _ACTIVATIONS:
            raise ValueError(f"unsupported output activation {self.output_activation!r}")

    @property
    def sizes(self):
        return (self.input_dim, *self.hidden_layers, self.output_dim)

    @property
    def param_count(self):
        s = self.sizes
        return sum((s[i] + 1) * s[i + 1] for i in range(len(s) - 1))

    def to_dict(self):
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def init_params(spec: NetSpec, rng=None) -> np.ndarray:
    """Uniform in +-1/sqrt(fan_in) per layer, seeded by ``spec.seed`` unless an rng is given."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    s = spec.sizes
    chunks = []
    for fan_in, fan_out in zip(s[:-1], s[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return np.concatenate(chunks)


def unpack(spec: NetSpec, params: np.ndarray):
    """Return ``[(W, b), ...]`` as views into ``params``."""
    if params.shape != (spec.param_count,):
        raise DimensionError(f"expected {spec.param_count} parameters, got shape {params.shape}")
    s = spec.sizes
    layers, off = [], 0
    for fan_in, fan_out in zip(s[:-1], s[1:]):
        W = params[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = params[off:off + fan_out]
        off += fan_out
        layers.append((W, b))
    return layers


class MLP:
    """A network bound to its parameter vector; supports batched evaluation.

    ``params`` can be reassigned; the layer views are rebuilt on assignment.
    """

    def __init__(self, spec: NetSpec, params=None):
        self.spec = spec
        self.params = init_params(spec) if params is None else params

    @property
    def params(self):
        return self._params

    @params.setter
    def params(self, value):
        value = np.ascontiguousarray(value, dtype=np.float64)
        self._layers = unpack(self.spec, value)
        self._params = value

    def copy(self):
        return MLP(self.spec, self._params.copy())

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.spec.input_dim or x.ndim not in (1, 2):
            raise DimensionError(f"input has shape {x.shape}, expected (..., {self.spec.input_dim})")
        return x

    def forward(self, x):
        x = self._check_input(x)
        a = x
        n = len(self._layers)
        for i, (W, b) in enumerate(self._layers):
            a = a @ W + b
            if i < n - 1 or self.spec.output_activation == "tanh":
                a = np.tanh(a)
        return a

    __call__ = forward

    def forward_cache(self, x):
        """Forward pass that keeps the activations needed by :meth:`backward`."""
        x = self._check_input(x)
        single = x.ndim == 1
        a = x[None, :] if single else x
        acts = [a]
        n = len(self._layers)
        for i, (W, b) in enumerate(self._layers):
            a = a @ W + b
            if i < n - 1 or self.spec.output_activation == "tanh":
                a = np.tanh(a)
            if not np.all(np.isfinite(a)):
                raise NumericalError("non-finite activation", layer=i)
            acts.append(a)
        out = a[0] if single else a
        return out, (acts, single)

    def backward(self, cache, upstream, need_input=False):
        """Gradient of ``sum(upstream * output)`` w.r.t. parameters (summed over the batch)."""
        acts, single = cache
        up = np.asarray(upstream, dtype=np.float64)
        if up.shape[-1] != self.spec.output_dim:
            raise DimensionError(f"upstream has shape {up.shape}, expected (..., {self.spec.output_dim})")
        delta = up[None, :] if up.ndim == 1 else up
        if delta.shape[0] != acts[0].shape[0]:
            raise DimensionError("upstream batch size does not match the cached forward pass")
        if self.spec.output_activation == "tanh":
            delta = delta * (1.0 - acts[-1] ** 2)
        grad = np.empty_like(self._params)
        s = self.spec.sizes
        offsets = [0]
        for fan_in, fan_out in zip(s[:-1], s[1:]):
            offsets.append(offsets[-1] + (fan_in + 1) * fan_out)
        for i in range(len(self._layers) - 1, -1, -1):
            W, _ = self._layers[i]
            a_prev = acts[i]
            off = offsets[i]
            nw = W.size
            grad[off:off + nw] = (a_prev.T @ delta).ravel()
            grad[off + nw:off + nw + W.shape[1]] = delta.sum(axis=0)
            if not np.all(np.isfinite(delta)):
                raise NumericalError("non-finite gradient", layer=i)
            if i > 0:
                delta = (delta @ W.T) * (1.0 - a_prev ** 2)
            elif need_input:
                delta = delta @ W.T
        if not need_input:
            return grad
        ginput = delta[0] if single else delta
        return grad, ginput

    def input_gradient(self, x, upstream):
        _, cache = self.forward_cache(x)
        return self.backward(cache, upstream, need_input=True)[1]


def forward(spec: NetSpec, params, x):
    return MLP(spec, params).forward(x)


def grad_params(spec: NetSpec, params, x, upstream):
    net = MLP(spec, params)
    _, cache = net.forward_cache(x)
    return net.backward(cache, upstream)


def grad_input(spec: NetSpec, params, x, upstream):
    return MLP(spec, params).input_gradient(x, upstream)


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    size: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def optimizer_step(state: OptimizerState, params, gradient, ascend=False):
    """Return updated parameters; the optimizer state is advanced in place."""
    params = np.asarray(params, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != params.shape or g.shape != (state.size,):
        raise DimensionError(f"gradient shape {g.shape} does not match parameters {params.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericalError("refusing optimizer step with non-finite gradient")
    sign = 1.0 if ascend else -1.0
    if state.kind == "sgd":
        state.step_count += 1
        return params + sign * state.learning_rate * g
    state.step_count += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.step_count)
    v_hat = state.v / (1.0 - state.beta2 ** state.step_count)
    return params + sign * state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


def target_sync(live, target, mode="copy", tau=1.0):
    if mode == "copy":
        return np.array(live, dtype=np.float64, copy=True)
    if mode == "polyak":
        if not 0.0 <= tau <= 1.0:
            raise ValueError("polyak tau must lie in [0, 1]")
        if tau == 1.0:
            return np.array(live, dtype=np.float64, copy=True)
        return tau * np.asarray(live) + (1.0 - tau) * np.asarray(target)
    raise ValueError(f"unknown sync mode {mode!r}")


def net_to_dict(spec: NetSpec, params) -> dict:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.param_count,):
        raise DimensionError("parameter vector does not match spec")
    if not np.all(np.isfinite(params)):
        raise NumericalError("cannot serialize non-finite parameters")
    return {"format_version": FORMAT_VERSION, "spec": spec.to_dict(), "params": params.tolist()}


def net_from_dict(doc: dict):
    try:
        if doc.get("format_version") != FORMAT_VERSION:
            raise NetFormatError(f"unsupported format_version {doc.get('format_version')!r}")
        spec = NetSpec.from_dict(doc["spec"])
        params = np.asarray(doc["params"], dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise NetFormatError(f"malformed net document: {exc}") from exc
    except DimensionError as exc:
        raise NetFormatError(str(exc)) from exc
    if params.shape != (spec.param_count,):
        raise NetFormatError(
            f"declared dims imply {spec.param_count} parameters, file holds {params.size}")
    return spec, params


def save_net(spec: NetSpec, params, path):
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(net_to_dict(spec, params)))


def load_net(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise NetFormatError(f"not a JSON document: {exc}") from exc
    return net_from_dict(doc)
