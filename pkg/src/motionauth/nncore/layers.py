"""Layer specs, their runtime counterparts, and a sequential container."""

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..errors import NonFiniteLoss, ShapeError
from . import functional as F
from .params import ParamSet


# -- specs -------------------------------------------------------------------

@dataclass(frozen=True)
class Conv1D:
    filters: int
    kernel: int
    stride: int = 1
    padding: str = "same"
    l2: float = 0.0

    def __post_init__(self):
        if self.filters < 1 or self.kernel < 1:
            raise ValueError("filters and kernel must be >= 1")
        if self.stride != 1 or self.padding != "same":
            raise ValueError("only stride 1 with same padding is supported")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")


@dataclass(frozen=True)
class BatchNorm:
    epsilon: float = 1e-3
    momentum: float = 0.99


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool1D:
    pool: int

    def __post_init__(self):
        if self.pool < 1:
            raise ValueError("pool must be >= 1")


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int
    activation: str = "none"
    l2: float = 0.0

    def __post_init__(self):
        if self.units < 1:
            raise ValueError("units must be >= 1")
        if self.activation not in ("none", "relu", "sigmoid"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")


@dataclass(frozen=True)
class Dropout:
    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")


@dataclass(frozen=True)
class L2Normalize:
    pass


SPEC_TYPES = {cls.__name__: cls for cls in
              (Conv1D, BatchNorm, ReLU, MaxPool1D, Flatten, Dense, Dropout, L2Normalize)}


def spec_to_dict(spec):
    return {"type": type(spec).__name__, **asdict(spec)}


def spec_from_dict(d):
    d = dict(d)
    cls = SPEC_TYPES[d.pop("type")]
    known = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in known})


# -- runtime layers ----------------------------------------------------------

def _glorot(rng, fan_in, fan_out, shape, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class _Layer:
    has_params = False

    def __init__(self, spec, name, params):
        self.spec = spec
        self.name = name
        self.params = params

    def p(self, key):
        return self.params[f"{self.name}.{key}"]

    def penalty(self):
        return 0.0


class _Conv1DLayer(_Layer):
    has_params = True

    def build(self, in_shape, rng, dtype):
        if len(in_shape) != 2:
            raise ShapeError(f"Conv1D needs [length, channels] input, got {in_shape}")
        length, c_in = in_shape
        k, o = self.spec.kernel, self.spec.filters
        self.params.add(f"{self.name}.w", _glorot(rng, k * c_in, k * o, (k, c_in, o), dtype))
        self.params.add(f"{self.name}.b", np.zeros(o, dtype=dtype))
        return (length, o)

    def forward(self, x, train, rng):
        self.x = x
        self.cols = F.im2col(x, self.spec.kernel)
        return F.conv1d_forward(x, self.p("w"), self.p("b"), cols=self.cols)

    def backward(self, g, grads):
        gx, gw, gb = F.conv1d_backward(g, self.x, self.p("w"), self.spec.l2, cols=self.cols)
        grads[f"{self.name}.w"] = gw
        grads[f"{self.name}.b"] = gb
        self.cols = None
        return gx

    def penalty(self):
        w = self.p("w")
        return self.spec.l2 * float((w.astype(np.float64) ** 2).sum())


class _BatchNormLayer(_Layer):
    has_params = True

    def build(self, in_shape, rng, dtype):
        f = in_shape[-1]
        self.params.add(f"{self.name}.gamma", np.ones(f, dtype=dtype))
        self.params.add(f"{self.name}.beta", np.zeros(f, dtype=dtype))
        self.params.add(f"{self.name}.running_mean", np.zeros(f, dtype=dtype), trainable=False)
        self.params.add(f"{self.name}.running_var", np.ones(f, dtype=dtype), trainable=False)
        self.accumulator = None
        return in_shape

    def forward(self, x, train, rng):
        rm, rv = self.p("running_mean"), self.p("running_var")
        momentum = self.spec.momentum
        if self.accumulator is not None:
            # statistics refresh: leave running values alone, record batch moments
            axes = tuple(range(x.ndim - 1))
            self.accumulator.append((x.mean(axis=axes), x.var(axis=axes), x.size // x.shape[-1]))
            rm, rv, momentum = rm.copy(), rv.copy(), 1.0
        y, self.cache = F.batchnorm_forward(
            x, self.p("gamma"), self.p("beta"), rm, rv,
            epsilon=self.spec.epsilon, momentum=momentum, train=train)
        return y

    def backward(self, g, grads):
        gx, gg, gb = F.batchnorm_backward(g, self.cache)
        grads[f"{self.name}.gamma"] = gg
        grads[f"{self.name}.beta"] = gb
        return gx


class _ReLULayer(_Layer):
    def build(self, in_shape, rng, dtype):
        return in_shape

    def forward(self, x, train, rng):
        self.mask = x > 0
        return x * self.mask

    def backward(self, g, grads):
        return g * self.mask


class _MaxPoolLayer(_Layer):
    def build(self, in_shape, rng, dtype):
        length, c = in_shape
        if self.spec.pool > length:
            raise ShapeError(f"pool {self.spec.pool} exceeds length {length}")
        return (length // self.spec.pool, c)

    def forward(self, x, train, rng):
        self.in_shape = x.shape
        y, self.argmax = F.maxpool1d_forward(x, self.spec.pool)
        return y

    def backward(self, g, grads):
        return F.maxpool1d_backward(g, self.argmax, self.in_shape, self.spec.pool)


class _FlattenLayer(_Layer):
    def build(self, in_shape, rng, dtype):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train, rng):
        self.in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g, grads):
        return g.reshape(self.in_shape)


class _DenseLayer(_Layer):
    has_params = True

    def build(self, in_shape, rng, dtype):
        if len(in_shape) != 1:
            raise ShapeError(f"Dense needs flat input, got {in_shape}")
        (n_in,) = in_shape
        u = self.spec.units
        self.params.add(f"{self.name}.w", _glorot(rng, n_in, u, (n_in, u), dtype))
        self.params.add(f"{self.name}.b", np.zeros(u, dtype=dtype))
        return (u,)

    def forward(self, x, train, rng):
        self.x = x
        self.y, self.z = F.dense_forward(x, self.p("w"), self.p("b"), self.spec.activation)
        return self.y

    def backward(self, g, grads):
        gx, gw, gb = F.dense_backward(g, self.x, self.p("w"), self.z, self.y,
                                      self.spec.activation, self.spec.l2)
        grads[f"{self.name}.w"] = gw
        grads[f"{self.name}.b"] = gb
        return gx

    def penalty(self):
        w = self.p("w")
        return self.spec.l2 * float((w.astype(np.float64) ** 2).sum())


class _DropoutLayer(_Layer):
    def build(self, in_shape, rng, dtype):
        return in_shape

    def forward(self, x, train, rng):
        y, self.mask = F.dropout_forward(x, self.spec.rate, train, rng)
        return y

    def backward(self, g, grads):
        return g if self.mask is None else g * self.mask


class _L2NormalizeLayer(_Layer):
    def build(self, in_shape, rng, dtype):
        return in_shape

    def forward(self, x, train, rng):
        self.y, self.norm = F.l2_normalize_forward(x)
        return self.y

    def backward(self, g, grads):
        return F.l2_normalize_backward(g, self.y, self.norm)


_RUNTIME = {
    Conv1D: _Conv1DLayer,
    BatchNorm: _BatchNormLayer,
    ReLU: _ReLULayer,
    MaxPool1D: _MaxPoolLayer,
    Flatten: _FlattenLayer,
    Dense: _DenseLayer,
    Dropout: _DropoutLayer,
    L2Normalize: _L2NormalizeLayer,
}


class Sequential:
    """A stack of layers sharing one :class:`ParamSet`.

    ``forward`` caches what ``backward`` needs; ``backward`` fills
    ``self.grads`` (L2 terms included) and returns the input gradient.
    With ``debug=True`` every layer output is checked for NaN/Inf.
    """

    def __init__(self, specs, input_shape, seed=0, dtype=np.float32, params=None, debug=False):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.debug = debug
        build_params = ParamSet()
        rng = np.random.default_rng(seed)
        self.layers = []
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            layer = _RUNTIME[type(spec)](spec, f"{i}.{type(spec).__name__.lower()}", build_params)
            shape = layer.build(shape, rng, dtype)
            self.layers.append(layer)
        self.output_shape = shape
        if params is not None:
            self._adopt(params, build_params)
        else:
            self.params = build_params
        self.grads = {}

    def _adopt(self, params, template):
        if set(params.names()) != set(template.names()):
            missing = set(template.names()) ^ set(params.names())
            raise ShapeError(f"parameter names do not match the architecture: {sorted(missing)}")
        for name, arr in template.items():
            if params[name].shape != arr.shape:
                raise ShapeError(f"{name}: stored shape {params[name].shape} != {arr.shape}")
        self.params = params
        for layer in self.layers:
            layer.params = params

    def forward(self, x, train=False, rng=None):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} != expected {self.input_shape}")
        for layer in self.layers:
            x = layer.forward(x, train, rng)
            if self.debug and not np.all(np.isfinite(x)):
                raise NonFiniteLoss(f"non-finite output after layer {layer.name}")
        return x

    def backward(self, grad):
        self.grads = {}
        for layer in reversed(self.layers):
            grad = layer.backward(grad, self.grads)
        return grad

    def penalty(self):
        """Sum of ``l2 * sum(w**2)`` over regularized layers."""
        return sum(layer.penalty() for layer in self.layers)

    def astype(self, dtype):
        self.params.astype(dtype)
        return self

    def predict(self, x, batch_size=512):
        """Inference-mode forward pass in chunks."""
        outs = [self.forward(x[i:i + batch_size], train=False)
                for i in range(0, len(x), batch_size)]
        if not outs:
            return np.zeros((0,) + tuple(self.output_shape), dtype=x.dtype)
        return np.concatenate(outs, axis=0)

    def refresh_batchnorm(self, batches):
        """Replace running statistics with the average batch moments over ``batches``.

        Each batch is run in training mode (batch statistics) without
        touching any trainable parameter.
        """
        bns = [layer for layer in self.layers if isinstance(layer, _BatchNormLayer)]
        if not bns:
            return
        for layer in bns:
            layer.accumulator = []
        rng = np.random.default_rng(0)  # fixed masks for any dropout layers
        try:
            for xb in batches:
                if len(xb) >= 2:
                    self.forward(xb, train=True, rng=rng)
            for layer in bns:
                if not layer.accumulator:
                    continue
                w = np.array([n for _, _, n in layer.accumulator], dtype=np.float64)
                mean = sum(wi * m for wi, (m, _, _) in zip(w, layer.accumulator)) / w.sum()
                var = sum(wi * v for wi, (_, v, _) in zip(w, layer.accumulator)) / w.sum()
                layer.p("running_mean")[...] = mean
                layer.p("running_var")[...] = var
        finally:
            for layer in bns:
                layer.accumulator = None
        for layer in self.layers:
            for attr in ("cols", "x", "cache", "mask"):
                if hasattr(layer, attr):
                    setattr(layer, attr, None)

    def spec_dicts(self):
        return [spec_to_dict(s) for s in self.specs]
