"""NHWC kernels, forward and backward, for every layer kind of the graph.

All kernels are written against plain numpy arrays and keep the dtype they
are given: float32 for training and inference, float64 for gradient checks,
int32 for the integer accumulation of the int8 path. Same padding uses an
implicit zero border: each 3x3 tap adds a shifted slice of the input into
the matching slice of the output, so no padded copy is ever built.
"""
import copy
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from archgen import LayerGraph, LayerKind, LayerSpec
from errors import ShapeMismatchError

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99
# initial crack probability of the output head
HEAD_PRIOR = 0.05


@dataclass
class LayerParams:
    """Trainable tensors of one layer.

    Layouts: Conv (k, k, Cin, Cout); Depthwise (3, 3, C); Pointwise and the
    output conv (1, 1, Cin, Cout); Transposed (2, 2, Cout, Cin). For
    BatchNorm ``weights`` is gamma and ``bias`` is beta.
    """

    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    moving_mean: Optional[np.ndarray] = None
    moving_var: Optional[np.ndarray] = None

    def trainable(self) -> list[np.ndarray]:
        return [a for a in (self.weights, self.bias) if a is not None]

    def copy(self) -> "LayerParams":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "LayerParams":
        return LayerParams(*(None if a is None else a.astype(dtype) for a in
                             (self.weights, self.bias, self.moving_mean, self.moving_var)))


@dataclass
class FloatModel:
    graph: LayerGraph
    params: list[LayerParams]


@dataclass
class LayerCache:
    kind: LayerKind
    x: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)


def as_tensor(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeMismatchError(f"expected a non-empty NHWC tensor, got shape {x.shape}")
    return x


def _tap(offset: int, size: int) -> Optional[tuple[slice, slice]]:
    """(destination, source) slices of one same-padded tap along an axis."""
    if abs(offset) >= size:
        return None
    if offset >= 0:
        return slice(0, size - offset), slice(offset, size)
    return slice(-offset, size), slice(0, size + offset)


def _taps(kh: int, kw: int, h: int, w: int):
    for dy in range(kh):
        rows = _tap(dy - kh // 2, h)
        if rows is None:
            continue
        for dx in range(kw):
            cols = _tap(dx - kw // 2, w)
            if cols is None:
                continue
            yield dy, dx, (slice(None), rows[0], cols[0]), (slice(None), rows[1], cols[1])


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 same-padded convolution."""
    x = as_tensor(x)
    kh, kw, cin, cout = weights.shape
    if x.shape[3] != cin:
        raise ShapeMismatchError(f"conv expects {cin} input channels, got {x.shape[3]}")
    n, h, w, _ = x.shape
    out = np.zeros((n, h, w, cout), dtype=np.result_type(x, weights))
    for dy, dx, dst, src in _taps(kh, kw, h, w):
        out[dst] += x[src] @ weights[dy, dx]
    out += bias
    return out


def conv2d_backward(dout: np.ndarray, x: np.ndarray, weights: np.ndarray):
    kh, kw, _, _ = weights.shape
    _, h, w, _ = x.shape
    dx_total = np.zeros(x.shape, dtype=np.result_type(dout, weights))
    dweights = np.zeros_like(weights, dtype=np.result_type(dout, x))
    for dy, dx, dst, src in _taps(kh, kw, h, w):
        g = dout[dst]
        dx_total[src] += g @ weights[dy, dx].T
        dweights[dy, dx] += np.tensordot(x[src], g, axes=([0, 1, 2], [0, 1, 2]))
    return dx_total, dweights, dout.sum(axis=(0, 1, 2))


def depthwise_conv_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Per-channel 3x3 convolution: output channel c reads input channel c only."""
    x = as_tensor(x)
    kh, kw, c = weights.shape
    if x.shape[3] != c:
        raise ShapeMismatchError(f"depthwise conv expects {c} channels, got {x.shape[3]}")
    _, h, w, _ = x.shape
    out = np.zeros(x.shape, dtype=np.result_type(x, weights))
    for dy, dx, dst, src in _taps(kh, kw, h, w):
        out[dst] += x[src] * weights[dy, dx]
    out += bias
    return out


def depthwise_conv_backward(dout: np.ndarray, x: np.ndarray, weights: np.ndarray):
    kh, kw, _ = weights.shape
    _, h, w, _ = x.shape
    dx_total = np.zeros(x.shape, dtype=np.result_type(dout, weights))
    dweights = np.zeros_like(weights, dtype=np.result_type(dout, x))
    for dy, dx, dst, src in _taps(kh, kw, h, w):
        g = dout[dst]
        dx_total[src] += g * weights[dy, dx]
        dweights[dy, dx] += (x[src] * g).sum(axis=(0, 1, 2))
    return dx_total, dweights, dout.sum(axis=(0, 1, 2))


def pointwise_conv_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    if weights.shape[:2] != (1, 1) or x.shape[3] != weights.shape[2]:
        raise ShapeMismatchError(f"pointwise conv {weights.shape} cannot read {x.shape[3]} channels")
    return x @ weights[0, 0] + bias


def pointwise_conv_backward(dout: np.ndarray, x: np.ndarray, weights: np.ndarray):
    dx = dout @ weights[0, 0].T
    dweights = np.tensordot(x, dout, axes=([0, 1, 2], [0, 1, 2]))[None, None]
    return dx, dweights, dout.sum(axis=(0, 1, 2))


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 / stride 2 max pool. Winner indices are window-local: 2*row + col."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"maxpool needs even spatial dims, got {h}x{w}")
    windows = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool2x2_backward(dout: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    n, h2, w2, c = argmax.shape
    routed = np.zeros(argmax.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(routed, argmax[..., None], dout[..., None], axis=-1)
    return routed.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)


def transposed_conv2x2_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-2 2x2 transposed conv: each input pixel stamps a 2x2 x Cout patch."""
    x = as_tensor(x)
    _, _, cout, cin = weights.shape
    if x.shape[3] != cin:
        raise ShapeMismatchError(f"transposed conv expects {cin} channels, got {x.shape[3]}")
    n, h, w, _ = x.shape
    out = np.empty((n, 2 * h, 2 * w, cout), dtype=np.result_type(x, weights, bias))
    for a in range(2):
        for b in range(2):
            out[:, a::2, b::2, :] = x @ weights[a, b].T + bias
    return out


def transposed_conv2x2_backward(dout: np.ndarray, x: np.ndarray, weights: np.ndarray):
    dx = np.zeros(x.shape, dtype=np.result_type(dout, weights))
    dweights = np.zeros_like(weights, dtype=np.result_type(dout, x))
    for a in range(2):
        for b in range(2):
            g = dout[:, a::2, b::2, :]
            dx += g @ weights[a, b]
            dweights[a, b] = np.tensordot(g, x, axes=([0, 1, 2], [0, 1, 2]))
    return dx, dweights, dout.sum(axis=(0, 1, 2))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:3] != b.shape[:3]:
        raise ShapeMismatchError(f"cannot stack {b.shape} onto {a.shape}: N, H, W differ")
    return np.concatenate([a, b], axis=-1)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, kept strictly inside (0, 1).

    Saturated values are clamped to the smallest normal number above 0 and
    the largest number below 1 of the input's float type.
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + z), z / (1 + z))
    info = np.finfo(x.dtype)
    return np.clip(out, info.tiny, 1 - info.epsneg)


def sigmoid_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    return dout * out * (1 - out)


def batchnorm_forward(x: np.ndarray, p: LayerParams, training: bool):
    """Returns (out, cache); batch statistics are reported, not applied."""
    if training:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
    else:
        mean, var = p.moving_mean, p.moving_var
    inv_std = 1 / np.sqrt(var + BN_EPSILON)
    x_hat = (x - mean) * inv_std
    out = p.weights * x_hat + p.bias
    return out, {"x_hat": x_hat, "inv_std": inv_std, "mean": mean, "var": var, "training": training}


def batchnorm_backward(dout: np.ndarray, p: LayerParams, extra: dict):
    x_hat, inv_std = extra["x_hat"], extra["inv_std"]
    axes = (0, 1, 2)
    dgamma = (dout * x_hat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dx_hat = dout * p.weights
    if not extra["training"]:
        return dx_hat * inv_std, dgamma, dbeta
    m = dout.shape[0] * dout.shape[1] * dout.shape[2]
    dx = inv_std / m * (m * dx_hat - dx_hat.sum(axis=axes) - x_hat * (dx_hat * x_hat).sum(axis=axes))
    return dx, dgamma, dbeta


def layer_forward(spec: LayerSpec, p: LayerParams, x: np.ndarray, skip: Optional[np.ndarray] = None,
                  training: bool = False) -> tuple[np.ndarray, LayerCache]:
    kind = spec.kind
    if kind is LayerKind.CONV3X3:
        return conv2d_forward(x, p.weights, p.bias), LayerCache(kind, x)
    if kind is LayerKind.DEPTHWISE_CONV3X3:
        return depthwise_conv_forward(x, p.weights, p.bias), LayerCache(kind, x)
    if kind in (LayerKind.POINTWISE_CONV1X1, LayerKind.CONV1X1_OUT):
        return pointwise_conv_forward(x, p.weights, p.bias), LayerCache(kind, x)
    if kind is LayerKind.TRANSPOSED_CONV2X2:
        return transposed_conv2x2_forward(x, p.weights, p.bias), LayerCache(kind, x)
    if kind is LayerKind.BATCH_NORM:
        out, extra = batchnorm_forward(x, p, training)
        return out, LayerCache(kind, x, extra)
    if kind is LayerKind.RELU:
        return relu(x), LayerCache(kind, x)
    if kind is LayerKind.MAXPOOL2X2:
        out, argmax = maxpool2x2_forward(x)
        return out, LayerCache(kind, None, {"argmax": argmax})
    if kind is LayerKind.CONCAT:
        if skip is None:
            raise ShapeMismatchError(f"concat {spec.name} received no skip tensor")
        return concat_channels(x, skip), LayerCache(kind, None, {"split": x.shape[3]})
    if kind is LayerKind.SIGMOID:
        out = sigmoid(x)
        return out, LayerCache(kind, None, {"out": out})
    raise ValueError(f"unknown layer kind {kind}")


def layer_backward(spec: LayerSpec, p: LayerParams, dout: np.ndarray, cache: Optional[LayerCache]):
    """Returns (dL/din, dL/dskip or None, LayerParams of gradients)."""
    if cache is None or cache.kind is not spec.kind:
        raise ValueError(f"layer {spec.name}: missing forward cache")
    kind = spec.kind
    if kind is LayerKind.CONV3X3:
        dx, dw, db = conv2d_backward(dout, cache.x, p.weights)
        return dx, None, LayerParams(dw, db)
    if kind is LayerKind.DEPTHWISE_CONV3X3:
        dx, dw, db = depthwise_conv_backward(dout, cache.x, p.weights)
        return dx, None, LayerParams(dw, db)
    if kind in (LayerKind.POINTWISE_CONV1X1, LayerKind.CONV1X1_OUT):
        dx, dw, db = pointwise_conv_backward(dout, cache.x, p.weights)
        return dx, None, LayerParams(dw, db)
    if kind is LayerKind.TRANSPOSED_CONV2X2:
        dx, dw, db = transposed_conv2x2_backward(dout, cache.x, p.weights)
        return dx, None, LayerParams(dw, db)
    if kind is LayerKind.BATCH_NORM:
        dx, dgamma, dbeta = batchnorm_backward(dout, p, cache.extra)
        return dx, None, LayerParams(dgamma, dbeta)
    if kind is LayerKind.RELU:
        return relu_backward(dout, cache.x), None, LayerParams()
    if kind is LayerKind.MAXPOOL2X2:
        return maxpool2x2_backward(dout, cache.extra["argmax"]), None, LayerParams()
    if kind is LayerKind.CONCAT:
        split = cache.extra["split"]
        return dout[..., :split], dout[..., split:], LayerParams()
    if kind is LayerKind.SIGMOID:
        return sigmoid_backward(dout, cache.extra["out"]), None, LayerParams()
    raise ValueError(f"unknown layer kind {kind}")


def param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    cin, f = spec.in_channels, spec.filters
    if spec.kind is LayerKind.CONV3X3:
        return {"weights": (3, 3, cin, f), "bias": (f,)}
    if spec.kind is LayerKind.DEPTHWISE_CONV3X3:
        return {"weights": (3, 3, cin), "bias": (cin,)}
    if spec.kind in (LayerKind.POINTWISE_CONV1X1, LayerKind.CONV1X1_OUT):
        return {"weights": (1, 1, cin, f), "bias": (f,)}
    if spec.kind is LayerKind.TRANSPOSED_CONV2X2:
        return {"weights": (2, 2, f, cin), "bias": (f,)}
    if spec.kind is LayerKind.BATCH_NORM:
        return {"weights": (cin,), "bias": (cin,), "moving_mean": (cin,), "moving_var": (cin,)}
    return {}


def check_params(graph: LayerGraph, params: list[LayerParams]) -> None:
    if len(params) != len(graph.layers):
        raise ShapeMismatchError(f"{len(params)} parameter sets for {len(graph.layers)} layers")
    for spec, p in zip(graph.layers, params):
        expected = param_shapes(spec)
        for name in ("weights", "bias", "moving_mean", "moving_var"):
            array = getattr(p, name)
            want = expected.get(name)
            got = None if array is None else tuple(array.shape)
            if got != want:
                raise ShapeMismatchError(f"layer {spec.name}: {name} has shape {got}, graph needs {want}")


def _fan_in(spec: LayerSpec) -> int:
    return {
        LayerKind.CONV3X3: 9 * spec.in_channels,
        LayerKind.DEPTHWISE_CONV3X3: 9,
        LayerKind.POINTWISE_CONV1X1: spec.in_channels,
        LayerKind.CONV1X1_OUT: spec.in_channels,
        LayerKind.TRANSPOSED_CONV2X2: 4 * spec.in_channels,
    }[spec.kind]


def init_params(graph: LayerGraph, seed: int = 0, dtype=np.float32,
                head_prior: float = HEAD_PRIOR) -> list[LayerParams]:
    """He-uniform kernels, identity BatchNorm; seeded.

    Biases start at zero except on the output head, which starts at the logit
    of ``head_prior`` so a fresh model predicts background almost everywhere.
    ``head_prior=0.5`` gives an all-zero bias set.
    """
    if not 0.0 < head_prior < 1.0:
        raise ValueError(f"head_prior must lie in (0, 1), got {head_prior}")
    rng = np.random.default_rng(seed)
    params = []
    for spec in graph.layers:
        shapes = param_shapes(spec)
        if spec.kind is LayerKind.BATCH_NORM:
            c = spec.in_channels
            params.append(LayerParams(np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype)))
        elif shapes:
            limit = np.sqrt(6.0 / _fan_in(spec))
            weights = rng.uniform(-limit, limit, size=shapes["weights"]).astype(dtype)
            bias = np.zeros(shapes["bias"], dtype)
            if spec.kind is LayerKind.CONV1X1_OUT:
                bias[:] = np.log(head_prior / (1.0 - head_prior))
            params.append(LayerParams(weights, bias))
        else:
            params.append(LayerParams())
    return params


Trace = Callable[[LayerSpec, np.ndarray, np.ndarray], None]


def _run(graph: LayerGraph, params: list[LayerParams], x, training: bool, keep_cache: bool,
         trace: Optional[Trace], return_logits: bool):
    x = as_tensor(x)
    cfg = graph.config
    if x.shape[1:] != (cfg.input_h, cfg.input_w, cfg.input_c):
        raise ShapeMismatchError(
            f"input {x.shape[1:]} does not match graph input {(cfg.input_h, cfg.input_w, cfg.input_c)}"
        )
    check_params(graph, params)
    keep = graph.skip_sources
    saved: dict[int, np.ndarray] = {}
    caches: list[LayerCache] = []
    h = x
    last = len(graph.layers) - 1
    for spec, p in zip(graph.layers, params):
        if return_logits and spec.index == last:
            break
        skip = saved[spec.skip_source] if spec.skip_source is not None else None
        out, cache = layer_forward(spec, p, h, skip, training)
        if trace is not None:
            trace(spec, h, out)
        if keep_cache:
            caches.append(cache)
        if spec.index in keep:
            saved[spec.index] = out
        h = out
    return h, caches


def model_forward(graph: LayerGraph, params: list[LayerParams], x, training: bool = False,
                  return_logits: bool = False, trace: Optional[Trace] = None) -> np.ndarray:
    """Probability map N x H x W x 1 (or the pre-sigmoid logits)."""
    out, _ = _run(graph, params, x, training, False, trace, return_logits)
    return out


def forward_with_cache(graph: LayerGraph, params: list[LayerParams], x, training: bool = True):
    return _run(graph, params, x, training, True, None, False)


def model_backward(graph: LayerGraph, params: list[LayerParams], caches: list[LayerCache],
                   dout: np.ndarray) -> tuple[list[LayerParams], np.ndarray]:
    """Reverse pass; returns per-layer gradients and dL/dinput."""
    if len(caches) != len(graph.layers):
        raise ValueError("missing forward cache: run forward_with_cache first")
    grads: list[Optional[LayerParams]] = [None] * len(graph.layers)
    pending: dict[int, np.ndarray] = {}
    d = dout
    for spec in reversed(graph.layers):
        if spec.index in pending:
            d = d + pending.pop(spec.index)
        d, dskip, grads[spec.index] = layer_backward(spec, params[spec.index], d, caches[spec.index])
        if dskip is not None:
            pending[spec.skip_source] = pending.get(spec.skip_source, 0) + dskip
    return grads, d


def apply_batch_statistics(graph: LayerGraph, params: list[LayerParams], caches: list[LayerCache],
                           momentum: float = BN_MOMENTUM) -> list[LayerParams]:
    """Fold one training batch's BatchNorm statistics into the moving averages."""
    updated = list(params)
    for spec, cache in zip(graph.layers, caches):
        if spec.kind is LayerKind.BATCH_NORM and cache.extra.get("training"):
            p = params[spec.index]
            mean = cache.extra["mean"].astype(p.moving_mean.dtype)
            var = cache.extra["var"].astype(p.moving_var.dtype)
            updated[spec.index] = LayerParams(
                p.weights, p.bias,
                momentum * p.moving_mean + (1 - momentum) * mean,
                momentum * p.moving_var + (1 - momentum) * var,
            )
    return updated


def kernel_macs(graph: LayerGraph, params: list[LayerParams], x) -> int:
    """Multiply-accumulates actually issued by the kernels for one image.

    Counted from the runtime tensor and weight shapes while the float forward
    runs, independently of the static per-kind formulas.
    """
    total = 0

    def count(spec: LayerSpec, x_in: np.ndarray, out: np.ndarray) -> None:
        nonlocal total
        w = params[spec.index].weights
        per_output = {
            LayerKind.CONV3X3: lambda: w.shape[0] * w.shape[1] * w.shape[2],
            LayerKind.DEPTHWISE_CONV3X3: lambda: w.shape[0] * w.shape[1],
            LayerKind.POINTWISE_CONV1X1: lambda: w.shape[2],
            LayerKind.CONV1X1_OUT: lambda: w.shape[2],
        }
        if spec.kind in per_output:
            total += (out[0].size) * per_output[spec.kind]()
        elif spec.kind is LayerKind.TRANSPOSED_CONV2X2:
            # every input element is scattered into 2 x 2 x Cout outputs
            total += x_in[0].size * w.shape[0] * w.shape[1] * w.shape[2]

    model_forward(graph, params, np.asarray(x)[:1], trace=count)
    return total
