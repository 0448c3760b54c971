"""Post-training int8 quantization and the integer inference path.

Weights are symmetric int8 with one scale per output channel, activations are
asymmetric int8 with one (scale, zero_point) per tensor edge, biases are
int32 at scale s_in * s_w. Convolutions accumulate in int32 and requantize
with a float multiplier rounded half to even.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat

from archgen import CONV_KINDS, LayerGraph, LayerKind, LayerSpec
from errors import ShapeMismatchError
from tensorops import (
    BN_EPSILON,
    LayerParams,
    as_tensor,
    check_params,
    concat_channels,
    conv2d_forward,
    depthwise_conv_forward,
    maxpool2x2_forward,
    model_forward,
    pointwise_conv_forward,
    sigmoid,
    transposed_conv2x2_forward,
)

logger = logging.getLogger(__name__)

INT8_MIN, INT8_MAX = -128, 127
INT32_MIN, INT32_MAX = np.iinfo(np.int32).min, np.iinfo(np.int32).max
SCALE_FLOOR = 1e-9
INPUT_EDGE = -1

EdgeRanges = dict[int, tuple[float, float]]


class QuantParams(BaseModel):
    """Affine int8 mapping r = scale * (q - zero_point)."""

    model_config = ConfigDict(frozen=True)

    scale: PositiveFloat
    zero_point: int = Field(ge=INT8_MIN, le=INT8_MAX)

    def quantize(self, x: np.ndarray) -> np.ndarray:
        q = np.rint(np.asarray(x, dtype=np.float64) / self.scale) + self.zero_point
        return np.clip(q, INT8_MIN, INT8_MAX).astype(np.int8)

    def dequantize(self, q: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(q, dtype=np.float64) - self.zero_point)


def activation_params(lo: float, hi: float) -> tuple[QuantParams, bool]:
    """QuantParams covering [lo, hi] (widened to contain 0); flags a collapsed range."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    scale = (hi - lo) / 255
    degenerate = scale < SCALE_FLOOR
    if degenerate:
        scale = SCALE_FLOOR
    zero_point = int(np.clip(np.rint(-lo / scale) - 128, INT8_MIN, INT8_MAX))
    return QuantParams(scale=scale, zero_point=zero_point), degenerate


def _out_axis(kind: LayerKind) -> int:
    # transposed kernels are stored (2, 2, Cout, Cin)
    return 2 if kind is LayerKind.TRANSPOSED_CONV2X2 else -1


def quantize_weights(weights: np.ndarray, kind: LayerKind) -> tuple[np.ndarray, np.ndarray]:
    """Per-output-channel symmetric int8 weights and their scales (max|w| / 127).

    An all-zero channel gets scale 1/127 so its bias stays representable.
    """
    w = np.asarray(weights, dtype=np.float64)
    axis = _out_axis(kind) % w.ndim
    reduce_axes = tuple(a for a in range(w.ndim) if a != axis)
    peak = np.abs(w).max(axis=reduce_axes)
    scales = np.where(peak > 0, peak / 127, 1 / 127)
    shape = [1] * w.ndim
    shape[axis] = -1
    q = np.clip(np.rint(w / scales.reshape(shape)), -127, 127).astype(np.int8)
    return q, scales


def quantize_bias(bias: np.ndarray, input_scale: float, weight_scales: np.ndarray) -> np.ndarray:
    q = np.rint(np.asarray(bias, dtype=np.float64) / (input_scale * weight_scales))
    return np.clip(q, INT32_MIN, INT32_MAX).astype(np.int32)


@dataclass
class QuantizedLayer:
    spec: LayerSpec
    output: Optional[QuantParams]
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    weight_scales: Optional[np.ndarray] = None
    degenerate: bool = False


@dataclass
class QuantizedModel:
    graph: LayerGraph
    input: Optional[QuantParams]
    layers: list[QuantizedLayer] = field(default_factory=list)

    def weight_payload_bytes(self) -> int:
        return sum(l.weights.nbytes + l.bias.nbytes for l in self.layers if l.weights is not None)

    @property
    def degenerate_edges(self) -> list[str]:
        return [l.spec.name for l in self.layers if l.degenerate]


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x[None] if x.ndim == 3 else x


def calibrate(graph: LayerGraph, params: list[LayerParams], representative: Sequence[np.ndarray],
              batch_size: int = 8) -> EdgeRanges:
    """Running (min, max) of every float activation edge over a representative set.

    Edge -1 is the model input; edge i is the output of layer i. Every range
    contains 0.
    """
    if len(representative) == 0:
        raise ValueError("calibration needs at least one representative input")
    inputs = np.concatenate([_as_batch(x) for x in representative], axis=0)
    ranges: EdgeRanges = {}

    def record(edge: int, tensor: np.ndarray) -> None:
        lo, hi = float(tensor.min()), float(tensor.max())
        old_lo, old_hi = ranges.get(edge, (0.0, 0.0))
        ranges[edge] = (min(old_lo, lo), max(old_hi, hi))

    for start in range(0, len(inputs), batch_size):
        batch = inputs[start:start + batch_size]
        record(INPUT_EDGE, batch)
        model_forward(graph, params, batch, trace=lambda spec, _x, out: record(spec.index, out))
    return ranges


def fold_batch_norm(conv: LayerParams, bn: LayerParams, kind: LayerKind) -> LayerParams:
    """Fold inference-mode BatchNorm into the conv that feeds it."""
    factor = np.asarray(bn.weights, np.float64) / np.sqrt(np.asarray(bn.moving_var, np.float64) + BN_EPSILON)
    w = np.asarray(conv.weights, np.float64)
    shape = [1] * w.ndim
    shape[_out_axis(kind) % w.ndim] = -1
    bias = (np.asarray(conv.bias, np.float64) - bn.moving_mean) * factor + bn.bias
    return LayerParams(w * factor.reshape(shape), bias)


def quantize_model(graph: LayerGraph, params: list[LayerParams], ranges: EdgeRanges) -> QuantizedModel:
    check_params(graph, params)
    missing = [e for e in range(INPUT_EDGE, len(graph.layers)) if e not in ranges]
    if missing:
        raise ValueError(f"missing calibration range for edges {missing}")

    folded: dict[int, LayerParams] = {}
    range_of = dict(ranges)
    for spec in graph.layers:
        if spec.kind is LayerKind.BATCH_NORM:
            producer = graph.layers[spec.index - 1] if spec.index else None
            if producer is None or producer.kind not in CONV_KINDS:
                raise ValueError(f"batch norm {spec.name} does not follow a convolution")
            folded[producer.index] = fold_batch_norm(params[producer.index], params[spec.index], producer.kind)
            # after folding the conv emits the normalized tensor directly
            range_of[producer.index] = ranges[spec.index]

    input_params, degenerate = activation_params(*range_of[INPUT_EDGE])
    if degenerate:
        logger.warning("input range collapsed; scale floor %g applied", SCALE_FLOOR)
    edge: dict[int, QuantParams] = {INPUT_EDGE: input_params}
    layers: list[QuantizedLayer] = []
    for spec in graph.layers:
        in_params = edge[spec.index - 1]
        if spec.kind in (LayerKind.MAXPOOL2X2, LayerKind.BATCH_NORM):
            out_params, degenerate = in_params, False
        elif spec.kind is LayerKind.CONCAT:
            # the skip branch is requantized into the decoder tensor's params
            out_params, degenerate = in_params, False
        else:
            out_params, degenerate = activation_params(*range_of[spec.index])
        if degenerate:
            logger.warning("activation range of %s collapsed; scale floor %g applied", spec.name, SCALE_FLOOR)
        layer = QuantizedLayer(spec=spec, output=out_params, degenerate=degenerate)
        if spec.kind in CONV_KINDS:
            p = folded.get(spec.index, params[spec.index])
            layer.weights, layer.weight_scales = quantize_weights(p.weights, spec.kind)
            layer.bias = quantize_bias(p.bias, in_params.scale, layer.weight_scales)
        edge[spec.index] = out_params
        layers.append(layer)
    return QuantizedModel(graph=graph, input=input_params, layers=layers)


def requantize(values: np.ndarray, multiplier, out: QuantParams) -> np.ndarray:
    """int8 of round_half_even(values * multiplier) + zero_point, saturated."""
    q = np.rint(np.asarray(values, dtype=np.float64) * multiplier) + out.zero_point
    return np.clip(q, INT8_MIN, INT8_MAX).astype(np.int8)


_INT_KERNELS = {
    LayerKind.CONV3X3: conv2d_forward,
    LayerKind.DEPTHWISE_CONV3X3: depthwise_conv_forward,
    LayerKind.POINTWISE_CONV1X1: pointwise_conv_forward,
    LayerKind.CONV1X1_OUT: pointwise_conv_forward,
    LayerKind.TRANSPOSED_CONV2X2: transposed_conv2x2_forward,
}


def quantized_forward(qm: QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Float input in, float probabilities out; everything between is integer."""
    if qm.input is None or any(l.output is None for l in qm.layers):
        unset = ["input"] if qm.input is None else []
        unset += [l.spec.name for l in qm.layers if l.output is None]
        raise ValueError(f"no QuantParams for edges {unset}")
    x = as_tensor(x)
    cfg = qm.graph.config
    if x.shape[1:] != (cfg.input_h, cfg.input_w, cfg.input_c):
        raise ShapeMismatchError(f"input {x.shape[1:]} does not match graph input")

    skips = qm.graph.skip_sources
    saved: dict[int, tuple[np.ndarray, QuantParams]] = {}
    q, params = qm.input.quantize(x), qm.input
    logits: Optional[np.ndarray] = None
    last = len(qm.layers) - 1
    for layer in qm.layers:
        spec = layer.spec
        if spec.kind in CONV_KINDS:
            shifted = q.astype(np.int32) - np.int32(params.zero_point)
            acc = _INT_KERNELS[spec.kind](shifted, layer.weights.astype(np.int32), layer.bias)
            if spec.index == last - 1 and qm.layers[last].spec.kind is LayerKind.SIGMOID:
                logits = acc * (params.scale * layer.weight_scales)
            else:
                q = requantize(acc, params.scale * layer.weight_scales / layer.output.scale, layer.output)
        elif spec.kind is LayerKind.RELU:
            clamped = np.maximum(q, np.int8(params.zero_point)).astype(np.int32) - params.zero_point
            q = requantize(clamped, params.scale / layer.output.scale, layer.output)
        elif spec.kind is LayerKind.MAXPOOL2X2:
            q, _ = maxpool2x2_forward(q)
        elif spec.kind is LayerKind.CONCAT:
            skip_q, skip_params = saved[spec.skip_source]
            shifted = skip_q.astype(np.int32) - skip_params.zero_point
            q = concat_channels(q, requantize(shifted, skip_params.scale / params.scale, params))
        elif spec.kind is LayerKind.SIGMOID:
            if logits is None:
                logits = params.dequantize(q)
            return sigmoid(logits)
        # batch norm was folded into its producer
        params = layer.output
        if spec.index in skips:
            saved[spec.index] = (q, params)
    raise ValueError("graph ended without a sigmoid")


def quantization_report(qm: QuantizedModel) -> dict:
    """JSON-able per-layer scales and zero points."""
    layers = []
    for layer in qm.layers:
        layers.append({
            "index": layer.spec.index,
            "name": layer.spec.name,
            "kind": layer.spec.kind.value,
            "scale": layer.output.scale,
            "zero_point": layer.output.zero_point,
            "weight_scales": None if layer.weight_scales is None else [float(s) for s in layer.weight_scales],
            "degenerate": layer.degenerate,
        })
    return {
        "config_id": qm.graph.config.config_id,
        "input": qm.input.model_dump(),
        "payload_bytes": qm.weight_payload_bytes(),
        "degenerate_edges": qm.degenerate_edges,
        "layers": layers,
    }
