"""Layer-graph generator and static resource accounting for the U-Net grid.

The grid is three depths (5, 4, 3 conv blocks) by five filter scales
(x1 .. x1/16) by two convolution types. A ``LayerGraph`` is the single source
of truth: the kernels walk it, the counters sum over it and the model file
stores it verbatim.
"""
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from fractions import Fraction
from typing import Any, Literal, Optional

import pandas as pd
from pydantic import BaseModel, ConfigDict, field_serializer, field_validator, model_validator

GRID_DEPTHS = (5, 4, 3)
GRID_SCALES = (Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8), Fraction(1, 16))

# magic(4) + version(2) + flags(2) + header length(4) + crc32(4)
MODEL_FILE_FRAMING_BYTES = 16


class ConvType(str, Enum):
    STANDARD = "standard"
    DEPTHWISE_SEPARABLE = "depthwise"

    @property
    def label(self) -> str:
        return "Conv2D" if self is ConvType.STANDARD else "DWConv2D"


class LayerKind(str, Enum):
    CONV3X3 = "conv3x3"
    DEPTHWISE_CONV3X3 = "depthwise_conv3x3"
    POINTWISE_CONV1X1 = "pointwise_conv1x1"
    CONV1X1_OUT = "conv1x1_out"
    BATCH_NORM = "batch_norm"
    RELU = "relu"
    MAXPOOL2X2 = "maxpool2x2"
    TRANSPOSED_CONV2X2 = "transposed_conv2x2"
    CONCAT = "concat"
    SIGMOID = "sigmoid"


CONV_KINDS = frozenset({
    LayerKind.CONV3X3,
    LayerKind.DEPTHWISE_CONV3X3,
    LayerKind.POINTWISE_CONV1X1,
    LayerKind.CONV1X1_OUT,
    LayerKind.TRANSPOSED_CONV2X2,
})
# channel-preserving, value-wise layers; these may run in place
ELEMENTWISE_KINDS = frozenset({LayerKind.RELU, LayerKind.SIGMOID, LayerKind.BATCH_NORM})


def parse_scale(value: Any) -> Fraction:
    """Accept 1, 0.25, "1/4", "x1/4" or a Fraction."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value.strip().lower().lstrip("x"))
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1024)
    return Fraction(value)


def format_scale(scale: Fraction) -> str:
    return "1" if scale == 1 else f"{scale.numerator}/{scale.denominator}"


class ArchConfig(BaseModel):
    """One point of the architecture grid."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    depth: int
    filter_scale: Fraction
    conv_type: ConvType = ConvType.STANDARD
    input_h: int = 96
    input_w: int = 96
    input_c: int = 3
    base_filters: int = 64
    separable_layout: Literal["block", "per_conv"] = "block"
    off_grid: bool = False

    @field_validator("filter_scale", mode="before")
    @classmethod
    def _parse_scale(cls, value: Any) -> Fraction:
        return parse_scale(value)

    @field_serializer("filter_scale")
    def _dump_scale(self, value: Fraction) -> str:
        return format_scale(value)

    @model_validator(mode="after")
    def _check_invariants(self) -> "ArchConfig":
        if min(self.input_h, self.input_w, self.input_c, self.base_filters, self.depth) < 1:
            raise ValueError("depth, input dims and base_filters must be positive")
        if not self.off_grid:
            if self.depth not in GRID_DEPTHS:
                raise ValueError(f"depth {self.depth} outside the grid {sorted(GRID_DEPTHS)}")
            if self.filter_scale not in GRID_SCALES:
                grid = ", ".join(f"x{format_scale(s)}" for s in GRID_SCALES)
                raise ValueError(f"filter scale x{format_scale(self.filter_scale)} outside the grid ({grid})")
        first = self.base_filters * self.filter_scale
        if first <= 0 or first.denominator != 1:
            raise ValueError(
                f"base_filters x scale = {first} is not a positive integer filter count"
            )
        stride = 2 ** (self.depth - 1)
        if self.input_h % stride or self.input_w % stride:
            raise ValueError(
                f"input {self.input_h}x{self.input_w} is not divisible by 2^(depth-1) = {stride}"
            )
        return self

    def filters(self, level: int) -> int:
        """Filter count of encoder level ``level``; level depth-1 is the bottleneck."""
        return int(self.base_filters * self.filter_scale) * 2 ** level

    @property
    def config_id(self) -> str:
        conv = "conv2d" if self.conv_type is ConvType.STANDARD else "dwconv2d"
        scale = format_scale(self.filter_scale).replace("/", "_")
        return f"u{self.depth}-{conv}-x{scale}"

    @property
    def label(self) -> str:
        return f"U-Net {self.depth} ConvBlocks {self.conv_type.label} x{format_scale(self.filter_scale)}"


def parse_config_id(config_id: str, **overrides: Any) -> ArchConfig:
    """Inverse of ``ArchConfig.config_id`` (``u4-dwconv2d-x1_4``)."""
    try:
        depth_part, conv_part, scale_part = config_id.strip().lower().split("-")
        depth = int(depth_part.lstrip("u"))
        conv = {"conv2d": ConvType.STANDARD, "dwconv2d": ConvType.DEPTHWISE_SEPARABLE}[conv_part]
        scale = parse_scale(scale_part.lstrip("x").replace("_", "/"))
    except (ValueError, KeyError) as e:
        raise ValueError(f"malformed config id {config_id!r}") from e
    return ArchConfig(depth=depth, filter_scale=scale, conv_type=conv, **overrides)


Shape = tuple[int, int, int]


def infer_out_shape(kind: LayerKind, in_shape: Shape, filters: int) -> Shape:
    h, w, c = in_shape
    if kind in (LayerKind.CONV3X3, LayerKind.POINTWISE_CONV1X1, LayerKind.CONV1X1_OUT, LayerKind.CONCAT):
        return (h, w, filters)
    if kind is LayerKind.DEPTHWISE_CONV3X3 or kind in ELEMENTWISE_KINDS:
        return (h, w, c)
    if kind is LayerKind.MAXPOOL2X2:
        if h % 2 or w % 2:
            raise ValueError(f"maxpool needs even spatial dims, got {h}x{w}")
        return (h // 2, w // 2, c)
    if kind is LayerKind.TRANSPOSED_CONV2X2:
        return (2 * h, 2 * w, filters)
    raise ValueError(f"unknown layer kind {kind}")


class LayerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    index: int
    name: str
    kind: LayerKind
    in_shape: Shape
    out_shape: Shape
    filters: int
    skip_source: Optional[int] = None

    @model_validator(mode="after")
    def _check_shape_law(self) -> "LayerSpec":
        if self.out_shape != infer_out_shape(self.kind, self.in_shape, self.filters):
            raise ValueError(f"layer {self.name}: out_shape {self.out_shape} breaks the {self.kind.value} shape law")
        if (self.kind is LayerKind.CONCAT) != (self.skip_source is not None):
            raise ValueError(f"layer {self.name}: skip_source is set exactly on concat layers")
        return self

    @property
    def in_channels(self) -> int:
        return self.in_shape[2]


def layer_param_count(spec: LayerSpec) -> int:
    cin, cout = spec.in_channels, spec.filters
    if spec.kind is LayerKind.CONV3X3:
        return 9 * cin * cout + cout
    if spec.kind is LayerKind.DEPTHWISE_CONV3X3:
        return 9 * cin + cin
    if spec.kind in (LayerKind.POINTWISE_CONV1X1, LayerKind.CONV1X1_OUT):
        return cin * cout + cout
    if spec.kind is LayerKind.TRANSPOSED_CONV2X2:
        return 4 * cin * cout + cout
    if spec.kind is LayerKind.BATCH_NORM:
        # gamma, beta, moving mean, moving variance
        return 4 * cin
    return 0


def layer_bias_count(spec: LayerSpec) -> int:
    if spec.kind in CONV_KINDS:
        return spec.filters
    return 0


def layer_macs(spec: LayerSpec) -> int:
    h, w, cin = spec.in_shape
    if spec.kind is LayerKind.CONV3X3:
        return h * w * 9 * cin * spec.filters
    if spec.kind is LayerKind.DEPTHWISE_CONV3X3:
        return h * w * 9 * cin
    if spec.kind in (LayerKind.POINTWISE_CONV1X1, LayerKind.CONV1X1_OUT):
        return h * w * cin * spec.filters
    if spec.kind is LayerKind.TRANSPOSED_CONV2X2:
        return h * w * 4 * cin * spec.filters
    return 0


class LayerGraph(BaseModel):
    model_config = ConfigDict(frozen=True)

    config: ArchConfig
    layers: tuple[LayerSpec, ...]
    param_count: int
    mac_count: int

    @classmethod
    def from_layers(cls, config: ArchConfig, layers: list[LayerSpec]) -> "LayerGraph":
        return cls(
            config=config,
            layers=tuple(layers),
            param_count=sum(layer_param_count(s) for s in layers),
            mac_count=sum(layer_macs(s) for s in layers),
        )

    @model_validator(mode="after")
    def _check_graph(self) -> "LayerGraph":
        if not self.layers:
            raise ValueError("a layer graph needs at least one layer")
        cfg = self.config
        expected = (cfg.input_h, cfg.input_w, cfg.input_c)
        for position, spec in enumerate(self.layers):
            if spec.index != position:
                raise ValueError(f"layer {spec.name} has index {spec.index}, expected {position}")
            if spec.in_shape != expected:
                raise ValueError(f"layer {spec.name} expects {spec.in_shape}, receives {expected}")
            if spec.kind is LayerKind.CONCAT:
                if not 0 <= spec.skip_source < position:
                    raise ValueError(f"layer {spec.name}: skip source {spec.skip_source} is not upstream")
                skip = self.layers[spec.skip_source].out_shape
                if skip[:2] != spec.in_shape[:2] or spec.filters != spec.in_channels + skip[2]:
                    raise ValueError(f"layer {spec.name}: skip tensor {skip} does not stack onto {spec.in_shape}")
            expected = spec.out_shape
        last = self.layers[-1]
        if last.kind is not LayerKind.SIGMOID or last.out_shape != (cfg.input_h, cfg.input_w, 1):
            raise ValueError("the final layer must be a sigmoid over a 1-channel map of input H x W")
        if self.param_count != sum(layer_param_count(s) for s in self.layers):
            raise ValueError("param_count disagrees with the layers")
        if self.mac_count != sum(layer_macs(s) for s in self.layers):
            raise ValueError("mac_count disagrees with the layers")
        return self

    @property
    def skip_sources(self) -> frozenset[int]:
        return frozenset(s.skip_source for s in self.layers if s.skip_source is not None)

    def to_json(self) -> str:
        return self.model_dump_json()

    @classmethod
    def from_json(cls, text: str) -> "LayerGraph":
        return cls.model_validate_json(text)


class _GraphBuilder:
    def __init__(self, config: ArchConfig):
        self.config = config
        self.layers: list[LayerSpec] = []
        self.shape: Shape = (config.input_h, config.input_w, config.input_c)

    def add(self, kind: LayerKind, name: str, filters: Optional[int] = None, skip_source: Optional[int] = None) -> int:
        if kind is LayerKind.CONCAT:
            filters = self.shape[2] + self.layers[skip_source].out_shape[2]
        elif filters is None:
            filters = self.shape[2]
        out_shape = infer_out_shape(kind, self.shape, filters)
        self.layers.append(LayerSpec(
            index=len(self.layers),
            name=name,
            kind=kind,
            in_shape=self.shape,
            out_shape=out_shape,
            filters=filters,
            skip_source=skip_source,
        ))
        self.shape = out_shape
        return len(self.layers) - 1

    def conv_block(self, prefix: str, filters: int) -> int:
        """Two 3x3 convs + ReLU, or their depthwise-separable replacement."""
        cfg = self.config
        if cfg.conv_type is ConvType.STANDARD:
            self.add(LayerKind.CONV3X3, f"{prefix}.conv1", filters)
            self.add(LayerKind.RELU, f"{prefix}.relu1")
            self.add(LayerKind.CONV3X3, f"{prefix}.conv2", filters)
            return self.add(LayerKind.RELU, f"{prefix}.relu2")
        if cfg.separable_layout == "block":
            self.add(LayerKind.DEPTHWISE_CONV3X3, f"{prefix}.dw")
            self.add(LayerKind.POINTWISE_CONV1X1, f"{prefix}.pw", filters)
            self.add(LayerKind.BATCH_NORM, f"{prefix}.bn")
            return self.add(LayerKind.RELU, f"{prefix}.relu")
        # per_conv: ReLU after the pointwise stage only
        self.add(LayerKind.DEPTHWISE_CONV3X3, f"{prefix}.dw1")
        self.add(LayerKind.POINTWISE_CONV1X1, f"{prefix}.pw1", filters)
        self.add(LayerKind.RELU, f"{prefix}.relu1")
        self.add(LayerKind.DEPTHWISE_CONV3X3, f"{prefix}.dw2")
        self.add(LayerKind.POINTWISE_CONV1X1, f"{prefix}.pw2", filters)
        return self.add(LayerKind.RELU, f"{prefix}.relu2")


def build_graph(config: ArchConfig) -> LayerGraph:
    """Encoder blocks, bottleneck, mirrored decoder, 1x1 conv + sigmoid head."""
    builder = _GraphBuilder(config)
    skips: list[int] = []
    for level in range(config.depth - 1):
        skips.append(builder.conv_block(f"down{level + 1}", config.filters(level)))
        builder.add(LayerKind.MAXPOOL2X2, f"down{level + 1}.pool")
    builder.conv_block("bottleneck", config.filters(config.depth - 1))
    for step, level in enumerate(reversed(range(config.depth - 1)), start=1):
        prefix = f"up{step}"
        builder.add(LayerKind.TRANSPOSED_CONV2X2, f"{prefix}.upconv", config.filters(level))
        builder.add(LayerKind.CONCAT, f"{prefix}.concat", skip_source=skips[level])
        builder.conv_block(prefix, config.filters(level))
    builder.add(LayerKind.CONV1X1_OUT, "output.conv", 1)
    builder.add(LayerKind.SIGMOID, "output.sigmoid")
    return LayerGraph.from_layers(config, builder.layers)


def count_params(graph: LayerGraph) -> int:
    return sum(layer_param_count(spec) for spec in graph.layers)


def count_macs(graph: LayerGraph) -> int:
    return sum(layer_macs(spec) for spec in graph.layers)


def enumerate_grid(**overrides: Any) -> list[ArchConfig]:
    """All 30 grid points in sweep order: depth 5->3, Conv2D first, x1 -> x1/16."""
    return [
        ArchConfig(depth=depth, filter_scale=scale, conv_type=conv, **overrides)
        for depth in GRID_DEPTHS
        for conv in (ConvType.STANDARD, ConvType.DEPTHWISE_SEPARABLE)
        for scale in GRID_SCALES
    ]


def grid_position(config: ArchConfig) -> tuple[int, int, int]:
    """Sort key putting configurations in sweep order."""
    conv_order = (ConvType.STANDARD, ConvType.DEPTHWISE_SEPARABLE)
    return (
        GRID_DEPTHS.index(config.depth),
        conv_order.index(config.conv_type),
        GRID_SCALES.index(config.filter_scale),
    )


def params_thousands(params: int) -> float:
    """Parameter count in thousands, rounded half-up to two decimals."""
    return float(Decimal(params).scaleb(-3).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def activation_trace(graph: LayerGraph) -> list[int]:
    """Live activation elements after each execution step (step 0 = input only).

    A tensor is freed right after its last consumer runs; skip tensors stay
    live until their concat. Elementwise layers whose input dies at that step
    overwrite the input buffer instead of allocating.
    """
    cfg = graph.config
    sizes = {-1: cfg.input_h * cfg.input_w * cfg.input_c}
    last_use = {-1: 0}
    for spec in graph.layers:
        h, w, c = spec.out_shape
        sizes[spec.index] = h * w * c
        last_use[spec.index - 1] = spec.index
        if spec.skip_source is not None:
            last_use[spec.skip_source] = max(last_use.get(spec.skip_source, 0), spec.index)
    last_use[len(graph.layers) - 1] = len(graph.layers)  # the model output outlives the graph

    live = {-1}
    trace = [sizes[-1]]
    for spec in graph.layers:
        source = spec.index - 1
        if spec.kind in ELEMENTWISE_KINDS and last_use[source] == spec.index:
            live.discard(source)
            live.add(spec.index)
            trace.append(sum(sizes[t] for t in live))
            continue
        live.add(spec.index)
        trace.append(sum(sizes[t] for t in live))
        live = {t for t in live if last_use[t] > spec.index}
    return trace


class LayerResource(BaseModel):
    index: int
    name: str
    kind: LayerKind
    params: int
    macs: int
    weight_bytes: int
    bias_bytes: int
    output_bytes: int
    live_bytes: int


class ResourceEstimate(BaseModel):
    params: int
    macs: int
    weight_bytes: int
    bias_bytes: int
    header_bytes: int
    flash_bytes: int
    peak_activation_bytes: int
    weight_width: int
    activation_width: int
    per_layer: list[LayerResource]

    @property
    def payload_bytes(self) -> int:
        return self.weight_bytes + self.bias_bytes


def estimate_resources(graph: LayerGraph, weight_width: int = 1, activation_width: int = 1) -> ResourceEstimate:
    """Flash and peak-RAM estimate.

    Kernel elements take ``weight_width`` bytes, biases are int32/float32
    (4 bytes). With int8 weights BatchNorm is folded into the preceding
    pointwise conv and stores nothing; with float weights it keeps its four
    float32 vectors. The header term covers the model-file framing and the
    graph JSON only, so the flash figure is a lower bound on a real file.
    """
    if weight_width not in (1, 4) or activation_width not in (1, 4):
        raise ValueError(f"widths must be 1 or 4 bytes, got {weight_width} and {activation_width}")
    trace = activation_trace(graph)
    rows = []
    for spec in graph.layers:
        params = layer_param_count(spec)
        if spec.kind is LayerKind.BATCH_NORM:
            weight_bytes, bias_bytes = 0, (0 if weight_width == 1 else params * 4)
        else:
            biases = layer_bias_count(spec)
            weight_bytes, bias_bytes = (params - biases) * weight_width, biases * 4
        h, w, c = spec.out_shape
        rows.append(LayerResource(
            index=spec.index,
            name=spec.name,
            kind=spec.kind,
            params=params,
            macs=layer_macs(spec),
            weight_bytes=weight_bytes,
            bias_bytes=bias_bytes,
            output_bytes=h * w * c * activation_width,
            live_bytes=trace[spec.index + 1] * activation_width,
        ))
    weight_total = sum(r.weight_bytes for r in rows)
    bias_total = sum(r.bias_bytes for r in rows)
    header = MODEL_FILE_FRAMING_BYTES + len(graph.to_json().encode("utf-8"))
    return ResourceEstimate(
        params=count_params(graph),
        macs=count_macs(graph),
        weight_bytes=weight_total,
        bias_bytes=bias_total,
        header_bytes=header,
        flash_bytes=weight_total + bias_total + header,
        peak_activation_bytes=max(trace) * activation_width,
        weight_width=weight_width,
        activation_width=activation_width,
        per_layer=rows,
    )


def grid_table(**overrides: Any) -> pd.DataFrame:
    """Static accounting for every grid point (int8 weights and activations)."""
    rows = []
    for config in enumerate_grid(**overrides):
        graph = build_graph(config)
        est = estimate_resources(graph, weight_width=1, activation_width=1)
        rows.append({
            "config_id": config.config_id,
            "depth": config.depth,
            "conv_type": config.conv_type.label,
            "filter_scale": f"x{format_scale(config.filter_scale)}",
            "params": est.params,
            "params_k": params_thousands(est.params),
            "macs": est.macs,
            "flash_bytes": est.flash_bytes,
            "peak_ram_bytes": est.peak_activation_bytes,
        })
    return pd.DataFrame(rows)
