import json
import math
from collections import Counter
from fractions import Fraction

import pytest
from pydantic import ValidationError

from archgen import (
    ELEMENTWISE_KINDS,
    ArchConfig,
    ConvType,
    LayerGraph,
    LayerKind,
    LayerSpec,
    activation_trace,
    build_graph,
    count_macs,
    count_params,
    enumerate_grid,
    estimate_resources,
    grid_position,
    grid_table,
    params_thousands,
    parse_config_id,
)
from tensorops import param_shapes

S, D = ConvType.STANDARD, ConvType.DEPTHWISE_SEPARABLE
SCALES = ["1", "1/2", "1/4", "1/8", "1/16"]

# thousands of parameters per (depth, conv type), scales x1 .. x1/16
PARAMS_K = {
    (5, S): [31031.75, 7760.10, 1941.11, 485.82, 121.73],
    (5, D): [4222.69, 1066.88, 272.34, 70.90, 19.15],
    (4, S): [7697.35, 1925.60, 482.03, 120.83, 30.37],
    (4, D): [1053.41, 268.67, 69.84, 18.81, 5.39],
    (3, S): [1862.85, 466.53, 117.04, 29.47, 7.47],
    (3, D): [255.20, 66.18, 17.74, 5.05, 1.58],
}

GRID_CASES = [
    (depth, conv, scale, expected)
    for (depth, conv), values in PARAMS_K.items()
    for scale, expected in zip(SCALES, values)
]


@pytest.mark.parametrize("depth,conv,scale,expected", GRID_CASES)
def test_param_counts_match_reference_grid(depth, conv, scale, expected):
    graph = build_graph(ArchConfig(depth=depth, filter_scale=scale, conv_type=conv))
    assert params_thousands(count_params(graph)) == expected


@pytest.mark.parametrize("params,expected", [
    (31_031_745, 31031.75),
    (121_725, 121.73),
    (30_365, 30.37),
    (66_175, 66.18),
    (1_579, 1.58),
    (7_469, 7.47),
])
def test_thousands_round_half_up(params, expected):
    assert params_thousands(params) == expected


@pytest.mark.parametrize("config", enumerate_grid(), ids=lambda c: c.config_id)
def test_param_count_equals_tensor_elements(config):
    graph = build_graph(config)
    elements = sum(math.prod(shape) for spec in graph.layers for shape in param_shapes(spec).values())
    assert elements == count_params(graph)


def test_baseline_param_count_is_exact():
    graph = build_graph(ArchConfig(depth=5, filter_scale=1))
    assert count_params(graph) == 31_031_745
    assert graph.param_count == 31_031_745


def test_baseline_layer_shapes():
    graph = build_graph(ArchConfig(depth=5, filter_scale=1))
    by_name = {spec.name: spec for spec in graph.layers}
    assert by_name["down1.conv1"].out_shape == (96, 96, 64)
    assert by_name["down4.pool"].out_shape == (6, 6, 512)
    assert by_name["bottleneck.conv2"].out_shape == (6, 6, 1024)
    assert by_name["up1.upconv"].out_shape == (12, 12, 512)
    assert by_name["up1.concat"].out_shape == (12, 12, 1024)
    assert graph.layers[-1].out_shape == (96, 96, 1)


def test_depth_reduction_removes_the_deepest_pair():
    deep = build_graph(ArchConfig(depth=5, filter_scale="1/4"))
    shallow = build_graph(ArchConfig(depth=4, filter_scale="1/4"))
    deep_names = [s.name for s in deep.layers]
    assert "down4.pool" in deep_names
    assert "down4.pool" not in [s.name for s in shallow.layers]
    assert max(s.out_shape[2] for s in shallow.layers) == 128
    assert max(s.out_shape[2] for s in deep.layers) == 256


def test_depthwise_block_layout():
    graph = build_graph(ArchConfig(depth=3, filter_scale="1/16", conv_type=D))
    kinds = [s.kind for s in graph.layers[:4]]
    assert kinds == [LayerKind.DEPTHWISE_CONV3X3, LayerKind.POINTWISE_CONV1X1, LayerKind.BATCH_NORM, LayerKind.RELU]
    assert all(s.kind is not LayerKind.CONV3X3 for s in graph.layers)
    # the upsampling and the output head stay standard
    assert any(s.kind is LayerKind.TRANSPOSED_CONV2X2 for s in graph.layers)
    assert graph.layers[-2].kind is LayerKind.CONV1X1_OUT


def test_per_conv_layout_replaces_each_conv():
    graph = build_graph(ArchConfig(depth=3, filter_scale="1/16", conv_type=D, separable_layout="per_conv"))
    kinds = [s.kind for s in graph.layers[:6]]
    assert kinds == [
        LayerKind.DEPTHWISE_CONV3X3, LayerKind.POINTWISE_CONV1X1, LayerKind.RELU,
        LayerKind.DEPTHWISE_CONV3X3, LayerKind.POINTWISE_CONV1X1, LayerKind.RELU,
    ]
    assert not any(s.kind is LayerKind.BATCH_NORM for s in graph.layers)


@pytest.mark.parametrize("kwargs", [
    dict(depth=2, filter_scale=1),
    dict(depth=6, filter_scale=1),
    dict(depth=5, filter_scale="1/3"),
    dict(depth=5, filter_scale=1, input_h=100, input_w=100),
    dict(depth=3, filter_scale="1/128", off_grid=True),
])
def test_invalid_configs_are_rejected(kwargs):
    with pytest.raises(ValidationError):
        ArchConfig(**kwargs)


def test_off_grid_still_checks_divisibility():
    ArchConfig(depth=2, filter_scale=1, input_h=8, input_w=8, off_grid=True)
    with pytest.raises(ValidationError):
        ArchConfig(depth=4, filter_scale=1, input_h=12, input_w=12, off_grid=True)


def test_scale_parsing_forms():
    for value in ("1/4", "x1/4", 0.25, Fraction(1, 4)):
        assert ArchConfig(depth=4, filter_scale=value).filter_scale == Fraction(1, 4)


def test_config_id_round_trip():
    config = ArchConfig(depth=4, filter_scale="1/4", conv_type=D)
    assert config.config_id == "u4-dwconv2d-x1_4"
    assert parse_config_id("u4-dwconv2d-x1_4") == config
    assert ArchConfig(depth=5, filter_scale=1).config_id == "u5-conv2d-x1"
    with pytest.raises(ValueError):
        parse_config_id("u4-sepconv-x1")


def test_enumerate_grid_order():
    grid = enumerate_grid()
    assert len(grid) == 30
    assert len({c.config_id for c in grid}) == 30
    assert grid[0].config_id == "u5-conv2d-x1"
    assert grid[5].config_id == "u5-dwconv2d-x1"
    assert grid[-1].config_id == "u3-dwconv2d-x1_16"


def test_params_and_macs_shrink_with_scale():
    grid = enumerate_grid()
    for start in range(0, 30, 5):
        graphs = [build_graph(c) for c in grid[start:start + 5]]
        params = [count_params(g) for g in graphs]
        macs = [count_macs(g) for g in graphs]
        assert params == sorted(params, reverse=True) and len(set(params)) == 5
        assert macs == sorted(macs, reverse=True) and len(set(macs)) == 5


def test_graph_json_round_trip():
    graph = build_graph(ArchConfig(depth=4, filter_scale="1/8", conv_type=D))
    again = LayerGraph.from_json(graph.to_json())
    assert again == graph
    assert json.loads(graph.to_json())["config"]["filter_scale"] == "1/8"


def test_graph_rejects_broken_shape_chain():
    graph = build_graph(ArchConfig(depth=3, filter_scale="1/16"))
    layers = list(graph.layers)
    layers[1], layers[2] = layers[2], layers[1]
    with pytest.raises(ValidationError):
        LayerGraph.from_layers(graph.config, layers)


def test_skip_source_only_on_concat():
    with pytest.raises(ValidationError):
        LayerSpec(index=0, name="bad", kind=LayerKind.RELU, in_shape=(4, 4, 2), out_shape=(4, 4, 2),
                  filters=2, skip_source=0)


def _sigmoid_only_graph():
    config = ArchConfig(depth=1, filter_scale=1, input_h=4, input_w=4, input_c=1, base_filters=1, off_grid=True)
    spec = LayerSpec(index=0, name="output.sigmoid", kind=LayerKind.SIGMOID,
                     in_shape=(4, 4, 1), out_shape=(4, 4, 1), filters=1)
    return LayerGraph.from_layers(config, [spec])


def test_in_place_sigmoid_peaks_at_one_buffer():
    graph = _sigmoid_only_graph()
    assert max(activation_trace(graph)) == 16
    assert estimate_resources(graph).peak_activation_bytes == 16


def test_skip_tensors_stay_live_until_concat():
    graph = build_graph(ArchConfig(depth=3, filter_scale="1/16"))
    trace = activation_trace(graph)
    concat = next(s for s in graph.layers if s.kind is LayerKind.CONCAT)
    skip_elements = 1
    for dim in graph.layers[concat.skip_source].out_shape:
        skip_elements *= dim
    # every step between the skip producer and its concat holds the skip tensor
    for step in range(concat.skip_source + 1, concat.index + 1):
        assert trace[step] >= skip_elements
    assert max(trace) >= max(h * w * c for h, w, c in (s.out_shape for s in graph.layers))


def _simulated_peak(graph):
    """Peak live elements from an explicit allocate/free walk over reader counts."""
    readers = Counter()
    for spec in graph.layers:
        readers[spec.index - 1] += 1
        if spec.skip_source is not None:
            readers[spec.skip_source] += 1
    cfg = graph.config
    buffers = {-1: cfg.input_h * cfg.input_w * cfg.input_c}
    peak = buffers[-1]
    for spec in graph.layers:
        reads = [spec.index - 1] + ([spec.skip_source] if spec.skip_source is not None else [])
        for t in reads:
            readers[t] -= 1
        if spec.kind in ELEMENTWISE_KINDS and readers[spec.index - 1] == 0:
            buffers[spec.index] = buffers.pop(spec.index - 1)
        else:
            buffers[spec.index] = math.prod(spec.out_shape)
        peak = max(peak, sum(buffers.values()))
        for t in reads:
            if readers[t] == 0:
                buffers.pop(t, None)
    return peak


@pytest.mark.parametrize("config", enumerate_grid(), ids=lambda c: c.config_id)
def test_peak_ram_matches_allocation_walk(config):
    graph = build_graph(config)
    peak = _simulated_peak(graph)
    assert max(activation_trace(graph)) == peak
    assert estimate_resources(graph, activation_width=1).peak_activation_bytes == peak


def test_flash_payload_counts_int8_weights_and_int32_biases():
    graph = build_graph(ArchConfig(depth=3, filter_scale="1/16"))
    est = estimate_resources(graph)
    biases = sum(s.filters for s in graph.layers if s.kind in (
        LayerKind.CONV3X3, LayerKind.TRANSPOSED_CONV2X2, LayerKind.CONV1X1_OUT))
    assert est.bias_bytes == 4 * biases
    assert est.weight_bytes == est.params - biases
    assert est.flash_bytes == est.payload_bytes + est.header_bytes


def test_batch_norm_costs_nothing_in_int8_flash():
    graph = build_graph(ArchConfig(depth=3, filter_scale="1/16", conv_type=D))
    int8 = estimate_resources(graph, weight_width=1)
    float32 = estimate_resources(graph, weight_width=4, activation_width=4)
    bn = [r for r in int8.per_layer if r.kind is LayerKind.BATCH_NORM]
    assert bn and all(r.weight_bytes == 0 and r.bias_bytes == 0 for r in bn)
    assert all(r.bias_bytes == 4 * r.params for r in float32.per_layer if r.kind is LayerKind.BATCH_NORM)
    assert float32.peak_activation_bytes == 4 * int8.peak_activation_bytes


def test_estimate_rejects_odd_widths():
    graph = build_graph(ArchConfig(depth=3, filter_scale="1/16"))
    with pytest.raises(ValueError):
        estimate_resources(graph, weight_width=2)


# reference int8 flash sizes in KiB for the four largest Conv2D variants
PUBLISHED_FLASH_KIB = {
    "u5-conv2d-x1": 30522.7,
    "u5-conv2d-x1_2": 7687.4,
    "u4-conv2d-x1": 7616.4,
    "u5-conv2d-x1_4": 1957.9,
}


@pytest.mark.parametrize("config_id,kib", sorted(PUBLISHED_FLASH_KIB.items()))
def test_flash_estimate_within_reference_band(config_id, kib):
    est = estimate_resources(build_graph(parse_config_id(config_id)))
    assert est.params <= est.flash_bytes <= kib * 1024 * 1.05


def test_grid_table_columns():
    table = grid_table()
    assert len(table) == 30
    assert list(table["config_id"]) == [c.config_id for c in enumerate_grid()]
    assert table.loc[0, "params"] == 31_031_745
    assert (table["flash_bytes"] > 0).all()


def test_grid_position_restores_sweep_order():
    grid = enumerate_grid()
    shuffled = grid[::-1][::2] + grid[::-1][1::2]
    assert [c.config_id for c in sorted(shuffled, key=grid_position)] == [c.config_id for c in grid]
