"""Per-configuration build -> train -> quantize -> evaluate workflow."""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Optional, Sequence, TypedDict

from langgraph.graph import END, StateGraph
from tqdm import tqdm

from archgen import ArchConfig, LayerGraph, ResourceEstimate, build_graph, estimate_resources
from dataio import DatasetSplits, stack
from errors import MicrosegError
from evaluation import MetricsRecord, evaluate_model
from quantization import QuantizedModel, calibrate, quantize_model
from sweep_table import SweepRow, row_from_state
from tensorops import FloatModel
from training import TrainConfig, TverskyParams, train

logger = logging.getLogger(__name__)


class PipelineState(TypedDict, total=False):
    config: ArchConfig
    splits: DatasetSplits
    train_config: TrainConfig
    tversky: TverskyParams
    calibration_samples: int
    threshold: float
    graph: LayerGraph
    estimate: ResourceEstimate
    float_model: FloatModel
    history: Any
    quantized: QuantizedModel
    float_metrics: MetricsRecord
    int8_metrics: MetricsRecord
    error: str
    failed_stage: str


def _failure(stage: str, config: ArchConfig, error: Exception) -> dict[str, Any]:
    logger.warning("%s failed at %s: %s", config.config_id, stage, error)
    return {"error": f"{type(error).__name__}: {error}", "failed_stage": stage}


def build_node(state: PipelineState) -> dict[str, Any]:
    config = state["config"]
    try:
        graph = build_graph(config)
        return {"graph": graph, "estimate": estimate_resources(graph)}
    except ValueError as e:
        return _failure("build", config, e)


def train_node(state: PipelineState) -> dict[str, Any]:
    config = state["config"]
    try:
        result = train(state["graph"], state["splits"], state.get("train_config", TrainConfig()),
                       state.get("tversky", TverskyParams()))
    except (MicrosegError, ValueError, FloatingPointError) as e:
        return _failure("train", config, e)
    return {"float_model": result.best_model(state["graph"]), "history": result.history}


def _calibration_split(splits: DatasetSplits, count: int):
    return (splits.val or splits.train)[:count]


def quantize_node(state: PipelineState) -> dict[str, Any]:
    config = state["config"]
    model = state["float_model"]
    try:
        images, _ = stack(_calibration_split(state["splits"], state.get("calibration_samples", 64)))
        ranges = calibrate(model.graph, model.params, [images])
        return {"quantized": quantize_model(model.graph, model.params, ranges)}
    except (MicrosegError, ValueError) as e:
        return _failure("quantize", config, e)


def _evaluation_split(splits: DatasetSplits):
    return splits.test or splits.val or splits.train


def evaluate_node(state: PipelineState) -> dict[str, Any]:
    config = state["config"]
    samples = _evaluation_split(state["splits"])
    threshold = state.get("threshold", 0.5)
    threads = state.get("train_config", TrainConfig()).threads
    try:
        return {
            "float_metrics": evaluate_model(state["float_model"], samples, threshold, threads=threads),
            "int8_metrics": evaluate_model(state["quantized"], samples, threshold, threads=threads),
        }
    except (MicrosegError, ValueError) as e:
        return _failure("evaluate", config, e)


def failure_node(state: PipelineState) -> dict[str, Any]:
    """Terminal node for a configuration that could not finish; the row keeps what was computed."""
    return {"failed_stage": state.get("failed_stage", "unknown")}


def should_continue(state: PipelineState) -> str:
    return "failed" if state.get("error") else "ok"


def build_pipeline():
    graph = StateGraph(PipelineState)

    graph.add_node("build", build_node)
    graph.add_node("train", train_node)
    graph.add_node("quantize", quantize_node)
    graph.add_node("evaluate", evaluate_node)
    graph.add_node("failure", failure_node)

    graph.set_entry_point("build")

    graph.add_conditional_edges("build", should_continue, {"ok": "train", "failed": "failure"})
    graph.add_conditional_edges("train", should_continue, {"ok": "quantize", "failed": "failure"})
    graph.add_conditional_edges("quantize", should_continue, {"ok": "evaluate", "failed": "failure"})
    graph.add_edge("evaluate", END)
    graph.add_edge("failure", END)

    return graph.compile()


def run_config(workflow, config: ArchConfig, splits: DatasetSplits, train_config: TrainConfig,
               calibration_samples: int = 64, threshold: float = 0.5) -> tuple[SweepRow, dict[str, Any]]:
    state = workflow.invoke({
        "config": config,
        "splits": splits,
        "train_config": train_config,
        "calibration_samples": calibration_samples,
        "threshold": threshold,
    })
    return row_from_state(config, state), state


def run_sweep(configs: Sequence[ArchConfig], splits: DatasetSplits, train_config: TrainConfig,
              calibration_samples: int = 64, threshold: float = 0.5, threads: Optional[int] = None,
              progress: bool = True) -> list[SweepRow]:
    """One row per configuration, in the order given, whatever the worker count."""
    workflow = build_pipeline()
    inner = train_config.model_copy(update={"progress": False})

    def run(config: ArchConfig) -> SweepRow:
        row, _ = run_config(workflow, config, splits, inner, calibration_samples, threshold)
        return row

    workers = max(1, min(threads or 1, len(configs)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(tqdm(pool.map(run, configs), total=len(configs), desc="sweep", disable=not progress))
