import logging
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import pandas as pd
from pydantic import BaseModel

from archgen import ArchConfig, build_graph, estimate_resources, format_scale

logger = logging.getLogger(__name__)

# default deployment target
RECOMMENDED_CONFIG = "u4-dwconv2d-x1_4"

SWEEP_COLUMNS = [
    "config_id", "depth", "conv_type", "filter_scale", "params", "macs",
    "flash_bytes", "peak_ram_bytes", "float_f1", "float_miou", "int8_f1", "int8_miou",
    "status", "error",
]


class SweepRow(BaseModel):
    """One grid point of a sweep. Metrics of runs that did not finish stay None."""

    config_id: str
    depth: int
    conv_type: str
    filter_scale: str
    params: Optional[int] = None
    macs: Optional[int] = None
    flash_bytes: Optional[int] = None
    peak_ram_bytes: Optional[int] = None
    float_f1: Optional[float] = None
    float_miou: Optional[float] = None
    int8_f1: Optional[float] = None
    int8_miou: Optional[float] = None
    status: str = "ok"
    error: Optional[str] = None


def row_for_config(config: ArchConfig) -> SweepRow:
    """Static columns of a row; metrics are filled in by the pipeline."""
    row = SweepRow(
        config_id=config.config_id,
        depth=config.depth,
        conv_type=config.conv_type.label,
        filter_scale=f"x{format_scale(config.filter_scale)}",
    )
    try:
        est = estimate_resources(build_graph(config), weight_width=1, activation_width=1)
    except ValueError as e:
        logger.warning("cannot size %s: %s", config.config_id, e)
        return row
    return row.model_copy(update={
        "params": est.params,
        "macs": est.macs,
        "flash_bytes": est.flash_bytes,
        "peak_ram_bytes": est.peak_activation_bytes,
    })


def row_from_state(config: ArchConfig, state: dict[str, Any]) -> SweepRow:
    row = row_for_config(config)
    update: dict[str, Any] = {}
    float_metrics = state.get("float_metrics")
    int8_metrics = state.get("int8_metrics")
    if float_metrics is not None:
        update.update(float_f1=float_metrics.f1, float_miou=float_metrics.miou)
    if int8_metrics is not None:
        update.update(int8_f1=int8_metrics.f1, int8_miou=int8_metrics.miou)
    if state.get("error"):
        update.update(status=f"failed: {state.get('failed_stage', 'unknown')}", error=state["error"])
    return row.model_copy(update=update)


def create_sweep_table(rows: Sequence[SweepRow]) -> pd.DataFrame:
    """Rows in the order given (grid order), fixed column set."""
    if not rows:
        return pd.DataFrame(columns=SWEEP_COLUMNS)
    return pd.DataFrame([r.model_dump() for r in rows], columns=SWEEP_COLUMNS)


def mark_pareto(df: pd.DataFrame, accuracy: str = "int8_f1", cost: str = "flash_bytes") -> pd.DataFrame:
    """Add a ``pareto`` column: True for rows no other row beats on both
    accuracy (higher) and cost (lower); None where either value is missing."""
    df = df.copy()
    scored = df[df[accuracy].notna() & df[cost].notna()]
    flags: list[Optional[bool]] = [None] * len(df)
    for pos, (label, row) in enumerate(df.iterrows()):
        if label not in scored.index:
            continue
        better_or_equal = (scored[accuracy] >= row[accuracy]) & (scored[cost] <= row[cost])
        strictly = (scored[accuracy] > row[accuracy]) | (scored[cost] < row[cost])
        flags[pos] = not bool((better_or_equal & strictly).any())
    df["pareto"] = pd.Series(flags, index=df.index, dtype=object)
    return df


def divergence_note(df: pd.DataFrame) -> Optional[str]:
    """Explain when the recommended depth-4, x1/4, DWConv2D point is not Pareto-optimal."""
    if "pareto" not in df.columns:
        return None
    match = df[df["config_id"] == RECOMMENDED_CONFIG]
    if match.empty:
        return f"Note: {RECOMMENDED_CONFIG} was not part of this sweep."
    flag = match.iloc[0]["pareto"]
    if flag is None or pd.isna(flag):
        return f"Note: {RECOMMENDED_CONFIG} has no int8 result, so its Pareto status is unknown."
    if not flag:
        winners = ", ".join(df[df["pareto"] == True]["config_id"])  # noqa: E712
        return (f"Note: {RECOMMENDED_CONFIG} is not Pareto-optimal on F1 vs flash here; "
                f"the front is {winners}.")
    return None


def _fmt(value: Any, digits: int = 3) -> str:
    if value is None or (isinstance(value, float) and pd.isna(value)):
        return "N/A"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def format_table_markdown(df: pd.DataFrame) -> str:
    """Markdown table laid out like the lightweighting results table."""
    if df.empty:
        return "No configurations were run."
    columns = ["config_id", "params", "float_f1", "float_miou", "int8_f1", "int8_miou",
               "flash_bytes", "peak_ram_bytes", "macs"]
    if "pareto" in df.columns:
        columns.append("pareto")
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for _, row in df.iterrows():
        lines.append("| " + " | ".join(_fmt(row[c]) for c in columns) + " |")
    return "\n".join(lines)


def format_table_text(df: pd.DataFrame) -> str:
    if df.empty:
        return "No configurations were run."
    lines = ["Sweep results:", ""]
    for _, row in df.iterrows():
        lines.append(f"{row['config_id']}  ({row['depth']}-block {row['conv_type']} {row['filter_scale']})")
        lines.append(f"  Params: {_fmt(row['params'])}  MACs: {_fmt(row['macs'])}")
        lines.append(f"  Flash: {_fmt(row['flash_bytes'])} B  Peak RAM: {_fmt(row['peak_ram_bytes'])} B")
        lines.append(f"  Float32 F1/mIoU: {_fmt(row['float_f1'])} / {_fmt(row['float_miou'])}")
        lines.append(f"  Int8    F1/mIoU: {_fmt(row['int8_f1'])} / {_fmt(row['int8_miou'])}")
        if row["status"] != "ok":
            lines.append(f"  Status: {row['status']} ({row['error']})")
        lines.append("")
    return "\n".join(lines)


def plot_tradeoff(df: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Scatter of int8 F1 against flash size, Pareto points highlighted."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 5))
    scored = df[df["int8_f1"].notna() & df["flash_bytes"].notna()]
    for conv_type, group in scored.groupby("conv_type"):
        ax.scatter(group["flash_bytes"] / 1024, group["int8_f1"], label=conv_type)
    if "pareto" in scored.columns:
        front = scored[scored["pareto"] == True].sort_values("flash_bytes")  # noqa: E712
        ax.plot(front["flash_bytes"] / 1024, front["int8_f1"], "k--", label="Pareto front")
        for _, row in front.iterrows():
            ax.annotate(row["config_id"], (row["flash_bytes"] / 1024, row["int8_f1"]), fontsize=7)
    ax.set_xscale("log")
    ax.set_xlabel("estimated flash (KiB)")
    ax.set_ylabel("int8 F1")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
