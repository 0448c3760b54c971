import json
import os
from pathlib import Path
from typing import Any, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field

load_dotenv()

THREADS_ENV = "MICROSEG_THREADS"


def resolve_threads(default: int = 1) -> int:
    """Worker cap from MICROSEG_THREADS (or .env), never below 1."""
    raw = os.getenv(THREADS_ENV)
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        print(f"Warning: ignoring non-integer {THREADS_ENV}={raw!r}")
        return default


class RunSettings(BaseModel):
    """Everything a command needs besides its positional artifacts.

    Values come from three layers, later ones winning: field defaults, the
    JSON file passed with ``--config``, then flags given on the command line.
    """

    workdir: Path = Path(".")
    seed: int = 0
    threads: int = Field(default_factory=resolve_threads)
    timestamp: bool = True

    # training
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 15
    augment: bool = True
    threshold: float = 0.5

    # data
    synthetic: Optional[int] = None
    data: Optional[Path] = None
    center_crop: bool = False
    input_size: int = 96

    # quantization
    calibration_samples: int = 64

    # evaluation
    aggregation: str = "micro"

    def resolve(self, path: Optional[Path | str]) -> Optional[Path]:
        """Anchor a relative path at the workdir."""
        if path is None:
            return None
        path = Path(path)
        return path if path.is_absolute() else self.workdir / path


def load_settings(config_file: Optional[Path], overrides: dict[str, Any]) -> RunSettings:
    """Merge defaults < config file < explicit flag overrides."""
    merged: dict[str, Any] = {}
    if config_file is not None:
        with open(config_file, "r", encoding="utf-8") as f:
            merged.update(json.load(f))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return RunSettings(**merged)
