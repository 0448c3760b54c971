"""Datasets, the synthetic crack generator and the model file format."""
import json
import logging
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import cv2
import numpy as np
from pydantic import ValidationError

from archgen import LayerGraph
from errors import DatasetError, ModelFormatError, PrecisionMismatchError, ShapeMismatchError
from quantization import QuantizedLayer, QuantizedModel, QuantParams
from settings import resolve_threads
from tensorops import FloatModel, LayerParams, check_params

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".pgm", ".ppm"}
MASK_THRESHOLD = 127

MAGIC = b"MSEG"
FORMAT_VERSION = 1
FLAG_INT8 = 0x1
_PREAMBLE = struct.Struct("<4sHHI")
_CRC = struct.Struct("<I")

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_STREAM_MIX = 0xD1B54A32D192ED03
SPLIT_STREAM = 1 << 32


@dataclass
class SamplePair:
    """One H x W x 3 image in [0, 1] and its H x W x 1 binary mask."""

    image: np.ndarray
    mask: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[2] != 1:
            raise ShapeMismatchError(f"{self.name}: expected HxWx3 image and HxWx1 mask")
        if self.image.shape[:2] != self.mask.shape[:2]:
            raise ShapeMismatchError(f"{self.name}: image {self.image.shape} and mask {self.mask.shape} differ")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"{self.name}: mask is not binary")


@dataclass
class DatasetSplits:
    train: list[SamplePair] = field(default_factory=list)
    val: list[SamplePair] = field(default_factory=list)
    test: list[SamplePair] = field(default_factory=list)

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def stack(samples: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise DatasetError("no samples to stack")
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def dihedral_views(height: int, width: int) -> tuple[int, ...]:
    """Symmetry views that keep an (height, width) frame: all eight when square, else four."""
    return tuple(range(8)) if height == width else (0, 2, 4, 6)


def dihedral_view(array: np.ndarray, view: int) -> np.ndarray:
    """``view % 4`` quarter turns of the leading two axes, then a left-right flip for views 4-7."""
    out = np.rot90(array, view % 4, axes=(0, 1))
    return out[:, ::-1] if view >= 4 else out


# ---------------------------------------------------------------------------
# Counter-based RNG
# ---------------------------------------------------------------------------


def _splitmix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


class CounterRNG:
    """SplitMix64 evaluated on a counter.

    Draw number i (1-based) of stream s under seed k is
    ``mix(key + i * 0x9E3779B97F4A7C15 mod 2^64)`` with
    ``key = mix((k xor s * 0xD1B54A32D192ED03) mod 2^64)``. Everything is
    unsigned 64-bit integer arithmetic, so the sequence is the same on every
    platform.
    """

    def __init__(self, seed: int, stream: int = 0):
        base = (seed ^ (stream * _STREAM_MIX)) & _MASK64
        self.key = int(_splitmix(np.array([base], dtype=np.uint64))[0])
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        counters = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + counters * np.uint64(_GOLDEN)
        return _splitmix(z)

    def integers(self, low: int, high: int, n: int = 1) -> np.ndarray:
        """n integers in [low, high), by multiply-high on the top 32 bits."""
        span = high - low
        if not 0 < span <= 1 << 32:
            raise ValueError(f"bad integer range [{low}, {high})")
        top = self.next_u64(n) >> np.uint64(32)
        return ((top * np.uint64(span)) >> np.uint64(32)).astype(np.int64) + low


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split(samples: Sequence, ratios: tuple[float, float, float] = (0.70, 0.15, 0.15), seed: int = 0) -> DatasetSplits:
    """Seeded shuffle, then contiguous cut: train and val get the floor of their
    share, test the remainder (10 -> 7/1/2, 5000 -> 3500/750/750)."""
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    n = len(samples)
    keys = CounterRNG(seed, SPLIT_STREAM).next_u64(n)
    order = np.argsort(keys, kind="stable")
    n_train = math.floor(n * ratios[0] + 1e-9)
    n_val = math.floor(n * ratios[1] + 1e-9)
    shuffled = [samples[i] for i in order]
    splits = DatasetSplits(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
    )
    if not splits.val or not splits.test:
        logger.warning("degenerate split of %d samples: train/val/test = %d/%d/%d", n, *splits.sizes())
    return splits


# ---------------------------------------------------------------------------
# Synthetic cracks
# ---------------------------------------------------------------------------

NOISE_CELL = 8
# eight compass steps, clockwise from north
_STEPS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _background(rng: CounterRNG, h: int, w: int) -> np.ndarray:
    """Value noise on an 8 px lattice plus a linear brightness ramp, integer-only."""
    gh, gw = h // NOISE_CELL + 2, w // NOISE_CELL + 2
    lattice = rng.integers(90, 200, gh * gw).reshape(gh, gw)
    ys, xs = np.arange(h), np.arange(w)
    cy, fy = ys // NOISE_CELL, (ys % NOISE_CELL)[:, None]
    cx, fx = xs // NOISE_CELL, xs % NOISE_CELL
    top = lattice[cy][:, cx] * (NOISE_CELL - fx) + lattice[cy][:, cx + 1] * fx
    bottom = lattice[cy + 1][:, cx] * (NOISE_CELL - fx) + lattice[cy + 1][:, cx + 1] * fx
    value = (top * (NOISE_CELL - fy) + bottom * fy) // (NOISE_CELL * NOISE_CELL)

    ramp_y, ramp_x = rng.integers(-30, 31, 2)
    value = value + (ramp_y * ys[:, None]) // h + (ramp_x * xs[None, :]) // w
    grain = rng.integers(-8, 9, h * w).reshape(h, w)
    tint = rng.integers(-6, 7, 3)
    return value[..., None] + grain[..., None] + tint


def _walk_crack(rng: CounterRNG, mask: np.ndarray, target: int, cap: int) -> None:
    """Random walk with +-45 degree turns, stamping a square brush until
    ``target`` new pixels are set or the mask reaches ``cap`` pixels."""
    h, w = mask.shape
    y = int(rng.integers(h // 8, h - h // 8)[0])
    x = int(rng.integers(w // 8, w - w // 8)[0])
    heading = int(rng.integers(0, 8)[0])
    width = int(rng.integers(1, 4)[0])
    budget = 8 * target + 64
    turns = rng.integers(0, 8, budget)
    lo, hi = (width - 1) // 2, width // 2
    added = 0
    for turn in turns:
        if turn == 0:
            heading = (heading - 1) % 8
        elif turn == 1:
            heading = (heading + 1) % 8
        dy, dx = _STEPS[heading]
        if not (0 <= y + dy < h and 0 <= x + dx < w):
            heading = (heading + 4) % 8
            continue
        y, x = y + dy, x + dx
        patch = mask[max(0, y - lo):y + hi + 1, max(0, x - lo):x + hi + 1]
        added += int(patch.size - np.count_nonzero(patch))
        patch[...] = True
        if added >= target or np.count_nonzero(mask) >= cap:
            return


def synth_cracks(n: int, size: tuple[int, int] = (96, 96), seed: int = 0) -> list[SamplePair]:
    """Seeded textured backgrounds with 1-3 dark random-walk cracks.

    Sample i draws from stream i of ``CounterRNG(seed)``, so each sample is
    reproducible on its own. Positive pixels cover about 1-5 % of the image.
    """
    if n < 1:
        raise ValueError("synth_cracks needs n >= 1")
    h, w = size
    area = h * w
    cap = area * 5 // 100
    samples = []
    for i in range(n):
        rng = CounterRNG(seed, stream=i)
        image = _background(rng, h, w)
        mask = np.zeros((h, w), dtype=bool)
        cracks = int(rng.integers(1, 4)[0])
        total = max(20, area * int(rng.integers(10, 41)[0]) // 1000)
        for _ in range(cracks):
            _walk_crack(rng, mask, total // cracks, cap)
        darken = rng.integers(25, 46, 1)[0]
        image = np.where(mask[..., None], image * darken // 100, image)
        pixels = np.clip(image, 0, 255).astype(np.uint8)
        samples.append(SamplePair(
            image=pixels.astype(np.float32) / 255,
            mask=mask[..., None].astype(np.uint8),
            name=f"synth_{i:05d}",
        ))
    return samples


# ---------------------------------------------------------------------------
# Image directories
# ---------------------------------------------------------------------------


def _index(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _center_crop(array: np.ndarray) -> np.ndarray:
    h, w = array.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return array[top:top + side, left:left + side]


def _read_pair(stem: str, image_path: Path, mask_path: Path, target_size: tuple[int, int],
               center_crop: bool) -> SamplePair:
    image = cv2.imread(str(image_path), cv2.IMREAD_COLOR)
    if image is None:
        raise DatasetError(f"cannot read image {image_path}")
    mask = cv2.imread(str(mask_path), cv2.IMREAD_GRAYSCALE)
    if mask is None:
        raise DatasetError(f"cannot read mask {mask_path}")
    if image.shape[:2] != mask.shape:
        raise DatasetError(f"{stem}: image {image.shape[:2]} and mask {mask.shape} sizes differ")
    if not np.isin(mask, (0, 1, 255)).all():
        logger.warning("mask %s has values outside {0, 1, 255}; re-thresholded at %d", stem, MASK_THRESHOLD)
    image = cv2.cvtColor(image, cv2.COLOR_BGR2RGB)
    if center_crop:
        image, mask = _center_crop(image), _center_crop(mask)
    th, tw = target_size
    image = cv2.resize(image, (tw, th), interpolation=cv2.INTER_LINEAR)
    mask = cv2.resize(mask, (tw, th), interpolation=cv2.INTER_NEAREST)
    binary = mask > 0 if mask.max() <= 1 else mask > MASK_THRESHOLD
    return SamplePair(image=image.astype(np.float32) / 255, mask=binary[..., None].astype(np.uint8), name=stem)


def load_dataset(root: Union[str, Path], target_size: tuple[int, int] = (96, 96), center_crop: bool = False,
                 threads: Optional[int] = None) -> list[SamplePair]:
    """Pairs from ``root/images`` and ``root/masks`` matched by stem, in stem order."""
    root = Path(root)
    image_dir, mask_dir = root / "images", root / "masks"
    if not image_dir.is_dir() or not mask_dir.is_dir():
        raise DatasetError(f"{root} needs images/ and masks/ subdirectories")
    images, masks = _index(image_dir), _index(mask_dir)
    if not images:
        raise DatasetError(f"no images found under {image_dir}")
    for stem in images:
        if stem not in masks:
            raise DatasetError(f"no mask for image {stem!r}")
    for stem in masks:
        if stem not in images:
            raise DatasetError(f"no image for mask {stem!r}")

    stems = sorted(images)
    workers = max(1, min(threads or resolve_threads(), len(stems)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: _read_pair(s, images[s], masks[s], target_size, center_crop), stems))


def load_images(paths: Sequence[Union[str, Path]], target_size: tuple[int, int] = (96, 96),
                center_crop: bool = False) -> list[tuple[str, np.ndarray]]:
    """(stem, H x W x 3 image in [0, 1]) for loose files or every image in a directory."""
    files: list[Path] = []
    for path in map(Path, paths):
        files.extend(_index(path).values() if path.is_dir() else [path])
    if not files:
        raise DatasetError("no input images")
    loaded = []
    th, tw = target_size
    for path in files:
        image = cv2.imread(str(path), cv2.IMREAD_COLOR)
        if image is None:
            raise DatasetError(f"cannot read image {path}")
        image = cv2.cvtColor(image, cv2.COLOR_BGR2RGB)
        if center_crop:
            image = _center_crop(image)
        image = cv2.resize(image, (tw, th), interpolation=cv2.INTER_LINEAR)
        loaded.append((path.stem, image.astype(np.float32) / 255))
    return loaded


def save_dataset(samples: Sequence[SamplePair], root: Union[str, Path]) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples):
        stem = sample.name or f"sample_{i:05d}"
        pixels = np.clip(np.rint(sample.image * 255), 0, 255).astype(np.uint8)
        cv2.imwrite(str(root / "images" / f"{stem}.png"), cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR))
        cv2.imwrite(str(root / "masks" / f"{stem}.png"), sample.mask[..., 0] * np.uint8(255))
    return root


def write_overlay(path: Union[str, Path], image: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> None:
    """PPM of the image with predicted crack pixels blended towards red."""
    rgb = np.asarray(image, dtype=np.float64) * 255
    red = np.array([255.0, 0.0, 0.0])
    hit = np.asarray(mask, dtype=bool).reshape(rgb.shape[:2])
    rgb[hit] = (1 - alpha) * rgb[hit] + alpha * red
    pixels = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)):
        raise DatasetError(f"cannot write overlay {path}")


def write_mask(path: Union[str, Path], mask: np.ndarray) -> None:
    pixels = np.asarray(mask, dtype=bool).reshape(mask.shape[0], mask.shape[1]).astype(np.uint8) * 255
    if not cv2.imwrite(str(path), pixels):
        raise DatasetError(f"cannot write mask {path}")


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------
#
#   magic "MSEG" | u16 version | u16 flags | u32 header length
#   | JSON header | tensor blobs (little-endian, graph order) | u32 CRC-32


def _tensor_entries(model) -> list[tuple[dict, np.ndarray]]:
    entries = []
    if isinstance(model, QuantizedModel):
        for layer in model.layers:
            if layer.weights is None:
                continue
            entries.append(({"layer": layer.spec.index, "name": "weights"}, layer.weights.astype("i1")))
            entries.append(({"layer": layer.spec.index, "name": "bias"}, layer.bias.astype("<i4")))
        return entries
    for index, p in enumerate(model.params):
        for name in ("weights", "bias", "moving_mean", "moving_var"):
            array = getattr(p, name)
            if array is not None:
                entries.append(({"layer": index, "name": name}, array.astype(array.dtype.newbyteorder("<"))))
    return entries


def encode_model(model: Union[FloatModel, QuantizedModel]) -> bytes:
    int8 = isinstance(model, QuantizedModel)
    tensors, blobs = [], []
    for entry, array in _tensor_entries(model):
        entry.update(dtype=array.dtype.str, shape=list(array.shape), nbytes=array.nbytes)
        tensors.append(entry)
        blobs.append(array.tobytes())
    header = {
        "graph": model.graph.model_dump(mode="json"),
        "precision": "int8" if int8 else "float",
        "tensors": tensors,
    }
    if int8:
        header["quant"] = {
            "input": model.input.model_dump(),
            "layers": [
                {
                    "output": layer.output.model_dump(),
                    "weight_scales": None if layer.weight_scales is None else [float(s) for s in layer.weight_scales],
                    "degenerate": layer.degenerate,
                }
                for layer in model.layers
            ],
        }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREAMBLE.pack(MAGIC, FORMAT_VERSION, FLAG_INT8 if int8 else 0, len(header_bytes)) + header_bytes + b"".join(blobs)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode_model(data: bytes) -> Union[FloatModel, QuantizedModel]:
    if len(data) < _PREAMBLE.size + _CRC.size:
        raise ModelFormatError("model file truncated")
    magic, version, flags, header_len = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model file version {version}, expected {FORMAT_VERSION}")
    if _PREAMBLE.size + header_len + _CRC.size > len(data):
        raise ModelFormatError("model file truncated inside the header")
    (stored,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(data[:-_CRC.size]) & 0xFFFFFFFF != stored:
        raise ModelFormatError("checksum mismatch: file is truncated or corrupt")
    try:
        header = json.loads(data[_PREAMBLE.size:_PREAMBLE.size + header_len].decode("utf-8"))
        graph = LayerGraph.model_validate(header["graph"])
        tensors = header["tensors"]
        int8 = header["precision"] == "int8"
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValidationError) as e:
        raise ModelFormatError(f"corrupt model header: {e}") from e
    if int8 != bool(flags & FLAG_INT8):
        raise ModelFormatError("precision flag disagrees with the header")

    offset = _PREAMBLE.size + header_len
    payload_end = len(data) - _CRC.size
    arrays: dict[tuple[int, str], np.ndarray] = {}
    for entry in tensors:
        dtype = np.dtype(entry["dtype"])
        count = math.prod(entry["shape"])
        if entry["nbytes"] != count * dtype.itemsize or offset + entry["nbytes"] > payload_end:
            raise ModelFormatError(f"tensor {entry['layer']}:{entry['name']} length does not match the header")
        arrays[entry["layer"], entry["name"]] = np.frombuffer(
            data, dtype=dtype, count=count, offset=offset).reshape(entry["shape"]).copy()
        offset += entry["nbytes"]
    if offset != payload_end:
        raise ModelFormatError("blob lengths do not match the header")

    if not int8:
        params = [LayerParams(*(arrays.get((i, n)) for n in ("weights", "bias", "moving_mean", "moving_var")))
                  for i in range(len(graph.layers))]
        try:
            check_params(graph, params)
        except ShapeMismatchError as e:
            raise ModelFormatError(str(e)) from e
        return FloatModel(graph, params)

    quant = header.get("quant")
    if quant is None or len(quant["layers"]) != len(graph.layers):
        raise ModelFormatError("int8 model file lacks per-layer QuantParams")
    layers = []
    for spec, record in zip(graph.layers, quant["layers"]):
        scales = record["weight_scales"]
        layers.append(QuantizedLayer(
            spec=spec,
            output=QuantParams(**record["output"]),
            weights=arrays.get((spec.index, "weights")),
            bias=arrays.get((spec.index, "bias")),
            weight_scales=None if scales is None else np.array(scales, dtype=np.float64),
            degenerate=record["degenerate"],
        ))
    return QuantizedModel(graph=graph, input=QuantParams(**quant["input"]), layers=layers)


def save_model(path: Union[str, Path], model: Union[FloatModel, QuantizedModel]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_model(model))
    return path


def load_model(path: Union[str, Path], precision: Optional[str] = None) -> Union[FloatModel, QuantizedModel]:
    """Read a model file; ``precision`` ("float" / "int8") rejects the other kind."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read model file {path}: {e}") from e
    model = decode_model(data)
    found = "int8" if isinstance(model, QuantizedModel) else "float"
    if precision is not None and precision != found:
        raise PrecisionMismatchError(f"{path} holds a {found} model, a {precision} model was expected")
    return model
