"""Datasets, IDX files, checkpoints and landscape-grid persistence."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .model import ViTConfig, ViTModel
from .params import ParameterSet
from .tensor import ContractError


class FormatError(ValueError):
    """Malformed IDX or checkpoint bytes."""


class ChecksumError(FormatError):
    pass


# -- datasets -----------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) in [0, 1]
    labels: np.ndarray  # (n,) ints
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ContractError(f"images must be (n, C, H, W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.images)


def _stripes(u: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    period = rng.uniform(3.0, 6.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    return 0.5 + 0.5 * np.sin(2 * np.pi * u / period + phase)


def _pattern(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    if kind == 0:
        return _stripes(yy, rng)
    if kind == 1:
        return _stripes(xx, rng)
    if kind == 2:
        return _stripes((xx + yy) / np.sqrt(2), rng)
    if kind == 3:
        return _stripes((xx - yy) / np.sqrt(2), rng)
    if kind == 4:
        cell = rng.integers(2, 5)
        ox, oy = rng.integers(0, cell, size=2)
        return (((xx + ox) // cell + (yy + oy) // cell) % 2).astype(np.float64)
    cy, cx = rng.uniform(0.35 * size, 0.65 * size, size=2)
    r = np.hypot(yy - cy, xx - cx)
    if kind == 5:
        radius = rng.uniform(0.2 * size, 0.35 * size)
        return (r <= radius).astype(np.float64)
    if kind == 6:
        radius = rng.uniform(0.25 * size, 0.4 * size)
        return (np.abs(r - radius) <= 1.0).astype(np.float64)
    theta = rng.uniform(0.0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    return (ramp - ramp.min()) / (ramp.max() - ramp.min())


PATTERN_FAMILIES = ("h-bars", "v-bars", "diag-bars", "anti-diag-bars", "checkers", "disk", "ring", "gradient")


def generate_synthetic(n: int, config: ViTConfig, k_classes: int | None = None, seed: int = 0,
                       split: str = "train", noise: float = 0.1) -> Dataset:
    """Procedural images, one geometric pattern family per class.

    Labels cycle through the classes before shuffling, so counts are
    balanced to within one image.
    """
    k = config.num_classes if k_classes is None else k_classes
    if n < 1:
        raise ContractError("need n >= 1 images")
    if not 1 <= k <= len(PATTERN_FAMILIES):
        raise ContractError(f"{k} classes requested but only {len(PATTERN_FAMILIES)} pattern families exist")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 5, 0 if split == "train" else 1]))
    labels = rng.permutation(np.arange(n) % k)
    size, c = config.image_size, config.channels
    images = np.empty((n, c, size, size))
    for i, label in enumerate(labels):
        base = _pattern(int(label), size, rng)
        images[i] = np.clip(base[None] + rng.normal(0.0, noise, size=(c, size, size)), 0.0, 1.0)
    return Dataset(images, labels, split)


def default_splits(config: ViTConfig, n_train: int = 512, n_eval: int = 256, seed: int = 0) -> tuple[Dataset, Dataset]:
    return (generate_synthetic(n_train, config, seed=seed, split="train"),
            generate_synthetic(n_eval, config, seed=seed, split="eval"))


# -- IDX ---------------------------------------------------------------------------

def _read_idx(path: Path, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    zero0, zero1, dtype_code, dims = raw[0], raw[1], raw[2], raw[3]
    if zero0 or zero1 or dtype_code != 0x08:
        raise FormatError(f"{path}: bad magic {raw[:4].hex()} at byte offset 0 (expected unsigned-byte IDX)")
    if dims != ndim:
        raise FormatError(f"{path}: {dims} dimensions at byte offset 3, expected {ndim}")
    header = 4 + 4 * dims
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension list at byte offset {len(raw)}")
    shape = struct.unpack(f">{dims}I", raw[4:header])
    count = int(np.prod(shape))
    if len(raw) < header + count:
        raise FormatError(f"{path}: truncated payload at byte offset {len(raw)}, expected {header + count} bytes")
    if len(raw) > header + count:
        raise FormatError(f"{path}: trailing bytes after offset {header + count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(shape)


def _fit(images: np.ndarray, size: int) -> np.ndarray:
    """Center-crop or zero-pad (n, h, w) images to (n, size, size)."""
    n, h, w = images.shape
    out = np.zeros((n, size, size), dtype=images.dtype)
    sy, sx = max((h - size) // 2, 0), max((w - size) // 2, 0)
    dy, dx = max((size - h) // 2, 0), max((size - w) // 2, 0)
    ch, cw = min(h, size), min(w, size)
    out[:, dy:dy + ch, dx:dx + cw] = images[:, sy:sy + ch, sx:sx + cw]
    return out


def load_idx(images_path, labels_path, config: ViTConfig | None = None, split: str = "train") -> Dataset:
    images = _read_idx(images_path, 3)
    labels = _read_idx(labels_path, 1)
    if len(labels) != len(images):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    if config is not None:
        images = _fit(images, config.image_size)
    return Dataset(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64), split)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write single-channel images (quantised to bytes) and labels as IDX files."""
    if dataset.images.shape[1] != 1:
        raise ContractError("IDX export supports single-channel images only")
    pix = np.rint(np.clip(dataset.images[:, 0], 0.0, 1.0) * 255.0).astype(np.uint8)
    n, h, w = pix.shape
    Path(images_path).write_bytes(struct.pack(">4B3I", 0, 0, 0x08, 3, n, h, w) + pix.tobytes())
    if dataset.labels.min(initial=0) < 0 or dataset.labels.max(initial=0) > 255:
        raise ContractError("IDX labels must fit in one byte")
    Path(labels_path).write_bytes(struct.pack(">4BI", 0, 0, 0x08, 1, n) + dataset.labels.astype(np.uint8).tobytes())


# -- checkpoints --------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MIMSCAPE"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    config: ViTConfig
    params: ParameterSet
    teacher: ParameterSet | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def regime(self) -> str:
        return self.metadata.get("regime", "init")

    def model(self) -> ViTModel:
        return ViTModel(self.config, self.params)

    def equals(self, other: "Checkpoint") -> bool:
        if self.config != other.config or self.metadata != other.metadata:
            return False
        if (self.teacher is None) != (other.teacher is None):
            return False
        return self.params.bitwise_equal(other.params) and (
            self.teacher is None or self.teacher.bitwise_equal(other.teacher))


def _tensor_table(params: ParameterSet, offset: int) -> tuple[list[dict], list[bytes], int]:
    table, chunks = [], []
    for name, value in params.items():
        payload = np.ascontiguousarray(value, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(value.shape), "offset": offset, "length": len(payload)})
        chunks.append(payload)
        offset += len(payload)
    return table, chunks, offset


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    params_table, chunks, end = _tensor_table(ckpt.params, 0)
    teacher_table = None
    if ckpt.teacher is not None:
        teacher_table, tchunks, end = _tensor_table(ckpt.teacher, end)
        chunks += tchunks
    header = {
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "metadata": ckpt.metadata,
        "params": params_table,
        "teacher": teacher_table,
    }
    head = json.dumps(header, sort_keys=True, allow_nan=False).encode()
    payload = b"".join(chunks)
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + payload + hashlib.sha256(payload).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write ``ckpt`` to ``path``; returns the payload checksum (hex)."""
    blob = checkpoint_bytes(ckpt)
    Path(path).write_bytes(blob)
    return blob[-32:].hex()


def _read_tensors(table: list[dict], payload: bytes) -> ParameterSet:
    out = ParameterSet()
    for entry in table:
        start, length = entry["offset"], entry["length"]
        shape = tuple(entry["shape"])
        if start + length > len(payload) or length != 8 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"tensor {entry['name']} has inconsistent offset/length")
        out[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=length // 8, offset=start).reshape(shape).astype(np.float64)
    return out


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint: bad magic at byte offset 0")
    pos = len(CHECKPOINT_MAGIC)
    if len(blob) < pos + 8 + 32:
        raise FormatError(f"truncated checkpoint ({len(blob)} bytes)")
    (head_len,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(blob[pos:pos + head_len])
    except ValueError as exc:
        raise FormatError(f"unreadable checkpoint header at byte offset {pos}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint version {header.get('version')} is not supported (expected {CHECKPOINT_VERSION})")
    payload = blob[pos + head_len:-32]
    if hashlib.sha256(payload).digest() != blob[-32:]:
        raise ChecksumError("checkpoint payload checksum mismatch")
    config = ViTConfig.from_dict(header["config"])
    params = _read_tensors(header["params"], payload)
    ViTModel(config, params).check()
    teacher = None
    if header["teacher"] is not None:
        teacher = _read_tensors(header["teacher"], payload)
        ViTModel(config, teacher).check()
    return Checkpoint(config, params, teacher, header["metadata"])


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def write_loss_history(history: list[float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(history, start=1):
            w.writerow([epoch, repr(float(loss))])


# -- landscape grids -----------------------------------------------------------------

def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def write_grid_csv(grid, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "beta", "loss"])
        for i, a in enumerate(grid.alphas):
            for j, b in enumerate(grid.betas):
                w.writerow([_fmt(a), _fmt(b), _fmt(grid.losses[i, j])])


def read_grid_csv(path):
    """Rebuild a :class:`~mimscape.landscape.LandscapeGrid` from its CSV export."""
    from .landscape import LandscapeGrid

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["alpha", "beta", "loss"]:
            raise FormatError(f"{path}: expected header alpha,beta,loss, got {header}")
        rows = [(float(a), float(b), float(l)) for a, b, l in reader]
    alphas = sorted({r[0] for r in rows})
    betas = sorted({r[1] for r in rows})
    if len(rows) != len(alphas) * len(betas):
        raise FormatError(f"{path}: {len(rows)} rows do not form a full {len(alphas)}x{len(betas)} grid")
    ai = {a: i for i, a in enumerate(alphas)}
    bi = {b: j for j, b in enumerate(betas)}
    losses = np.full((len(alphas), len(betas)), np.nan)
    for a, b, l in rows:
        losses[ai[a], bi[b]] = l
    sidecar = Path(str(path)[:-4] + ".json") if str(path).endswith(".csv") else None
    meta = json.loads(sidecar.read_text()) if sidecar is not None and sidecar.exists() else {}
    return LandscapeGrid(np.array(alphas), np.array(betas), losses,
                         base_loss=float(losses[ai[0.0], bi[0.0]]),
                         regime=meta.get("regime", "unknown"), direction_seed=meta.get("direction_seed"),
                         metadata=meta)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
