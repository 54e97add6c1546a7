"""Dual-head domain-adversarial network and its checkpoint format."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .layers import (BatchNorm, Conv2d, GradientReversal, GrlConfig, Linear, Module,
                     ResidualBlock, concat, flatten)
from .tensor import Tensor, ShapeError


@dataclass
class StemConfig:
    in_channels: int = 3
    stem_width: int = 16
    stem_kernel: int = 7
    stem_stride: int = 2
    max_pool: bool = True
    widths: tuple[int, ...] = (16, 32, 64, 128)
    blocks: tuple[int, ...] = (1, 1, 1, 1)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.blocks = tuple(int(b) for b in self.blocks)
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ValueError("widths and blocks must be non-empty and of equal length")
        if min(self.widths) < 1 or min(self.blocks) < 1 or self.stem_width < 1:
            raise ValueError("all widths and block counts must be >= 1")

    @property
    def out_features(self) -> int:
        return self.widths[-1]

    @classmethod
    def resnet18(cls) -> StemConfig:
        return cls(stem_width=64, widths=(64, 128, 256, 512), blocks=(2, 2, 2, 2))


@dataclass
class DannConfig:
    stem: StemConfig = field(default_factory=StemConfig)
    patch_size: int = 64
    cell_hidden: int = 64
    domain_hidden: int = 64
    grl: GrlConfig = field(default_factory=GrlConfig)
    concat_intermediate: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.stem, dict):
            self.stem = StemConfig(**self.stem)
        if isinstance(self.grl, dict):
            self.grl = GrlConfig(**self.grl)
        if min(self.patch_size, self.cell_hidden, self.domain_hidden) < 1:
            raise ValueError("patch size and head widths must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.stem.out_features


@dataclass
class HeadOutputs:
    p_cell: Tensor          # (N,) probability of mitotic figure
    p_domain: Tensor        # (N,) probability of target domain
    features: Tensor        # (N, d_f) stem output
    cell_hidden: Tensor     # (N, h_C) post-ReLU of the cell head's first layer


class Stem(Module):
    def __init__(self, cfg: StemConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.conv = self.add_child("conv", Conv2d(cfg.in_channels, cfg.stem_width, cfg.stem_kernel, rng,
                                                  stride=cfg.stem_stride, padding=cfg.stem_kernel // 2))
        self.bn = self.add_child("bn", BatchNorm(cfg.stem_width))
        self.blocks: list[ResidualBlock] = []
        c_in = cfg.stem_width
        for s, (width, count) in enumerate(zip(cfg.widths, cfg.blocks)):
            for b in range(count):
                stride = 2 if (s > 0 and b == 0) else 1
                block = ResidualBlock(c_in, width, stride, rng)
                self.blocks.append(self.add_child(f"stage{s}_{b}", block))
                c_in = width

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn(self.conv(x)))
        if self.cfg.max_pool:
            h = T.max_pool2d(h, 3, 2, 1)
        for block in self.blocks:
            h = block(h)
        return flatten(T.mean(h, axis=(2, 3)))


class CellHead(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(d_in, hidden, rng))
        self.bn = self.add_child("bn", BatchNorm(hidden))
        self.fc2 = self.add_child("fc2", Linear(hidden, 1, rng))


class DomainHead(Module):
    def __init__(self, d_in: int, hidden: int, extra: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(d_in, hidden, rng))
        self.bn = self.add_child("bn", BatchNorm(hidden))
        self.fc2 = self.add_child("fc2", Linear(hidden + extra, 1, rng))


class DannModel(Module):
    """Shared stem feeding a cell-label head and, through gradient reversal, a domain head."""

    def __init__(self, cfg: DannConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.stem = self.add_child("stem", Stem(cfg.stem, rng))
        self.cell_head = self.add_child("cell_head", CellHead(cfg.feature_dim, cfg.cell_hidden, rng))
        extra = cfg.cell_hidden if cfg.concat_intermediate else 0
        self.domain_head = self.add_child("domain_head", DomainHead(cfg.feature_dim, cfg.domain_hidden, extra, rng))
        self.grl = GradientReversal(cfg.grl)

    def set_step(self, step: int) -> None:
        self.grl.step = step

    @property
    def reversal_strength(self) -> float:
        return self.grl.cfg.at(self.grl.step)

    def forward(self, images: Tensor, mode: str | None = None) -> HeadOutputs:
        if mode is not None:
            self.train(mode == "train")
        if not isinstance(images, Tensor):
            images = Tensor(images)
        s = self.cfg.patch_size
        if images.ndim != 4 or images.shape[1] != self.cfg.stem.in_channels or images.shape[2:] != (s, s):
            raise ShapeError(
                f"expected images N×{self.cfg.stem.in_channels}×{s}×{s}, got {tuple(images.shape)}")
        features = self.stem(images)
        ch = self.cell_head
        cell_hidden = T.relu(ch.bn(ch.fc1(features)))
        p_cell = T.sigmoid(T.reshape(ch.fc2(cell_hidden), (-1,)))

        dh = self.domain_head
        d = T.relu(dh.bn(dh.fc1(self.grl(features))))
        if self.cfg.concat_intermediate:
            d = concat(d, self.grl(cell_hidden))
        p_domain = T.sigmoid(T.reshape(dh.fc2(d), (-1,)))
        return HeadOutputs(p_cell, p_domain, features, cell_hidden)

    def extract(self, images: np.ndarray, batch_size: int = 1) -> np.ndarray:
        """Eval-mode stem features, no graph.

        One sample per pass by default: BLAS blocking can make a row's float32
        result depend on its position in the batch, and identical images must
        give byte-identical rows for duplicate-aware fold assignment.
        """
        was = self.training
        self.eval()
        rows = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                rows.append(self.stem(Tensor(images[i:i + batch_size])).data)
        self.train(was)
        return np.concatenate(rows, axis=0)


def parameters(model: Module) -> list[Tensor]:
    """Trainable tensors in deterministic registration order."""
    return model.parameters()


# -- checkpoint container ------------------------------------------------------

MAGIC = b"MDANNCKP"
FORMAT_VERSION = 1


def _config_to_dict(cfg) -> dict[str, Any]:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def save_checkpoint(path, model: DannModel, optimizer_state: dict[str, np.ndarray] | None = None,
                    counters: dict[str, Any] | None = None, extra: dict[str, Any] | None = None) -> None:
    """Write MAGIC, u32 version, u64 header length, JSON header, then raw little-endian buffers.

    The header lists every entry as {name, kind, dtype, shape, offset, nbytes};
    offsets are relative to the start of the data section.
    """
    entries = []
    blobs = []
    offset = 0

    def push(name, kind, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "kind": kind, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name, p in model.named_parameters():
        push(name, "param", p.data)
    for name, b in model.named_buffers():
        push(name, "buffer", b)
    for name, arr in (optimizer_state or {}).items():
        push(name, "optim", arr)

    header = {"format": "mitodann-checkpoint", "version": FORMAT_VERSION,
              "config": _config_to_dict(model.cfg), "counters": counters or {},
              "extra": extra or {}, "entries": entries}
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


class CheckpointError(ValueError):
    pass


def read_checkpoint(path) -> tuple[dict[str, Any], dict[str, dict[str, np.ndarray]]]:
    """Return (header, {"param": {...}, "buffer": {...}, "optim": {...}})."""
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    header = json.loads(data[start:start + hlen])
    base = start + hlen
    out: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "optim": {}}
    for e in header["entries"]:
        lo = base + e["offset"]
        arr = np.frombuffer(data[lo:lo + e["nbytes"]], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        out[e["kind"]][e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return header, out


def load_checkpoint(path) -> tuple[DannModel, dict[str, Any], dict[str, np.ndarray]]:
    """Rebuild the model from its config echo and restore weights and running stats."""
    header, blobs = read_checkpoint(path)
    cfg = DannConfig(**header["config"])
    dtype = next(iter(blobs["param"].values())).dtype
    with T.precision(dtype):
        model = DannModel(cfg)
    for name, p in model.named_parameters():
        arr = blobs["param"][name]
        if arr.shape != p.shape:
            raise CheckpointError(f"parameter {name}: shape {arr.shape} != {p.shape}")
        p.data = arr.copy()
    for name, _ in model.named_buffers():
        model.set_buffer(name, blobs["buffer"][name])
    return model, header, blobs["optim"]
