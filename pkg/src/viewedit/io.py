"""Artifact persistence: generator weights, frame directories, JSON records."""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import InvalidArgument, NotFound
from .toygen import GeneratorConfig, ToyGenerator

GENERATOR_MAGIC = b"VEGEN001"
FRAME_PATTERN = "frame_{:05d}.png"


def save_generator(gen: ToyGenerator, path) -> None:
    """Write the generator as magic + JSON header + raw little-endian tensors.

    The layout contains no timestamps, so equal weights give equal bytes.
    """
    state = gen.state_dict()
    entries, blobs, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": 1, "config": dataclasses.asdict(gen.config), "upsampler_frozen": gen.upsampler_frozen,
         "tensors": entries},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(GENERATOR_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_generator(path) -> ToyGenerator:
    path = Path(path)
    if not path.exists():
        raise NotFound(f"generator artifact {path} does not exist")
    raw = path.read_bytes()
    if raw[:8] != GENERATOR_MAGIC:
        raise InvalidArgument(f"{path}: not a generator file")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + n])
    body = memoryview(raw)[12 + n :]
    gen = ToyGenerator(GeneratorConfig(**header["config"]))
    state = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(body, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    gen.load_state_dict(state)
    gen.upsampler_frozen = bool(header.get("upsampler_frozen", False))
    return gen


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_frames(frames: Sequence[np.ndarray], directory) -> List[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        p = d / FRAME_PATTERN.format(i)
        Image.fromarray(to_uint8(f), mode="RGB").save(p, optimize=False)
        paths.append(p)
    return paths


def load_frames(directory) -> List[np.ndarray]:
    d = Path(directory)
    if not d.is_dir():
        raise NotFound(f"frame directory {d} does not exist")
    files = sorted(d.glob("frame_*.png"))
    if not files:
        raise NotFound(f"no frame_*.png files in {d}")
    return [np.asarray(Image.open(f).convert("RGB"), dtype=np.float64) / 255.0 for f in files]


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=False) + "\n")


def read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise NotFound(f"artifact {p} does not exist")
    return json.loads(p.read_text())


class ArtifactWriter:
    """Tracks files written by one command so they can be removed on failure."""

    def __init__(self):
        self.written: List[Path] = []

    def path(self, p) -> Path:
        p = Path(p)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(p)
        return p

    def rollback(self) -> None:
        for p in self.written:
            try:
                os.remove(p)
            except FileNotFoundError:
                pass
        self.written.clear()
