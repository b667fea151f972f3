"""Versioned binary serialization of models.

Layout (all integers little-endian uint32, all tensor data little-endian
float32):

    b"DKDL" | version | name_len + model name (UTF-8)
    | meta_len + metadata JSON | tensor_count
    | per tensor: name_len + name | ndim | dims... | data

The metadata block carries whatever the caller records (seed, epoch, config
hash) plus the keys the loader needs to rebuild the architecture: ``rank``,
``pooling``, ``merged``, ``sigma``. Files round-trip byte-exactly: the JSON
is dumped with sorted keys and tensors keep their dictionary order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import models
from .errors import (ModelMismatchError, NotACheckpointError,
                     TruncatedCheckpointError, VersionMismatchError)
from .tensor import Tensor

MAGIC = b"DKDL"
FORMAT_VERSION = 1


def save_checkpoint(model: models.Model, path: Union[str, Path],
                    metadata: Optional[dict] = None) -> Path:
    path = Path(path)
    if metadata is None:
        metadata = getattr(model, "metadata", None)
    meta = dict(metadata or {})
    spec = model.spec
    meta.setdefault("pooling", next((l.mode for l in spec.layers if l.kind == "maxpool1d"),
                                    "max"))
    rank = next((l.rank for l in spec.layers if l.rank), 0)
    if rank:
        meta.setdefault("rank", rank)
    meta["merged"] = model.merged
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    name = spec.name.encode("utf-8")
    blob += struct.pack("<I", len(name)) + name
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<I", len(meta_bytes)) + meta_bytes
    tensors = model.named_tensors()
    blob += struct.pack("<I", len(tensors))
    for tname, data in tensors:
        enc = tname.encode("utf-8")
        blob += struct.pack("<I", len(enc)) + enc
        arr = np.ascontiguousarray(data, dtype="<f4")
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(blob))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"checkpoint ends at byte {len(self.buf)} but a record needs "
                f"{self.pos + n} bytes")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def read_checkpoint(path: Union[str, Path]) -> tuple:
    """Raw contents: (model_name, metadata dict, ordered {name: float32 array})."""
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise NotACheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, this build reads only {FORMAT_VERSION}")
    name = r.text()
    try:
        meta = json.loads(r.text())
    except json.JSONDecodeError as exc:
        raise NotACheckpointError(f"{path}: metadata block is not valid JSON: {exc}") from exc
    tensors = {}
    for _ in range(r.u32()):
        tname = r.text()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        data = np.frombuffer(r.take(4 * int(np.prod(shape, dtype=np.int64))), dtype="<f4")
        tensors[tname] = data.reshape(shape)
    return name, meta, tensors


def load_checkpoint(path: Union[str, Path], dtype=np.float64,
                    expect: Optional[str] = None) -> models.Model:
    """Rebuild a Model from a checkpoint file.

    ``expect`` pins the model name; a mismatch is an error, not a warning.
    Tensors are stored float32; ``dtype`` sets the in-memory precision
    (float32 reproduces saved forward outputs bit-identically).
    """
    name, meta, tensors = read_checkpoint(path)
    if expect is not None and name != expect:
        raise ModelMismatchError(f"{path}: holds a {name!r} model, expected {expect!r}")
    try:
        spec = models.spec_for(name, rank=int(meta.get("rank", models.DEFAULT_RANK)),
                               pooling=meta.get("pooling", "max"))
    except ValueError as exc:
        raise ModelMismatchError(f"{path}: {exc}") from exc
    model = models.Model(spec, seed=None, dtype=dtype)
    model.merged = bool(meta.get("merged", False))
    model.metadata = meta
    expected = _expected_tensors(spec, model.merged)
    got = {k: v.shape for k, v in tensors.items()}
    if got != expected:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(k for k in set(got) & set(expected) if got[k] != expected[k])
        raise ModelMismatchError(
            f"{path}: tensor directory does not match a {name!r} model "
            f"(missing {missing}, unexpected {extra}, wrong shapes {wrong})")
    dt = np.dtype(dtype)
    for tname, data in tensors.items():
        arr = data.astype(dt)
        if tname.split(".")[-1] in ("running_mean", "running_var"):
            model.state[tname] = arr
        else:
            model.params[tname] = Tensor(arr, requires_grad=False)
    _wire_adapters(model, meta)
    _set_trainable(model)
    return model


def _expected_tensors(spec: models.ModelSpec, merged: bool) -> dict:
    out = {}
    for layer in spec.layers:
        n = layer.name
        if layer.kind in ("conv1d", "lora-conv1d"):
            out[f"{n}.weight"] = (layer.out_channels, layer.in_channels, layer.kernel)
            out[f"{n}.bias"] = (layer.out_channels,)
            if layer.kind == "lora-conv1d" and not merged:
                out[f"adapter.{n}.A"] = (layer.rank, layer.in_channels * layer.kernel)
                out[f"adapter.{n}.B"] = (layer.out_channels, layer.rank)
        elif layer.kind == "batchnorm1d":
            for part in ("gamma", "beta"):
                out[f"{n}.{part}"] = (layer.out_channels,)
            for part in ("running_mean", "running_var"):
                out[f"{n}.{part}"] = (layer.out_channels,)
        elif layer.kind in ("linear", "lora-linear"):
            out[f"{n}.weight"] = (layer.out_features, layer.in_features)
            out[f"{n}.bias"] = (layer.out_features,)
            if layer.kind == "lora-linear" and not merged:
                out[f"adapter.{n}.A"] = (layer.rank, layer.in_features)
                out[f"adapter.{n}.B"] = (layer.out_features, layer.rank)
    return out


def _wire_adapters(model: models.Model, meta: dict) -> None:
    from .lora import LoraAdapter
    if model.merged:
        return
    sigma = float(meta.get("sigma", models.DEFAULT_SIGMA))
    scale = float(meta.get("lora_scale", 1.0))
    for layer in model.spec.layers:
        if layer.kind in ("lora-conv1d", "lora-linear"):
            a = model.params[f"adapter.{layer.name}.A"]
            b = model.params[f"adapter.{layer.name}.B"]
            model.adapters[layer.name] = LoraAdapter(A=a, B=b, rank=layer.rank,
                                                     sigma=sigma, scale=scale)


def _set_trainable(model: models.Model) -> None:
    for layer in model.spec.layers:
        frozen = layer.frozen
        for key, tensor in model.params.items():
            if key == f"{layer.name}.weight" or key == f"{layer.name}.bias":
                tensor.requires_grad = not frozen
            elif key.startswith(f"adapter.{layer.name}."):
                tensor.requires_grad = True
            elif key.startswith(f"{layer.name}.") and layer.kind == "batchnorm1d":
                tensor.requires_grad = not frozen
