"""Versioned binary checkpoints: model + optimizer state, bitwise exact.

Layout (format ``ckpt-v1``):
  magic line ``ckpt-v1\\n``
  8-byte little-endian header length
  JSON header: model config, epoch, metrics, vocabulary hashes, optimizer
  step, a tensor manifest (name/dtype/shape/offset/nbytes), payload size
  raw tensor bytes in manifest order

Loading rebuilds a model whose forward pass is bitwise identical to the
saved one. A checkpoint remembers the sha256 of both vocabularies; loading
against different vocabularies fails rather than silently mispairing.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from typing import Optional

import numpy as np

from .tensor import Tensor
from .transformer import TransformerConfig, TransformerModel, build_model

MAGIC = b"ckpt-v1\n"


class CheckpointError(Exception):
    pass


def _manifest_entry(name: str, arr: np.ndarray, offset: int) -> tuple[dict, int]:
    nbytes = arr.size * arr.dtype.itemsize
    entry = {"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
             "offset": offset, "nbytes": nbytes}
    return entry, offset + nbytes


def save_checkpoint(path, model: TransformerModel, optimizer_state=None,
                    epoch: int = 0, metrics: Optional[dict] = None,
                    src_vocab_hash: str = "", tgt_vocab_hash: str = "",
                    extra: Optional[dict] = None) -> None:
    """Write atomically (temp file + rename)."""
    arrays: list[tuple[str, np.ndarray]] = [
        (name, param.data) for name, param in model.named_parameters().items()]
    opt_step = None
    if optimizer_state is not None:
        opt_step = optimizer_state.step
        for name, buf in optimizer_state.first_moment.items():
            arrays.append((f"opt.m.{name}", buf))
        for name, buf in optimizer_state.second_moment.items():
            arrays.append((f"opt.v.{name}", buf))

    manifest, offset = [], 0
    for name, arr in arrays:
        entry, offset = _manifest_entry(name, arr, offset)
        manifest.append(entry)
    header = {
        "format": "ckpt-v1",
        "model_config": dataclasses.asdict(model.config),
        "epoch": epoch,
        "metrics": metrics or {},
        "src_vocab_hash": src_vocab_hash,
        "tgt_vocab_hash": tgt_vocab_hash,
        "optimizer_step": opt_step,
        "tensors": manifest,
        "payload_bytes": offset,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr).tobytes())
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a ckpt-v1 checkpoint")
        (length,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(length).decode("utf-8"))


def load_checkpoint(path, src_vocab=None, tgt_vocab=None,
                    expect_optimizer: bool = False):
    """Restore (model, optimizer_arrays, header).

    ``optimizer_arrays`` is None or a dict with keys ``step``, ``m``, ``v``.
    Passing vocabularies verifies the recorded hashes.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a ckpt-v1 checkpoint")
    pos = len(MAGIC)
    (length,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + length].decode("utf-8"))
    pos += length
    expected = header["payload_bytes"]
    actual = len(raw) - pos
    if actual != expected:
        raise CheckpointError(
            f"truncated checkpoint {path}: expected {expected} payload bytes, got {actual}")

    if src_vocab is not None and src_vocab.content_hash() != header["src_vocab_hash"]:
        raise CheckpointError(
            "source vocabulary hash mismatch: model/tokenizer pairing broken")
    if tgt_vocab is not None and tgt_vocab.content_hash() != header["tgt_vocab_hash"]:
        raise CheckpointError(
            "target vocabulary hash mismatch: model/tokenizer pairing broken")

    tensors = {}
    for entry in header["tensors"]:
        start = pos + entry["offset"]
        arr = np.frombuffer(raw[start:start + entry["nbytes"]],
                            dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr

    config = TransformerConfig(**header["model_config"])
    model = build_model(config, seed=0)
    for name, param in model.named_parameters().items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {name}")
        param.data = tensors.pop(name)
        param.grad = None

    optimizer = None
    if header["optimizer_step"] is not None:
        m = {k[len("opt.m."):]: v for k, v in tensors.items() if k.startswith("opt.m.")}
        v = {k[len("opt.v."):]: v for k, v in tensors.items() if k.startswith("opt.v.")}
        optimizer = {"step": header["optimizer_step"], "m": m, "v": v}
    elif expect_optimizer:
        raise CheckpointError(f"checkpoint {path} carries no optimizer state")
    return model, optimizer, header
