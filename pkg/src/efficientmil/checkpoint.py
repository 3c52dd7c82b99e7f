"""Bit-exact model checkpoints.

Layout: a little-endian uint32 header length, a canonical-JSON header
(encoder/train config, dimensions, seed, and a named-tensor manifest with
offsets, shapes and dtypes), then the raw little-endian IEEE-754 blobs
concatenated in manifest order. Canonical JSON plus deterministic manifest
order makes two saves of the same model byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import EncoderConfig, TrainConfig
from .encoders import ModelParams
from .errors import FormatError

FORMAT_NAME = "emil-checkpoint"
FORMAT_VERSION = 1


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, params: ModelParams, encoder_config: EncoderConfig,
                    train_config: TrainConfig | None, seed: int) -> None:
    manifest = []
    blobs = []
    offset = 0
    entries = [(name, t, True) for name, t in params.tensors.items()]
    entries += [(name, t, False) for name, t in params.buffers.items()]
    for name, tensor, trainable in entries:
        blob = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
        manifest.append({
            "name": name,
            "shape": list(tensor.data.shape),
            "dtype": "<f8",
            "offset": offset,
            "nbytes": len(blob),
            "trainable": trainable,
        })
        blobs.append(blob)
        offset += len(blob)
    header = _canonical_json({
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "d": params.d,
        "c": params.c,
        "seed": seed,
        "encoder": encoder_config.to_dict(),
        "train": train_config.to_dict() if train_config is not None else None,
        "tensors": manifest,
    })
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[ModelParams, EncoderConfig, TrainConfig | None, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"checkpoint truncated at byte {len(raw)}: missing header length")
    (header_len,) = struct.unpack("<I", raw[:4])
    if len(raw) < 4 + header_len:
        raise FormatError(f"checkpoint truncated at byte {len(raw)}: header needs {header_len} bytes")
    try:
        header = json.loads(raw[4:4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}") from exc
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise FormatError(f"not a {FORMAT_NAME} v{FORMAT_VERSION} file")

    params = ModelParams(int(header["d"]), int(header["c"]))
    body = raw[4 + header_len:]
    for entry in header["tensors"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(body):
            raise FormatError(
                f"checkpoint truncated at byte {4 + header_len + len(body)}: "
                f"tensor {entry['name']!r} needs {hi - len(body)} more bytes"
            )
        data = np.frombuffer(body[lo:hi], dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        if entry.get("trainable", True):
            params.add(entry["name"], data)
        else:
            params.add_buffer(entry["name"], data)
    encoder_config = EncoderConfig.from_dict(header["encoder"])
    train_config = TrainConfig.from_dict(header["train"]) if header.get("train") else None
    return params, encoder_config, train_config, int(header["seed"])
