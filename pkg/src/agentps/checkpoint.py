"""Checkpoint file format.

::

    b"AGPSCKPT"                      8 bytes magic
    header length                    8 bytes, little-endian unsigned
    header                           canonical UTF-8 JSON (sorted keys, compact)
    payload                          raw little-endian floats, tensor after tensor

The header lists every tensor's name, shape, byte offset and byte length.
Model parameters come first, then Adam moments as ``optim.m.<name>`` and
``optim.v.<name>``. Files are written to a temporary sibling and renamed, so
an interrupted write never replaces the last complete checkpoint.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from . import numerics as nx
from .assembly import SpecialVocab
from .errors import IntegrityError, VersionError
from .models import ModelConfig
from .network import ModelBundle, parameter_shapes

logger = logging.getLogger(__name__)

MAGIC = b"AGPSCKPT"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<Q")


class Checkpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: ModelBundle
    vocab: SpecialVocab
    optimizer: Optional[dict[str, Any]] = None  # Adam.state_dict()
    rng_state: Optional[dict[str, Any]] = None
    epoch: int = 0


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    arrays: list[tuple[str, np.ndarray]] = list(ckpt.model.state_dict().items())
    optimizer_step = 0
    if ckpt.optimizer is not None:
        optimizer_step = int(ckpt.optimizer["step"])
        for slot in ("m", "v"):
            moments = ckpt.optimizer[slot]
            for name, _ in ckpt.model.named_parameters():
                if name in moments:
                    arrays.append((f"optim.{slot}.{name}", moments[name]))

    wide = any(a.dtype == np.float64 for _, a in arrays)
    dtype = np.dtype("<f8" if wide else "<f4")
    entries = []
    chunks = []
    offset = 0
    for name, array in arrays:
        raw = np.ascontiguousarray(array, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(array.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    header = {
        "format_version": FORMAT_VERSION,
        "dtype": dtype.str,
        "model_config": ckpt.model.config.model_dump(mode="json"),
        "vocab": ckpt.vocab.model_dump(mode="json"),
        "tensors": entries,
        "optimizer_step": optimizer_step,
        "rng_state": ckpt.rng_state,
        "epoch": ckpt.epoch,
        "payload_nbytes": offset,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, _LENGTH.pack(len(header_bytes)), header_bytes, *chunks])


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(encode_checkpoint(ckpt))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    logger.info("Wrote checkpoint %s (epoch %d)", path, ckpt.epoch)
    return path


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    """Validate everything against the header before building any tensor."""
    prefix = len(MAGIC) + _LENGTH.size
    if len(blob) < prefix or blob[: len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{source} is not a checkpoint file")
    (header_len,) = _LENGTH.unpack_from(blob, len(MAGIC))
    if len(blob) < prefix + header_len:
        raise IntegrityError(f"{source} is truncated inside its header")
    try:
        header = json.loads(blob[prefix : prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{source} has an unreadable header: {exc}") from exc

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{source} has format version {version}; this build reads version {FORMAT_VERSION}")

    payload = blob[prefix + header_len :]
    if len(payload) != header.get("payload_nbytes"):
        raise IntegrityError(
            f"{source} payload holds {len(payload)} bytes, header declares {header.get('payload_nbytes')}"
        )

    try:
        config = ModelConfig.model_validate(header["model_config"])
        vocab = SpecialVocab.model_validate(header["vocab"])
        dtype = np.dtype(header["dtype"])
        entries = header["tensors"]
    except (KeyError, TypeError, ValidationError) as exc:
        raise IntegrityError(f"{source} header is incomplete: {exc}") from exc

    arrays: dict[str, np.ndarray] = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        start, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != expected or start < 0 or start + nbytes > len(payload):
            raise IntegrityError(f"{source}: tensor {entry['name']} disagrees with its declared shape {shape}")
        flat = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=start)
        arrays[entry["name"]] = flat.reshape(shape)

    shapes = parameter_shapes(config)
    for name, shape in shapes.items():
        if name not in arrays or arrays[name].shape != shape:
            raise IntegrityError(f"{source}: parameter {name} missing or mis-shaped for the stored model config")

    params = {name: nx.parameter(arrays[name].copy(), name) for name in shapes}
    optimizer = None
    if header.get("optimizer_step") or any(name.startswith("optim.") for name in arrays):
        optimizer = {
            "step": int(header["optimizer_step"]),
            "m": {n[len("optim.m."):]: a.copy() for n, a in arrays.items() if n.startswith("optim.m.")},
            "v": {n[len("optim.v."):]: a.copy() for n, a in arrays.items() if n.startswith("optim.v.")},
        }
    return Checkpoint(
        model=ModelBundle(config, params),
        vocab=vocab,
        optimizer=optimizer,
        rng_state=header.get("rng_state"),
        epoch=int(header.get("epoch", 0)),
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))
