# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.

"""Checkpoint container.

Layout::

    b"T2CK"                 magic
    uint16 little-endian    format version
    uint32 little-endian    length L of the JSON header
    L bytes                 UTF-8 JSON header (model description, census, blob index)
    blobs                   raw little-endian tensors, float32 ("<f4") or int64 ("<i8")

The header's ``blobs`` list holds ``{name, dtype, shape, offset, nbytes}`` entries keyed
by state-dict name, offsets counted from the first blob byte. Capsules are cut from the
feature map channel-major (see ``archnet.reshape_to_capsules``), which fixes how the
capsule transform blobs are laid out.
"""

from __future__ import annotations

import json
from pathlib import Path
import struct
from typing import Any

import numpy as np
import torch

from t2caps.archnet import Top2Model
from t2caps.archnet import build_model
from t2caps.archnet import count_parameters
from t2caps.util.errors import CheckpointError
from t2caps.util.fs_helpers import atomic_write_bytes

MAGIC = b"T2CK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<HI")


def _blob_dtype(tensor: torch.Tensor) -> str:
    return "<f4" if tensor.is_floating_point() else "<i8"


def save_checkpoint(path: Path, model: Top2Model, extra: dict[str, Any]) -> Path:
    """Write a model and run metadata to a checkpoint file.

    :param path: Destination file
    :param model: Model to store
    :param extra: JSON-serializable metadata (normalization constants, epoch, ...)
    :return: The path written
    """
    total, census = count_parameters(model)
    blobs = []
    chunks = []
    offset = 0
    for name, tensor in model.state_dict().items():
        dtype = _blob_dtype(tensor)
        raw = tensor.detach().cpu().numpy().astype(dtype).tobytes()
        blobs.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(tensor.shape),
                "offset": offset,
                "nbytes": len(raw),
            },
        )
        chunks.append(raw)
        offset += len(raw)

    header = {
        **extra,
        "head": model.head_kind,
        "in_channels": model.in_channels,
        "num_classes": model.num_classes,
        "iterations": model.iterations,
        "census": dict(census),
        "total": total,
        "blobs": blobs,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        [MAGIC, _PREFIX.pack(FORMAT_VERSION, len(header_bytes)), header_bytes, *chunks],
    )
    atomic_write_bytes(path, payload)
    return path


def read_header(path: Path) -> tuple[dict[str, Any], bytes]:
    """Read and validate the fixed prefix and JSON header of a checkpoint.

    :param path: Checkpoint file
    :raise CheckpointError: On I/O errors, bad magic, unknown versions or truncation
    :return: Parsed header and the blob section
    """
    try:
        data = path.read_bytes()
    except OSError as ex:
        raise CheckpointError(f"Unable to read checkpoint {path}: {ex}") from ex
    start = len(MAGIC) + _PREFIX.size
    if len(data) < start or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(
            f"{path} is not a t2caps checkpoint (bad magic at offset 0)",
        )
    version, header_len = _PREFIX.unpack_from(data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has unsupported format version {version}")
    if len(data) < start + header_len:
        raise CheckpointError(f"{path} is truncated inside its header")
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as ex:
        raise CheckpointError(f"{path} has a corrupt header: {ex}") from ex
    return header, data[start + header_len :]


def load_checkpoint(
    path: Path,
    expected_head: str | None = None,
    expected_in_channels: int | None = None,
) -> tuple[Top2Model, dict[str, Any]]:
    """Rebuild a model from a checkpoint, refusing ones that do not match.

    :param path: Checkpoint file
    :param expected_head: Head kind the caller wants, None to accept any
    :param expected_in_channels: Channel count of the dataset, None to accept any
    :raise CheckpointError: On format problems or census mismatches
    :return: Model in eval mode and the checkpoint header
    """
    header, blob_section = read_header(path)
    if expected_head is not None and header["head"] != expected_head:
        raise CheckpointError(
            f"Census mismatch: {path} holds a {header['head']} model, "
            f"{expected_head} was requested",
        )
    if (
        expected_in_channels is not None
        and header["in_channels"] != expected_in_channels
    ):
        raise CheckpointError(
            f"Census mismatch: {path} was built for {header['in_channels']} input "
            f"channels, the dataset has {expected_in_channels}",
        )

    model = build_model(
        header["in_channels"],
        header["head"],
        header["num_classes"],
        header["iterations"],
    )
    total, census = count_parameters(model)
    if total != header["total"] or dict(census) != header["census"]:
        raise CheckpointError(
            f"Census mismatch: {path} records {header['total']} parameters, "
            f"the rebuilt model has {total}",
        )

    state = {}
    for blob in header["blobs"]:
        end = blob["offset"] + blob["nbytes"]
        if end > len(blob_section):
            raise CheckpointError(f"{path} is truncated inside blob {blob['name']}")
        arr = np.frombuffer(
            blob_section,
            dtype=np.dtype(blob["dtype"]),
            count=blob["nbytes"] // np.dtype(blob["dtype"]).itemsize,
            offset=blob["offset"],
        ).reshape(blob["shape"])
        state[blob["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as ex:
        raise CheckpointError(f"{path} does not fit the rebuilt model: {ex}") from ex
    model.eval()
    return model, header
