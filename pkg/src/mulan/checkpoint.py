"""Binary checkpoints.

Layout (all integers little-endian):

    magic "MULN" | version u32 | tensor_count u32
    per tensor:  name_len u32 | name UTF-8 | rank u64 | dims u64 x rank
                 | precision u8 (4 = float32, 8 = float64) | raw LE data
    trailer:     crc32 u32 over every preceding byte

Round trips are bit-exact; any corrupted payload byte fails the checksum.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import CheckpointError

MAGIC = b"MULN"
VERSION = 1
_PRECISION = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float arrays; entries are sorted by name for determinism."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype == np.float32:
            tag, dtype = 4, np.dtype("<f4")
        elif arr.dtype == np.float64:
            tag, dtype = 8, np.dtype("<f8")
        else:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(struct.pack("<B", tag))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    payload = b"".join(parts)
    checksum = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", checksum))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    payload, trailer = blob[:-4], blob[-4:]
    (stored,) = struct.unpack("<I", trailer)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt payload)")

    offset = 4
    version, count = struct.unpack_from("<II", payload, offset)
    offset += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<Q", payload, offset)
            offset += 8
            dims = struct.unpack_from(f"<{rank}Q", payload, offset)
            offset += 8 * rank
            (tag,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            dtype = _PRECISION.get(tag)
            if dtype is None:
                raise CheckpointError(f"{path}: unknown precision tag {tag}")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            raw = payload[offset:offset + nbytes]
            if len(raw) != nbytes:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            offset += nbytes
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    except struct.error as err:
        raise CheckpointError(f"{path}: truncated checkpoint ({err})") from err
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes")
    return arrays


# ---------------------------------------------------------------------------
# model/optimizer state <-> flat arrays
# ---------------------------------------------------------------------------

def gather_state(model, optimizer=None, step: int = 0) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.trainable_named_params():
        arrays[f"param/{name}"] = p.data
    for name, p in model.target_named_params():
        arrays[f"param/{name}"] = p.data
    for name, state, fieldname in model.named_states():
        arrays[f"stats/{name}"] = getattr(state, fieldname)
    if optimizer is not None:
        for name, vel in optimizer.state_arrays().items():
            arrays[f"velocity/{name}"] = vel
    arrays["meta/step"] = np.asarray(float(step), dtype=np.float64)
    return arrays


def restore_state(model, arrays: dict[str, np.ndarray]) -> tuple[dict, int]:
    """Load parameters and running stats into the model, in place.

    Returns (velocity arrays keyed by parameter name, step).  Shape mismatches
    name the offending tensor.
    """
    def fetch(key, like):
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(like.shape):
            raise CheckpointError(
                f"shape mismatch for {key!r}: checkpoint {tuple(arr.shape)} "
                f"vs model {tuple(like.shape)}")
        return arr.astype(like.dtype, copy=True)

    for name, p in list(model.trainable_named_params()) + list(model.target_named_params()):
        p.data = fetch(f"param/{name}", p.data)
    for name, state, fieldname in model.named_states():
        setattr(state, fieldname, fetch(f"stats/{name}", getattr(state, fieldname)))
    velocities = {key[len("velocity/"):]: arr.copy()
                  for key, arr in arrays.items() if key.startswith("velocity/")}
    step = int(arrays.get("meta/step", np.asarray(0.0)).reshape(()))
    return velocities, step
