"""Binary weight files (``CFEKIT-W v1``) and raw image tensors (``CFEKIT-I v1``).

Weights: header line, then per record ``u32 name_len | utf-8 name | u32 rank |
u32 dims... | float32 values``, all little-endian, until end of file.
Images: header line, ``u32 C, H, W``, then float32 values in [0, 1].
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

WEIGHTS_MAGIC = b"CFEKIT-W v1\n"
IMAGE_MAGIC = b"CFEKIT-I v1\n"
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


def save_weights(path, state: dict[str, np.ndarray]) -> None:
    chunks = [WEIGHTS_MAGIC]
    for name, arr in state.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if not blob.startswith(WEIGHTS_MAGIC):
        raise FormatError(f"{path}: missing CFEKIT-W v1 header")
    pos = len(WEIGHTS_MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 4 * count
            if pos + nbytes > len(blob):
                raise FormatError(f"{path}: record {name!r} truncated")
            out[name] = np.frombuffer(blob, dtype=_F32, count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"{path}: truncated record at byte {pos}") from exc
    return out


def save_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3:
        raise FormatError(f"image must be (C, H, W), got shape {image.shape}")
    Path(path).write_bytes(IMAGE_MAGIC + struct.pack("<3I", *image.shape)
                           + np.ascontiguousarray(image, dtype=_F32).tobytes())


def load_image(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(IMAGE_MAGIC):
        raise FormatError(f"{path}: missing CFEKIT-I v1 header")
    pos = len(IMAGE_MAGIC)
    if len(blob) < pos + 12:
        raise FormatError(f"{path}: truncated header")
    c, h, w = struct.unpack_from("<3I", blob, pos)
    pos += 12
    if len(blob) - pos != 4 * c * h * w:
        raise FormatError(f"{path}: expected {c * h * w} values, found {(len(blob) - pos) // 4}")
    return np.frombuffer(blob, dtype=_F32, offset=pos).reshape(c, h, w).astype(np.float32)
