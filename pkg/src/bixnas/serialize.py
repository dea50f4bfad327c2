"""On-disk formats: the BIXW tensor container and 8-bit PGM masks.

BIXW layout (all integers little-endian u32):
    b"BIXW", version, then per entry:
    name length, utf-8 name, rank, dims..., raw little-endian float64 data.
Entries run to end of file. Float32 arrays round-trip exactly through float64.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from bixnas.errors import ArtifactIOError

MAGIC = b"BIXW"
VERSION = 1


def save_tensors(path, tensors: dict) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def load_tensors(path) -> dict:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != MAGIC:
        raise ArtifactIOError(f"{path}: bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ArtifactIOError(f"{path}: unsupported version {version}")
    pos, out = 8, {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
            pos += 8 * count
    except (struct.error, ValueError) as exc:
        raise ArtifactIOError(f"{path}: truncated tensor container") from exc
    return out


def write_pgm(path, mask) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.min() < 0 or mask.max() > 255:
        raise ArtifactIOError("PGM masks must be 2-D with values in [0, 255]")
    h, w = mask.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    try:
        Path(path).write_bytes(header + mask.astype(np.uint8).tobytes())
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def read_pgm(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    try:
        parts, pos = [], 0
        while len(parts) < 4:
            while buf[pos : pos + 1].isspace():
                pos += 1
            if buf[pos : pos + 1] == b"#":
                pos = buf.index(b"\n", pos) + 1
                continue
            end = pos
            while end < len(buf) and not buf[end : end + 1].isspace():
                end += 1
            if end == pos:
                raise ValueError("header ended early")
            parts.append(buf[pos:end])
            pos = end
        if parts[0] != b"P5" or int(parts[3]) > 255:
            raise ArtifactIOError(f"{path}: only 8-bit binary PGM is supported")
        w, h = int(parts[1]), int(parts[2])
        pos += 1
        return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()
    except (ValueError, IndexError) as exc:
        raise ArtifactIOError(f"{path}: malformed PGM ({exc})") from exc


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tensor_digest(arr) -> str:
    """64-bit hash of the exact bytes of an array (dtype and shape included)."""
    arr = np.ascontiguousarray(arr)
    h = hashlib.blake2b(digest_size=8)
    h.update(str((arr.dtype.str, arr.shape)).encode())
    h.update(arr.tobytes())
    return h.hexdigest()
