"""TNSR binary tensor files.

Layout: ``b"TNSR"`` | u32 rank | rank x u32 extents | row-major f64 payload,
all little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import TensorFormatError

MAGIC = b"TNSR"
MAX_RANK = 8


def dumps(x: np.ndarray) -> bytes:
    x = np.ascontiguousarray(x, dtype="<f8")
    if x.ndim > MAX_RANK:
        raise TensorFormatError(f"rank {x.ndim} exceeds {MAX_RANK}")
    header = MAGIC + struct.pack(f"<I{x.ndim}I", x.ndim, *x.shape)
    return header + x.tobytes(order="C")


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise TensorFormatError("bad magic: not a TNSR file")
    (rank,) = struct.unpack_from("<I", buf, 4)
    if rank > MAX_RANK:
        raise TensorFormatError(f"rank {rank} exceeds {MAX_RANK}")
    off = 8 + 4 * rank
    if len(buf) < off:
        raise TensorFormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != 8 * count:
        raise TensorFormatError(
            f"payload is {len(buf) - off} bytes, expected {8 * count} for shape {shape}"
        )
    return np.frombuffer(buf, dtype="<f8", offset=off).astype(np.float64).reshape(shape)


def save(path, x: np.ndarray) -> None:
    Path(path).write_bytes(dumps(x))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())


def save_dir(directory, tensors: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write each tensor to ``<name>.tnsr`` plus a ``manifest.json`` index."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in tensors.items():
        fname = f"{name}.tnsr"
        save(d / fname, t)
        entries.append({"name": name, "file": fname, "shape": list(t.shape)})
    manifest = {"tensors": entries}
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dir(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    tensors = {}
    for e in manifest["tensors"]:
        t = load(d / e["file"])
        if list(t.shape) != e["shape"]:
            raise TensorFormatError(f"{e['file']}: shape {t.shape} != manifest {e['shape']}")
        tensors[e["name"]] = t
    return tensors, manifest
