"""Named-parameter access, checksums, seeded RNG streams, and blob checkpoints.

Checkpoints are a JSON index next to a raw little-endian binary blob. The
index records dtype, shape, and byte offset per array, so files are
self-describing and byte-identical across runs for identical content.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Independent deterministic stream for (seed, label).

    Streams are pure functions of their arguments, so resuming a run never
    requires serializing generator state: re-derive the stream instead.
    """
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *words])))


def named_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    """Parameters of a module as name -> numpy array, in name order."""
    return {
        name: p.detach().cpu().numpy().copy()
        for name, p in sorted(module.named_parameters())
    }


def set_named_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    params = dict(module.named_parameters())
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise DataError(f"parameter name mismatch: {missing}")
    with torch.no_grad():
        for name, p in params.items():
            value = np.asarray(arrays[name])
            if tuple(value.shape) != tuple(p.shape):
                raise DataError(f"shape mismatch for {name}: {value.shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(value.astype(np.float64)))


def checksum_arrays(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode("utf-8"))
        arr = np.ascontiguousarray(arrays[name])
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def param_checksum(*modules: torch.nn.Module) -> str:
    """Digest of all parameters across the given modules, order-stable."""
    merged: dict[str, np.ndarray] = {}
    for i, module in enumerate(modules):
        for name, arr in named_arrays(module).items():
            merged[f"{i}.{name}"] = arr
    return checksum_arrays(merged)


def save_blob(path_stem: Path, arrays: dict[str, np.ndarray], dtype: str = "float64",
              extra: dict | None = None) -> None:
    """Write `<stem>.json` + `<stem>.bin` for a dict of arrays."""
    if dtype not in _DTYPES:
        raise DataError(f"unsupported blob dtype {dtype!r}")
    np_dtype = np.dtype(_DTYPES[dtype])
    index: dict[str, dict] = {}
    offset = 0
    chunks = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name]).astype(np_dtype)
        index[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes())
        offset += len(chunks[-1])
    header = {"dtype": dtype, "arrays": index}
    if extra:
        header["extra"] = extra
    path_stem = Path(path_stem)
    path_stem.parent.mkdir(parents=True, exist_ok=True)
    path_stem.with_suffix(".json").write_text(
        json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )
    path_stem.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_blob(path_stem: Path) -> tuple[dict[str, np.ndarray], dict]:
    path_stem = Path(path_stem)
    json_path = path_stem.with_suffix(".json")
    bin_path = path_stem.with_suffix(".bin")
    if not json_path.exists() or not bin_path.exists():
        raise DataError(f"missing checkpoint blob at {path_stem}")
    try:
        header = json.loads(json_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt blob header {json_path}: {exc}") from exc
    np_dtype = np.dtype(_DTYPES[header["dtype"]])
    raw = bin_path.read_bytes()
    arrays = {}
    for name, meta in header["arrays"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        arrays[name] = np.frombuffer(
            raw, dtype=np_dtype, count=count, offset=start
        ).reshape(shape).copy()
    return arrays, header.get("extra", {})


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(root: Path) -> str:
    """Digest of a directory tree: relative paths + file contents."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(file_digest(path).encode())
    return h.hexdigest()
