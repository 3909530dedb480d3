"""Reading and writing vector files and trained-model containers.

Vector files use the de-facto benchmark layout: each record is a 4-byte
little-endian signed integer ``dim`` followed by ``dim`` elements whose
width depends on the element kind (float32 / uint8 / int32). All records
in one file must share the same ``dim``.

Models and indexes are stored in a single-file container: a magic
string, a format version, a JSON header describing parameters, array
shapes and checksums, then the raw little-endian array bytes in header
order. Array order is preserved exactly because centroid ordering is
semantically load-bearing for derived codebooks.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import FormatError

_ELEMENT_KINDS = {
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("u1"),
    "int32": np.dtype("<i4"),
}

_MODEL_MAGIC = b"DPQM"
_MODEL_VERSION = 1


def _element_dtype(element_kind: str) -> np.dtype:
    try:
        return _ELEMENT_KINDS[element_kind]
    except KeyError:
        raise ValueError(
            f"unknown element kind {element_kind!r}, expected one of "
            f"{sorted(_ELEMENT_KINDS)}"
        ) from None


def read_vecs(path, element_kind: str = "float32") -> np.ndarray:
    """Read a vector file into a (count, dim) array.

    Args:
        path: File to read.
        element_kind: "float32", "uint8" or "int32". uint8 values are
            widened to float32 (lossless); int32 files are returned as
            int32 so identifiers survive exactly.

    Returns:
        Array of shape (count, dim). An empty file yields shape (0, 0).

    Raises:
        FormatError: Truncated record, inconsistent dimension, or a
            non-positive dimension field, reported with its byte offset.
    """
    dtype = _element_dtype(element_kind)
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        out_dtype = np.int32 if element_kind == "int32" else np.float32
        return np.zeros((0, 0), dtype=out_dtype)
    if raw.size < 4:
        raise FormatError(f"{path}: truncated record at byte offset 0")
    dim = int(raw[:4].view("<i4")[0])
    if dim <= 0:
        raise FormatError(f"{path}: non-positive dimension {dim} at byte offset 0")
    stride = 4 + dim * dtype.itemsize
    if raw.size % stride != 0:
        offset = (raw.size // stride) * stride
        raise FormatError(f"{path}: truncated record at byte offset {offset}")
    records = raw.reshape(-1, stride)
    dims = records[:, :4].copy().view("<i4").ravel()
    mismatch = np.flatnonzero(dims != dim)
    if mismatch.size:
        offset = int(mismatch[0]) * stride
        raise FormatError(
            f"{path}: record dimension {int(dims[mismatch[0]])} != {dim} "
            f"at byte offset {offset}"
        )
    data = records[:, 4:].copy().view(dtype)
    if element_kind == "uint8":
        return data.astype(np.float32)
    if element_kind == "float32":
        return data.astype(np.float32, copy=False)
    return data.astype(np.int32, copy=False)


def write_vecs(data: np.ndarray, path, element_kind: str = "float32") -> None:
    """Write a (count, dim) array as a vector file.

    Round trips exactly: read_vecs(write_vecs(a)) == a for well-formed
    input. A 0-row array produces a 0-byte file.

    Raises:
        ValueError: data is not 2-d, or values do not fit the element
            kind (uint8 requires integral values in [0, 255]).
    """
    dtype = _element_dtype(element_kind)
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {data.shape}")
    count, dim = data.shape
    if count == 0:
        with open(path, "wb"):
            pass
        return
    if dim <= 0:
        raise ValueError("cannot write records of dimension 0")
    if element_kind == "uint8":
        if not np.all((data >= 0) & (data <= 255) & (data == np.floor(data))):
            raise ValueError("uint8 output requires integral values in [0, 255]")
    body = np.ascontiguousarray(data.astype(dtype))
    stride = 4 + dim * dtype.itemsize
    out = np.empty((count, stride), dtype=np.uint8)
    out[:, :4] = np.full(count, dim, dtype="<i4").view(np.uint8).reshape(count, 4)
    out[:, 4:] = body.view(np.uint8).reshape(count, dim * dtype.itemsize)
    out.tofile(path)


def save_model(model, path) -> None:
    """Persist a quantizer or index to a single-file container.

    The object must implement ``_serialize() -> (kind, params, arrays)``
    where params is a JSON-compatible dict and arrays an ordered dict of
    name -> ndarray.
    """
    kind, params, arrays = model._serialize()
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        blob = arr.tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "crc32": zlib.crc32(blob),
            }
        )
        blobs.append(blob)
    header = json.dumps({"kind": kind, "params": params, "arrays": manifest})
    header_bytes = header.encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MODEL_MAGIC)
        f.write(struct.pack("<HI", _MODEL_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_model(path, verify: bool = True):
    """Load a container written by save_model.

    Args:
        path: Container file.
        verify: Check per-array checksums while reading, then run the
            loaded object's structural validation (centroid ordering,
            rotation orthonormality). Pass False to inspect a file that
            fails either check.

    Raises:
        FormatError: Wrong magic, unsupported version, a truncated
            container, or (with verify) an array failing its checksum.
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MODEL_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        version, header_len = struct.unpack("<HI", f.read(6))
        if version != _MODEL_VERSION:
            raise FormatError(f"{path}: unsupported container version {version}")
        try:
            header = json.loads(f.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt header ({exc})") from exc
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            n_bytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
            blob = f.read(n_bytes)
            if len(blob) != n_bytes:
                raise FormatError(f"{path}: truncated array {entry['name']!r}")
            stored = entry.get("crc32")
            if verify and stored is not None and zlib.crc32(blob) != stored:
                raise FormatError(
                    f"{path}: array {entry['name']!r} fails its checksum"
                )
            arrays[entry["name"]] = np.frombuffer(blob, dtype=dtype).reshape(shape).copy()
    model = _model_class(header["kind"], path)._deserialize(header["params"], arrays)
    if verify and hasattr(model, "validate"):
        model.validate()
    return model


def _model_class(kind: str, path):
    from . import flat, ivf, quantizer

    registry = {
        "pq": quantizer.ProductQuantizer,
        "opq": quantizer.OptimizedProductQuantizer,
        "flat": flat.FlatIndex,
        "ivf": ivf.IVFIndex,
    }
    if kind not in registry:
        raise FormatError(f"{path}: unknown model kind {kind!r}")
    return registry[kind]
