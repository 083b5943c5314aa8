"""Bit-exact container files for models and datasets.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"GLRA"
    4       4     u32 version (= 1)
    8       8     u64 header length H
    16      H     UTF-8 JSON header
    16+H    ...   payload: raw little-endian tensors, in manifest order

The header always carries ``"format"`` (``"checkpoint"`` or ``"dataset"``)
and ``"tensors"``, a list of ``{name, dtype, shape, offset, nbytes}`` with
offsets relative to the payload start. Offsets are contiguous from zero and
the payload ends exactly at the last tensor. Element types are ``f32``,
``f64`` and ``i64``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

from .errors import BadMagicError, ConfigurationError, FormatError, LengthError, ManifestError, VersionError
from .layer import GLoRALinear, LayerConfig, LayerSearchSpace, MergedLinear
from .synth import Dataset
from .tensor import DenseMatrix

MAGIC = b"GLRA"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")

ELEMENT_TYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}


def _element_type(arr: np.ndarray) -> str:
    for name, dt in ELEMENT_TYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return name
    raise FormatError(f"cannot store element type {arr.dtype}")


def _canonical(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_container(header: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors:
        etype = _element_type(arr)
        raw = np.ascontiguousarray(arr, dtype=ELEMENT_TYPES[etype]).tobytes()
        manifest.append({"name": name, "dtype": etype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    text = _canonical(dict(header, tensors=manifest))
    return _PREFIX.pack(MAGIC, VERSION, len(text)) + text + b"".join(chunks)


def decode_container(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size:
        raise LengthError(f"file is {len(blob)} bytes, shorter than the {_PREFIX.size}-byte prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"unsupported version {version}, expected {VERSION}")
    if hlen > len(blob) - _PREFIX.size:
        raise LengthError(f"header length {hlen} exceeds remaining {len(blob) - _PREFIX.size} bytes")
    try:
        header = json.loads(blob[_PREFIX.size : _PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise ManifestError("header must be an object with a 'tensors' list")
    if _canonical(header) != bytes(blob[_PREFIX.size : _PREFIX.size + hlen]):
        raise ManifestError("header is not in canonical form (sorted keys, compact separators)")
    payload = memoryview(blob)[_PREFIX.size + hlen :]
    expected = 0
    entries = []
    for entry in header["tensors"]:
        try:
            name, etype, shape = entry["name"], entry["dtype"], entry["shape"]
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise ManifestError(f"malformed manifest entry {entry!r}") from None
        if etype not in ELEMENT_TYPES:
            raise ManifestError(f"tensor {name!r}: unknown element type {etype!r}")
        if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
            raise ManifestError(f"tensor {name!r}: bad shape {shape!r}")
        if offset != expected:
            raise ManifestError(f"tensor {name!r}: offset {offset}, expected contiguous {expected}")
        if nbytes != int(np.prod(shape, dtype=np.int64)) * ELEMENT_TYPES[etype].itemsize:
            raise ManifestError(f"tensor {name!r}: {nbytes} bytes do not match shape {shape} of {etype}")
        if offset + nbytes > len(payload):
            raise LengthError(f"tensor {name!r} runs past the end of the payload ({len(payload)} bytes)")
        expected = offset + nbytes
        entries.append((name, etype, shape, offset, nbytes))
    if expected != len(payload):
        raise LengthError(f"payload is {len(payload)} bytes, manifest declares {expected}")
    arrays = {}
    for name, etype, shape, offset, nbytes in entries:
        if name in arrays:
            raise ManifestError(f"duplicate tensor name {name!r}")
        arrays[name] = np.frombuffer(payload[offset : offset + nbytes], dtype=ELEMENT_TYPES[etype]).reshape(shape).copy()
    return header, arrays


def _atomic_write(path, data: bytes) -> int:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc
    return len(data)


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read {path}: {exc.strerror}") from exc


# -- models -----------------------------------------------------------------


def model_to_bytes(model, spaces=None, extra: dict[str, Any] | None = None) -> bytes:
    layers_meta, tensors = [], []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, MergedLinear):
            layers_meta.append({"type": "merged", "bias": layer.b_uni is not None})
            tensors.append((f"layers.{i}.W", layer.W_uni.data))
            if layer.b_uni is not None:
                tensors.append((f"layers.{i}.b", layer.b_uni.data))
            continue
        layers_meta.append({"type": "glora", "bias": layer.has_bias, "r_max": layer.r_max})
        tensors.append((f"layers.{i}.W", layer.W0.data))
        if layer.has_bias:
            tensors.append((f"layers.{i}.b", layer.b0.data))
        for name in sorted(layer.factors):
            tensors.append((f"layers.{i}.{name}", layer.factors[name].data))
    header = {
        "format": "checkpoint",
        "model": {
            "kind": model.kind,
            "dims": list(model.dims),
            "tokens": model.tokens,
            "labels": list(model.labels),
            "layers": layers_meta,
        },
        "spaces": None if spaces is None else [s.to_dict() for s in spaces],
        "extra": extra or {},
    }
    return encode_container(header, tensors)


def save_checkpoint(model, path, spaces=None, extra: dict[str, Any] | None = None) -> int:
    """Write ``model`` (and optionally its search spaces); returns bytes written."""
    return _atomic_write(path, model_to_bytes(model, spaces, extra))


def model_from_bytes(blob: bytes):
    from .supernet import ToyModel

    header, arrays = decode_container(blob)
    if header.get("format") != "checkpoint":
        raise FormatError(f"expected a checkpoint, found format {header.get('format')!r}")
    try:
        meta = header["model"]
        layers = []
        used = set()

        def get(name):
            used.add(name)
            arr = arrays[name]
            if arr.ndim != 2 or arr.dtype.kind != "f":
                raise ManifestError(f"tensor {name!r} must be a 2-D float matrix")
            return DenseMatrix._wrap(arr)

        for i, lm in enumerate(meta["layers"]):
            W = get(f"layers.{i}.W")
            b = get(f"layers.{i}.b") if lm["bias"] else None
            if lm["type"] == "merged":
                layers.append(MergedLinear(W, b))
            elif lm["type"] == "glora":
                factors = {name: get(f"layers.{i}.{name}") for name in ("A_d", "A_u", "B_d", "B_u", "C_d", "C_u", "D", "E")}
                layers.append(GLoRALinear(W, b, lm["r_max"], factors))
            else:
                raise ManifestError(f"unknown layer type {lm['type']!r}")
        if used != set(arrays):
            raise ManifestError(f"unexpected tensors {sorted(set(arrays) - used)}")
        model = ToyModel(meta["kind"], tuple(meta["dims"]), layers, list(meta["labels"]), int(meta["tokens"]))
        spaces = None if header.get("spaces") is None else [LayerSearchSpace.from_dict(s) for s in header["spaces"]]
    except KeyError as exc:
        raise ManifestError(f"checkpoint header is missing {exc}") from None
    except (ConfigurationError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise ManifestError(f"inconsistent checkpoint: {exc}") from None
    return model, spaces, header.get("extra", {})


def load_checkpoint(path):
    """Returns ``(model, spaces, extra)``; ``spaces`` is ``None`` for plain models."""
    return model_from_bytes(_read(path))


# -- datasets ---------------------------------------------------------------


def dataset_to_bytes(data: Dataset) -> bytes:
    tensors = [("features", np.asarray(data.features, dtype=np.float64))]
    if data.is_classification:
        tensors.append(("labels", np.asarray(data.targets, dtype=np.int64)))
    else:
        tensors.append(("targets", np.asarray(data.targets, dtype=np.float64)))
    for name in sorted(data.splits):
        tensors.append((f"split.{name}", np.asarray(data.splits[name], dtype=np.int64)))
    return encode_container({"format": "dataset", "meta": data.meta}, tensors)


def save_dataset(data: Dataset, path) -> int:
    return _atomic_write(path, dataset_to_bytes(data))


def dataset_from_bytes(blob: bytes) -> Dataset:
    header, arrays = decode_container(blob)
    if header.get("format") != "dataset":
        raise FormatError(f"expected a dataset, found format {header.get('format')!r}")
    meta = header.get("meta", {})
    classification = meta.get("task") == "classification"
    target_key = "labels" if classification else "targets"
    if "features" not in arrays or target_key not in arrays:
        raise ManifestError(f"dataset needs 'features' and {target_key!r} tensors")
    if arrays[target_key].dtype.kind != ("i" if classification else "f"):
        raise ManifestError(f"{target_key!r} has the wrong element type")
    splits = {k[len("split.") :]: v for k, v in arrays.items() if k.startswith("split.")}
    extra = set(arrays) - {"features", target_key} - {f"split.{k}" for k in splits}
    if extra:
        raise ManifestError(f"unexpected tensors {sorted(extra)}")
    try:
        return Dataset(arrays["features"], arrays[target_key], splits, meta)
    except ValueError as exc:
        raise ManifestError(f"inconsistent dataset: {exc}") from None


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(_read(path))


# -- configuration documents -------------------------------------------------


def config_to_json(config, provenance: dict | None = None) -> str:
    doc = {"layers": [cfg.to_dict() for cfg in config], "provenance": provenance or {}}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def config_from_json(text: str) -> tuple[list[LayerConfig], dict]:
    try:
        doc = json.loads(text)
        config = [LayerConfig.from_dict(d) for d in doc["layers"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"not a configuration document: {exc}") from None
    return config, doc.get("provenance", {})


def save_config(config, path, provenance: dict | None = None) -> int:
    return _atomic_write(path, config_to_json(config, provenance).encode("utf-8"))


def load_config(path) -> tuple[list[LayerConfig], dict]:
    return config_from_json(_read(path).decode("utf-8"))
