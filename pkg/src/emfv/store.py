"""Persistence: JSON index snapshots and binary network weights.

Snapshots hold only feature vectors, band endpoints and the mean; images
never reach this module. Writes go to a temp file that is renamed into
place, so readers see either the old or the new file.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .core import MeanVector
from .errors import (
    BandCollisionError,
    DuplicatePersonError,
    EmfvError,
    FormatError,
    InvariantViolationError,
    SerializationError,
)
from .index import Band, BandedIndex, Gallery
from .nn import Conv2D, Dense, MaxPool2D, Network, ReLU, Softmax

SNAPSHOT_VERSION = 1
WEIGHTS_MAGIC = b"EMFVNET1"


def _atomic_write(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def snapshot_dict(idx: BandedIndex, gallery: Gallery) -> dict:
    if set(idx.persons) != set(gallery.persons):
        raise SerializationError("index and gallery hold different persons")
    if idx.dimension != gallery.dimension:
        raise SerializationError("index and gallery dimensions differ")
    return {
        "format_version": SNAPSHOT_VERSION,
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "dimension": idx.dimension,
        "version": idx.version,
        "margin": idx.margin,
        "epsilon": idx.epsilon,
        "tie_tolerance": idx.tie_tolerance,
        "mean_source_count": idx.mean.source_count,
        "mean": idx.mean.values.tolist(),
        "persons": [
            {"id": b.person, "band": [b.low, b.high],
             "samples": gallery.samples[b.person].tolist()}
            for b in idx.bands
        ],
    }


def dumps_snapshot(idx: BandedIndex, gallery: Gallery) -> str:
    # float repr is shortest round-trip; no trailing newline so that every
    # proper prefix is invalid JSON
    try:
        return json.dumps(snapshot_dict(idx, gallery), allow_nan=False)
    except ValueError as e:
        raise SerializationError(str(e)) from e


def save_snapshot(idx: BandedIndex, gallery: Gallery, path) -> None:
    _atomic_write(path, dumps_snapshot(idx, gallery).encode("utf-8"))


def _require(doc, key, kind):
    if key not in doc:
        raise FormatError(f"snapshot missing key {key!r}")
    value = doc[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise FormatError(f"snapshot key {key!r} has wrong type")
    return value


def loads_snapshot(text: str) -> tuple[BandedIndex, Gallery]:
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"snapshot is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise FormatError("snapshot must be a JSON object")
    version = doc.get("format_version")
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"unsupported format_version {version!r}; supported: [{SNAPSHOT_VERSION}]")
    dim = _require(doc, "dimension", int)
    persons = _require(doc, "persons", list)
    try:
        mean = MeanVector(np.asarray(_require(doc, "mean", list), dtype=np.float64),
                          _require(doc, "mean_source_count", int))
        bands, samples = [], {}
        for entry in persons:
            if not isinstance(entry, dict):
                raise FormatError("person entries must be objects")
            pid = _require(entry, "id", str)
            band = _require(entry, "band", list)
            if len(band) != 2:
                raise FormatError(f"band of {pid!r} must have two endpoints")
            bands.append(Band(pid, float(band[0]), float(band[1])))
            if pid in samples:
                raise InvariantViolationError(f"person {pid!r} listed twice")
            samples[pid] = np.asarray(_require(entry, "samples", list), dtype=np.float64)
        gallery = Gallery(dim, samples)
        idx = BandedIndex(mean, tuple(bands), dim,
                          version=_require(doc, "version", int),
                          margin=_require(doc, "margin", float),
                          epsilon=_require(doc, "epsilon", float),
                          tie_tolerance=_require(doc, "tie_tolerance", float))
    except (BandCollisionError, DuplicatePersonError) as e:
        raise InvariantViolationError(str(e)) from e
    except (FormatError, InvariantViolationError):
        raise
    except (EmfvError, ValueError, TypeError) as e:
        raise InvariantViolationError(f"snapshot violates index invariants: {e}") from e
    for pid, rows in gallery.samples.items():
        if np.any(rows < 0) or not np.all(np.isfinite(rows)):
            raise InvariantViolationError(f"samples of {pid!r} must be finite and nonnegative")
    return idx, gallery


def load_snapshot(path) -> tuple[BandedIndex, Gallery]:
    data = Path(path).read_bytes()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"snapshot is not UTF-8: {e}") from e
    return loads_snapshot(text)


# -- network weights -------------------------------------------------------

_KIND_CODES = {"conv": 1, "relu": 2, "maxpool": 3, "dense": 4, "softmax": 5}


def dumps_weights(net: Network) -> bytes:
    out = bytearray(WEIGHTS_MAGIC)
    shape = net.input_shape
    fli = -1 if net.feature_layer_index is None else net.feature_layer_index
    out += struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    out += struct.pack("<iI", fli, len(net.layers))
    for layer in net.layers:
        out += struct.pack("<B", _KIND_CODES[layer.kind])
        if layer.kind == "conv":
            out += struct.pack("<5I", layer.channels_in, layer.channels_out,
                               layer.kernel_size, layer.stride, layer.padding)
        elif layer.kind == "maxpool":
            out += struct.pack("<I", layer.window)
        elif layer.kind == "dense":
            out += struct.pack("<2I", layer.n_in, layer.n_out)
    for layer in net.layers:
        for w in layer.params().values():
            out += struct.pack("<Q", w.size)
            out += np.ascontiguousarray(w, dtype="<f8").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError("weights file is truncated")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def floats(self, n):
        if self.pos + 8 * n > len(self.data):
            raise FormatError("weights file is truncated")
        arr = np.frombuffer(self.data, dtype="<f8", count=n, offset=self.pos).astype(np.float64)
        self.pos += 8 * n
        return arr


def loads_weights(data: bytes) -> Network:
    if data[:len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise FormatError("not an EMFVNET1 weights file")
    r = _Reader(data)
    r.pos = len(WEIGHTS_MAGIC)
    (ndim,) = r.take("<B")
    shape = r.take(f"<{ndim}I")
    fli, nlayers = r.take("<iI")
    layers = []
    for _ in range(nlayers):
        (code,) = r.take("<B")
        if code == 1:
            layers.append(Conv2D(*r.take("<5I")))
        elif code == 2:
            layers.append(ReLU())
        elif code == 3:
            layers.append(MaxPool2D(*r.take("<I")))
        elif code == 4:
            layers.append(Dense(*r.take("<2I")))
        elif code == 5:
            layers.append(Softmax())
        else:
            raise FormatError(f"unknown layer code {code}")
    for layer in layers:
        for w in layer.params().values():
            (n,) = r.take("<Q")
            if n != w.size:
                raise FormatError(f"{layer.kind} weight count {n} != {w.size}")
            w[...] = r.floats(n).reshape(w.shape)
    if r.pos != len(data):
        raise FormatError("trailing bytes after weights")
    try:
        return Network(layers, shape, None if fli < 0 else fli)
    except EmfvError as e:
        raise FormatError(f"weights describe an invalid network: {e}") from e


def save_weights(net: Network, path) -> None:
    _atomic_write(path, dumps_weights(net))


def load_weights(path) -> Network:
    return loads_weights(Path(path).read_bytes())
