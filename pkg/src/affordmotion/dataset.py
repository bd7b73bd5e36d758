"""Dataset directory format: a JSON manifest plus a little-endian binary array blob.

Each array record in ``arrays.bin`` is::

    b"AMAR" | dtype code (u1) | ndim (u1) | 2 pad bytes | dims (ndim x u4) | payload

Floats are stored as ``<f4`` and integers as ``<i4``. The manifest references every
record by byte offset and repeats its shape so that truncation and header corruption
are detected on load.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import AffordanceMap, MotionSequence, PointCloud
from .scene_synth import HSISample, SceneObject
from .text import TextPrompt

FORMAT_NAME = "affordmotion-dataset"
FORMAT_VERSION = 1
BLOB_NAME = "arrays.bin"
MANIFEST_NAME = "manifest.json"

_MAGIC = b"AMAR"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
_CODES = {"f": 0, "i": 1, "u": 1, "b": 1}


class DatasetError(ValueError):
    pass


class ArrayWriter:
    def __init__(self, fh):
        self.fh = fh
        self.offset = 0

    def write(self, array) -> dict:
        arr = np.asarray(array)
        code = _CODES.get(arr.dtype.kind)
        if code is None:
            raise DatasetError(f"unsupported dtype {arr.dtype}")
        if arr.ndim > 255:
            raise DatasetError("too many dimensions")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        if code == 0 and arr.dtype.itemsize > 4 and not np.array_equal(data.astype(arr.dtype), arr):
            raise DatasetError("array does not round-trip through float32")
        header = _MAGIC + struct.pack("<BBxx", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        ref = {"offset": self.offset, "shape": list(arr.shape)}
        self.fh.write(header)
        self.fh.write(data.tobytes())
        self.offset += len(header) + data.nbytes
        return ref


class ArrayReader:
    def __init__(self, buffer: bytes):
        self.buffer = buffer

    def read(self, ref: dict) -> np.ndarray:
        try:
            off = int(ref["offset"])
            shape = tuple(int(s) for s in ref["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"corrupt dataset: bad array reference {ref!r}") from exc
        buf = self.buffer
        if off < 0 or off + 8 > len(buf) or buf[off:off + 4] != _MAGIC:
            raise DatasetError(f"corrupt dataset: no array record at offset {off}")
        code, ndim = struct.unpack_from("<BBxx", buf, off + 4)
        if code not in _DTYPES or ndim != len(shape):
            raise DatasetError(f"corrupt dataset: bad record header at offset {off}")
        start = off + 8 + 4 * ndim
        if start > len(buf):
            raise DatasetError("corrupt dataset: truncated header")
        dims = struct.unpack_from(f"<{ndim}I", buf, off + 8)
        if tuple(dims) != shape:
            raise DatasetError(f"corrupt dataset: shape header {dims} != manifest {shape}")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if start + nbytes > len(buf):
            raise DatasetError("corrupt dataset: truncated array payload")
        return np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=start).reshape(shape).copy()


def write_bundle(path, records: list, write_record, kind: str = FORMAT_NAME, extra: dict | None = None):
    """Write a manifest + blob directory. ``write_record(writer, record) -> json-able dict``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / BLOB_NAME, "wb") as fh:
        writer = ArrayWriter(fh)
        entries = [write_record(writer, r) for r in records]
        blob_size = writer.offset
    manifest = {"format": kind, "format_version": FORMAT_VERSION, "blob": BLOB_NAME,
                "blob_size": blob_size, "num_records": len(entries), "records": entries}
    if extra:
        manifest.update(extra)
    with open(path / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def read_bundle(path, read_record, kind: str = FORMAT_NAME):
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"no manifest in {path}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt dataset: unreadable manifest ({exc})") from exc
    if manifest.get("format") != kind:
        raise DatasetError(f"expected format {kind!r}, found {manifest.get('format')!r}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported format version {manifest.get('format_version')!r} "
                           f"(this build reads version {FORMAT_VERSION})")
    buffer = (path / manifest.get("blob", BLOB_NAME)).read_bytes()
    if len(buffer) != manifest.get("blob_size"):
        raise DatasetError(f"corrupt dataset: blob has {len(buffer)} bytes, manifest says {manifest.get('blob_size')}")
    records = manifest.get("records", [])
    if len(records) != manifest.get("num_records"):
        raise DatasetError("corrupt dataset: record count mismatch")
    reader = ArrayReader(buffer)
    return [read_record(reader, r) for r in records], manifest


def _write_sample(w: ArrayWriter, s: HSISample) -> dict:
    return {
        "scene": {"positions": w.write(s.scene.positions), "colors": w.write(s.scene.colors),
                  "object_ids": w.write(s.scene.object_ids)},
        "objects": [{"label": o.label, "point_indices": w.write(o.point_indices), "centroid": w.write(o.centroid),
                     "boxes": w.write(o.boxes), "front": w.write(o.front), "seat_height": float(o.seat_height)}
                    for o in s.objects],
        "motion": {"joints": w.write(s.motion.joints), "frame_rate": float(s.motion.frame_rate)},
        "prompt": {"raw": s.prompt.raw, "tokens": [int(t) for t in s.prompt.tokens],
                   "embedding": None if s.prompt.embedding is None else w.write(s.prompt.embedding)},
        "target_object": int(s.target_object),
        "affordance": {"values": w.write(s.affordance.values), "sigma": float(s.affordance.sigma)},
        "action": s.action,
    }


def _read_sample(r: ArrayReader, d: dict) -> HSISample:
    try:
        scene = PointCloud(r.read(d["scene"]["positions"]), r.read(d["scene"]["colors"]),
                           r.read(d["scene"]["object_ids"]))
        objects = [SceneObject(o["label"], r.read(o["point_indices"]), r.read(o["centroid"]), r.read(o["boxes"]),
                               r.read(o["front"]), o["seat_height"]) for o in d["objects"]]
        motion = MotionSequence(r.read(d["motion"]["joints"]), d["motion"]["frame_rate"])
        emb = d["prompt"]["embedding"]
        prompt = TextPrompt(d["prompt"]["raw"], list(d["prompt"]["tokens"]), None if emb is None else r.read(emb))
        aff = AffordanceMap(r.read(d["affordance"]["values"]), d["affordance"]["sigma"])
        return HSISample(scene, objects, motion, prompt, d["target_object"], aff, d.get("action", "walk"))
    except KeyError as exc:
        raise DatasetError(f"corrupt dataset: missing field {exc}") from exc


def save_dataset(samples: list, path) -> Path:
    return write_bundle(path, samples, _write_sample)


def load_dataset(path) -> list:
    samples, _ = read_bundle(path, _read_sample)
    return samples


def save_arrays(path, arrays: list[dict], kind: str, extra: dict | None = None) -> Path:
    """Generic bundle of named arrays per record (generated motions, fitted body params, ...)."""
    def write(w, rec):
        return {k: (w.write(v) if isinstance(v, np.ndarray) else v) for k, v in rec.items()}
    return write_bundle(path, arrays, write, kind, extra)


def load_arrays(path, kind: str):
    def read(r, rec):
        return {k: (r.read(v) if isinstance(v, dict) and "offset" in v else v) for k, v in rec.items()}
    return read_bundle(path, read, kind)
