"""Voxel grid types and the VOLJ on-disk container.

Arrays are exposed in ``(x, y, z[, c])`` axis order so that ``spacing[i]``
belongs to array axis ``i``.  On disk the payload is channel-fastest, then
x, then y, then z, i.e. the flat index of voxel ``(x, y, z, c)`` is
``((z * ny + y) * nx + x) * channels + c``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

MAGIC = b"VOLJ\x00\x00\x00\x01"
SPACING_RTOL = 1e-6


class VolumeFormatError(ValueError):
    """Malformed VOLJ file.  ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class GridMismatchError(ValueError):
    pass


def _check_spacing(spacing: Sequence[float]) -> tuple:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing must be 3 positive finite reals, got {spacing!r}")
    return sp


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """Multi-channel float32 intensity grid, shape ``(nx, ny, nz, channels)``."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3-D or 4-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite intensities")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.data.shape[:3])

    @property
    def channels(self) -> int:
        return int(self.data.shape[3])

    def channel(self, c: int = 0) -> np.ndarray:
        return self.data[..., c]


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """uint8 label grid, shape ``(nx, ny, nz)``; label 0 is background."""

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    num_classes: int = 2

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValueError(f"label data must be 3-D, got shape {labels.shape}")
        if self.num_classes < 2 or self.num_classes > 256:
            raise ValueError(f"num_classes must be in [2, 256], got {self.num_classes}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(
                f"label out of range: values must be < num_classes={self.num_classes}"
            )
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.labels.shape)

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label

    def present_labels(self) -> list:
        return [int(v) for v in np.unique(self.labels) if v != 0]

    def with_labels(self, labels: np.ndarray) -> "LabelVolume":
        return LabelVolume(labels, self.spacing, self.num_classes)


@dataclass(frozen=True, eq=False)
class ReferenceDatabase:
    """Ordered ``(image, ground truth)`` pairs with unique ids."""

    entries: tuple
    ids: tuple = field(default=())

    def __post_init__(self):
        entries = tuple(self.entries)
        ids = tuple(self.ids) if self.ids else tuple(f"ref{k:03d}" for k in range(len(entries)))
        if not entries:
            raise ValueError("reference database is empty")
        if len(ids) != len(entries):
            raise ValueError("one id per reference entry is required")
        if len(set(ids)) != len(ids):
            raise ValueError("reference ids must be unique")
        ncls = {lab.num_classes for _, lab in entries}
        if len(ncls) != 1:
            raise ValueError(f"references disagree on num_classes: {sorted(ncls)}")
        for img, lab in entries:
            validate_pair(img, lab)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(zip(self.ids, self.entries))

    @property
    def num_classes(self) -> int:
        return self.entries[0][1].num_classes

    def without(self, excluded) -> "ReferenceDatabase":
        excluded = set(excluded)
        keep = [(i, e) for i, e in zip(self.ids, self.entries) if i not in excluded]
        return ReferenceDatabase(tuple(e for _, e in keep), tuple(i for i, _ in keep))


AnyVolume = Union[Volume, LabelVolume]


def flat_index(x: int, y: int, z: int, c: int, dims: Sequence[int], channels: int) -> int:
    nx, ny, _ = dims
    return ((z * ny + y) * nx + x) * channels + c


def _grid_of(vol: AnyVolume):
    return vol.dims, vol.spacing


def validate_pair(image: AnyVolume, labels: AnyVolume) -> None:
    """Raise :class:`GridMismatchError` unless both grids agree."""
    (d1, s1), (d2, s2) = _grid_of(image), _grid_of(labels)
    if tuple(d1) != tuple(d2):
        raise GridMismatchError(f"dimension mismatch: {tuple(d1)} vs {tuple(d2)}")
    for a, b in zip(s1, s2):
        if abs(a - b) > SPACING_RTOL * max(abs(a), abs(b)):
            raise GridMismatchError(f"spacing mismatch: {s1} vs {s2}")


def _payload_array(vol: AnyVolume) -> np.ndarray:
    if isinstance(vol, Volume):
        # (x, y, z, c) -> (z, y, x, c) puts c fastest, then x
        return np.ascontiguousarray(vol.data.transpose(2, 1, 0, 3), dtype="<f4")
    return np.ascontiguousarray(vol.labels.transpose(2, 1, 0), dtype=np.uint8)


def to_bytes(vol: AnyVolume) -> bytes:
    header = {"dims": list(vol.dims), "spacing_mm": list(vol.spacing)}
    if isinstance(vol, Volume):
        header.update(channels=vol.channels, dtype="f32")
    else:
        header.update(channels=1, dtype="u8", num_classes=vol.num_classes)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + _payload_array(vol).tobytes()


def save_volume(vol: AnyVolume, path) -> None:
    Path(path).write_bytes(to_bytes(vol))


def from_bytes(buf: bytes) -> AnyVolume:
    if len(buf) < 16:
        raise VolumeFormatError("truncated preamble", len(buf))
    if buf[:8] != MAGIC:
        raise VolumeFormatError("bad magic", 0)
    (hlen,) = struct.unpack("<Q", buf[8:16])
    if 16 + hlen > len(buf):
        raise VolumeFormatError(f"truncated header: declares {hlen} bytes", len(buf))
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"malformed header JSON: {exc}", 16) from exc

    def bad(msg):
        return VolumeFormatError(f"malformed header: {msg}", 16)

    if not isinstance(header, dict):
        raise bad("not an object")
    dims = header.get("dims")
    spacing = header.get("spacing_mm")
    channels = header.get("channels", 1)
    dtype = header.get("dtype")
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in dims)
    ):
        raise bad(f"dims={dims!r}")
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise bad(f"spacing_mm={spacing!r}")
    if not isinstance(channels, int) or channels < 1:
        raise bad(f"channels={channels!r}")
    if dtype not in ("f32", "u8"):
        raise bad(f"dtype={dtype!r}")
    try:
        spacing = _check_spacing(spacing)
    except (TypeError, ValueError) as exc:
        raise bad(str(exc)) from exc

    start = 16 + hlen
    nx, ny, nz = dims
    itemsize = 4 if dtype == "f32" else 1
    nchan = channels if dtype == "f32" else 1
    expected = nx * ny * nz * nchan * itemsize
    have = len(buf) - start
    if have < expected:
        raise VolumeFormatError(f"truncated payload: expected {expected} bytes, found {have}", len(buf))
    if have > expected:
        raise VolumeFormatError(f"trailing bytes after payload ({have - expected})", start + expected)

    if dtype == "f32":
        arr = np.frombuffer(buf, dtype="<f4", count=nx * ny * nz * channels, offset=start)
        arr = arr.reshape(nz, ny, nx, channels).transpose(2, 1, 0, 3)
        bad_idx = np.flatnonzero(~np.isfinite(arr.transpose(2, 1, 0, 3).ravel()))
        if bad_idx.size:
            raise VolumeFormatError("non-finite intensity", start + int(bad_idx[0]) * 4)
        return Volume(arr.astype(np.float32), spacing)

    ncls = header.get("num_classes")
    if not isinstance(ncls, int) or not 2 <= ncls <= 256:
        raise bad(f"num_classes={ncls!r}")
    flat = np.frombuffer(buf, dtype=np.uint8, count=nx * ny * nz, offset=start)
    over = np.flatnonzero(flat >= ncls)
    if over.size:
        raise VolumeFormatError(
            f"label out of range: value {int(flat[over[0]])} >= num_classes={ncls}",
            start + int(over[0]),
        )
    return LabelVolume(flat.reshape(nz, ny, nx).transpose(2, 1, 0), spacing, ncls)


def load_volume(path) -> AnyVolume:
    return from_bytes(Path(path).read_bytes())
