"""Image loading, the dataset manifest, and the on-disk interchange formats.

Images are handled as ``uint8`` numpy arrays of shape ``(height, width, 3)``
in R, G, B channel order. Everything written by the pipeline goes through
:func:`atomic_write` so an interrupted run never leaves a half-written file.
"""

from __future__ import annotations

import contextlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DimensionError,
    DimMismatchError,
    DuplicateIdError,
    FormatError,
    LabelError,
    ParseError,
)

__all__ = [
    "as_image",
    "load_image",
    "save_image",
    "image_size",
    "ManifestEntry",
    "DatasetManifest",
    "load_manifest",
    "write_manifest",
    "FeatureRecord",
    "FeatureFile",
    "write_features",
    "read_features",
    "write_features_text",
    "read_features_text",
    "atomic_write",
    "write_json",
    "read_json",
]

FEATURE_MAGIC = b"QPFT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_U16 = struct.Struct("<H")


# ----------------------------------------------------------------------------
# atomic output
# ----------------------------------------------------------------------------


@contextlib.contextmanager
def _atomic_path(path: Path) -> Iterator[Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    tmp = Path(tmp)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def atomic_write(path, data: bytes | str) -> None:
    """Write ``data`` to ``path`` via a temporary sibling and a rename."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    with _atomic_path(Path(path)) as tmp:
        tmp.write_bytes(data)


def write_json(path, obj) -> None:
    # sorted keys + fixed separators keep reruns byte-identical
    atomic_write(path, json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from None


# ----------------------------------------------------------------------------
# images
# ----------------------------------------------------------------------------


def as_image(arr) -> np.ndarray:
    """Validate and return ``arr`` as a contiguous ``(H, W, 3)`` uint8 image."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"zero-sized image {arr.shape[1]}x{arr.shape[0]}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
            raise DimensionError("image contains non-finite values")
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(arr)


def load_image(path) -> np.ndarray:
    """Decode a raster file into an RGB uint8 array.

    Grayscale and palette images are expanded to three equal channels and an
    alpha channel, if present, is dropped.

    Raises:
        OSError: the file cannot be read.
        FormatError: the bytes are not a decodable image.
        DimensionError: the decoded image has a zero dimension.
    """
    raw = Path(path).read_bytes()
    try:
        with Image.open(io.BytesIO(raw)) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I", "F"):
                arr = np.asarray(im, dtype=np.float64)
                if arr.size and arr.max() > 255:
                    arr = arr / 257.0
                return as_image(arr)
            rgb = np.asarray(im.convert("RGB"))
    except (DimensionError, FormatError):
        raise
    except Exception as exc:  # PIL raises a zoo of types for corrupt data
        raise FormatError(f"{path}: cannot decode image ({exc})") from None
    return as_image(rgb)


def image_size(path) -> tuple[int, int]:
    """``(width, height)`` read from the file header without decoding pixels."""
    try:
        with Image.open(path) as im:
            return im.size
    except OSError as exc:
        if not Path(path).exists():
            raise
        raise FormatError(f"{path}: cannot read image header ({exc})") from None


def save_image(image, path, compress_level: int = 1) -> None:
    image = as_image(image)
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG", compress_level=compress_level)
    atomic_write(path, buf.getvalue())


# ----------------------------------------------------------------------------
# manifest
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    path: str
    label: int
    fold: int


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    root: Path = field(default=Path("."))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def n_folds(self) -> int:
        return max(e.fold for e in self.entries) + 1

    def class_counts(self) -> tuple[int, int]:
        n1 = sum(e.label for e in self.entries)
        return len(self.entries) - n1, n1

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.image_id: e for e in self.entries}

    def fold_ids(self, fold: int) -> list[str]:
        return [e.image_id for e in self.entries if e.fold == fold]


def parse_manifest(text: str, root=".", n_folds: int | None = None) -> DatasetManifest:
    entries = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\r\n").split("\t")
        if len(parts) != 4:
            raise ParseError(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
        image_id, path, label_s, fold_s = parts
        if not image_id or not path:
            raise ParseError(f"line {lineno}: empty image_id or path")
        try:
            label = int(label_s)
        except ValueError:
            raise LabelError(f"line {lineno}: label {label_s!r} is not an integer") from None
        if label not in (0, 1):
            raise LabelError(f"line {lineno}: label must be 0 or 1, got {label}")
        try:
            fold = int(fold_s)
        except ValueError:
            raise ParseError(f"line {lineno}: fold {fold_s!r} is not an integer") from None
        if fold < 0 or (n_folds is not None and fold >= n_folds):
            raise ParseError(f"line {lineno}: fold {fold} outside [0, {n_folds})")
        if image_id in seen:
            raise DuplicateIdError(f"line {lineno}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        entries.append(ManifestEntry(image_id, path, label, fold))
    if not entries:
        raise ParseError("manifest contains no entries")
    return DatasetManifest(tuple(entries), Path(root))


def load_manifest(path, n_folds: int | None = None) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise ParseError(f"{path}: manifest is not UTF-8") from None
    return parse_manifest(text, root=path.parent, n_folds=n_folds)


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    lines = ["# image_id\tpath\tlabel\tfold"]
    lines += [f"{e.image_id}\t{e.path}\t{e.label}\t{e.fold}" for e in entries]
    atomic_write(path, "\n".join(lines) + "\n")


# ----------------------------------------------------------------------------
# feature files
# ----------------------------------------------------------------------------


class FeatureRecord(NamedTuple):
    image_id: str
    node_id: str
    vector: np.ndarray


@dataclass
class FeatureFile:
    feature_dim: int
    records: list[FeatureRecord]

    def __len__(self):
        return len(self.records)

    def index(self) -> dict[tuple[str, str], np.ndarray]:
        return {(r.image_id, r.node_id): r.vector for r in self.records}


def _check_records(records: Sequence[FeatureRecord], feature_dim: int | None) -> int:
    seen = set()
    for r in records:
        v = np.asarray(r.vector)
        if v.ndim != 1:
            raise DimMismatchError(f"({r.image_id}, {r.node_id}): vector must be 1-D")
        if feature_dim is None:
            feature_dim = v.shape[0]
        elif v.shape[0] != feature_dim:
            raise DimMismatchError(
                f"({r.image_id}, {r.node_id}): dimension {v.shape[0]} != {feature_dim}"
            )
        if not np.all(np.isfinite(v)):
            raise DimMismatchError(f"({r.image_id}, {r.node_id}): non-finite feature")
        key = (r.image_id, r.node_id)
        if key in seen:
            raise DuplicateIdError(f"duplicate feature record {key}")
        seen.add(key)
    if feature_dim is None:
        raise DimMismatchError("feature_dim is required when writing zero records")
    return feature_dim


def _encode_id(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise FormatError(f"identifier too long ({len(b)} bytes)")
    return _U16.pack(len(b)) + b


def write_features(records: Sequence[FeatureRecord], path, feature_dim: int | None = None) -> None:
    """Write the binary feature file: little-endian header then one record per vector."""
    records = list(records)
    dim = _check_records(records, feature_dim)
    out = [_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, dim, len(records))]
    for r in records:
        out.append(_encode_id(r.image_id))
        out.append(_encode_id(r.node_id))
        out.append(np.asarray(r.vector, dtype="<f8").tobytes())
    atomic_write(path, b"".join(out))


def read_features(path) -> FeatureFile:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    vec_bytes = 8 * dim

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"{path}: truncated record data")
        chunk = data[off : off + n]
        off += n
        return chunk

    records = []
    for _ in range(count):
        (n,) = _U16.unpack(take(2))
        image_id = take(n).decode("utf-8")
        (n,) = _U16.unpack(take(2))
        node_id = take(n).decode("utf-8")
        vec = np.frombuffer(take(vec_bytes), dtype="<f8").astype(np.float64)
        records.append(FeatureRecord(image_id, node_id, vec))
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    _check_records(records, dim)
    return FeatureFile(dim, records)


def write_features_text(records: Sequence[FeatureRecord], path, feature_dim: int | None = None) -> None:
    """Debugging sibling of :func:`write_features`; floats use ``repr`` so they round-trip."""
    records = list(records)
    dim = _check_records(records, feature_dim)
    lines = [f"# QPFT-TEXT version={FEATURE_VERSION} feature_dim={dim} count={len(records)}"]
    for r in records:
        vals = "\t".join(repr(float(x)) for x in r.vector)
        lines.append(f"{r.image_id}\t{r.node_id}\t{vals}")
    atomic_write(path, "\n".join(lines) + "\n")


def read_features_text(path) -> FeatureFile:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# QPFT-TEXT"):
        raise FormatError(f"{path}: missing QPFT-TEXT header")
    header = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    dim, count = int(header["feature_dim"]), int(header["count"])
    records = []
    for line in lines[1:]:
        if not line:
            continue
        image_id, node_id, *vals = line.split("\t")
        vec = np.array([float(v) for v in vals], dtype=np.float64)
        records.append(FeatureRecord(image_id, node_id, vec))
    if len(records) != count:
        raise FormatError(f"{path}: header says {count} records, found {len(records)}")
    _check_records(records, dim)
    return FeatureFile(dim, records)
