"""Volume container, raw+header file format and the dataset manifest."""
from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Volume",
    "ManifestEntry",
    "DatasetManifest",
    "VolumeFormatError",
    "write_volume",
    "read_volume",
    "atomic_write_bytes",
    "atomic_write_text",
]


class VolumeFormatError(ValueError):
    """Header or payload of a volume file is malformed."""


@dataclass
class Volume:
    """3-D scalar field (D, H, W) with voxel size in mm and provenance tags."""

    data: np.ndarray
    voxel_size_mm: tuple = (1.65, 1.65, 1.65)
    count_level: float = 1.0
    subject_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3-D array, got shape {self.data.shape}")
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)
        if len(self.voxel_size_mm) != 3 or min(self.voxel_size_mm) <= 0:
            raise ValueError(f"voxel sizes must be three positive numbers, got {self.voxel_size_mm}")
        if not 0 < self.count_level <= 1:
            raise ValueError(f"count_level must lie in (0, 1], got {self.count_level}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def replace(self, data) -> "Volume":
        return Volume(data, self.voxel_size_mm, self.count_level, self.subject_id)


# -- atomic file helpers ---------------------------------------------------------

def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# -- volume files ------------------------------------------------------------------

def write_volume(path, vol: Volume) -> Path:
    """Write ``<stem>.hdr`` (key=value) and ``<stem>.raw`` (f32 little-endian, D-H-W order).

    Returns the header path.
    """
    path = Path(path)
    hdr = path.with_suffix(".hdr")
    raw = path.with_suffix(".raw")
    d, h, w = vol.shape
    header = (
        f"dims={d},{h},{w}\n"
        f"voxel_size_mm={','.join(repr(v) for v in vol.voxel_size_mm)}\n"
        f"count_level={vol.count_level!r}\n"
        f"subject_id={vol.subject_id}\n"
        f"dtype=f32le\n"
        f"data_file={raw.name}\n"
    )
    try:
        atomic_write_bytes(raw, np.ascontiguousarray(vol.data, dtype="<f4").tobytes())
        atomic_write_text(hdr, header)
    except OSError as exc:
        raise OSError(f"could not write volume {hdr}: {exc}") from exc
    return hdr


def read_volume(path) -> Volume:
    hdr = Path(path).with_suffix(".hdr")
    try:
        text = hdr.read_text()
    except OSError as exc:
        raise OSError(f"could not read volume header {hdr}: {exc}") from exc
    meta = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{hdr}: malformed header line {line!r}")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    try:
        dims = tuple(int(x) for x in meta["dims"].split(","))
        voxel = tuple(float(x) for x in meta["voxel_size_mm"].split(","))
        level = float(meta["count_level"])
        dtype = meta["dtype"]
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"{hdr}: missing or invalid header field ({exc})") from exc
    if dtype != "f32le":
        raise VolumeFormatError(f"{hdr}: unsupported dtype {dtype!r}")
    raw = hdr.parent / meta.get("data_file", hdr.with_suffix(".raw").name)
    payload = np.fromfile(raw, dtype="<f4")
    if payload.size != int(np.prod(dims)):
        raise VolumeFormatError(f"{raw}: expected {int(np.prod(dims))} floats, found {payload.size}")
    return Volume(payload.reshape(dims).astype(np.float32), voxel, level, meta.get("subject_id", ""))


# -- manifest ----------------------------------------------------------------------

MANIFEST_COLUMNS = ("subject_id", "count_level", "path", "role")


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    count_level: float
    path: str
    role: str  # "label" or "input"


@dataclass
class DatasetManifest:
    """Subjects x count levels x file paths. Relative paths resolve against ``root``."""

    entries: list = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        for e in self.entries:
            if e.role not in ("label", "input"):
                raise ValueError(f"unknown manifest role {e.role!r}")

    def subjects(self) -> list[str]:
        seen = []
        for e in self.entries:
            if e.subject_id not in seen:
                seen.append(e.subject_id)
        return seen

    def count_levels(self) -> list[float]:
        return sorted({e.count_level for e in self.entries if e.role == "input"})

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def find(self, subject_id: str, count_level: float | None = None, role: str = "input") -> ManifestEntry | None:
        for e in self.entries:
            if e.subject_id != subject_id or e.role != role:
                continue
            if role == "label" or abs(e.count_level - count_level) < 1e-9:
                return e
        return None

    def load(self, subject_id: str, count_level: float | None = None, role: str = "input") -> Volume:
        e = self.find(subject_id, count_level, role)
        if e is None:
            what = "label" if role == "label" else f"count level {count_level:g}"
            raise FileNotFoundError(f"manifest has no {what} volume for subject {subject_id}")
        return read_volume(self.resolve(e))

    def subset(self, subject_ids) -> "DatasetManifest":
        keep = set(subject_ids)
        return DatasetManifest([e for e in self.entries if e.subject_id in keep], self.root)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in self.entries:
            writer.writerow([e.subject_id, f"{e.count_level:g}", e.path, e.role])
        return buf.getvalue()

    def save(self, path) -> None:
        atomic_write_text(path, self.to_csv())

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
                raise ValueError(f"{path}: manifest columns must be {','.join(MANIFEST_COLUMNS)}")
            entries = [ManifestEntry(r["subject_id"], float(r["count_level"]), r["path"], r["role"])
                       for r in reader]
        return cls(entries, path.parent)
