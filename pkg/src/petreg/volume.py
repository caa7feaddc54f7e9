"""Volume container, voxel/world geometry and MetaImage (.mhd/.raw) I/O.

Voxel data is held as a float64 array of shape ``(nz, ny, nx)`` so that the
flattened C-order buffer is x-fastest, matching the on-disk raw layout.
Voxel centres sit at ``origin + index * spacing`` and axes are identity.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Volume",
    "BoundingBox",
    "MetaImageError",
    "load_metaimage",
    "save_metaimage",
    "extract_voi",
]


class MetaImageError(ValueError):
    """Raised for malformed or unsupported MetaImage headers and data."""


@dataclass(frozen=True, eq=False)
class Volume:
    """3D scalar grid with physical geometry.

    Parameters
    ----------
    data : array_like
        Voxel values indexed ``[k, j, i]`` (z, y, x). Copied to float64.
    spacing : (sx, sy, sz) in mm
    origin : (ox, oy, oz) in mm, world position of voxel (0, 0, 0)
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"volume dims must be >= 1, got {data.shape[::-1]}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise ValueError("spacing and origin need three components")
        if any(not s > 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple:
        """Voxel counts ``(nx, ny, nz)``."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def extent(self) -> np.ndarray:
        """Physical distance between first and last voxel centre per axis."""
        return (np.array(self.dims) - 1) * np.array(self.spacing)

    def with_data(self, data) -> "Volume":
        """Same geometry, new voxel values."""
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise ValueError(f"shape {data.shape} does not match {self.data.shape}")
        return Volume(data, self.spacing, self.origin)

    def same_geometry(self, other: "Volume", tol: float = 1e-9) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=tol)
        )

    def index_to_world(self, ijk) -> np.ndarray:
        """Continuous (i, j, k) index -> world mm. Accepts ``(..., 3)`` arrays."""
        return np.asarray(self.origin) + np.asarray(ijk, dtype=float) * np.asarray(self.spacing)

    def world_to_index(self, xyz) -> np.ndarray:
        return (np.asarray(xyz, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def world_grid(self) -> np.ndarray:
        """World coordinates of every voxel centre, shape ``(nx*ny*nz, 3)``, x-fastest."""
        nx, ny, nz = self.dims
        k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        ijk = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
        return self.index_to_world(ijk)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.same_geometry(other, tol=0.0) and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive voxel-index box ``lo..hi`` as (i, j, k) triples."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("bounding box corners need three indices")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"bounding box lo {lo} exceeds hi {hi}")
        if any(a < 0 for a in lo):
            raise ValueError(f"bounding box lo {lo} is negative")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def full(cls, vol: Volume) -> "BoundingBox":
        return cls((0, 0, 0), tuple(d - 1 for d in vol.dims))

    @classmethod
    def parse(cls, text: str) -> "BoundingBox":
        """Parse ``"i0,j0,k0,i1,j1,k1"``."""
        parts = [p for p in text.replace(" ", "").split(",") if p]
        if len(parts) != 6:
            raise ValueError(f"expected six comma-separated integers, got {text!r}")
        vals = [int(p) for p in parts]
        return cls(tuple(vals[:3]), tuple(vals[3:]))


def extract_voi(vol: Volume, box: BoundingBox) -> Volume:
    """Crop ``vol`` to ``box``; the crop keeps its world position."""
    if any(h >= d for h, d in zip(box.hi, vol.dims)):
        raise ValueError(f"bounding box hi {box.hi} out of range for dims {vol.dims}")
    (i0, j0, k0), (i1, j1, k1) = box.lo, box.hi
    data = vol.data[k0 : k1 + 1, j0 : j1 + 1, i0 : i1 + 1]
    origin = vol.index_to_world(box.lo)
    return Volume(data, vol.spacing, tuple(origin))


# --------------------------------------------------------------------------
# MetaImage

_ELEMENT_TYPES = {
    "MET_CHAR": np.int8,
    "MET_UCHAR": np.uint8,
    "MET_SHORT": np.int16,
    "MET_USHORT": np.uint16,
    "MET_INT": np.int32,
    "MET_UINT": np.uint32,
    "MET_FLOAT": np.float32,
    "MET_DOUBLE": np.float64,
}

_IDENTITY_KEYS = ("TransformMatrix", "Rotation", "Orientation")


def _parse_bool(key, value):
    v = value.strip().lower()
    if v in ("true", "1"):
        return True
    if v in ("false", "0"):
        return False
    raise MetaImageError(f"{key}: expected True/False, got {value!r}")


def _parse_floats(key, value, n):
    try:
        vals = [float(v) for v in value.split()]
    except ValueError:
        raise MetaImageError(f"{key}: non-numeric value {value!r}") from None
    if len(vals) != n:
        raise MetaImageError(f"{key}: expected {n} values, got {value!r}")
    return vals


def _read_header(path):
    """Return (header dict, byte offset just past the header, file bytes)."""
    header = {}
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0
    while pos < len(raw):
        end = raw.find(b"\n", pos)
        end = len(raw) if end < 0 else end
        line = raw[pos:end].decode("ascii", errors="replace").strip()
        pos = end + 1
        if not line:
            continue
        if "=" not in line:
            raise MetaImageError(f"malformed header line {line!r} in {path}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise MetaImageError(f"malformed header key in line {line!r}")
        header[key] = value
        if key == "ElementDataFile":
            break
    return header, pos, raw


def load_metaimage(path) -> Volume:
    """Read a 3D MetaImage header and its raw data, widening to float64."""
    path = os.fspath(path)
    header, data_start, raw_header = _read_header(path)

    ndims = int(header.get("NDims", "3"))
    if ndims != 3:
        raise MetaImageError(f"NDims: only 3D volumes are supported, got {ndims}")
    if "DimSize" not in header:
        raise MetaImageError("DimSize: missing")
    dims = _parse_floats("DimSize", header["DimSize"], 3)
    if any(d < 1 or d != int(d) for d in dims):
        raise MetaImageError(f"DimSize: invalid value {header['DimSize']!r}")
    dims = [int(d) for d in dims]

    spacing_key = "ElementSpacing" if "ElementSpacing" in header else "ElementSize"
    spacing = _parse_floats(spacing_key, header.get(spacing_key, "1 1 1"), 3)
    if any(s <= 0 for s in spacing):
        raise MetaImageError(f"{spacing_key}: spacing must be positive, got {spacing}")

    origin = [0.0, 0.0, 0.0]
    for key in ("Offset", "Origin", "Position"):
        if key in header:
            origin = _parse_floats(key, header[key], 3)
            break

    for key in _IDENTITY_KEYS:
        if key in header:
            m = np.array(_parse_floats(key, header[key], 9)).reshape(3, 3)
            if not np.allclose(m, np.eye(3), atol=1e-6):
                raise MetaImageError(f"{key}: non-identity direction cosines are not supported ({header[key]})")

    if _parse_bool("CompressedData", header.get("CompressedData", "False")):
        raise MetaImageError("CompressedData: compressed raw data is not supported")
    if not _parse_bool("BinaryData", header.get("BinaryData", "True")):
        raise MetaImageError("BinaryData: ASCII data is not supported")

    etype = header.get("ElementType")
    if etype not in _ELEMENT_TYPES:
        raise MetaImageError(f"ElementType: unsupported element type {etype!r}")
    msb_key = "ElementByteOrderMSB" if "ElementByteOrderMSB" in header else "BinaryDataByteOrderMSB"
    msb = _parse_bool(msb_key, header.get(msb_key, "False"))
    if int(header.get("ElementNumberOfChannels", "1")) != 1:
        raise MetaImageError("ElementNumberOfChannels: only scalar volumes are supported")

    dtype = np.dtype(_ELEMENT_TYPES[etype]).newbyteorder(">" if msb else "<")
    data_file = header.get("ElementDataFile")
    if data_file is None:
        raise MetaImageError("ElementDataFile: missing")
    if data_file == "LOCAL":
        payload = raw_header[data_start:]
    else:
        raw_path = os.path.join(os.path.dirname(path), data_file)
        try:
            with open(raw_path, "rb") as fh:
                payload = fh.read()
        except OSError as exc:
            raise MetaImageError(f"ElementDataFile: cannot read {raw_path!r}: {exc}") from None

    n = dims[0] * dims[1] * dims[2]
    expected = n * dtype.itemsize
    if len(payload) != expected:
        raise MetaImageError(
            f"ElementDataFile: raw size {len(payload)} bytes does not match "
            f"DimSize {dims} x {dtype.itemsize} bytes = {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    return Volume(arr.reshape(dims[2], dims[1], dims[0]), tuple(spacing), tuple(origin))


def _fmt(values):
    return " ".join(repr(float(v)) for v in values)


def save_metaimage(vol: Volume, path) -> None:
    """Write ``path`` (.mhd) plus a sibling little-endian float32 ``.raw``."""
    path = os.fspath(path)
    stem, _ = os.path.splitext(path)
    raw_path = stem + ".raw"
    raw_name = os.path.basename(raw_path)
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "DimSize = " + " ".join(str(d) for d in vol.dims),
        "ElementSpacing = " + _fmt(vol.spacing),
        "Offset = " + _fmt(vol.origin),
        "ElementType = MET_FLOAT",
        "ElementByteOrderMSB = False",
        "ElementDataFile = " + raw_name,
    ]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(raw_path, "wb") as fh:
        fh.write(vol.data.astype("<f4").tobytes(order="C"))
