"""Voxel grids, binary volume IO and projection images.

Arrays are indexed ``[x, y, z]``; the flat on-disk ordering is x-fastest
(Fortran order), which is what NIfTI-1 uses as well.

Two on-disk formats are supported:

* a strict NIfTI-1 subset: uncompressed single ``.nii`` file, 348-byte
  header, datatypes uint8 / int16 / float32, 3 dimensions;
* a raw pair ``<name>.bin`` (little-endian payload) + ``<name>.meta``
  (``key=value`` lines).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

AXES = {"sagittal": 0, "coronal": 1, "axial": 2}

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC = b"n+1\x00"
# datatype code -> numpy dtype (endianness added at read time)
NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("i2"), 16: np.dtype("f4")}
RAW_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Base class for malformed or unsupported volume files."""


class BadMagicError(VolumeFormatError):
    pass


class UnsupportedDatatypeError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class BadDimensionError(VolumeFormatError):
    pass


class NonFiniteVoxelError(VolumeFormatError):
    pass


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class VolumeGrid:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"grid dims must be three positive ints, got {self.dims}")
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"grid spacing must be three positive reals, got {self.spacing}")
        if int(np.prod(dims, dtype=np.int64)) > np.iinfo(np.intp).max:
            raise ValueError("voxel count exceeds the platform index range")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def check_same(self, other: "VolumeGrid") -> None:
        if self.dims != other.dims:
            raise GridMismatchError(f"grid mismatch: {self.dims} vs {other.dims}")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """Real-valued image on a grid. ``data`` is float64, shape ``grid.dims``."""

    grid: VolumeGrid
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim == 1 and data.size == self.grid.size:
            data = data.reshape(self.grid.dims, order="F")
        if data.shape != self.grid.dims:
            raise ValueError(f"voxel array shape {data.shape} does not match grid {self.grid.dims}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0)) -> "ScalarVolume":
        data = np.asarray(data)
        return cls(VolumeGrid(data.shape, spacing), data)

    @property
    def voxels(self) -> np.ndarray:
        """Flat voxel values in x-fastest order."""
        return self.data.ravel(order="F")

    def __eq__(self, other):
        if not isinstance(other, ScalarVolume):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class MaskVolume:
    """Binary segmentation on a grid. ``data`` is uint8 holding 0/1."""

    grid: VolumeGrid
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 1 and data.size == self.grid.size:
            data = data.reshape(self.grid.dims, order="F")
        if data.shape != self.grid.dims:
            raise ValueError(f"mask array shape {data.shape} does not match grid {self.grid.dims}")
        if data.dtype == bool:
            data = data.astype(np.uint8)
        elif not np.all((data == 0) | (data == 1)):
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "data", _frozen(np.array(data, dtype=np.uint8, copy=True)))

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0)) -> "MaskVolume":
        data = np.asarray(data)
        return cls(VolumeGrid(data.shape, spacing), data)

    @property
    def voxels(self) -> np.ndarray:
        return self.data.ravel(order="F")

    @property
    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def __eq__(self, other):
        if not isinstance(other, MaskVolume):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.data, other.data)


Volume = Union[ScalarVolume, MaskVolume]


def to_mask(volume: ScalarVolume, threshold: float) -> MaskVolume:
    """Voxel is set iff its value is strictly greater than ``threshold``."""
    return MaskVolume(volume.grid, volume.data > threshold)


def project(volume: Volume, axis: str, mode: str = "max") -> np.ndarray:
    """Collapse one axis of the volume.

    ``axis`` names the viewing plane: axial collapses z, coronal collapses y,
    sagittal collapses x. The result keeps the remaining two axes in their
    original order, so a voxel at ``(x, y, z)`` lands at ``(x, y)`` in the
    axial image.
    """
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; expected one of {sorted(AXES)}")
    data = np.asarray(volume.data, dtype=np.float64)
    if mode == "max":
        return data.max(axis=AXES[axis])
    if mode == "sum":
        return data.sum(axis=AXES[axis])
    raise ValueError(f"unknown projection mode {mode!r}")


def resample_mean(volume: Volume, target_dims) -> Volume:
    """Block-mean downsampling to ``target_dims``.

    Each target dim must divide the corresponding source dim. Masks are
    averaged and then thresholded at 0.5.
    """
    target = tuple(int(d) for d in target_dims)
    src = volume.grid.dims
    if len(target) != 3 or any(t < 1 for t in target):
        raise ValueError(f"invalid target dims {target_dims}")
    if any(s % t for s, t in zip(src, target)):
        raise ValueError(f"target dims {target} do not divide source dims {src}")
    factors = [s // t for s, t in zip(src, target)]
    spacing = tuple(sp * f for sp, f in zip(volume.grid.spacing, factors))
    grid = VolumeGrid(target, spacing)
    if factors == [1, 1, 1]:
        return volume
    blocks = np.asarray(volume.data, dtype=np.float64).reshape(
        target[0], factors[0], target[1], factors[1], target[2], factors[2]
    )
    pooled = blocks.mean(axis=(1, 3, 5))
    if isinstance(volume, MaskVolume):
        return MaskVolume(grid, pooled > 0.5)
    return ScalarVolume(grid, pooled)


def zscore_nonzero(volume: ScalarVolume) -> ScalarVolume:
    """Standardize nonzero voxels with their own mean and std; zeros stay zero."""
    data = volume.data.copy()
    nz = data != 0
    if nz.any():
        values = data[nz]
        std = values.std()
        data[nz] = (values - values.mean()) / std if std > 0 else 0.0
    return ScalarVolume(volume.grid, data)


# ---------------------------------------------------------------------------
# IO


def _raw_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".bin", ".meta") else path
    return stem.with_name(stem.name + ".bin"), stem.with_name(stem.name + ".meta")


def save_volume(volume: Volume, path, format: str = "nifti1") -> None:
    """Write ``volume``; scalar payloads are float32, masks uint8."""
    if isinstance(volume, MaskVolume):
        payload = volume.voxels.astype(np.uint8)
    else:
        payload = volume.voxels.astype(np.float32)
    if format == "nifti1":
        _write_nifti(Path(path), volume.grid, payload)
    elif format == "raw":
        _write_raw(path, volume.grid, payload)
    else:
        raise ValueError(f"unknown volume format {format!r}")


def load_volume(path, format: str = "nifti1") -> ScalarVolume:
    if format == "nifti1":
        grid, values = _read_nifti(Path(path))
    elif format == "raw":
        grid, values = _read_raw(path)
    else:
        raise ValueError(f"unknown volume format {format!r}")
    if not np.all(np.isfinite(values)):
        raise NonFiniteVoxelError(f"{path}: non-finite voxel values")
    return ScalarVolume(grid, values)


def load_mask(path, format: str = "nifti1") -> MaskVolume:
    return to_mask(load_volume(path, format), 0.5)


def guess_format(path) -> str:
    suffix = Path(path).suffix
    if suffix == ".nii":
        return "nifti1"
    if suffix in (".bin", ".meta"):
        return "raw"
    raise ValueError(f"cannot infer volume format from {path}")


def _write_raw(path, grid: VolumeGrid, payload: np.ndarray) -> None:
    bin_path, meta_path = _raw_paths(path)
    dtype = "u8" if payload.dtype == np.uint8 else "f32"
    bin_path.write_bytes(payload.astype(RAW_DTYPES[dtype]).tobytes())
    lines = [
        "dims=" + ",".join(str(d) for d in grid.dims),
        "spacing=" + ",".join(repr(s) for s in grid.spacing),
        f"dtype={dtype}",
        "order=x-fastest",
    ]
    meta_path.write_text("\n".join(lines) + "\n")


def _read_raw(path) -> tuple[VolumeGrid, np.ndarray]:
    bin_path, meta_path = _raw_paths(path)
    meta = {}
    for line in meta_path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    try:
        dims = tuple(int(v) for v in meta["dims"].split(","))
        spacing = tuple(float(v) for v in meta.get("spacing", "1,1,1").split(","))
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"{meta_path}: bad dims/spacing entry") from exc
    if len(dims) != 3:
        raise BadDimensionError(f"{meta_path}: expected 3 dims, got {len(dims)}")
    dtype = meta.get("dtype", "f32")
    if dtype not in RAW_DTYPES:
        raise UnsupportedDatatypeError(f"{meta_path}: unsupported dtype {dtype!r}")
    if meta.get("order", "x-fastest") != "x-fastest":
        raise VolumeFormatError(f"{meta_path}: only x-fastest ordering is supported")
    grid = VolumeGrid(dims, spacing)
    raw = bin_path.read_bytes()
    expected = grid.size * RAW_DTYPES[dtype].itemsize
    if len(raw) < expected:
        raise TruncatedPayloadError(f"{bin_path}: {len(raw)} bytes, expected {expected}")
    values = np.frombuffer(raw, dtype=RAW_DTYPES[dtype], count=grid.size)
    return grid, values.astype(np.float64)


def _write_nifti(path: Path, grid: VolumeGrid, payload: np.ndarray) -> None:
    code = 2 if payload.dtype == np.uint8 else 16
    bitpix = payload.dtype.itemsize * 8
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *grid.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *grid.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<fff", hdr, 108, 352.0, 1.0, 0.0)  # vox_offset, scl_slope, scl_inter
    struct.pack_into("<B", hdr, 123, 10)  # xyzt_units: mm + sec
    hdr[344:348] = NIFTI_MAGIC
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00" * 4)  # no extensions
        fh.write(payload.astype(payload.dtype.newbyteorder("<")).tobytes())


def _read_nifti(path: Path) -> tuple[VolumeGrid, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) < NIFTI_HEADER_SIZE:
        raise TruncatedPayloadError(f"{path}: file shorter than a NIfTI-1 header")
    if raw[344:348] != NIFTI_MAGIC:
        raise BadMagicError(f"{path}: missing 'n+1' magic (single-file NIfTI-1 only)")
    for endian in ("<", ">"):
        ndim = struct.unpack_from(endian + "h", raw, 40)[0]
        if 1 <= ndim <= 7:
            break
    else:
        raise BadDimensionError(f"{path}: dim[0] out of range in either byte order")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    if dim[0] != 3:
        raise BadDimensionError(f"{path}: expected 3 dimensions, got dim[0]={dim[0]}")
    code = struct.unpack_from(endian + "h", raw, 70)[0]
    if code not in NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported datatype code {code}")
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset, slope, inter = struct.unpack_from(endian + "3f", raw, 108)
    dims = tuple(int(d) for d in dim[1:4])
    spacing = tuple(abs(p) if p and np.isfinite(p) else 1.0 for p in pixdim[1:4])
    try:
        grid = VolumeGrid(dims, spacing)
    except ValueError as exc:
        raise BadDimensionError(f"{path}: {exc}") from exc
    dtype = NIFTI_DTYPES[code].newbyteorder(endian)
    offset = int(vox_offset)
    nbytes = grid.size * dtype.itemsize
    if offset < NIFTI_HEADER_SIZE or len(raw) < offset + nbytes:
        raise TruncatedPayloadError(f"{path}: payload truncated ({len(raw) - offset} of {nbytes} bytes)")
    values = np.frombuffer(raw, dtype=dtype, count=grid.size, offset=offset).astype(np.float64)
    if slope != 0 and np.isfinite(slope):
        values = values * slope + inter
    return grid, values


# ---------------------------------------------------------------------------
# projection images


def write_pgm(image: np.ndarray, path) -> None:
    """16-bit binary PGM (P5), scaled so the image maximum maps to 65535."""
    image = np.asarray(image, dtype=np.float64)
    top = image.max() if image.size else 0.0
    scaled = np.zeros_like(image) if top <= 0 else np.clip(image / top, 0.0, 1.0) * 65535.0
    pixels = np.rint(scaled).astype(">u2")
    rows, cols = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data, dtype=dtype, count=rows * cols, offset=pos + 1).reshape(rows, cols)


def write_csv_image(image: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(image, dtype=np.float64):
            writer.writerow([repr(float(v)) for v in row])
