"""Volumetric data model, spacing-aware resampling, and file I/O.

A :class:`Volume` is a 3D scalar grid with physical spacing and origin.
Axis order is (x, y, z); voxel (i, j, k) is centered at
``origin + (i*sx, j*sy, k*sz)`` mm. Only axis-aligned geometry is
supported.

Two on-disk containers are supported:

* NIfTI-1 (``.nii`` / ``.nii.gz``), restricted to axis-aligned affines,
  spacing read from the pixdim fields. Integer datatypes load as
  ``kind="label"``, floating-point as ``kind="image"``.
* A plain fallback container (``.vol``): 3 little-endian u32 (shape),
  3 f64 (spacing), 3 f64 (origin), u8 (kind: 0=image, 1=label), then
  row-major f32 data.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KIND_IMAGE = "image"
KIND_LABEL = "label"

_NIFTI_HDR_SIZE = 348
_NIFTI_MAGIC = b"n+1\x00"

# NIfTI datatype codes we read/write
_DT_TO_NUMPY = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_NUMPY_TO_DT = {np.dtype(v): k for k, v in _DT_TO_NUMPY.items()}

_INT_KINDS = ("i", "u", "b")


@dataclass(frozen=True)
class Volume:
    """3D scalar grid with physical spacing (mm/voxel) and origin (mm).

    ``kind`` is "image" (float intensities) or "label" (integer class
    ids). Volumes are treated as immutable once constructed.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: str = KIND_IMAGE

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D with each axis >= 1, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be 3 strictly positive finite values, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin)
        if self.kind not in (KIND_IMAGE, KIND_LABEL):
            raise ValueError(f"kind must be 'image' or 'label', got {self.kind!r}")
        if self.kind == KIND_LABEL:
            if data.dtype.kind not in _INT_KINDS:
                raise ValueError(f"label volume must have integer dtype, got {data.dtype}")
            if data.size and data.min() < 0:
                raise ValueError("label volume must not contain negative class ids")
            if data.dtype == bool:
                data = data.astype(np.int16)
        elif data.dtype != np.float32:
            data = data.astype(np.float32)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, kind: str | None = None) -> "Volume":
        """New volume with the same geometry and different voxel data."""
        return Volume(data, self.spacing, self.origin, kind or self.kind)


def _sample_trilinear(data: np.ndarray, cx, cy, cz) -> np.ndarray:
    """Trilinear sampling at fractional index coordinates, edge-clamped."""
    nx, ny, nz = data.shape
    d = data.astype(np.float64, copy=False)
    cx = np.clip(cx, 0.0, nx - 1.0)
    cy = np.clip(cy, 0.0, ny - 1.0)
    cz = np.clip(cz, 0.0, nz - 1.0)
    x0 = np.floor(cx).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    z0 = np.floor(cz).astype(np.intp)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx = cx - x0
    fy = cy - y0
    fz = cz - z0
    c000 = d[x0, y0, z0]
    c100 = d[x1, y0, z0]
    c010 = d[x0, y1, z0]
    c110 = d[x1, y1, z0]
    c001 = d[x0, y0, z1]
    c101 = d[x1, y0, z1]
    c011 = d[x0, y1, z1]
    c111 = d[x1, y1, z1]
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def _sample_nearest(data: np.ndarray, cx, cy, cz) -> np.ndarray:
    """Nearest-neighbor sampling (round half up), edge-clamped."""
    nx, ny, nz = data.shape
    ix = np.clip(np.floor(cx + 0.5).astype(np.intp), 0, nx - 1)
    iy = np.clip(np.floor(cy + 0.5).astype(np.intp), 0, ny - 1)
    iz = np.clip(np.floor(cz + 0.5).astype(np.intp), 0, nz - 1)
    return data[ix, iy, iz]


def _sample_volume(vol: Volume, cx, cy, cz) -> np.ndarray:
    if vol.kind == KIND_LABEL:
        return _sample_nearest(vol.data, cx, cy, cz)
    return _sample_trilinear(vol.data, cx, cy, cz).astype(np.float32)


def resample(vol: Volume, target_spacing) -> Volume:
    """Resample ``vol`` onto a new grid with the given spacing.

    Output shape per axis is ``round(n_i * s_i / t_i)`` (round half up,
    minimum 1). Images are interpolated trilinearly, labels with
    nearest-neighbor; out-of-grid samples are edge-clamped. Origin is
    preserved.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or not all(np.isfinite(t) and t > 0 for t in target):
        raise ValueError(f"target spacing must be 3 strictly positive values, got {target_spacing}")
    out_shape = tuple(
        max(1, int(np.floor(n * s / t + 0.5)))
        for n, s, t in zip(vol.shape, vol.spacing, target)
    )
    return _resample_to(vol, out_shape, target)


def resample_like(vol: Volume, ref_shape, ref_spacing) -> Volume:
    """Resample ``vol`` onto an explicit reference grid (shared origin).

    Used to map a mask predicted on the training grid back onto the raw
    image grid, where shape equality with the reference is required.
    """
    out_shape = tuple(int(n) for n in ref_shape)
    target = tuple(float(t) for t in ref_spacing)
    if len(out_shape) != 3 or min(out_shape) < 1:
        raise ValueError(f"reference shape must be 3 positive ints, got {ref_shape}")
    if not all(np.isfinite(t) and t > 0 for t in target):
        raise ValueError(f"reference spacing must be strictly positive, got {ref_spacing}")
    return _resample_to(vol, out_shape, target)


def _resample_to(vol: Volume, out_shape, target) -> Volume:
    # output voxel center i*t maps to input fractional index i*t/s
    ax = [np.arange(n, dtype=np.float64) * t / s for n, t, s in zip(out_shape, target, vol.spacing)]
    cx, cy, cz = np.meshgrid(*ax, indexing="ij")
    out = _sample_volume(vol, cx, cy, cz)
    return Volume(out, target, vol.origin, vol.kind)


# ---------------------------------------------------------------------------
# NIfTI-1 container
# ---------------------------------------------------------------------------

def _write_blob(blob: bytes, path: Path) -> None:
    if str(path).endswith(".gz"):
        # mtime=0 and no embedded filename keep same-seed regenerated
        # files byte-identical
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)


def _read_blob(path: Path) -> bytes:
    raw = path.read_bytes()
    if str(path).endswith(".gz"):
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise IOError(f"{path}: bad gzip container: {exc}") from exc
    return raw


def _write_nifti(vol: Volume, path: Path) -> None:
    dtype = np.int16 if vol.kind == KIND_LABEL else np.float32
    data = np.ascontiguousarray(vol.data.astype(dtype, copy=False))
    dt_code = _NUMPY_TO_DT[np.dtype(dtype)]
    nx, ny, nz = vol.shape
    sx, sy, sz = vol.spacing
    ox, oy, oz = vol.origin

    hdr = bytearray(_NIFTI_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR_SIZE)          # sizeof_hdr
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)  # dim
    struct.pack_into("<h", hdr, 70, dt_code)                  # datatype
    struct.pack_into("<h", hdr, 72, data.dtype.itemsize * 8)  # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0, 0, 0, 0)  # pixdim
    struct.pack_into("<f", hdr, 108, 352.0)                   # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)                     # scl_slope
    struct.pack_into("<h", hdr, 252, 0)                       # qform_code
    struct.pack_into("<h", hdr, 254, 1)                       # sform_code
    struct.pack_into("<4f", hdr, 280, sx, 0, 0, ox)           # srow_x
    struct.pack_into("<4f", hdr, 296, 0, sy, 0, oy)           # srow_y
    struct.pack_into("<4f", hdr, 312, 0, 0, sz, oz)           # srow_z
    hdr[344:348] = _NIFTI_MAGIC

    # header, no extensions, then voxels with x varying fastest
    _write_blob(bytes(hdr) + b"\x00\x00\x00\x00" + data.tobytes(order="F"), path)


def _read_nifti(path: Path) -> Volume:
    raw = _read_blob(path)
    if len(raw) < _NIFTI_HDR_SIZE + 4:
        raise IOError(f"{path}: truncated NIfTI header ({len(raw)} bytes)")
    end = "<"
    (size,) = struct.unpack_from("<i", raw, 0)
    if size != _NIFTI_HDR_SIZE:
        (size_be,) = struct.unpack_from(">i", raw, 0)
        if size_be != _NIFTI_HDR_SIZE:
            raise IOError(f"{path}: not a NIfTI-1 file (sizeof_hdr={size})")
        end = ">"
    dim = struct.unpack_from(f"{end}8h", raw, 40)
    if dim[0] != 3:
        raise IOError(f"{path}: only 3D volumes are supported, file has dim[0]={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    (dt_code,) = struct.unpack_from(f"{end}h", raw, 70)
    if dt_code not in _DT_TO_NUMPY:
        raise IOError(f"{path}: unsupported NIfTI datatype code {dt_code}")
    dtype = np.dtype(_DT_TO_NUMPY[dt_code]).newbyteorder(end)
    pixdim = struct.unpack_from(f"{end}8f", raw, 76)
    spacing = pixdim[1:4]
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise IOError(f"{path}: invalid or missing spacing in pixdim {spacing}")
    (vox_offset,) = struct.unpack_from(f"{end}f", raw, 108)
    (scl_slope,) = struct.unpack_from(f"{end}f", raw, 112)
    (scl_inter,) = struct.unpack_from(f"{end}f", raw, 116)
    (sform_code,) = struct.unpack_from(f"{end}h", raw, 254)
    origin = (0.0, 0.0, 0.0)
    if sform_code > 0:
        srow = np.array(struct.unpack_from(f"{end}12f", raw, 280), dtype=np.float64).reshape(3, 4)
        rot = srow[:, :3]
        if np.abs(rot - np.diag(np.diag(rot))).max() > 1e-4 * max(1.0, np.abs(rot).max()):
            raise IOError(f"{path}: oblique/rotated affines are not supported")
        origin = tuple(srow[:, 3])

    offset = int(vox_offset)
    n_vox = nx * ny * nz
    payload = raw[offset:offset + n_vox * dtype.itemsize]
    if len(payload) < n_vox * dtype.itemsize:
        raise IOError(f"{path}: data payload truncated")
    data = np.frombuffer(payload, dtype=dtype).reshape((nx, ny, nz), order="F")
    data = data.astype(dtype.newbyteorder("="))

    kind = KIND_LABEL if data.dtype.kind in _INT_KINDS else KIND_IMAGE
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        data = data.astype(np.float32) * scl_slope + scl_inter
        kind = KIND_IMAGE
    return Volume(data, spacing, origin, kind)


# ---------------------------------------------------------------------------
# Plain fallback container (.vol)
# ---------------------------------------------------------------------------

def _write_vol(vol: Volume, path: Path) -> None:
    nx, ny, nz = vol.shape
    kind_byte = 1 if vol.kind == KIND_LABEL else 0
    with open(path, "wb") as f:
        f.write(struct.pack("<3I", nx, ny, nz))
        f.write(struct.pack("<3d", *vol.spacing))
        f.write(struct.pack("<3d", *vol.origin))
        f.write(struct.pack("<B", kind_byte))
        f.write(np.ascontiguousarray(vol.data, dtype=np.float32).tobytes())


def _read_vol(path: Path) -> Volume:
    with open(path, "rb") as f:
        head = f.read(12 + 24 + 24 + 1)
        if len(head) < 61:
            raise IOError(f"{path}: truncated .vol header")
        nx, ny, nz = struct.unpack_from("<3I", head, 0)
        spacing = struct.unpack_from("<3d", head, 12)
        origin = struct.unpack_from("<3d", head, 36)
        (kind_byte,) = struct.unpack_from("<B", head, 60)
        if kind_byte not in (0, 1):
            raise IOError(f"{path}: invalid kind byte {kind_byte}")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise IOError(f"{path}: invalid spacing {spacing}")
        n_vox = nx * ny * nz
        payload = f.read(n_vox * 4)
    if len(payload) < n_vox * 4:
        raise IOError(f"{path}: data payload truncated")
    data = np.frombuffer(payload, dtype="<f4").reshape((nx, ny, nz))
    if kind_byte == 1:
        return Volume(data.astype(np.int16), spacing, origin, KIND_LABEL)
    return Volume(data.astype(np.float32), spacing, origin, KIND_IMAGE)


def save_volume(vol: Volume, path) -> None:
    """Write a volume to ``.nii``, ``.nii.gz``, or ``.vol``."""
    path = Path(path)
    name = path.name.lower()
    if name.endswith((".nii", ".nii.gz")):
        _write_nifti(vol, path)
    elif name.endswith(".vol"):
        _write_vol(vol, path)
    else:
        raise ValueError(f"unsupported volume container: {path.name} (use .nii, .nii.gz, or .vol)")


def load_volume(path) -> Volume:
    """Read a volume from ``.nii``, ``.nii.gz``, or ``.vol``."""
    path = Path(path)
    if not path.is_file():
        raise IOError(f"volume file not found: {path}")
    name = path.name.lower()
    if name.endswith((".nii", ".nii.gz")):
        return _read_nifti(path)
    if name.endswith(".vol"):
        return _read_vol(path)
    raise ValueError(f"unsupported volume container: {path.name} (use .nii, .nii.gz, or .vol)")
