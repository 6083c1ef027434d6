"""Minimal NIfTI-1 and raw-format I/O for volumes and label maps.

Supported on read: single-file NIfTI-1 (magic ``n+1\\0``), optionally
gzip-compressed, 3-D only, dtypes u8 / i16 / f32, little-endian, with
scl_slope / scl_inter honoured. Writes always use f32 for volumes and u8
for label maps. Orientation is not interpreted; spacing comes from pixdim
only.

The raw format is a ``<name>.vol.json`` sidecar plus a little-endian
binary payload in x-fastest order (see :func:`save_volume`).
"""

from __future__ import annotations

import gzip
import io as _stdio
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import LabelMap, Volume3D, VolumeFormatError

HDR_SIZE = 348
MAGIC = b"n+1\x00"
GZIP_PREFIX = b"\x1f\x8b"

DT_U8 = 2
DT_I16 = 4
DT_F32 = 16
_NP_DTYPES = {DT_U8: np.dtype("<u1"), DT_I16: np.dtype("<i2"), DT_F32: np.dtype("<f4")}
_BITPIX = {DT_U8: 8, DT_I16: 16, DT_F32: 32}

# header field offsets (bytes), NIfTI-1 single-file layout
_OFF_SIZEOF_HDR = 0
_OFF_DIM = 40
_OFF_DATATYPE = 70
_OFF_BITPIX = 72
_OFF_PIXDIM = 76
_OFF_VOX_OFFSET = 108
_OFF_SCL_SLOPE = 112
_OFF_SCL_INTER = 116
_OFF_XYZT_UNITS = 123
_OFF_MAGIC = 344

RAW_SIDECAR_SUFFIX = ".vol.json"
RAW_PAYLOAD_SUFFIX = ".vol.bin"


@dataclass(frozen=True)
class VolumeHeader:
    """Parsed subset of a NIfTI-1 header."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    dtype_code: int
    scl_slope: float
    scl_inter: float
    vox_offset: int


def _parse_nifti_header(buf: bytes) -> VolumeHeader:
    if len(buf) < HDR_SIZE:
        raise VolumeFormatError(f"file too short for a NIfTI-1 header ({len(buf)} bytes)")
    (sizeof_hdr,) = struct.unpack_from("<i", buf, _OFF_SIZEOF_HDR)
    magic = buf[_OFF_MAGIC:_OFF_MAGIC + 4]
    if sizeof_hdr != HDR_SIZE or magic != MAGIC:
        raise VolumeFormatError(
            f"unrecognized magic/header (sizeof_hdr={sizeof_hdr}, magic={magic!r})"
        )
    dim = struct.unpack_from("<8h", buf, _OFF_DIM)
    if dim[0] != 3:
        raise VolumeFormatError(f"only 3-D volumes are supported, got dim[0]={dim[0]}")
    (datatype,) = struct.unpack_from("<h", buf, _OFF_DATATYPE)
    if datatype not in _NP_DTYPES:
        raise VolumeFormatError(f"unsupported dtype code {datatype} (want u8=2, i16=4, f32=16)")
    pixdim = struct.unpack_from("<8f", buf, _OFF_PIXDIM)
    (vox_offset,) = struct.unpack_from("<f", buf, _OFF_VOX_OFFSET)
    (slope,) = struct.unpack_from("<f", buf, _OFF_SCL_SLOPE)
    (inter,) = struct.unpack_from("<f", buf, _OFF_SCL_INTER)
    nx, ny, nz = int(dim[1]), int(dim[2]), int(dim[3])
    if nx < 1 or ny < 1 or nz < 1:
        raise VolumeFormatError(f"non-positive dims {(nx, ny, nz)}")
    return VolumeHeader(
        dims=(nx, ny, nz),
        spacing=(float(pixdim[1]), float(pixdim[2]), float(pixdim[3])),
        dtype_code=int(datatype),
        scl_slope=float(slope),
        scl_inter=float(inter),
        vox_offset=int(round(vox_offset)),
    )


def _build_nifti_header(dims, spacing, dtype_code: int) -> bytes:
    buf = bytearray(HDR_SIZE)
    struct.pack_into("<i", buf, _OFF_SIZEOF_HDR, HDR_SIZE)
    struct.pack_into("<8h", buf, _OFF_DIM, 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<h", buf, _OFF_DATATYPE, dtype_code)
    struct.pack_into("<h", buf, _OFF_BITPIX, _BITPIX[dtype_code])
    struct.pack_into(
        "<8f", buf, _OFF_PIXDIM, 1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0
    )
    struct.pack_into("<f", buf, _OFF_VOX_OFFSET, 352.0)
    struct.pack_into("<f", buf, _OFF_SCL_SLOPE, 1.0)
    struct.pack_into("<f", buf, _OFF_SCL_INTER, 0.0)
    struct.pack_into("<B", buf, _OFF_XYZT_UNITS, 2)  # millimetres
    buf[_OFF_MAGIC:_OFF_MAGIC + 4] = MAGIC
    # 4-byte extension flag pads the header to vox_offset=352
    return bytes(buf) + b"\x00\x00\x00\x00"


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == GZIP_PREFIX:
        raw = gzip.decompress(raw)
    return raw


def _atomic_write(path, payload: bytes) -> None:
    """Write all-or-nothing: no partial file survives a failure."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _maybe_gzip(path, payload: bytes) -> bytes:
    if str(path).endswith(".gz"):
        out = _stdio.BytesIO()
        # mtime=0 keeps the compressed bytes reproducible
        with gzip.GzipFile(fileobj=out, mode="wb", mtime=0) as gz:
            gz.write(payload)
        return out.getvalue()
    return payload


def _is_raw_path(path) -> bool:
    return str(path).endswith(RAW_SIDECAR_SUFFIX)


def _raw_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if _is_raw_path(path):
        stem = path.name[: -len(RAW_SIDECAR_SUFFIX)]
    else:
        stem = path.name
    sidecar = path.parent / (stem + RAW_SIDECAR_SUFFIX)
    payload = path.parent / (stem + RAW_PAYLOAD_SUFFIX)
    return sidecar, payload


def _load_nifti_array(path) -> tuple[np.ndarray, VolumeHeader]:
    raw = _read_bytes(path)
    hdr = _parse_nifti_header(raw)
    nx, ny, nz = hdr.dims
    dtype = _NP_DTYPES[hdr.dtype_code]
    need = nx * ny * nz * dtype.itemsize
    avail = len(raw) - hdr.vox_offset
    if hdr.vox_offset < HDR_SIZE or avail < need:
        raise VolumeFormatError(
            f"truncated payload: need {need} bytes at offset {hdr.vox_offset}, have {max(avail, 0)}"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=nx * ny * nz, offset=hdr.vox_offset)
    arr = flat.astype(np.float64).reshape((nx, ny, nz), order="F")
    if hdr.scl_slope != 0.0:
        arr = hdr.scl_slope * arr + hdr.scl_inter
    return arr, hdr


def _load_raw_array(path) -> tuple[np.ndarray, dict]:
    sidecar, _ = _raw_paths(path)
    try:
        meta = json.loads(Path(sidecar).read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"bad raw sidecar {sidecar}: {exc}") from exc
    for key in ("dims", "spacing", "dtype", "data_file"):
        if key not in meta:
            raise VolumeFormatError(f"raw sidecar {sidecar} missing field {key!r}")
    if meta["dtype"] not in ("f32", "u8"):
        raise VolumeFormatError(f"unsupported raw dtype {meta['dtype']!r}")
    dims = tuple(int(d) for d in meta["dims"])
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"bad raw dims {meta['dims']}")
    dtype = np.dtype("<f4") if meta["dtype"] == "f32" else np.dtype("<u1")
    payload_path = Path(sidecar).parent / meta["data_file"]
    payload = payload_path.read_bytes()
    need = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) < need:
        raise VolumeFormatError(f"truncated payload: need {need} bytes, have {len(payload)}")
    flat = np.frombuffer(payload, dtype=dtype, count=dims[0] * dims[1] * dims[2])
    return flat.reshape(dims, order="F"), meta


def load_volume(path) -> Volume3D:
    """Read a volume from NIfTI-1 (.nii / .nii.gz) or the raw format."""
    if _is_raw_path(path):
        arr, meta = _load_raw_array(path)
        spacing = tuple(float(s) for s in meta["spacing"])
        return Volume3D(arr.astype(np.float64), spacing)
    arr, hdr = _load_nifti_array(path)
    return Volume3D(arr, hdr.spacing)


def save_volume(vol: Volume3D, path, format: str | None = None) -> None:
    """Write a volume as NIfTI-1 f32 or as the raw f32 format.

    ``format`` is ``"nifti"`` or ``"raw"``; when omitted it is inferred
    from the path (``*.vol.json`` means raw).
    """
    fmt = format or ("raw" if _is_raw_path(path) else "nifti")
    data_f32 = vol.data.astype("<f4")
    if fmt == "nifti":
        payload = _build_nifti_header(vol.dims, vol.spacing, DT_F32) + data_f32.tobytes(order="F")
        _atomic_write(path, _maybe_gzip(path, payload))
    elif fmt == "raw":
        _save_raw(path, data_f32, vol.spacing, "f32")
    else:
        raise ValueError(f"unknown format {format!r} (want 'nifti' or 'raw')")


def _save_raw(path, arr: np.ndarray, spacing, dtype_tag: str) -> None:
    sidecar, payload_path = _raw_paths(path)
    meta = {
        "dims": [int(d) for d in arr.shape],
        "spacing": [float(s) for s in spacing],
        "dtype": dtype_tag,
        "data_file": payload_path.name,
    }
    _atomic_write(payload_path, arr.tobytes(order="F"))
    _atomic_write(sidecar, (json.dumps(meta, indent=2) + "\n").encode())


def load_labelmap(path, num_classes: int | None = None) -> LabelMap:
    """Read a label map; values must be integral.

    ``num_classes`` defaults to ``max(label) + 1``.
    """
    if _is_raw_path(path):
        arr, _ = _load_raw_array(path)
        vals = arr.astype(np.float64)
    else:
        vals, _ = _load_nifti_array(path)
    if not np.all(vals == np.floor(vals)):
        raise VolumeFormatError("label map contains non-integral voxel values")
    if vals.size and vals.min() < 0:
        raise VolumeFormatError("label map contains negative values")
    labels = vals.astype(np.int32)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    try:
        return LabelMap(labels, num_classes)
    except ValueError as exc:
        raise VolumeFormatError(str(exc)) from exc


def save_labelmap(lm: LabelMap, path, format: str | None = None) -> None:
    """Write a label map as NIfTI-1 u8 or raw u8 (lossless round-trip)."""
    if lm.labels.max(initial=0) >= 255:
        raise VolumeFormatError("labels >= 255 cannot be written as u8")
    fmt = format or ("raw" if _is_raw_path(path) else "nifti")
    data_u8 = lm.labels.astype("<u1")
    if fmt == "nifti":
        payload = _build_nifti_header(lm.dims, (1.0, 1.0, 1.0), DT_U8) + data_u8.tobytes(order="F")
        _atomic_write(path, _maybe_gzip(path, payload))
    elif fmt == "raw":
        _save_raw(path, data_u8, (1.0, 1.0, 1.0), "u8")
    else:
        raise ValueError(f"unknown format {format!r} (want 'nifti' or 'raw')")
