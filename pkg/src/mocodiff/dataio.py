"""Binary file formats.

* NIfTI-1 single-file reader (uncompressed ``.nii``) plus a minimal writer
  used to build fixtures.
* ``MRTN`` tensor container: magic, version u8, dtype u8 (0 = f32), ndim u8,
  dims as u32, then a row-major f32 payload. All little-endian.
* ``MRCK`` checkpoint: magic, version u8, u32 config length, UTF-8 JSON
  config, u64 parameter count, f32 parameter payload, CRC32 of the payload.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np


class FormatError(ValueError):
    """Raised for any malformed or unsupported file."""


class NiftiError(FormatError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


# ---------------------------------------------------------------- NIfTI-1

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
NIFTI_MAGIC = b"n+1\x00"
# datatype code -> (numpy little-endian dtype, bitpix)
NIFTI_DTYPES = {2: ("<u1", 8), 4: ("<i2", 16), 16: ("<f4", 32)}


@dataclass
class NiftiVolume:
    voxels: np.ndarray  # float64, axes (x, y, z), scaling applied
    pixdim: tuple[float, ...]
    scl_slope: float
    scl_inter: float
    datatype: int

    @property
    def dims(self) -> tuple[int, ...]:
        return self.voxels.shape


def _parse_nifti(buf: bytes) -> NiftiVolume:
    if len(buf) < NIFTI_HEADER_SIZE:
        raise NiftiError("header", f"truncated header ({len(buf)} of 348 bytes)")
    (sizeof_hdr,) = struct.unpack_from("<i", buf, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        raise NiftiError("sizeof_hdr", f"bad sizeof_hdr {sizeof_hdr}")
    magic = buf[344:348]
    if magic != NIFTI_MAGIC:
        raise NiftiError("magic", f"bad magic {magic!r}")
    dim = struct.unpack_from("<8h", buf, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError("dim", f"bad dim[0] {ndim}")
    extents = tuple(int(d) for d in dim[1 : ndim + 1])
    # trailing singleton dims beyond 3 are tolerated; real ones are not
    if any(d < 1 for d in extents):
        raise NiftiError("dim", f"non-positive extent in {extents}")
    if len(extents) > 3:
        if any(d != 1 for d in extents[3:]):
            raise NiftiError("dim", f"only up to 3 dimensions supported, got {extents}")
        extents = extents[:3]
    (datatype,) = struct.unpack_from("<h", buf, 70)
    if datatype not in NIFTI_DTYPES:
        raise NiftiError("datatype", f"unsupported datatype {datatype}")
    pixdim = struct.unpack_from("<8f", buf, 76)
    (vox_offset,) = struct.unpack_from("<f", buf, 108)
    scl_slope, scl_inter = struct.unpack_from("<2f", buf, 112)
    offset = int(vox_offset)
    if offset < NIFTI_HEADER_SIZE or offset != vox_offset:
        raise NiftiError("vox_offset", f"bad vox_offset {vox_offset}")
    dtype, _ = NIFTI_DTYPES[datatype]
    count = int(np.prod(extents))
    nbytes = count * np.dtype(dtype).itemsize
    if len(buf) < offset + nbytes:
        raise NiftiError("payload", f"truncated payload ({len(buf) - offset} of {nbytes} bytes)")
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    # NIfTI stores x fastest: Fortran order over (x, y, z)
    data = raw.reshape(extents, order="F").astype(np.float64)
    slope = float(scl_slope)
    inter = float(scl_inter)
    if not np.isfinite(slope) or slope == 0.0:
        slope = 1.0
    if not np.isfinite(inter):
        inter = 0.0
    data = data * slope + inter
    return NiftiVolume(
        voxels=np.ascontiguousarray(data),
        pixdim=tuple(float(p) for p in pixdim[1 : len(extents) + 1]),
        scl_slope=slope,
        scl_inter=inter,
        datatype=datatype,
    )


def read_nifti(path_or_bytes) -> NiftiVolume:
    """Read an uncompressed single-file NIfTI-1 volume.

    Accepts a path or the raw file bytes. Voxels come back as float64 with
    ``scl_slope``/``scl_inter`` applied (slope 0 means 1), axes in storage
    order (x, y, z). qform/sform are ignored.
    """
    if isinstance(path_or_bytes, (bytes, bytearray, memoryview)):
        buf = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as fh:
            buf = fh.read()
    return _parse_nifti(buf)


def write_nifti_fixture(
    dims,
    payload,
    datatype: int = 16,
    scl_slope: float = 1.0,
    scl_inter: float = 0.0,
    pixdim=None,
) -> bytes:
    """Bytes of a minimal valid NIfTI-1 single file (vox_offset 352).

    ``payload`` is either an array of shape ``dims`` indexed (x, y, z) or a
    flat sequence already in file (x-fastest) order.
    """
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= 3:
        raise ValueError("1 to 3 dims supported")
    dtype, bitpix = NIFTI_DTYPES[datatype]
    arr = np.asarray(payload)
    if arr.shape == dims:
        flat = arr.reshape(-1, order="F")
    else:
        flat = arr.reshape(-1)
    if flat.size != int(np.prod(dims)):
        raise ValueError("payload size does not match dims")
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    dim = [len(dims), *dims] + [1] * (7 - len(dims))
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    pd = [1.0] + list(pixdim or [1.0] * len(dims)) + [1.0] * (7 - len(dims))
    struct.pack_into("<8f", hdr, 76, *pd)
    struct.pack_into("<f", hdr, 108, float(NIFTI_VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, scl_slope, scl_inter)
    hdr[344:348] = NIFTI_MAGIC
    ext = b"\x00" * (NIFTI_VOX_OFFSET - NIFTI_HEADER_SIZE)
    return bytes(hdr) + ext + flat.astype(dtype).tobytes()


# ---------------------------------------------------------------- MRTN

TENSOR_MAGIC = b"MRTN"
TENSOR_VERSION = 1
DTYPE_F32 = 0


def encode_tensor(t: np.ndarray) -> bytes:
    arr = np.asarray(t)
    if arr.ndim == 0 or arr.ndim > 255:
        raise FormatError("tensor must have 1..255 dims")
    if arr.size == 0:
        raise FormatError("empty tensor")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise FormatError("dims overflow")
    f32 = np.ascontiguousarray(arr, dtype="<f4")
    if not np.all(np.isfinite(f32)):
        raise FormatError("tensor not representable as finite f32")
    head = TENSOR_MAGIC + struct.pack("<BBB", TENSOR_VERSION, DTYPE_F32, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + f32.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != TENSOR_MAGIC:
        raise FormatError("magic mismatch: not an MRTN tensor")
    version, dtype, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    if ndim == 0:
        raise FormatError("empty tensor")
    if len(buf) < 7 + 4 * ndim:
        raise TruncatedError("truncated")
    dims = struct.unpack_from(f"<{ndim}I", buf, 7)
    if any(d == 0 for d in dims):
        raise FormatError("empty tensor")
    count = 1
    for d in dims:
        count *= d
    start = 7 + 4 * ndim
    if len(buf) - start < 4 * count:
        raise TruncatedError("truncated")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
    return data.astype(np.float64).reshape(dims)


def write_tensor(path, t: np.ndarray) -> None:
    data = encode_tensor(t)
    with open(path, "wb") as fh:
        fh.write(data)


def read_tensor(path) -> np.ndarray:
    """Read an MRTN file as float64 (values are exact f32)."""
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


# ---------------------------------------------------------------- MRCK

CHECKPOINT_MAGIC = b"MRCK"
CHECKPOINT_VERSION = 1


def encode_checkpoint(config: dict, params: np.ndarray, extra: dict | None = None) -> bytes:
    meta = {"model": config}
    if extra:
        meta.update(extra)
    text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(params, dtype="<f4").tobytes()
    out = CHECKPOINT_MAGIC + struct.pack("<BI", CHECKPOINT_VERSION, len(text)) + text
    out += struct.pack("<Q", len(params)) + payload
    out += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    return out


def decode_checkpoint(buf: bytes) -> tuple[dict, np.ndarray]:
    if len(buf) < 9 or buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("magic mismatch: not an MRCK checkpoint")
    version, n_text = struct.unpack_from("<BI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 9
    if len(buf) < pos + n_text + 8:
        raise TruncatedError("truncated")
    try:
        meta = json.loads(buf[pos : pos + n_text].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint config: {exc}") from None
    pos += n_text
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if len(buf) != pos + 4 * count + 4:
        raise TruncatedError("truncated")
    payload = buf[pos : pos + 4 * count]
    (crc,) = struct.unpack_from("<I", buf, pos + 4 * count)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumError("corrupt checkpoint")
    params = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return meta, params


def save_checkpoint(path, model, extra: dict | None = None) -> None:
    """Write ``model`` (an :class:`mocodiff.neural.UNet`) as MRCK."""
    data = encode_checkpoint(model.config.to_dict(), model.params, extra)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path, with_meta: bool = False):
    from .neural import UNet, UNetConfig

    with open(path, "rb") as fh:
        meta, params = decode_checkpoint(fh.read())
    model = UNet(UNetConfig.from_dict(meta["model"]))
    if params.size != model.n_params:
        raise FormatError(
            f"parameter count {params.size} does not match config ({model.n_params})"
        )
    model.params[:] = params
    if with_meta:
        return model, meta
    return model
