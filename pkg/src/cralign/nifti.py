"""Single-file NIfTI-1 reading and writing (``.nii`` and ``.nii.gz``).

Only the pieces needed for registration are decoded: dimensions, datatype,
voxel spacing and intensity scaling. Every other header field is kept as
raw bytes on the returned :class:`~cralign.volume.Volume` and copied
through when the volume is written back, so orientation blocks survive a
read/write cycle untouched (they are not applied to the geometry).
"""

import gzip
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (DimensionalityError, InvalidArgumentError, NiftiFormatError, TruncationError,
                     UnsupportedDatatypeError)
from .volume import Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
NIFTI2_HEADER_SIZE = 540
GZIP_MAGIC = b"\x1f\x8b"

HEADER_DTYPE = np.dtype([
    ("sizeof_hdr", "i4"), ("data_type", "S10"), ("db_name", "S18"), ("extents", "i4"),
    ("session_error", "i2"), ("regular", "S1"), ("dim_info", "u1"),
    ("dim", "i2", (8,)), ("intent_p1", "f4"), ("intent_p2", "f4"), ("intent_p3", "f4"),
    ("intent_code", "i2"), ("datatype", "i2"), ("bitpix", "i2"), ("slice_start", "i2"),
    ("pixdim", "f4", (8,)), ("vox_offset", "f4"), ("scl_slope", "f4"), ("scl_inter", "f4"),
    ("slice_end", "i2"), ("slice_code", "u1"), ("xyzt_units", "u1"),
    ("cal_max", "f4"), ("cal_min", "f4"), ("slice_duration", "f4"), ("toffset", "f4"),
    ("glmax", "i4"), ("glmin", "i4"), ("descrip", "S80"), ("aux_file", "S24"),
    ("qform_code", "i2"), ("sform_code", "i2"),
    ("quatern_b", "f4"), ("quatern_c", "f4"), ("quatern_d", "f4"),
    ("qoffset_x", "f4"), ("qoffset_y", "f4"), ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)), ("srow_y", "f4", (4,)), ("srow_z", "f4", (4,)),
    ("intent_name", "S16"), ("magic", "S4"),
])
assert HEADER_DTYPE.itemsize == HEADER_SIZE

# NIfTI datatype code -> numpy type
DATATYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}
DATATYPE_CODES = {np.dtype(t).name: code for code, t in DATATYPES.items()}
MM_UNITS = 2


@dataclass(frozen=True)
class NiftiHeader:
    """Decoded view of a 348-byte header.

    ``raw`` holds the header re-encoded little-endian, which is the form
    kept on volumes for passthrough.
    """

    raw: bytes
    big_endian: bool

    @property
    def record(self):
        return np.frombuffer(self.raw, dtype=HEADER_DTYPE.newbyteorder("<"), count=1)[0]

    @property
    def dims(self):
        return tuple(int(d) for d in self.record["dim"][1:4])

    @property
    def datatype(self):
        return int(self.record["datatype"])

    @property
    def spacing(self):
        return tuple(float(abs(p)) for p in self.record["pixdim"][1:4])


def _decompress(blob, path):
    if blob[:2] != GZIP_MAGIC:
        return blob
    try:
        return gzip.decompress(blob)
    except (OSError, EOFError) as exc:
        # a cut-off gzip stream means the file itself was cut off
        if isinstance(exc, EOFError):
            raise TruncationError(f"{path}: compressed stream ends early") from exc
        raise NiftiFormatError(f"{path}: corrupt gzip stream ({exc})") from exc


def parse_header(blob, path="<bytes>"):
    """Validate the fixed header at the start of ``blob`` and decode it."""
    if len(blob) < 4:
        raise TruncationError(f"{path}: file too short for a NIfTI header")
    le = int(np.frombuffer(blob[:4], "<i4")[0])
    be = int(np.frombuffer(blob[:4], ">i4")[0])
    if NIFTI2_HEADER_SIZE in (le, be):
        raise NiftiFormatError(f"{path}: NIfTI-2 files are not supported")
    if le == HEADER_SIZE:
        order = "<"
    elif be == HEADER_SIZE:
        order = ">"
    else:
        raise NiftiFormatError(f"{path}: sizeof_hdr is {le}, expected {HEADER_SIZE}")
    if len(blob) < HEADER_SIZE:
        raise TruncationError(f"{path}: header truncated at {len(blob)} bytes")
    rec = np.frombuffer(blob[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(order), count=1)
    magic = bytes(rec[0]["magic"])
    if magic == b"ni1":
        raise NiftiFormatError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")
    if magic != b"n+1":
        raise NiftiFormatError(f"{path}: bad magic {magic!r}, expected b'n+1'")
    raw = rec.astype(HEADER_DTYPE.newbyteorder("<")).tobytes()
    return NiftiHeader(raw, order == ">")


def _check_geometry(hdr, path):
    rec = hdr.record
    ndim = int(rec["dim"][0])
    if ndim != 3:
        raise DimensionalityError(f"{path}: expected a 3D volume, header has dim[0] = {ndim}")
    dims = hdr.dims
    if min(dims) < 1:
        raise NiftiFormatError(f"{path}: non-positive dimensions {dims}")
    spacing = hdr.spacing
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise NiftiFormatError(f"{path}: invalid voxel spacing {spacing}")
    return dims, spacing


def decode(blob, path="<bytes>"):
    """Decode a complete (already decompressed) single-file NIfTI-1 image."""
    hdr = parse_header(blob, path)
    dims, spacing = _check_geometry(hdr, path)
    code = hdr.datatype
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(code)
    rec = hdr.record
    offset = int(rec["vox_offset"])
    if offset < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: vox_offset {offset} lies inside the header")
    dtype = np.dtype(DATATYPES[code]).newbyteorder(">" if hdr.big_endian else "<")
    count = int(np.prod(dims))
    need = offset + count * dtype.itemsize
    if len(blob) < need:
        raise TruncationError(f"{path}: data section has {len(blob) - offset} bytes, need {need - offset}")
    raw = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).astype(np.float64)
    slope, inter = float(rec["scl_slope"]), float(rec["scl_inter"])
    if slope != 0.0 and np.isfinite(slope):
        raw = raw * slope + (inter if np.isfinite(inter) else 0.0)
    bad = ~np.isfinite(raw)
    if bad.any():
        warnings.warn(f"{path}: {int(bad.sum())} non-finite voxels replaced by 0", RuntimeWarning)
        raw[bad] = 0.0
    return Volume.from_flat(dims, spacing, raw, header=hdr.raw)


def read_nifti(path):
    """Read a ``.nii`` / ``.nii.gz`` file into a :class:`Volume`.

    Compression is detected from the file content, not its name. Integer
    and float payloads are converted to float64 after applying
    ``scl_slope``/``scl_inter`` (when the slope is non-zero).

    Raises
    ------
    NiftiFormatError
        Bad magic, NIfTI-2 or two-file layout, corrupt geometry.
    UnsupportedDatatypeError
        Datatype outside uint8/int16/int32/float32/float64.
    DimensionalityError
        ``dim[0]`` is not 3.
    TruncationError
        Header or data section shorter than declared.
    """
    path = str(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode(_decompress(blob, path), path)


def read_header(path):
    path = str(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_header(_decompress(blob, path), path)


def _fresh_header():
    rec = np.zeros(1, dtype=HEADER_DTYPE.newbyteorder("<"))
    rec[0]["xyzt_units"] = MM_UNITS
    rec[0]["regular"] = b"r"
    return rec


def _payload(data, datatype):
    dt = np.dtype(datatype)
    if dt.name not in DATATYPE_CODES:
        raise InvalidArgumentError(f"cannot write datatype {dt.name}; use one of {sorted(DATATYPE_CODES)}")
    if dt.kind in "iu":
        info = np.iinfo(dt)
        rounded = np.rint(data)
        if rounded.min() < info.min or rounded.max() > info.max:
            raise InvalidArgumentError(f"values outside the {dt.name} range")
        data = rounded
    return np.asarray(data, dtype=dt.newbyteorder("<")), DATATYPE_CODES[dt.name]


def encode(vol, datatype=np.float32):
    """Serialize ``vol`` as little-endian single-file NIfTI-1 bytes."""
    if vol.header is not None and len(vol.header) == HEADER_SIZE:
        rec = np.frombuffer(vol.header, dtype=HEADER_DTYPE.newbyteorder("<"), count=1).copy()
    else:
        rec = _fresh_header()
    payload, code = _payload(vol.flat, datatype)
    r = rec[0]
    r["sizeof_hdr"] = HEADER_SIZE
    r["dim"] = [3, *vol.dims, 1, 1, 1, 1]
    r["datatype"] = code
    r["bitpix"] = payload.dtype.itemsize * 8
    pixdim = np.array(r["pixdim"], dtype=np.float32)
    pixdim[1:4] = vol.spacing
    if pixdim[0] not in (-1.0, 1.0):
        pixdim[0] = 1.0
    r["pixdim"] = pixdim
    r["vox_offset"] = VOX_OFFSET
    r["scl_slope"] = 1.0
    r["scl_inter"] = 0.0
    r["magic"] = b"n+1"
    # four zero bytes: no header extensions
    return rec.tobytes() + bytes(VOX_OFFSET - HEADER_SIZE) + payload.tobytes()


def write_nifti(vol, path, datatype=np.float32):
    """Write ``vol`` to ``path``; a ``.gz`` suffix selects gzip compression.

    The header of a volume that came from :func:`read_nifti` is reused with
    dims, pixdim, datatype, bitpix, vox_offset and scaling overwritten.
    Compressed output is byte-for-byte reproducible (zero gzip timestamp).
    """
    path = str(path)
    blob = encode(vol, datatype)
    if path.endswith(".gz"):
        blob = gzip.compress(blob, mtime=0)
    with open(path, "wb") as fh:
        fh.write(blob)
