"""Brain volumes (NIfTI-1 single file) and stimulus event files.

Only the single-file ``.nii`` / ``.nii.gz`` form is handled. Orientation
fields (qform/sform, quaternions, srow) are carried over verbatim from the
header a volume was read with but are never interpreted.
"""
import csv
import gzip
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .design import StimulusTrack, merge_tracks
from .errors import (BadMagic, FormatError, MissingColumn, TruncatedFile,
                     UnparsableRow, UnsupportedDatatype)

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
DATA_OFFSET = 352  # header + 4-byte extension flag

header_dtd = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
HEADER_DTYPE = np.dtype(header_dtd)
assert HEADER_DTYPE.itemsize == HEADER_SIZE

DATATYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    8: np.dtype("i4"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
}
TIME_UNIT_SCALE = {8: 1.0, 16: 1e-3, 24: 1e-6}


@dataclass(frozen=True, eq=False)
class Volume4D:
    """``data`` is float32 ``(nx, ny, nz, T)``; ``header`` keeps the raw
    header a volume was read from (or None)."""

    data: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)
    tr_seconds: float = 1.0
    header: bytes = field(default=None, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise FormatError("dim", f"volume must be 3-D or 4-D and non-empty, got {data.shape}")
        object.__setattr__(self, "data", data)
        # header stores geometry as float32
        object.__setattr__(self, "voxel_size",
                           tuple(float(np.float32(v)) for v in self.voxel_size))
        object.__setattr__(self, "tr_seconds", float(np.float32(self.tr_seconds)))

    @property
    def dims(self):
        return self.data.shape

    def same_as(self, other):
        """Bit-exact equality of data and geometry."""
        return (self.dims == other.dims
                and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
                and self.voxel_size == other.voxel_size
                and self.tr_seconds == other.tr_seconds)


def _open_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(raw):
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile("sizeof_hdr", f"file has {len(raw)} bytes, header needs {HEADER_SIZE}")
    for order in "<>":
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(order))[0]
        if hdr["sizeof_hdr"] == HEADER_SIZE:
            return hdr, order
    raise FormatError("sizeof_hdr", "expected 348 in either byte order")


def read_nifti1(path):
    """Read a single-file NIfTI-1 volume as float32, applying scl_slope/scl_inter."""
    raw = _open_bytes(path)
    hdr, order = _parse_header(raw)
    magic = bytes(hdr["magic"])
    if magic != b"n+1":
        hint = " (two-file .hdr/.img form is not supported)" if magic == b"ni1" else ""
        raise BadMagic("magic", f"expected 'n+1\\0', got {magic!r}{hint}")
    dim = [int(d) for d in hdr["dim"]]
    if dim[0] not in (3, 4):
        raise FormatError("dim", f"dim[0] must be 3 or 4, got {dim[0]}")
    shape = dim[1:4] + [dim[4] if dim[0] == 4 else 1]
    if min(shape) < 1:
        raise FormatError("dim", f"non-positive dimension in {dim[:dim[0] + 1]}")
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatype("datatype", f"datatype code {code} is not supported "
                                  f"(supported: {sorted(DATATYPES)})")
    dtype = DATATYPES[code].newbyteorder(order)
    if int(hdr["bitpix"]) != dtype.itemsize * 8:
        raise FormatError("bitpix", f"bitpix {int(hdr['bitpix'])} disagrees with datatype {code}")
    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        raise FormatError("vox_offset", f"vox_offset {offset} lies inside the header")
    count = int(np.prod(shape))
    needed = offset + count * dtype.itemsize
    if len(raw) < needed:
        raise TruncatedFile("dim", f"data needs {needed} bytes for dims {tuple(shape)} "
                            f"from vox_offset {offset}, file has {len(raw)}")
    stored = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = stored.reshape(shape, order="F")
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and (slope, inter) != (1.0, 0.0):
        data = data * slope + inter
    data = np.array(data, dtype=np.float32)

    pixdim = [float(x) for x in hdr["pixdim"]]
    tr = pixdim[4] * TIME_UNIT_SCALE.get(int(hdr["xyzt_units"]) & 0x38, 1.0)
    little = np.asarray(hdr).astype(HEADER_DTYPE.newbyteorder("<")).tobytes()
    return Volume4D(data, tuple(pixdim[1:4]), tr if tr > 0 else 1.0, header=little)


def write_nifti1(vol, path):
    """Write a float32 single-file NIfTI-1 (gzip when the path ends in ``.gz``)."""
    if vol.header is not None:
        hdr = np.frombuffer(vol.header, dtype=HEADER_DTYPE.newbyteorder("<"))[0].copy()
    else:
        hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
        hdr["qform_code"] = 0
        hdr["sform_code"] = 0
    nx, ny, nz, nt = vol.dims
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["dim"] = [4 if nt > 1 else 3, nx, ny, nz, nt, 1, 1, 1]
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    pixdim = np.ones(8, dtype=np.float32)
    pixdim[0] = hdr["pixdim"][0] if hdr["pixdim"][0] in (-1.0, 1.0) else 1.0
    pixdim[1:4] = vol.voxel_size
    pixdim[4] = vol.tr_seconds
    hdr["pixdim"] = pixdim
    hdr["xyzt_units"] = 2 | 8  # mm, seconds
    hdr["vox_offset"] = DATA_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["magic"] = b"n+1"
    payload = (hdr.tobytes() + b"\x00" * (DATA_OFFSET - HEADER_SIZE)
               + np.asarray(vol.data, dtype="<f4").tobytes(order="F"))
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as fh:
        fh.write(payload)


def read_mask(path):
    vol = read_nifti1(path)
    return vol.data[..., 0] != 0


EVENT_COLUMNS = ("onset", "duration", "trial_type")


def read_events(path, merge=False, merged_label="stimulus"):
    """Stimulus tracks from a tab-separated events file.

    One track per distinct ``trial_type`` (in order of first appearance); with
    ``merge`` every event goes into a single track.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None:
            raise MissingColumn("onset", "events file is empty")
        header = [h.strip() for h in header]
        for col in EVENT_COLUMNS:
            if col not in header:
                raise MissingColumn(col, f"events file lacks the {col!r} column")
        idx = [header.index(c) for c in EVENT_COLUMNS]
        events = defaultdict(list)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                onset, duration = float(row[idx[0]]), float(row[idx[1]])
                label = row[idx[2]].strip()
            except (ValueError, IndexError) as exc:
                raise UnparsableRow(lineno, f"cannot parse {row!r}: {exc}") from None
            events[label].append((onset, duration))
    tracks = []
    for label, evs in events.items():
        evs.sort()
        tracks.append(StimulusTrack(label, [e[0] for e in evs], [e[1] for e in evs]))
    if merge:
        return [merge_tracks(tracks, merged_label)]
    return tracks
