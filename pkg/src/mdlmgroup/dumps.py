"""Binary posterior dumps.

Layout (little-endian)::

    magic      4s   b"MDLM"
    version    u32  1
    kind       u32  0 = subject, 1 = group
    nx ny nz   3 x u32
    p          u32
    q_max      u32  largest cluster size
    T          u32
    n_records  u32
    [group only]
    n_g        u32
    pooled_dof f64
    ids_len    u32, then ids_len bytes of UTF-8 JSON (list of subject ids)
    offsets    n_records x u64, absolute file offset of each record

    record:
    i j k q    4 x u32
    members    q x 3 x u32      cluster voxels, center first
    n          (T+1) f64
    m          (T+1) x p x q f64
    C          (T+1) x p x p f64
    S          (T+1) x q(q+1)/2 f64   upper triangle, row-major
    [subject only]
    e          T x q f64        one-step forecast errors
    qf         T f64            forecast variances

Index 0 along the time axis holds the prior. A JSON sidecar
(``<dump>.json``) stores prior, evolution and provenance settings.
"""
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, FormatError, TruncatedFile
from .mdlm_filter import PosteriorSequence

MAGIC = b"MDLM"
VERSION = 1
KIND_SUBJECT, KIND_GROUP = 0, 1
_HEAD = struct.Struct("<4sIIIIIIIII")
_GROUP = struct.Struct("<IdI")
_REC = struct.Struct("<IIII")


@dataclass(frozen=True)
class VoxelPosterior:
    voxel: tuple
    members: tuple
    sequence: PosteriorSequence
    e: np.ndarray = None
    qf: np.ndarray = None


@dataclass(frozen=True)
class DumpHeader:
    kind: int
    dims: tuple
    p: int
    q_max: int
    n_scans: int
    n_records: int
    n_g: int = 1
    pooled_dof: float = float("nan")
    subject_ids: tuple = ()

    @property
    def is_group(self):
        return self.kind == KIND_GROUP


def _pack_upper(s):
    q = s.shape[-1]
    iu = np.triu_indices(q)
    return s[..., iu[0], iu[1]]


def _unpack_upper(packed, q):
    iu = np.triu_indices(q)
    out = np.empty(packed.shape[:-1] + (q, q))
    out[..., iu[0], iu[1]] = packed
    out[..., iu[1], iu[0]] = packed
    return out


def sidecar_path(path):
    return f"{path}.json"


class DumpWriter:
    """Streams records to disk; the offset table is patched on close."""

    def __init__(self, path, header, sidecar=None):
        self.path = path
        self.header = header
        self._fh = open(path, "wb")
        self._fh.write(_HEAD.pack(MAGIC, VERSION, header.kind, *header.dims, header.p,
                                  header.q_max, header.n_scans, header.n_records))
        if header.is_group:
            ids = json.dumps(list(header.subject_ids)).encode()
            self._fh.write(_GROUP.pack(header.n_g, header.pooled_dof, len(ids)) + ids)
        self._table_at = self._fh.tell()
        self._fh.write(b"\x00" * 8 * header.n_records)
        self._offsets = []
        if sidecar is not None:
            with open(sidecar_path(path), "w") as fh:
                json.dump(sidecar, fh, indent=2, sort_keys=True)

    def write(self, rec):
        seq = rec.sequence
        q = seq.q
        if seq.p != self.header.p or seq.n_scans != self.header.n_scans:
            raise FormatError("p", f"record {rec.voxel} does not match the dump header")
        self._offsets.append(self._fh.tell())
        parts = [_REC.pack(*rec.voxel, q), np.asarray(rec.members, dtype="<u4").tobytes(),
                 np.asarray(seq.n, "<f8").tobytes(), np.asarray(seq.m, "<f8").tobytes(),
                 np.asarray(seq.c, "<f8").tobytes(),
                 np.asarray(_pack_upper(seq.s), "<f8").tobytes()]
        if not self.header.is_group:
            parts += [np.asarray(rec.e, "<f8").tobytes(), np.asarray(rec.qf, "<f8").tobytes()]
        self._fh.write(b"".join(parts))

    def close(self):
        if len(self._offsets) != self.header.n_records:
            self._fh.close()
            raise FormatError("n_records", f"wrote {len(self._offsets)} records, header "
                              f"promised {self.header.n_records}")
        self._fh.seek(self._table_at)
        self._fh.write(np.asarray(self._offsets, dtype="<u8").tobytes())
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._fh.close()


class DumpReader:
    def __init__(self, path):
        self.path = path
        self._fh = open(path, "rb")
        head = self._fh.read(_HEAD.size)
        if len(head) < _HEAD.size:
            raise TruncatedFile("magic", "file too short for a dump header")
        magic, version, kind, nx, ny, nz, p, q_max, n_scans, n_rec = _HEAD.unpack(head)
        if magic != MAGIC:
            raise BadMagic("magic", f"expected {MAGIC!r}, got {magic!r}")
        if version != VERSION:
            raise FormatError("version", f"unsupported dump version {version}")
        if kind not in (KIND_SUBJECT, KIND_GROUP):
            raise FormatError("kind", f"unknown dump kind {kind}")
        extra = {}
        if kind == KIND_GROUP:
            n_g, dof, ids_len = _GROUP.unpack(self._fh.read(_GROUP.size))
            ids = json.loads(self._fh.read(ids_len).decode())
            extra = dict(n_g=n_g, pooled_dof=dof, subject_ids=tuple(ids))
        self.header = DumpHeader(kind, (nx, ny, nz), p, q_max, n_scans, n_rec, **extra)
        table = self._fh.read(8 * n_rec)
        if len(table) < 8 * n_rec:
            raise TruncatedFile("n_records", "offset table is truncated")
        self.offsets = np.frombuffer(table, dtype="<u8")
        try:
            with open(sidecar_path(path)) as fh:
                self.sidecar = json.load(fh)
        except FileNotFoundError:
            self.sidecar = {}

    def __len__(self):
        return self.header.n_records

    def _read(self, count, what):
        raw = self._fh.read(8 * count)
        if len(raw) < 8 * count:
            raise TruncatedFile(what, "record is truncated")
        return np.frombuffer(raw, dtype="<f8").copy()

    def record(self, index):
        hd = self.header
        self._fh.seek(int(self.offsets[index]))
        raw = self._fh.read(_REC.size)
        if len(raw) < _REC.size:
            raise TruncatedFile("record", f"record {index} is truncated")
        i, j, k, q = _REC.unpack(raw)
        members = np.frombuffer(self._fh.read(12 * q), dtype="<u4").reshape(q, 3)
        t1, p = hd.n_scans + 1, hd.p
        n = self._read(t1, "n")
        m = self._read(t1 * p * q, "m").reshape(t1, p, q)
        c = self._read(t1 * p * p, "C").reshape(t1, p, p)
        s = _unpack_upper(self._read(t1 * q * (q + 1) // 2, "S").reshape(t1, -1), q)
        e = qf = None
        if not hd.is_group:
            e = self._read(hd.n_scans * q, "e").reshape(hd.n_scans, q)
            qf = self._read(hd.n_scans, "qf")
        return VoxelPosterior((i, j, k), tuple(map(tuple, members.tolist())),
                              PosteriorSequence(m, c, s, n), e, qf)

    def __iter__(self):
        for idx in range(len(self)):
            yield self.record(idx)

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
