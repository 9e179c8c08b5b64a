"""Binary container and debug text form for instances.

Binary layout (all little-endian)::

    b"FLRM"  magic
    u16      version (1)
    u8       kind: 1 = GroundTruth, 2 = SparseObservation
    GroundTruth:        u64 n, u64 q, u64 r,
                        f64[r] sigma, f64[n*r] U (column-major), f64[q*r] V (column-major)
    SparseObservation:  u64 n, u64 q, u64 nnz, f64 p, f64 noise_level,
                        i64[q+1] indptr, i64[nnz] row indices, f64[nnz] values
"""
import struct

import numpy as np

from .errors import FormatError
from .problem import GroundTruth, ObservationMask, SparseObservation

MAGIC = b"FLRM"
VERSION = 1
KIND_GROUND_TRUTH = 1
KIND_OBSERVATION = 2
_HEADER = struct.Struct("<4sHB")


def _arr(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype).tobytes()


def dumps(obj):
    if isinstance(obj, GroundTruth):
        head = _HEADER.pack(MAGIC, VERSION, KIND_GROUND_TRUTH) + struct.pack("<QQQ", obj.n, obj.q, obj.r)
        return b"".join([head, _arr(obj.sigma_star, "<f8"),
                         _arr(obj.u_star.T, "<f8"), _arr(obj.v_star.T, "<f8")])
    if isinstance(obj, SparseObservation):
        m = obj.mask
        head = _HEADER.pack(MAGIC, VERSION, KIND_OBSERVATION) + struct.pack("<QQQdd", m.n, m.q, m.nnz, m.p, obj.noise_level)
        return b"".join([head, _arr(m.indptr, "<i8"), _arr(m.indices, "<i8"), _arr(obj.values, "<f8")])
    raise TypeError(f"cannot serialize {type(obj).__name__}")


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        if self.pos + s.size > len(self.buf):
            raise FormatError("truncated container")
        out = s.unpack_from(self.buf, self.pos)
        self.pos += s.size
        return out

    def array(self, dtype, count):
        nbytes = np.dtype(dtype).itemsize * count
        if self.pos + nbytes > len(self.buf):
            raise FormatError("truncated container")
        out = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos).astype(dtype[1:], copy=True)
        self.pos += nbytes
        return out


def loads(buf):
    rd = _Reader(buf)
    magic, version, kind = rd.unpack(_HEADER.format)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if kind == KIND_GROUND_TRUTH:
        n, q, r = rd.unpack("<QQQ")
        sigma = rd.array("<f8", r)
        u = rd.array("<f8", n * r).reshape(r, n).T.copy()
        v = rd.array("<f8", q * r).reshape(r, q).T.copy()
        out = GroundTruth(u, sigma, v)
    elif kind == KIND_OBSERVATION:
        n, q, nnz, p, noise = rd.unpack("<QQQdd")
        indptr = rd.array("<i8", q + 1)
        indices = rd.array("<i8", nnz)
        values = rd.array("<f8", nnz)
        out = SparseObservation(ObservationMask(n, q, indptr, indices, p), values, noise)
    else:
        raise FormatError(f"unknown kind {kind}")
    if rd.pos != len(rd.buf):
        raise FormatError("trailing bytes after payload")
    return out


def save(path, obj):
    with open(path, "wb") as fh:
        fh.write(dumps(obj))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def to_text(obj):
    """Human-readable dump; floats are written with ``repr`` so it round-trips."""
    if isinstance(obj, GroundTruth):
        lines = ["FLRM-TEXT 1 ground_truth", f"n {obj.n} q {obj.q} r {obj.r}",
                 "sigma " + " ".join(repr(float(s)) for s in obj.sigma_star), "U"]
        lines += [" ".join(repr(float(x)) for x in row) for row in obj.u_star]
        lines.append("V")
        lines += [" ".join(repr(float(x)) for x in row) for row in obj.v_star]
    elif isinstance(obj, SparseObservation):
        m = obj.mask
        lines = ["FLRM-TEXT 1 observation", f"n {m.n} q {m.q} nnz {m.nnz} p {m.p!r} noise {obj.noise_level!r}",
                 "row col value"]
        lines += [f"{j} {k} {float(v)!r}" for j, k, v in zip(m.indices, m.cols, obj.values)]
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    return "\n".join(lines) + "\n"


def from_text(text):
    lines = text.splitlines()
    if not lines or not lines[0].startswith("FLRM-TEXT 1 "):
        raise FormatError("not an FLRM text dump")
    kind = lines[0].split()[2]
    hdr = lines[1].split()
    fields = dict(zip(hdr[::2], hdr[1::2]))
    if kind == "ground_truth":
        n, q, r = int(fields["n"]), int(fields["q"]), int(fields["r"])
        sigma = np.array([float(x) for x in lines[2].split()[1:]])
        u = np.array([[float(x) for x in ln.split()] for ln in lines[4:4 + n]]).reshape(n, r)
        v = np.array([[float(x) for x in ln.split()] for ln in lines[5 + n:5 + n + q]]).reshape(q, r)
        return GroundTruth(u, sigma, v)
    if kind == "observation":
        n, q, nnz = int(fields["n"]), int(fields["q"]), int(fields["nnz"])
        body = np.array([ln.split() for ln in lines[3:3 + nnz]], dtype=object).reshape(nnz, 3)
        rows = body[:, 0].astype(np.int64)
        cols = body[:, 1].astype(np.int64)
        vals = np.array([float(x) for x in body[:, 2]])
        indptr = np.concatenate([[0], np.cumsum(np.bincount(cols, minlength=q))]).astype(np.int64)
        mask = ObservationMask(n, q, indptr, rows, float(fields["p"]))
        return SparseObservation(mask, vals, float(fields["noise"]))
    raise FormatError(f"unknown kind {kind!r}")
