"""Random instance generation and a bit-exact instance file format.

Instances mimic the benchmark family: m sparse symmetric n x n matrices on a
joint sparsity pattern (each upper-triangle position, diagonal included, kept
independently with the given density), standard normal values, and the j-th
matrix scaled by j**scaling.  Files carry an ASCII JSON header line followed
by little-endian binary sections and a trailing CRC-64 checksum, so a given
(seed, shape) pair reproduces byte-identical files anywhere.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .linalg import ProblemInstance, SparseSymMatrix, lipschitz_constant

__all__ = [
    "GeneratorSpec",
    "InstanceFormatError",
    "generate",
    "save",
    "load",
    "crc64",
    "instance_equal",
]

MAGIC = "MMEIG1"
FORMAT_VERSION = 1
CHECKSUM_ALGO = "crc64-xz"
VALUE_DISTRIBUTION = "standard_normal"

# CRC-64/XZ: reflected polynomial 0xC96C5795D7870F42, init/xorout all-ones.
_CRC64_POLY = 0xC96C5795D7870F42


def _crc64_table():
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return tuple(table)


_CRC64_TABLE = _crc64_table()


def crc64(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFFFFFFFFFF
    for byte in data:
        crc = _CRC64_TABLE[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


class InstanceFormatError(ValueError):
    """Raised by load() with the offending section named in the message."""


@dataclass(frozen=True)
class GeneratorSpec:
    n: int
    m: int
    density: float = 0.10
    joint_pattern: bool = True
    seed: int = 0
    scaling: float = 1.5

    def __post_init__(self):
        if self.n < 2 or self.m < 2:
            raise ValueError("n and m must be >= 2")
        if not (0.0 < self.density <= 1.0):
            raise ValueError("density must lie in (0, 1]")


def _draw_pattern(rng: np.random.Generator, n: int, density: float):
    # Row-major upper triangle, diagonal included; this enumeration order is
    # part of the fixture contract.
    rows, cols = np.triu_indices(n)
    keep = rng.random(rows.size) < density
    return rows[keep].astype(np.int64), cols[keep].astype(np.int64)


def generate(spec: GeneratorSpec) -> ProblemInstance:
    """Draw an instance; deterministic for a fixed spec (pattern first, then
    one value block per matrix, in index order)."""
    rng = np.random.default_rng(spec.seed)
    matrices = []
    if spec.joint_pattern:
        rows, cols = _draw_pattern(rng, spec.n, spec.density)
        pattern_id = f"joint-{spec.seed}"
        for j in range(1, spec.m + 1):
            values = rng.standard_normal(rows.size) * float(j) ** spec.scaling
            matrices.append(SparseSymMatrix(spec.n, rows, cols, values, pattern_id))
    else:
        for j in range(1, spec.m + 1):
            rows, cols = _draw_pattern(rng, spec.n, spec.density)
            values = rng.standard_normal(rows.size) * float(j) ** spec.scaling
            matrices.append(SparseSymMatrix(spec.n, rows, cols, values, f"mat-{spec.seed}-{j}"))
    inst = ProblemInstance(matrices, meta={"generator": "random", **asdict(spec)})
    lipschitz_constant(inst)
    return inst


# -- file format ----------------------------------------------------------------


def _matrix_bytes(mat: SparseSymMatrix) -> list[bytes]:
    return [
        mat.rows.astype("<u8").tobytes(),
        mat.cols.astype("<u8").tobytes(),
    ]


def save(inst: ProblemInstance, path) -> None:
    """Write the binary instance file (see load for the layout)."""
    joint = inst.joint_pattern
    header = {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "n": inst.n,
        "m": inst.m,
        "joint_pattern": joint,
        "nnz": [inst.matrices[0].nnz] if joint else [a.nnz for a in inst.matrices],
        "b_nnz": inst.B.nnz if inst.B is not None else None,
        "has_c": bool(np.any(inst.c)),
        "lipschitz": inst.lipschitz,
        "value_distribution": VALUE_DISTRIBUTION,
        "checksum": CHECKSUM_ALGO,
        "density": inst.meta.get("density"),
        "seed": inst.meta.get("seed"),
        "scaling": inst.meta.get("scaling"),
        "generator": inst.meta.get("generator"),
    }
    chunks = [json.dumps(header, sort_keys=True).encode("ascii") + b"\n"]
    if joint:
        chunks.extend(_matrix_bytes(inst.matrices[0]))
        for a in inst.matrices:
            chunks.append(a.values.astype("<f8").tobytes())
    else:
        for a in inst.matrices:
            chunks.extend(_matrix_bytes(a))
            chunks.append(a.values.astype("<f8").tobytes())
    if inst.B is not None:
        chunks.extend(_matrix_bytes(inst.B))
        chunks.append(inst.B.values.astype("<f8").tobytes())
    if header["has_c"]:
        chunks.append(inst.c.astype("<f8").tobytes())
    body = b"".join(chunks)
    checksum = crc64(body).to_bytes(8, "little")
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(checksum)


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.pos = offset

    def take(self, count: int, dtype: str, section: str) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        end = self.pos + count * width
        if end > len(self.data):
            raise InstanceFormatError(f"file truncated inside section {section!r}")
        out = np.frombuffer(self.data[self.pos:end], dtype=dtype)
        self.pos = end
        return out


def load(path) -> ProblemInstance:
    """Read an instance file, verifying structure and the trailing checksum."""
    with open(path, "rb") as fh:
        raw = fh.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise InstanceFormatError("missing header line")
    try:
        header = json.loads(raw[:newline].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InstanceFormatError(f"malformed header: {exc}") from exc
    if header.get("magic") != MAGIC:
        raise InstanceFormatError(f"bad magic {header.get('magic')!r} in header")
    if header.get("version") != FORMAT_VERSION:
        raise InstanceFormatError(f"unsupported version {header.get('version')!r}")
    if header.get("checksum") != CHECKSUM_ALGO:
        raise InstanceFormatError(f"unknown checksum algorithm {header.get('checksum')!r}")
    if len(raw) < newline + 9:
        raise InstanceFormatError("file truncated before checksum")
    body, tail = raw[:-8], raw[-8:]
    if crc64(body) != int.from_bytes(tail, "little"):
        raise InstanceFormatError("checksum mismatch; file corrupted or truncated")

    n, m = int(header["n"]), int(header["m"])
    if n < 1 or m < 1 or n * n < 0:
        raise InstanceFormatError("dimension overflow in header")
    nnz_list = header["nnz"]
    reader = _Reader(body, newline + 1)
    matrices = []
    if header["joint_pattern"]:
        nnz = int(nnz_list[0])
        rows = reader.take(nnz, "<u8", "pattern rows").astype(np.int64)
        cols = reader.take(nnz, "<u8", "pattern cols").astype(np.int64)
        for j in range(m):
            values = reader.take(nnz, "<f8", f"values[{j}]")
            matrices.append(SparseSymMatrix(n, rows, cols, values, f"joint-{header.get('seed')}"))
    else:
        if len(nnz_list) != m:
            raise InstanceFormatError("nnz list length does not match m")
        for j in range(m):
            nnz = int(nnz_list[j])
            rows = reader.take(nnz, "<u8", f"pattern rows[{j}]").astype(np.int64)
            cols = reader.take(nnz, "<u8", f"pattern cols[{j}]").astype(np.int64)
            values = reader.take(nnz, "<f8", f"values[{j}]")
            matrices.append(SparseSymMatrix(n, rows, cols, values,
                                            f"mat-{header.get('seed')}-{j + 1}"))
    B = None
    if header.get("b_nnz") is not None:
        nnz = int(header["b_nnz"])
        rows = reader.take(nnz, "<u8", "B rows").astype(np.int64)
        cols = reader.take(nnz, "<u8", "B cols").astype(np.int64)
        values = reader.take(nnz, "<f8", "B values")
        B = SparseSymMatrix(n, rows, cols, values)
    c = None
    if header.get("has_c"):
        c = reader.take(m, "<f8", "c")
    if reader.pos != len(body):
        raise InstanceFormatError("trailing bytes after the last declared section")
    meta = {k: header.get(k) for k in ("density", "seed", "scaling", "generator")}
    meta["joint_pattern"] = header["joint_pattern"]
    return ProblemInstance(matrices, B=B, c=c, lipschitz=header.get("lipschitz"),
                           meta=meta)


def instance_equal(a: ProblemInstance, b: ProblemInstance) -> bool:
    """Bitwise equality of problem data (used by round-trip checks)."""
    if (a.n, a.m) != (b.n, b.m) or len(a.matrices) != len(b.matrices):
        return False
    for x, y in zip(a.matrices, b.matrices):
        if not (np.array_equal(x.rows, y.rows) and np.array_equal(x.cols, y.cols)
                and np.array_equal(x.values, y.values)):
            return False
    if (a.B is None) != (b.B is None):
        return False
    if a.B is not None and not (np.array_equal(a.B.rows, b.B.rows)
                                and np.array_equal(a.B.cols, b.B.cols)
                                and np.array_equal(a.B.values, b.B.values)):
        return False
    return bool(np.array_equal(a.c, b.c)) and a.lipschitz == b.lipschitz
