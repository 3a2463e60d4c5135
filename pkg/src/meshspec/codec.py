"""Triangle-mesh <-> coordinate-token conversion.

A mesh is serialized as one token per quantized coordinate, nine tokens
per triangle, in a canonical order: within each face the three vertices
are sorted ascending along z, then y, then x, and faces are sorted by
their lowest vertex under the same order. Control symbols BOS/EOS/PAD
occupy the three ids directly above the coordinate range.

Float meshes keep OBJ column order (x, y, z); quantized vertices are
stored as (z, y, x) triples so plain tuple comparison is the canonical
order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def bos_id(bins: int) -> int:
    return bins


def eos_id(bins: int) -> int:
    return bins + 1


def pad_id(bins: int) -> int:
    return bins + 2


def vocab_size(bins: int) -> int:
    return bins + 3


class ParseError(ValueError):
    """Malformed token stream; `offset` is the index of the bad token."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


@dataclass
class Mesh:
    """Float triangle mesh, vertices in OBJ (x, y, z) column order."""

    vertices: np.ndarray  # (n, 3) float64
    faces: np.ndarray     # (m, 3) int64 vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)


@dataclass(eq=False)
class QuantizedMesh:
    """Integer mesh on a bins^3 grid, vertices as (z, y, x) triples."""

    vertices: np.ndarray  # (n, 3) int64, each component in [0, bins)
    faces: np.ndarray     # (m, 3) int64 vertex indices
    bins: int
    lo: np.ndarray | None = field(default=None)   # original bbox min (x, y, z)
    hi: np.ndarray | None = field(default=None)   # original bbox max (x, y, z)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.int64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")

    def __eq__(self, other):
        if not isinstance(other, QuantizedMesh):
            return NotImplemented
        return (
            self.bins == other.bins
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.faces, other.faces)
        )


def quantize(mesh: Mesh, bins: int) -> QuantizedMesh:
    """Min-max quantize vertices to [0, bins-1], merge exact duplicates,
    drop faces that became degenerate. Rounding is half-up. A zero-extent
    axis maps to the middle bin (bins-1)//2.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if len(mesh.vertices) == 0 or len(mesh.faces) == 0:
        raise ValueError("cannot quantize an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = hi - lo
    q = np.empty_like(mesh.vertices)
    for axis in range(3):
        if extent[axis] == 0.0:
            q[:, axis] = (bins - 1) // 2
        else:
            t = (mesh.vertices[:, axis] - lo[axis]) / extent[axis] * (bins - 1)
            q[:, axis] = np.clip(np.floor(t + 0.5), 0, bins - 1)
    zyx = q.astype(np.int64)[:, ::-1]  # (x,y,z) -> (z,y,x)

    # merge duplicates, keeping first-appearance order
    remap: dict[tuple, int] = {}
    new_index = np.empty(len(zyx), dtype=np.int64)
    merged = []
    for i, v in enumerate(map(tuple, zyx)):
        if v not in remap:
            remap[v] = len(merged)
            merged.append(v)
        new_index[i] = remap[v]

    faces = new_index[mesh.faces]
    keep = (
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    )
    return QuantizedMesh(
        np.array(merged, dtype=np.int64).reshape(-1, 3),
        faces[keep],
        bins,
        lo=lo.copy(),
        hi=hi.copy(),
    )


def dequantize(qm: QuantizedMesh) -> Mesh:
    """Map bins back to float coordinates using the stored bounding box
    (the bin grid itself when no box was recorded)."""
    if qm.lo is None or qm.hi is None:
        lo = np.zeros(3)
        hi = np.full(3, float(qm.bins - 1))
    else:
        lo, hi = np.asarray(qm.lo, dtype=np.float64), np.asarray(qm.hi, dtype=np.float64)
    xyz = qm.vertices[:, ::-1].astype(np.float64)
    extent = hi - lo
    verts = lo + xyz * np.where(extent == 0.0, 0.0, extent / (qm.bins - 1))
    return Mesh(verts, qm.faces.copy())


def _face_sorted(qm: QuantizedMesh) -> tuple[list, list]:
    """Faces as lists of vertex tuples, canonically ordered (stable)."""
    vt = [tuple(v) for v in qm.vertices]
    faces = [sorted(vt[i] for i in f) for f in qm.faces]
    order = sorted(range(len(faces)), key=lambda i: faces[i][0])
    return [faces[i] for i in order], order


def canonicalize(qm: QuantizedMesh) -> QuantizedMesh:
    """Canonical sequence form: z-y-x sort inside each face, faces sorted
    by lowest vertex, vertices renumbered in first-appearance order.
    Idempotent."""
    faces, _ = _face_sorted(qm)
    remap: dict[tuple, int] = {}
    out_faces = []
    for f in faces:
        idx = []
        for v in f:
            if v not in remap:
                remap[v] = len(remap)
            idx.append(remap[v])
        out_faces.append(idx)
    verts = np.array(list(remap.keys()), dtype=np.int64).reshape(-1, 3)
    return QuantizedMesh(
        verts, np.array(out_faces, dtype=np.int64).reshape(-1, 3),
        qm.bins, lo=qm.lo, hi=qm.hi,
    )


def is_canonical(qm: QuantizedMesh) -> bool:
    vt = [tuple(v) for v in qm.vertices]
    prev_min = None
    for f in qm.faces:
        tri = [vt[i] for i in f]
        if not (tri[0] <= tri[1] <= tri[2]):
            return False
        if prev_min is not None and tri[0] < prev_min:
            return False
        prev_min = tri[0]
    return True


def to_tokens(qm: QuantizedMesh) -> np.ndarray:
    """BOS, then z,y,x of each face's three vertices, then EOS."""
    if not is_canonical(qm):
        qm = canonicalize(qm)
    vt = qm.vertices
    toks = [bos_id(qm.bins)]
    for f in qm.faces:
        for vi in f:
            toks.extend(int(c) for c in vt[vi])
    toks.append(eos_id(qm.bins))
    return np.array(toks, dtype=np.int64)


def payload_of(tokens: np.ndarray, bins: int) -> np.ndarray:
    """Strictly validated coordinate payload of a token sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) == 0 or tokens[0] != bos_id(bins):
        raise ParseError("sequence must start with BOS", 0)
    payload = []
    for off in range(1, len(tokens)):
        t = int(tokens[off])
        if t == eos_id(bins):
            if off != len(tokens) - 1:
                raise ParseError("tokens after EOS", off + 1)
            break
        if t < 0 or t >= vocab_size(bins):
            raise ParseError(f"token id {t} outside vocabulary", off)
        if t >= bins:
            raise ParseError("control token inside payload", off)
        payload.append(t)
    return np.array(payload, dtype=np.int64)


def from_tokens(tokens: np.ndarray, bins: int) -> QuantizedMesh:
    """Inverse of to_tokens. A trailing partial face is dropped; exactly
    equal coordinate triples are merged into shared vertices."""
    payload = payload_of(tokens, bins)
    n_faces = len(payload) // 9
    payload = payload[: n_faces * 9]
    remap: dict[tuple, int] = {}
    faces = []
    for fi in range(n_faces):
        idx = []
        for vi in range(3):
            triple = tuple(payload[fi * 9 + vi * 3 : fi * 9 + vi * 3 + 3])
            if triple not in remap:
                remap[triple] = len(remap)
            idx.append(remap[triple])
        faces.append(idx)
    verts = np.array(list(remap.keys()), dtype=np.int64).reshape(-1, 3)
    return QuantizedMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), bins)


# ---------------------------------------------------------------------------
# file formats


def load_obj(path) -> Mesh:
    """ASCII OBJ reader: v/f records, polygons fan-triangulated, negative
    (relative) indices supported. Raises ValueError with the line number
    on malformed records."""
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            toks = line.split()
            if not toks or toks[0].startswith("#"):
                continue
            if toks[0] == "v":
                try:
                    xyz = [float(t) for t in toks[1:4]]
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: malformed vertex record")
                if len(xyz) != 3:
                    raise ValueError(f"{path}:{lineno}: vertex needs 3 coordinates")
                verts.append(xyz)
            elif toks[0] == "f":
                idx = []
                for tok in toks[1:]:
                    try:
                        raw = int(tok.split("/")[0])
                    except ValueError:
                        raise ValueError(f"{path}:{lineno}: malformed face index {tok!r}")
                    if raw == 0:
                        raise ValueError(f"{path}:{lineno}: face index 0 is invalid")
                    i = len(verts) + raw if raw < 0 else raw - 1
                    if not 0 <= i < len(verts):
                        raise ValueError(f"{path}:{lineno}: face index {raw} out of range")
                    idx.append(i)
                if len(idx) < 3:
                    raise ValueError(f"{path}:{lineno}: face needs at least 3 vertices")
                for k in range(2, len(idx)):
                    faces.append([idx[0], idx[k - 1], idx[k]])
    return Mesh(
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
    )


def save_obj(mesh: Mesh, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def save_tokens(path, tokens: np.ndarray, bins: int) -> None:
    """Newline-delimited decimal ids with a comment header carrying bins."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"# bins={bins}\n")
        for t in tokens:
            fh.write(f"{int(t)}\n")


def load_tokens(path) -> tuple[np.ndarray, int]:
    bins = None
    toks = []
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("bins="):
                    bins = int(body[5:])
                continue
            try:
                toks.append(int(line))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed token id {line!r}")
    if bins is None:
        raise ValueError(f"{path}: missing '# bins=' header")
    return np.array(toks, dtype=np.int64), bins
