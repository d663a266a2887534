"""Binary model/grid formats, OBJ export and CSV writers.

All numbers are little-endian. Model files (``.dpf``)::

    b"DPF1" u32 version
    f64 tau, f64 correction_weight
    u32 stage, u64 iteration, i64 seed
    u32 M
    M x part:
        u8 tag length, ascii kind tag
        f64[4] quaternion, f64[3] translation, f64[3] scale, f64 confidence
        f64 v_max, u32 n_layers
        n_layers x (u32 rows, u32 cols, f64[rows*cols] W row-major, f64[cols] b)

Grid files (``.dpfvox``)::

    b"DPFVOX" u16 version, u32 resolution, u8 value type (0 binary, 1 real),
    u8 has_labels, values (u8 or f64) x-fastest, [i32 labels x-fastest]
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .deformer import DeformerParams
from .fields import FieldConfig, Primitive
from .geometry import Mesh, VoxelGrid
from .model import Part, ShapeModel

MODEL_MAGIC = b"DPF1"
MODEL_VERSION = 1
GRID_MAGIC = b"DPFVOX"
GRID_VERSION = 1


class FormatError(ValueError):
    """A file is truncated, foreign, or violates a model invariant."""


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated in section '{section}' (need {n} bytes at offset {self.pos})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, section: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), section))

    def array(self, n: int, section: str, dtype="<f8") -> np.ndarray:
        size = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(n * size, section), dtype=dtype).astype(np.dtype(dtype).newbyteorder("="))


def model_to_bytes(model: ShapeModel) -> bytes:
    out = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION)]
    out.append(struct.pack("<dd", model.config.tau, model.config.correction_weight))
    out.append(struct.pack("<IQq", model.stage, model.iteration, model.seed))
    out.append(struct.pack("<I", model.n_parts))
    for part in model.parts:
        prim = part.primitive
        tag = prim.kind.value.encode("ascii")
        out.append(struct.pack("<B", len(tag)) + tag)
        out.append(np.concatenate([prim.rotation, prim.translation, prim.scale, [prim.confidence]]).astype("<f8").tobytes())
        out.append(struct.pack("<dI", part.deformer.v_max, len(part.deformer.layers)))
        for w, b in part.deformer.layers:
            out.append(struct.pack("<II", *w.shape))
            out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(out)


def model_from_bytes(data: bytes, what: str = "model") -> ShapeModel:
    r = _Reader(data, what)
    if r.take(4, "magic") != MODEL_MAGIC:
        raise FormatError(f"{what}: not a DPF model file (bad magic)")
    (version,) = r.unpack("I", "version")
    if version != MODEL_VERSION:
        raise FormatError(f"{what}: unsupported model version {version}")
    tau, cw = r.unpack("dd", "field config")
    stage, iteration, seed = r.unpack("IQq", "fit metadata")
    (m,) = r.unpack("I", "part count")
    try:
        config = FieldConfig(tau, cw)
    except ValueError as exc:
        raise FormatError(f"{what}: field config: {exc}") from None
    if m < 1:
        raise FormatError(f"{what}: part count must be >= 1")
    parts = []
    for i in range(m):
        sec = f"part {i}"
        (n,) = r.unpack("B", f"{sec} kind tag")
        tag = r.take(n, f"{sec} kind tag").decode("ascii", errors="replace")
        vals = r.array(11, f"{sec} primitive")
        try:
            prim = Primitive(tag, vals[0:4], vals[4:7], vals[7:10], float(vals[10]))
        except ValueError as exc:
            raise FormatError(f"{what}: {sec} primitive: {exc}") from None
        if abs(np.linalg.norm(vals[0:4]) - 1.0) > 1e-9:
            raise FormatError(f"{what}: {sec} primitive: quaternion is not unit length")
        v_max, n_layers = r.unpack("dI", f"{sec} deformer header")
        layers = []
        for k in range(n_layers):
            lsec = f"{sec} deformer layer {k}"
            rows, cols = r.unpack("II", f"{lsec} shape")
            w = r.array(rows * cols, f"{lsec} weights").reshape(rows, cols)
            b = r.array(cols, f"{lsec} bias")
            layers.append((w, b))
        try:
            dfm = DeformerParams(layers, v_max)
        except ValueError as exc:
            raise FormatError(f"{what}: {sec} deformer: {exc}") from None
        parts.append(Part(prim, dfm))
    if r.pos != len(data):
        raise FormatError(f"{what}: {len(data) - r.pos} trailing bytes")
    return ShapeModel(parts, config, stage, iteration, seed)


def save_model(model: ShapeModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> ShapeModel:
    return model_from_bytes(Path(path).read_bytes(), str(path))


def grid_to_bytes(grid: VoxelGrid, binary: bool | None = None) -> bytes:
    flat = grid.flat()
    if binary is None:
        binary = bool(np.all((flat == 0) | (flat == 1)))
    has_labels = grid.labels is not None
    head = GRID_MAGIC + struct.pack("<HIBB", GRID_VERSION, grid.resolution, 0 if binary else 1, int(has_labels))
    body = flat.astype("u1").tobytes() if binary else flat.astype("<f8").tobytes()
    tail = grid.labels.ravel(order="F").astype("<i4").tobytes() if has_labels else b""
    return head + body + tail


def grid_from_bytes(data: bytes, what: str = "grid") -> VoxelGrid:
    r = _Reader(data, what)
    if r.take(6, "magic") != GRID_MAGIC:
        raise FormatError(f"{what}: not a DPFVOX grid file (bad magic)")
    version, res, vtype, has_labels = r.unpack("HIBB", "header")
    if version != GRID_VERSION:
        raise FormatError(f"{what}: unsupported grid version {version}")
    if vtype not in (0, 1) or has_labels not in (0, 1) or res < 1:
        raise FormatError(f"{what}: malformed header")
    n = res**3
    vals = r.array(n, "values", "u1" if vtype == 0 else "<f8").astype(np.float64)
    labels = r.array(n, "labels", "<i4") if has_labels else None
    if r.pos != len(data):
        raise FormatError(f"{what}: {len(data) - r.pos} trailing bytes")
    try:
        return VoxelGrid.from_flat(vals, res, labels)
    except ValueError as exc:
        raise FormatError(f"{what}: {exc}") from None


def save_grid(grid: VoxelGrid, path, binary: bool | None = None) -> None:
    Path(path).write_bytes(grid_to_bytes(grid, binary))


def load_grid(path) -> VoxelGrid:
    return grid_from_bytes(Path(path).read_bytes(), str(path))


def export_mesh_obj(mesh: Mesh, path, part_labels=None) -> None:
    """Write a text OBJ. ``part_labels`` (one per triangle) splits faces into
    ``g part_<id>`` groups."""
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    tris = mesh.triangles + 1
    if part_labels is None:
        lines += [f"f {a} {b} {c}" for a, b, c in tris]
    else:
        part_labels = np.asarray(part_labels)
        if len(part_labels) != len(tris):
            raise ValueError("need one part label per triangle")
        for lab in np.unique(part_labels):
            lines.append(f"g part_{int(lab)}")
            lines += [f"f {a} {b} {c}" for a, b, c in tris[part_labels == lab]]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_obj(path) -> Mesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(t) for t in tok[1:4]])
        elif tok[0] == "f":
            faces.append([int(t.split("/")[0]) - 1 for t in tok[1:4]])
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, float) else x for x in row])
