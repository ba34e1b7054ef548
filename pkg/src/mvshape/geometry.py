"""Triangle-mesh ingestion, normalization, and procedural shape synthesis.

Parsers accept the OFF dialects found in common 3D model collections
(including the fused ``OFF490 518 0`` first line) plus a pragmatic subset of
OBJ. All faces are fan-triangulated at parse time. Synthetic corpora are
generated from six primitive-solid classes with per-axis scale jitter, giving
a small labeled dataset with deterministic bytes for a fixed seed.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import (
    DegenerateExtent,
    EmptyMesh,
    IndexOutOfRange,
    MalformedFace,
    MalformedHeader,
    NonFiniteCoordinate,
    TruncatedFile,
    UnknownGeneratorKind,
)

GENERATOR_KINDS = ("cube", "sphere", "cylinder", "cone", "torus", "pyramid")


@dataclass(eq=False)
class Mesh:
    vertices: np.ndarray  # (N, 3) float64
    faces: np.ndarray     # (M, 3) int64
    name: str = ""

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise NonFiniteCoordinate(f"mesh '{self.name}' has non-finite vertices")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise IndexOutOfRange(f"mesh '{self.name}' has face indices outside [0, {len(self.vertices)})")

    def __eq__(self, other):
        return (
            isinstance(other, Mesh)
            and self.vertices.shape == other.vertices.shape
            and self.faces.shape == other.faces.shape
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.faces, other.faces)
        )


@dataclass
class ShapeClassSpec:
    class_id: int
    class_name: str
    generator_kind: str
    jitter: tuple = (0.7, 1.3)

    def __post_init__(self):
        if self.generator_kind not in GENERATOR_KINDS:
            raise UnknownGeneratorKind(f"unknown generator kind '{self.generator_kind}'")
        lo, hi = self.jitter
        if lo <= 0 or hi < lo:
            raise ValueError(f"jitter range {self.jitter} must satisfy 0 < lo <= hi")


# ---------------------------------------------------------------------------
# parsing

def _fan_triangulate(indices, n_vertices, where):
    if len(indices) < 3:
        raise MalformedFace(f"{where}: face with {len(indices)} indices")
    for idx in indices:
        if idx < 0 or idx >= n_vertices:
            raise IndexOutOfRange(f"{where}: face index {idx} outside [0, {n_vertices})")
    return [(indices[0], indices[i], indices[i + 1]) for i in range(1, len(indices) - 1)]


def _strip_comments(text: str):
    lines = []
    for line in text.splitlines():
        cut = line.find("#")
        lines.append(line if cut < 0 else line[:cut])
    return lines


def parse_off(data) -> Mesh:
    """Parse an OFF document (bytes or str) into a triangle Mesh."""
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    tokens = " ".join(_strip_comments(data)).split()
    if not tokens:
        raise MalformedHeader("empty OFF document")

    pos = 0
    if tokens[0] == "OFF":
        pos = 1
    elif tokens[0].startswith("OFF"):
        # fused header: "OFF490" carries the vertex count
        tokens[0] = tokens[0][3:]

    try:
        nv, nf = int(tokens[pos]), int(tokens[pos + 1])
        int(tokens[pos + 2])  # edge count, unused
    except (IndexError, ValueError) as e:
        raise MalformedHeader("missing or garbled OFF counts line") from e
    if nv < 0 or nf < 0:
        raise MalformedHeader(f"negative counts {nv}/{nf}")
    pos += 3

    need = 3 * nv
    if pos + need > len(tokens):
        raise TruncatedFile(f"expected {nv} vertices, ran out of data")
    try:
        verts = np.array(tokens[pos:pos + need], dtype=np.float64).reshape(nv, 3)
    except ValueError as e:
        raise NonFiniteCoordinate("unparseable vertex coordinate") from e
    if not np.all(np.isfinite(verts)):
        raise NonFiniteCoordinate("non-finite vertex coordinate")
    pos += need

    tris = []
    for fi in range(nf):
        if pos >= len(tokens):
            raise TruncatedFile(f"expected {nf} faces, ran out of data at face {fi}")
        try:
            arity = int(tokens[pos])
        except ValueError as e:
            raise MalformedFace(f"face {fi}: bad vertex count token {tokens[pos]!r}") from e
        pos += 1
        if pos + arity > len(tokens):
            raise TruncatedFile(f"face {fi} truncated")
        try:
            idx = [int(t) for t in tokens[pos:pos + arity]]
        except ValueError as e:
            raise MalformedFace(f"face {fi}: non-integer index") from e
        pos += arity
        tris.extend(_fan_triangulate(idx, nv, f"face {fi}"))

    return Mesh(verts, np.array(tris, dtype=np.int64).reshape(-1, 3), name="off")


def parse_obj(data) -> Mesh:
    """Parse the v/f subset of OBJ; 1-based and negative indices, /vt/vn dropped."""
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    verts = []
    tris = []
    for ln, line in enumerate(_strip_comments(data), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise TruncatedFile(f"line {ln}: vertex with fewer than 3 coordinates")
            try:
                xyz = [float(p) for p in parts[1:4]]
            except ValueError as e:
                raise NonFiniteCoordinate(f"line {ln}: unparseable coordinate") from e
            if not all(math.isfinite(c) for c in xyz):
                raise NonFiniteCoordinate(f"line {ln}: non-finite coordinate")
            verts.append(xyz)
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                head = tok.split("/")[0]
                try:
                    raw = int(head)
                except ValueError as e:
                    raise MalformedFace(f"line {ln}: bad face token {tok!r}") from e
                if raw == 0:
                    raise IndexOutOfRange(f"line {ln}: OBJ indices are 1-based, got 0")
                idx.append(raw - 1 if raw > 0 else len(verts) + raw)
            tris.extend(_fan_triangulate(idx, len(verts), f"line {ln}"))
    if not verts:
        raise EmptyMesh("OBJ document defines no vertices")
    return Mesh(np.array(verts, dtype=np.float64), np.array(tris, dtype=np.int64).reshape(-1, 3), name="obj")


def write_off(mesh: Mesh) -> str:
    """Canonical OFF serialization: fixed 6-decimal coordinates."""
    out = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    out.extend(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}" for v in mesh.vertices)
    out.extend(f"3 {f[0]} {f[1]} {f[2]}" for f in mesh.faces)
    return "\n".join(out) + "\n"


def save_off(mesh: Mesh, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(write_off(mesh))


def load_mesh(path) -> Mesh:
    with open(path, "rb") as fh:
        data = fh.read()
    parsed = parse_obj(data) if str(path).lower().endswith(".obj") else parse_off(data)
    parsed.name = os.path.splitext(os.path.basename(str(path)))[0]
    return parsed


# ---------------------------------------------------------------------------
# normalization

def normalize_mesh(mesh: Mesh) -> Mesh:
    """Center the bounding box at the origin and scale the largest extent to 1.

    Iterates the center-and-scale map to a floating-point fixed point so that
    normalizing twice is bit-identical to normalizing once.
    """
    if len(mesh.vertices) == 0:
        raise EmptyMesh("cannot normalize a mesh with no vertices")
    v = mesh.vertices.astype(np.float64).copy()
    for _ in range(16):
        mn, mx = v.min(axis=0), v.max(axis=0)
        extent = float((mx - mn).max())
        if extent == 0.0:
            raise DegenerateExtent("all vertices coincide")
        center = (mn + mx) / 2.0
        nxt = (v - center) / extent
        if np.array_equal(nxt, v):
            break
        v = nxt
    return Mesh(v, mesh.faces.copy(), name=mesh.name)


# ---------------------------------------------------------------------------
# procedural generators

def _cube():
    s = 0.5
    v = np.array([
        [-s, -s, -s], [s, -s, -s], [s, s, -s], [-s, s, -s],
        [-s, -s, s], [s, -s, s], [s, s, s], [-s, s, s],
    ])
    f = np.array([
        [0, 2, 1], [0, 3, 2],      # back  (-z)
        [4, 5, 6], [4, 6, 7],      # front (+z)
        [0, 1, 5], [0, 5, 4],      # bottom (-y)
        [3, 6, 2], [3, 7, 6],      # top (+y)
        [0, 4, 7], [0, 7, 3],      # left (-x)
        [1, 2, 6], [1, 6, 5],      # right (+x)
    ])
    return v, f


def _uv_sphere(segments):
    r = 0.5
    rows = segments - 1
    verts = [(0.0, r, 0.0)]
    for i in range(1, segments):
        theta = math.pi * i / segments
        y = r * math.cos(theta)
        s = r * math.sin(theta)
        for j in range(segments):
            phi = 2.0 * math.pi * j / segments
            verts.append((s * math.cos(phi), y, s * math.sin(phi)))
    verts.append((0.0, -r, 0.0))
    top, bottom = 0, 1 + rows * segments

    def ring(i, j):
        return 1 + i * segments + (j % segments)

    faces = []
    for j in range(segments):
        faces.append((top, ring(0, j + 1), ring(0, j)))
    for i in range(rows - 1):
        for j in range(segments):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append((a, b, d))
            faces.append((a, d, c))
    for j in range(segments):
        faces.append((bottom, ring(rows - 1, j), ring(rows - 1, j + 1)))
    return np.array(verts), np.array(faces)


def _cylinder(segments):
    r, h = 0.5, 0.5
    verts = []
    for y in (h, -h):
        for j in range(segments):
            phi = 2.0 * math.pi * j / segments
            verts.append((r * math.cos(phi), y, r * math.sin(phi)))
    verts.append((0.0, h, 0.0))
    verts.append((0.0, -h, 0.0))
    ctop, cbot = 2 * segments, 2 * segments + 1

    def top(j):
        return j % segments

    def bot(j):
        return segments + (j % segments)

    faces = []
    for j in range(segments):
        faces.append((top(j), top(j + 1), bot(j + 1)))
        faces.append((top(j), bot(j + 1), bot(j)))
        faces.append((ctop, top(j + 1), top(j)))
        faces.append((cbot, bot(j), bot(j + 1)))
    return np.array(verts), np.array(faces)


def _cone(segments):
    r, h = 0.5, 0.5
    verts = [(r * math.cos(2 * math.pi * j / segments), -h, r * math.sin(2 * math.pi * j / segments))
             for j in range(segments)]
    verts.append((0.0, h, 0.0))
    verts.append((0.0, -h, 0.0))
    apex, cbot = segments, segments + 1
    faces = []
    for j in range(segments):
        faces.append((apex, (j + 1) % segments, j))
        faces.append((cbot, j, (j + 1) % segments))
    return np.array(verts), np.array(faces)


def _torus(segments):
    big, small = 0.35, 0.15
    verts = []
    for i in range(segments):
        alpha = 2.0 * math.pi * i / segments
        ca, sa = math.cos(alpha), math.sin(alpha)
        for j in range(segments):
            beta = 2.0 * math.pi * j / segments
            w = big + small * math.cos(beta)
            verts.append((w * ca, small * math.sin(beta), w * sa))

    def at(i, j):
        return (i % segments) * segments + (j % segments)

    faces = []
    for i in range(segments):
        for j in range(segments):
            a, b = at(i, j), at(i + 1, j)
            c, d = at(i, j + 1), at(i + 1, j + 1)
            faces.append((a, d, b))
            faces.append((a, c, d))
    return np.array(verts), np.array(faces)


def _pyramid():
    s, h = 0.5, 0.5
    verts = np.array([
        [-s, -h, -s], [s, -h, -s], [s, -h, s], [-s, -h, s],
        [0.0, h, 0.0],
    ])
    faces = np.array([
        [0, 1, 2], [0, 2, 3],          # base (down)
        [4, 1, 0], [4, 2, 1], [4, 3, 2], [4, 0, 3],
    ])
    return verts, faces


_GENERATORS = {
    "cube": lambda seg: _cube(),
    "sphere": _uv_sphere,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "pyramid": lambda seg: _pyramid(),
}


def generate_shape(spec: ShapeClassSpec, seed: int, segments: int = 24) -> Mesh:
    """Deterministic jittered primitive solid for the given class spec and seed."""
    if spec.generator_kind not in _GENERATORS:
        raise UnknownGeneratorKind(f"unknown generator kind '{spec.generator_kind}'")
    verts, faces = _GENERATORS[spec.generator_kind](segments)
    lo, hi = spec.jitter
    scales = rng.stream(seed, "shape-jitter", spec.class_name, spec.generator_kind).uniform(lo, hi, size=3)
    verts = verts * scales
    return Mesh(verts, faces, name=f"{spec.class_name}-{seed:016x}")


def default_class_specs(n_classes: int = 6, jitter=(0.7, 1.3)):
    if not 1 <= n_classes <= len(GENERATOR_KINDS):
        raise ValueError(f"n_classes must be in [1, {len(GENERATOR_KINDS)}]")
    return [ShapeClassSpec(i, kind, kind, jitter) for i, kind in enumerate(GENERATOR_KINDS[:n_classes])]


def synth_corpus(out_dir, n_classes=6, per_class=75, seed=0, train_frac=0.8,
                 segments=24, jitter=(0.7, 1.3)):
    """Write a labeled OFF corpus: <out>/<class>/<split>/<id>.off, 80/20 split.

    Pure function of its arguments: the same seed yields byte-identical trees.
    Returns the list of written file paths.
    """
    specs = default_class_specs(n_classes, jitter)
    n_train = round(per_class * train_frac)
    written = []
    for spec in specs:
        for i in range(per_class):
            split = "train" if i < n_train else "test"
            d = os.path.join(out_dir, spec.class_name, split)
            os.makedirs(d, exist_ok=True)
            obj_seed = rng.derive_seed(seed, "synth", spec.class_name, i)
            mesh = generate_shape(spec, obj_seed, segments=segments)
            mesh.name = f"{spec.class_name}_{i:04d}"
            path = os.path.join(d, f"{mesh.name}.off")
            save_off(mesh, path)
            written.append(path)
    return written
