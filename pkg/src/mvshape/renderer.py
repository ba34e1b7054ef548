"""Software rasterizer producing multi-view grayscale images of meshes.

Cameras sit on an azimuth ring at fixed elevation and look at the origin.
Shading is two-sided headlight Lambertian evaluated per pixel: the face
normal dotted with the unit view vector at the perspective-correct world hit
point. Rendering is a pure function of (mesh, camera, params): two renders
are byte-identical.
"""

import math
import os
from dataclasses import dataclass
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import geometry
from .errors import (
    DegenerateCamera,
    IoFailure,
    TruncatedPixelData,
    UnsupportedMagic,
    ViewIndexOutOfRange,
)

_NEAR = 1e-3
_DEFAULT_FOV = 45.0


@dataclass
class RenderParams:
    image_size: int = 224
    n_views: int = 12
    elevation: float = 30.0
    distance: float = 2.5
    background: float = 0.0
    supersample: int = 2

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")


@dataclass
class Camera:
    eye: np.ndarray
    target: np.ndarray
    up: np.ndarray
    vertical_fov: float
    azimuth: float
    elevation: float
    distance: float

    def __post_init__(self):
        self.eye = np.asarray(self.eye, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if self.distance <= 0:
            raise DegenerateCamera("camera distance must be positive")
        if not 0 < self.vertical_fov < 180:
            raise DegenerateCamera(f"vertical fov {self.vertical_fov} outside (0, 180)")


@dataclass(eq=False)
class Image:
    width: int
    height: int
    pixels: np.ndarray  # (H, W) in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(self.height, self.width)

    def __eq__(self, other):
        return (
            isinstance(other, Image)
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass
class ViewSet:
    shape_id: str
    label: int
    views: list
    cameras: list


def make_camera(view_index: int, params: RenderParams) -> Camera:
    """Camera on the azimuth ring: index k sits at k * (360 / n_views) degrees."""
    if not 0 <= view_index < params.n_views:
        raise ViewIndexOutOfRange(f"view index {view_index} outside [0, {params.n_views})")
    azimuth = view_index * (360.0 / params.n_views)
    az = math.radians(azimuth)
    el = math.radians(params.elevation)
    d = params.distance
    eye = np.array([d * math.cos(el) * math.sin(az),
                    d * math.sin(el),
                    d * math.cos(el) * math.cos(az)])
    return Camera(eye=eye, target=np.zeros(3), up=np.array([0.0, 1.0, 0.0]),
                  vertical_fov=_DEFAULT_FOV, azimuth=azimuth,
                  elevation=params.elevation, distance=d)


def face_normals(mesh: geometry.Mesh) -> np.ndarray:
    """Unit face normals (zero rows for degenerate faces)."""
    v, f = mesh.vertices, mesh.faces
    if len(f) == 0:
        return np.zeros((0, 3))
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norm = np.linalg.norm(fn, axis=1)
    ok = norm > 0
    fn[ok] /= norm[ok][:, None]
    return fn


def render_view(mesh: geometry.Mesh, cam: Camera, params: RenderParams) -> Image:
    """Z-buffered perspective rasterization of one view.

    Shading is evaluated per pixel on the face plane: the world-space hit
    point is recovered by perspective-correct interpolation and the headlight
    intensity is |n_face . v| for the unit view vector v toward the eye.
    Shading a plane pixel-by-pixel keeps renders independent of how planar
    polygons were triangulated, so symmetric solids render symmetrically.
    Two-sided (no culling): mesh collections mix face windings freely.
    """
    forward = cam.target - cam.eye
    fl = np.linalg.norm(forward)
    if fl == 0:
        raise DegenerateCamera("camera eye coincides with target")
    forward = forward / fl
    right = np.cross(forward, cam.up)
    rl = np.linalg.norm(right)
    if rl < 1e-12:
        raise DegenerateCamera("up vector parallel to view direction")
    right = right / rl
    upv = np.cross(right, forward)

    ss = params.supersample
    size = params.image_size * ss
    img = np.full((size, size), float(params.background), dtype=np.float64)
    zbuf = np.full((size, size), np.inf, dtype=np.float64)

    verts = mesh.vertices
    if len(verts) and len(mesh.faces):
        rel = verts - cam.eye
        cx = rel @ right
        cy = rel @ upv
        cz = rel @ forward

        focal = (size / 2.0) / math.tan(math.radians(cam.vertical_fov) / 2.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            px = size / 2.0 + (cx / cz) * focal
            py = size / 2.0 - (cy / cz) * focal

        normals = face_normals(mesh)
        eye = cam.eye

        for fi, face in enumerate(mesh.faces):
            z0, z1, z2 = cz[face[0]], cz[face[1]], cz[face[2]]
            if z0 <= _NEAR or z1 <= _NEAR or z2 <= _NEAR:
                continue
            x0v, x1v, x2v = px[face[0]], px[face[1]], px[face[2]]
            y0v, y1v, y2v = py[face[0]], py[face[1]], py[face[2]]

            xmin = max(0, int(math.floor(min(x0v, x1v, x2v) - 0.5)))
            xmax = min(size - 1, int(math.ceil(max(x0v, x1v, x2v) - 0.5)))
            ymin = max(0, int(math.floor(min(y0v, y1v, y2v) - 0.5)))
            ymax = min(size - 1, int(math.ceil(max(y0v, y1v, y2v) - 0.5)))
            if xmin > xmax or ymin > ymax:
                continue

            det = (y1v - y2v) * (x0v - x2v) + (x2v - x1v) * (y0v - y2v)
            if det == 0.0:
                continue

            xs = np.arange(xmin, xmax + 1, dtype=np.float64) + 0.5
            ys = (np.arange(ymin, ymax + 1, dtype=np.float64) + 0.5)[:, None]
            l0 = ((y1v - y2v) * (xs - x2v) + (x2v - x1v) * (ys - y2v)) / det
            l1 = ((y2v - y0v) * (xs - x2v) + (x0v - x2v) * (ys - y2v)) / det
            l2 = 1.0 - l0 - l1
            inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
            if not inside.any():
                continue

            with np.errstate(divide="ignore", invalid="ignore"):
                w0, w1, w2 = l0 / z0, l1 / z1, l2 / z2
                wsum = w0 + w1 + w2
                depth = 1.0 / wsum
            sub_z = zbuf[ymin:ymax + 1, xmin:xmax + 1]
            hit = inside & (depth < sub_z)
            if not hit.any():
                continue
            # world hit point via perspective-correct interpolation
            v0, v1, v2 = verts[face[0]], verts[face[1]], verts[face[2]]
            n = normals[fi]
            w0h, w1h, w2h, dh = w0[hit], w1[hit], w2[hit], depth[hit]
            vx = eye[0] - (w0h * v0[0] + w1h * v1[0] + w2h * v2[0]) * dh
            vy = eye[1] - (w0h * v0[1] + w1h * v1[1] + w2h * v2[1]) * dh
            vz = eye[2] - (w0h * v0[2] + w1h * v1[2] + w2h * v2[2]) * dh
            vnorm = np.sqrt(vx * vx + vy * vy + vz * vz)
            value = np.abs(n[0] * vx + n[1] * vy + n[2] * vz) / vnorm
            sub_z[hit] = dh
            img[ymin:ymax + 1, xmin:xmax + 1][hit] = value

    if ss > 1:
        n = params.image_size
        img = img.reshape(n, ss, n, ss).mean(axis=(1, 3))
    np.clip(img, 0.0, 1.0, out=img)
    return Image(params.image_size, params.image_size, img)


def render_multiview(mesh: geometry.Mesh, shape_id: str, label: int, params: RenderParams) -> ViewSet:
    cameras = [make_camera(i, params) for i in range(params.n_views)]
    views = [render_view(mesh, cam, params) for cam in cameras]
    return ViewSet(shape_id=shape_id, label=label, views=views, cameras=cameras)


# ---------------------------------------------------------------------------
# PPM I/O

def quantize(img: Image) -> np.ndarray:
    return np.floor(img.pixels * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def write_ppm(img: Image, path):
    data = quantize(img)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
            fh.write(data.tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def _read_header_tokens(buf, n_tokens):
    """Read n whitespace-separated header tokens, honoring # comments."""
    tokens = []
    pos = 0
    while len(tokens) < n_tokens:
        if pos >= len(buf):
            raise TruncatedPixelData("PPM header truncated")
        c = buf[pos:pos + 1]
        if c == b"#":
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise TruncatedPixelData("PPM header truncated in comment")
            pos = nl + 1
        elif c.isspace():
            pos += 1
        else:
            end = pos
            while end < len(buf) and not buf[end:end + 1].isspace() and buf[end:end + 1] != b"#":
                end += 1
            tokens.append(buf[pos:end])
            pos = end
    return tokens, pos + 1  # single whitespace byte separates maxval from data


def read_ppm(path) -> Image:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    if len(buf) < 2:
        raise TruncatedPixelData(f"{path}: too short for a PPM file")
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedMagic(f"{path}: magic {magic!r} not P5/P6")
    tokens, data_start = _read_header_tokens(buf[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise UnsupportedMagic(f"{path}: garbled PPM header") from e
    if maxval != 255:
        raise UnsupportedMagic(f"{path}: only maxval 255 supported, got {maxval}")
    data = buf[2 + data_start:]
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    if len(data) < need:
        raise TruncatedPixelData(f"{path}: expected {need} pixel bytes, got {len(data)}")
    arr = np.frombuffer(data[:need], dtype=np.uint8).astype(np.float64)
    if channels == 3:
        arr = arr.reshape(height, width, 3)
        arr = 0.299 * arr[:, :, 0] + 0.587 * arr[:, :, 1] + 0.114 * arr[:, :, 2]
    else:
        arr = arr.reshape(height, width)
    return Image(width, height, arr / 255.0)


# ---------------------------------------------------------------------------
# corpus rendering (mesh tree -> view tree)

def _render_one(job):
    mesh_path, out_dir, params = job
    mesh = geometry.normalize_mesh(geometry.load_mesh(mesh_path))
    os.makedirs(out_dir, exist_ok=True)
    for i in range(params.n_views):
        cam = make_camera(i, params)
        img = render_view(mesh, cam, params)
        write_ppm(img, os.path.join(out_dir, f"view_{i:02d}.ppm"))
    return out_dir


def render_corpus(mesh_root, out_root, params: RenderParams, workers: int = 1):
    """Render every .off/.obj under <root>/<class>/<split>/ into view directories.

    Output bytes do not depend on `workers`; shapes are independent jobs.
    """
    jobs = []
    for cls in sorted(os.listdir(mesh_root)):
        cdir = os.path.join(mesh_root, cls)
        if not os.path.isdir(cdir):
            continue
        for split in sorted(os.listdir(cdir)):
            sdir = os.path.join(cdir, split)
            if not os.path.isdir(sdir):
                continue
            for fname in sorted(os.listdir(sdir)):
                if not fname.lower().endswith((".off", ".obj")):
                    continue
                shape_id = os.path.splitext(fname)[0]
                jobs.append((os.path.join(sdir, fname),
                             os.path.join(out_root, cls, split, shape_id), params))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_render_one, jobs, chunksize=4))
    else:
        for job in jobs:
            _render_one(job)
    return len(jobs)
