"""Dataset manifests, stochastic two-view augmentation, and embedding I/O.

A manifest indexes a rendered view tree (<root>/<class>/<split>/<id>/view_*.ppm)
in stable lexicographic order. Training samples are individual views; each
batch row carries two independently augmented crops of the same source view.
Augmentation randomness comes from counter-based streams keyed by
(seed, item, view, epoch, slot), so batches are reproducible regardless of
evaluation order.
"""

import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import renderer, rng
from .errors import (
    DimensionMismatch,
    EmptyDataset,
    InconsistentViewCount,
    IndexOutOfRange,
    MissingSidecar,
    MissingStats,
    UnknownSplit,
)

SPLITS = ("train", "test")


@dataclass
class ManifestItem:
    shape_id: str
    class_id: int
    split: str
    views: list


@dataclass
class DatasetManifest:
    root: str
    classes: list
    items: list
    n_views: int
    image_size: int
    pixel_mean: float = None
    pixel_std: float = None

    def split_items(self, split):
        return [it for it in self.items if it.split == split]

    def view_samples(self, split):
        """Flattened (item, view_index) list; the unit of training sampling."""
        return [(it, v) for it in self.split_items(split) for v in range(self.n_views)]

    def view_path(self, item, view_index):
        return os.path.join(self.root, item.views[view_index])


def build_manifest(root) -> DatasetManifest:
    """Scan a rendered dataset tree into a manifest with deterministic ordering."""
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if not classes:
        raise EmptyDataset(f"no class directories under {root}")
    items = []
    view_counts = set()
    for class_id, cls in enumerate(classes):
        cdir = os.path.join(root, cls)
        subdirs = sorted(d for d in os.listdir(cdir) if os.path.isdir(os.path.join(cdir, d)))
        for split in subdirs:
            if split not in SPLITS:
                raise UnknownSplit(f"{cdir}: unexpected split directory '{split}'")
        if not subdirs:
            raise EmptyDataset(f"class directory {cdir} has no train/test splits")
        for split in subdirs:
            sdir = os.path.join(cdir, split)
            for obj in sorted(os.listdir(sdir)):
                odir = os.path.join(sdir, obj)
                if not os.path.isdir(odir):
                    continue
                views = sorted(f for f in os.listdir(odir) if f.endswith(".ppm"))
                if not views:
                    raise EmptyDataset(f"{odir} contains no views")
                view_counts.add(len(views))
                rel = [os.path.join(cls, split, obj, v) for v in views]
                items.append(ManifestItem(shape_id=f"{cls}/{obj}", class_id=class_id,
                                          split=split, views=rel))
    if not items:
        raise EmptyDataset(f"no rendered objects under {root}")
    if len(view_counts) != 1:
        raise InconsistentViewCount(f"objects disagree on view count: {sorted(view_counts)}")
    first = renderer.read_ppm(os.path.join(root, items[0].views[0]))
    return DatasetManifest(root=str(root), classes=classes, items=items,
                           n_views=view_counts.pop(), image_size=first.width)


def save_manifest(manifest: DatasetManifest, path=None):
    path = path or os.path.join(manifest.root, "manifest.json")
    doc = {
        "classes": manifest.classes,
        "n_views": manifest.n_views,
        "image_size": manifest.image_size,
        "pixel_mean": manifest.pixel_mean,
        "pixel_std": manifest.pixel_std,
        "items": [asdict(it) for it in manifest.items],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
    return path


def load_manifest(root) -> DatasetManifest:
    path = os.path.join(root, "manifest.json")
    with open(path) as fh:
        doc = json.load(fh)
    items = [ManifestItem(**it) for it in doc["items"]]
    return DatasetManifest(root=str(root), classes=doc["classes"], items=items,
                           n_views=doc["n_views"], image_size=doc["image_size"],
                           pixel_mean=doc["pixel_mean"], pixel_std=doc["pixel_std"])


def load_or_build_manifest(root) -> DatasetManifest:
    if os.path.exists(os.path.join(root, "manifest.json")):
        return load_manifest(root)
    return build_manifest(root)


def compute_stats(manifest: DatasetManifest) -> DatasetManifest:
    """Dataset-level pixel mean/std over the train split (population std)."""
    total, total_sq, count = 0.0, 0.0, 0
    for item in manifest.split_items("train"):
        for v in range(manifest.n_views):
            px = renderer.read_ppm(manifest.view_path(item, v)).pixels
            total += float(px.sum())
            total_sq += float((px * px).sum())
            count += px.size
    if count == 0:
        raise EmptyDataset("no train pixels to compute statistics from")
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    manifest.pixel_mean = mean
    manifest.pixel_std = float(np.sqrt(var)) or 1.0
    return manifest


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentConfig:
    crop_scale: tuple = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_strength: float = 0.4
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2  # identity for single-channel inputs
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        for p in (self.flip_prob, self.jitter_prob, self.grayscale_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale {self.crop_scale} outside (0, 1]")


_RATIO_LOG = (np.log(3.0 / 4.0), np.log(4.0 / 3.0))


def _bilinear_resample(src, x0, y0, cw, ch, out_h, out_w):
    """Sample the [x0, x0+cw) x [y0, y0+ch) region to out_h x out_w.

    Sample coordinates are computed in float64; interpolation runs in the
    source dtype. Output pixel centers map linearly into the region, so the
    full-frame crop at matching size is an exact identity.
    """
    h, w = src.shape
    us = x0 + (np.arange(out_w) + 0.5) * (cw / out_w) - 0.5
    vs = y0 + (np.arange(out_h) + 0.5) * (ch / out_h) - 0.5
    us = np.clip(us, 0.0, w - 1.0)
    vs = np.clip(vs, 0.0, h - 1.0)
    u0 = np.floor(us).astype(np.int64)
    v0 = np.floor(vs).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (us - u0).astype(src.dtype)[None, :]
    fv = (vs - v0).astype(src.dtype)[:, None]
    a = src[v0[:, None], u0[None, :]]
    b = src[v0[:, None], u1[None, :]]
    c = src[v1[:, None], u0[None, :]]
    d = src[v1[:, None], u1[None, :]]
    top = a + (b - a) * fu
    bot = c + (d - c) * fu
    return top + (bot - top) * fv


def augment(pixels: np.ndarray, cfg: AugmentConfig, stream: np.random.Generator) -> np.ndarray:
    """One stochastic view: random resized crop, flip, brightness/contrast, normalize.

    Draw order is fixed (crop params, flip, jitter gate, brightness, contrast)
    so a given stream always produces the same tensor. Image math runs in
    float32, the training precision. Returns (1, H, W) float32.
    """
    pixels = pixels.astype(np.float32, copy=False)
    h, w = pixels.shape
    lo, hi = cfg.crop_scale

    x0, y0, cw, ch = 0.0, 0.0, float(w), float(h)
    for _ in range(10):
        scale = stream.uniform(lo, hi)
        ratio = np.exp(stream.uniform(*_RATIO_LOG))
        area = scale * h * w
        tw = np.sqrt(area * ratio)
        th = np.sqrt(area / ratio)
        if tw <= w and th <= h:
            x0 = stream.uniform(0.0, w - tw)
            y0 = stream.uniform(0.0, h - th)
            cw, ch = tw, th
            break
    out = _bilinear_resample(pixels, x0, y0, cw, ch, h, w)

    if stream.uniform() < cfg.flip_prob:
        out = out[:, ::-1]

    if stream.uniform() < cfg.jitter_prob:
        s = cfg.jitter_strength
        brightness = np.float32(stream.uniform(1.0 - s, 1.0 + s))
        contrast = np.float32(stream.uniform(1.0 - s, 1.0 + s))
        out *= brightness
        np.clip(out, 0.0, 1.0, out=out)
        m = out.mean(dtype=np.float32)
        out -= m
        out *= contrast
        out += m
        np.clip(out, 0.0, 1.0, out=out)

    out -= np.float32(cfg.mean)
    out /= np.float32(cfg.std)
    return np.ascontiguousarray(out)[None, :, :]


def eval_transform(pixels: np.ndarray, target_size: int, mean: float, std: float) -> np.ndarray:
    """Deterministic evaluation path: resize (if needed) and normalize."""
    pixels = pixels.astype(np.float32, copy=False)
    h, w = pixels.shape
    if (h, w) != (target_size, target_size):
        pixels = _bilinear_resample(pixels, 0.0, 0.0, float(w), float(h),
                                    target_size, target_size)
    out = (pixels - np.float32(mean)) / np.float32(std)
    return out[None, :, :]


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    view_a: np.ndarray   # (B, 1, H, W) float32
    view_b: np.ndarray
    labels: np.ndarray   # (B,) int64
    items: list          # (shape_id, view_index) per row


def make_batch(manifest: DatasetManifest, samples, indices, epoch: int,
               cfg: AugmentConfig, seed: int, cache: dict = None) -> Batch:
    """Assemble a two-view batch from view-level sample indices.

    `samples` is the flattened (item, view) list for the training split;
    `cache` maps view paths to decoded pixel arrays and is filled on demand.
    """
    if cfg.mean is None or cfg.std is None:
        raise MissingStats("augment config has no normalization stats; run the stats pass")
    rows_a, rows_b, labels, refs = [], [], [], []
    for idx in indices:
        if not 0 <= idx < len(samples):
            raise IndexOutOfRange(f"sample index {idx} outside [0, {len(samples)})")
        item, view = samples[idx]
        path = manifest.view_path(item, view)
        if cache is not None and path in cache:
            px = cache[path]
        else:
            px = renderer.read_ppm(path).pixels.astype(np.float32)
            if cache is not None:
                cache[path] = px
        rows_a.append(augment(px, cfg, rng.stream(seed, "aug", item.shape_id, view, epoch, "a")))
        rows_b.append(augment(px, cfg, rng.stream(seed, "aug", item.shape_id, view, epoch, "b")))
        labels.append(item.class_id)
        refs.append((item.shape_id, view))
    return Batch(view_a=np.stack(rows_a), view_b=np.stack(rows_b),
                 labels=np.asarray(labels, dtype=np.int64), items=refs)


# ---------------------------------------------------------------------------
# embedding matrices

@dataclass(eq=False)
class EmbeddingMatrix:
    rows: np.ndarray      # (N, D) float32
    ids: list
    labels: np.ndarray    # (N,) int64
    level: str            # "view" | "shape"
    normalized: bool
    class_names: list

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __eq__(self, other):
        return (
            isinstance(other, EmbeddingMatrix)
            and np.array_equal(self.rows, other.rows)
            and self.ids == other.ids
            and np.array_equal(self.labels, other.labels)
            and self.level == other.level
            and self.normalized == other.normalized
            and self.class_names == other.class_names
        )


def export_embeddings(emb: EmbeddingMatrix, out_dir):
    """Write embeddings.f32 (little-endian row-major) plus JSON sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    payload = emb.rows.astype("<f4").tobytes()
    with open(os.path.join(out_dir, "embeddings.f32"), "wb") as fh:
        fh.write(payload)
    meta = {
        "count": int(emb.rows.shape[0]),
        "dim": int(emb.rows.shape[1]),
        "level": emb.level,
        "normalized": bool(emb.normalized),
        "ids": list(emb.ids),
        "labels": [int(x) for x in emb.labels],
        "class_names": list(emb.class_names),
    }
    with open(os.path.join(out_dir, "embeddings.meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    return out_dir


def import_embeddings(in_dir) -> EmbeddingMatrix:
    meta_path = os.path.join(in_dir, "embeddings.meta.json")
    if not os.path.exists(meta_path):
        raise MissingSidecar(f"{in_dir}: embeddings.meta.json not found")
    with open(meta_path) as fh:
        meta = json.load(fh)
    with open(os.path.join(in_dir, "embeddings.f32"), "rb") as fh:
        payload = fh.read()
    count, dim = meta["count"], meta["dim"]
    if len(payload) != count * dim * 4:
        raise DimensionMismatch(
            f"{in_dir}: payload holds {len(payload) // 4} floats, sidecar declares {count}x{dim}")
    rows = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)
    return EmbeddingMatrix(rows=rows, ids=meta["ids"],
                           labels=np.asarray(meta["labels"], dtype=np.int64),
                           level=meta["level"], normalized=meta["normalized"],
                           class_names=meta["class_names"])
