"""Encoders, projection head, parameter init, and checkpoint I/O.

Two encoder families: a flatten-MLP and a small vision transformer
(patch embedding + learned positions, pre-layernorm attention blocks,
mean-pooled tokens). The projection head (linear-gelu-linear, l2-normalized
output) feeds the contrastive losses only; downstream evaluation always
consumes encoder features.
"""

import json
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import rng
from .errors import MissingFile, ShapeManifestMismatch, ShapeMismatch

ENCODER_KINDS = ("mlp", "vit")


@dataclass
class EncoderConfig:
    kind: str = "vit"
    channels: int = 1
    height: int = 64
    width: int = 64
    feature_dim: int = 64
    patch_size: int = 8
    depth: int = 4
    heads: int = 4
    token_dim: int = 64
    mlp_hidden: tuple = (256, 128)

    def __post_init__(self):
        if isinstance(self.mlp_hidden, list):
            self.mlp_hidden = tuple(self.mlp_hidden)
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind '{self.kind}'")
        if self.kind == "vit":
            if self.height % self.patch_size or self.width % self.patch_size:
                raise ValueError("image size must be divisible by patch_size")
            if self.token_dim % self.heads:
                raise ValueError("heads must divide token_dim")

    @property
    def n_tokens(self):
        return (self.height // self.patch_size) * (self.width // self.patch_size)


@dataclass
class ProjectionConfig:
    hidden: int = 128
    out_dim: int = 128

    def __post_init__(self):
        if self.out_dim < 2:
            raise ValueError("projection output dim must be >= 2")


def _xavier(g, fan_in, fan_out, size, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return g.uniform(-limit, limit, size=size).astype(dtype)


def _linear(params, name, fan_in, fan_out, seed, dtype):
    g = rng.stream(seed, "init", name)
    params[f"{name}.w"] = ad.Tensor(_xavier(g, fan_in, fan_out, (fan_in, fan_out), dtype),
                                    requires_grad=True)
    params[f"{name}.b"] = ad.Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)


def _layernorm_params(params, name, dim, dtype):
    params[f"{name}.scale"] = ad.Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
    params[f"{name}.shift"] = ad.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)


def init_encoder_params(cfg: EncoderConfig, seed: int, dtype=np.float32) -> OrderedDict:
    params = OrderedDict()
    if cfg.kind == "mlp":
        fan = cfg.channels * cfg.height * cfg.width
        for i, width in enumerate(cfg.mlp_hidden):
            _linear(params, f"enc.fc{i}", fan, width, seed, dtype)
            fan = width
        _linear(params, "enc.out", fan, cfg.feature_dim, seed, dtype)
        return params

    patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size
    d = cfg.token_dim
    _linear(params, "enc.patch", patch_dim, d, seed, dtype)
    pos = rng.stream(seed, "init", "enc.pos").normal(0.0, 0.02, size=(cfg.n_tokens, d))
    params["enc.pos"] = ad.Tensor(pos.astype(dtype), requires_grad=True)
    for i in range(cfg.depth):
        blk = f"enc.blk{i}"
        _layernorm_params(params, f"{blk}.ln1", d, dtype)
        for proj in ("q", "k", "v", "o"):
            _linear(params, f"{blk}.{proj}", d, d, seed, dtype)
        _layernorm_params(params, f"{blk}.ln2", d, dtype)
        _linear(params, f"{blk}.mlp1", d, 4 * d, seed, dtype)
        _linear(params, f"{blk}.mlp2", 4 * d, d, seed, dtype)
    _layernorm_params(params, "enc.ln_out", d, dtype)
    _linear(params, "enc.head", d, cfg.feature_dim, seed, dtype)
    return params


def init_projection_params(cfg: ProjectionConfig, feature_dim: int, seed: int,
                           dtype=np.float32) -> OrderedDict:
    params = OrderedDict()
    _linear(params, "proj.fc1", feature_dim, cfg.hidden, seed, dtype)
    _linear(params, "proj.fc2", cfg.hidden, cfg.out_dim, seed, dtype)
    return params


def init_classifier_params(feature_dim: int, n_classes: int, seed: int,
                           dtype=np.float32) -> OrderedDict:
    params = OrderedDict()
    _linear(params, "cls", feature_dim, n_classes, seed, dtype)
    return params


def is_decay_param(name: str) -> bool:
    """Weight decay applies to linear weights only, never biases/norms/positions."""
    return name.endswith(".w")


def _dense(params, name, x):
    return ad.affine(x, params[f"{name}.w"], params[f"{name}.b"])


def encoder_forward(params: OrderedDict, cfg: EncoderConfig, x: ad.Tensor) -> ad.Tensor:
    """Map a (B, C, H, W) batch to (B, feature_dim) features."""
    b, c, h, w = x.data.shape
    if (c, h, w) != (cfg.channels, cfg.height, cfg.width):
        raise ShapeMismatch(f"input {x.data.shape} does not match encoder config "
                            f"({cfg.channels}, {cfg.height}, {cfg.width})")
    if cfg.kind == "mlp":
        t = ad.reshape(x, (b, c * h * w))
        for i in range(len(cfg.mlp_hidden)):
            t = ad.gelu(_dense(params, f"enc.fc{i}", t))
        return _dense(params, "enc.out", t)

    ps = cfg.patch_size
    gh, gw = h // ps, w // ps
    n_tok = gh * gw
    d = cfg.token_dim
    nh = cfg.heads
    dh = d // nh

    t = ad.reshape(x, (b, c, gh, ps, gw, ps))
    t = ad.transpose(t, (0, 2, 4, 1, 3, 5))
    patches = ad.reshape(t, (b, n_tok, c * ps * ps))
    tok = ad.add(_dense(params, "enc.patch", patches), params["enc.pos"])

    for i in range(cfg.depth):
        blk = f"enc.blk{i}"
        hn = ad.layernorm(tok, params[f"{blk}.ln1.scale"], params[f"{blk}.ln1.shift"])

        def heads_split(t2d):
            return ad.transpose(ad.reshape(t2d, (b, n_tok, nh, dh)), (0, 2, 1, 3))

        q = heads_split(_dense(params, f"{blk}.q", hn))
        k = heads_split(_dense(params, f"{blk}.k", hn))
        v = heads_split(_dense(params, f"{blk}.v", hn))
        att = ad.mul_scalar(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = ad.softmax(att, axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, n_tok, d))
        tok = ad.add(tok, _dense(params, f"{blk}.o", ctx))

        hn2 = ad.layernorm(tok, params[f"{blk}.ln2.scale"], params[f"{blk}.ln2.shift"])
        m = _dense(params, f"{blk}.mlp2", ad.gelu(_dense(params, f"{blk}.mlp1", hn2)))
        tok = ad.add(tok, m)

    pooled = ad.tmean(tok, axis=1)
    pooled = ad.layernorm(pooled, params["enc.ln_out.scale"], params["enc.ln_out.shift"])
    return _dense(params, "enc.head", pooled)


def projection_forward(params: OrderedDict, features: ad.Tensor) -> ad.Tensor:
    """linear -> gelu -> linear -> l2_normalize; rows come out unit-norm."""
    t = ad.gelu(_dense(params, "proj.fc1", features))
    return ad.l2_normalize(_dense(params, "proj.fc2", t), axis=1)


def classifier_forward(params: OrderedDict, features: ad.Tensor) -> ad.Tensor:
    return _dense(params, "cls", features)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(run_dir, params: OrderedDict, encoder_cfg: EncoderConfig,
                    projection_cfg: ProjectionConfig = None, metadata: dict = None):
    """Write params.f32 (concatenated little-endian buffers) + params.meta.json."""
    os.makedirs(run_dir, exist_ok=True)
    names = list(params.keys())
    with open(os.path.join(run_dir, "params.f32"), "wb") as fh:
        for name in names:
            fh.write(params[name].data.astype("<f4").tobytes())
    meta = {
        "names": names,
        "shapes": {n: list(params[n].data.shape) for n in names},
        "encoder": asdict(encoder_cfg),
        "projection": asdict(projection_cfg) if projection_cfg else None,
        "metadata": metadata or {},
    }
    with open(os.path.join(run_dir, "params.meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    return run_dir


def load_checkpoint(run_dir, dtype=np.float32):
    """Inverse of save_checkpoint; float32 payloads round-trip exactly."""
    meta_path = os.path.join(run_dir, "params.meta.json")
    bin_path = os.path.join(run_dir, "params.f32")
    if not os.path.exists(meta_path) or not os.path.exists(bin_path):
        raise MissingFile(f"{run_dir}: params.meta.json / params.f32 not found")
    with open(meta_path) as fh:
        meta = json.load(fh)
    with open(bin_path, "rb") as fh:
        payload = fh.read()
    expected = sum(int(np.prod(meta["shapes"][n])) for n in meta["names"]) * 4
    if len(payload) != expected:
        raise ShapeManifestMismatch(
            f"{run_dir}: payload is {len(payload)} bytes, manifest declares {expected}")
    params = OrderedDict()
    offset = 0
    for name in meta["names"]:
        shape = tuple(meta["shapes"][name])
        n_bytes = int(np.prod(shape)) * 4
        arr = np.frombuffer(payload[offset:offset + n_bytes], dtype="<f4").reshape(shape)
        params[name] = ad.Tensor(arr.astype(dtype), requires_grad=True)
        offset += n_bytes
    meta["encoder"] = EncoderConfig(**meta["encoder"])
    if meta["projection"]:
        meta["projection"] = ProjectionConfig(**meta["projection"])
    return params, meta
