"""Contrastive pretraining loop and the shared SGD/schedule machinery.

Plain SGD with decoupled weight decay (weights only) and a per-epoch
exponential learning-rate schedule. Training is bit-reproducible for a fixed
(seed, config, dataset): shuffling and augmentation draw from counter-based
streams and steps execute in a fixed order.
"""

import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import losses as lossmod
from . import model as modelmod
from . import rng
from .errors import ConfigError, MissingStats, NonFiniteLoss, ShapeMismatch


@dataclass
class OptimConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    schedule_gamma: float = 0.95
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        # lr = 0 is allowed so "no update" is expressible and testable
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")
        if not 0.0 < self.schedule_gamma <= 1.0:
            raise ValueError("schedule_gamma must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)  # (epoch, mean_loss, lr, seconds)
    checkpoint_path: str = None

    def add(self, epoch, mean_loss, lr, seconds):
        self.entries.append((int(epoch), float(mean_loss), float(lr), float(seconds)))

    def to_csv(self) -> str:
        lines = ["epoch,mean_loss,lr,seconds"]
        lines += [f"{e},{l!r},{r!r},{s:.3f}" for e, l, r, s in self.entries]
        return "\n".join(lines) + "\n"

    def deterministic_csv(self) -> str:
        """The schedule-and-loss columns only; wall time is excluded."""
        lines = ["epoch,mean_loss,lr"]
        lines += [f"{e},{l!r},{r!r}" for e, l, r, _ in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_csv())


def lr_at(epoch: int, cfg: OptimConfig) -> float:
    return cfg.learning_rate * cfg.schedule_gamma ** epoch


def sgd_step(params: OrderedDict, grads: dict, lr: float, weight_decay: float) -> OrderedDict:
    """p <- p - lr * (g + wd * p); decay only touches decay-eligible weights."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        if weight_decay and modelmod.is_decay_param(name):
            g = g + p.data.dtype.type(weight_decay) * p.data
        p.data -= p.data.dtype.type(lr) * g
    return params


def _collect_grads(params: OrderedDict) -> dict:
    grads = {}
    for name, p in params.items():
        if p.grad is not None:
            grads[name] = p.grad
            p.grad = None
    return grads


def _epoch_batches(samples, labels, batch_size, seed, epoch, need_two_classes):
    """Seeded permutation chopped into full batches; degenerate single-class
    batches (possible but vanishingly rare) are re-drawn from a side stream."""
    n = len(samples)
    perm = rng.stream(seed, "perm", epoch).permutation(n)
    batches = []
    for b in range(n // batch_size):
        chunk = perm[b * batch_size:(b + 1) * batch_size]
        if need_two_classes and len({labels[i] for i in chunk}) < 2:
            redraw = rng.stream(seed, "batch-redraw", epoch, b)
            for _ in range(10):
                chunk = redraw.choice(n, size=batch_size, replace=False)
                if len({labels[i] for i in chunk}) >= 2:
                    break
            else:
                raise NonFiniteLoss("could not draw a batch with two classes")
        batches.append(chunk)
    return batches


def pretrain(manifest: datamod.DatasetManifest, encoder_cfg: modelmod.EncoderConfig,
             projection_cfg: modelmod.ProjectionConfig, loss_spec: lossmod.LossSpec,
             optim_cfg: OptimConfig, augment_cfg: datamod.AugmentConfig = None,
             log_fn=None):
    """Stage-01 optimization. Returns (params, TrainLog).

    Contrastive specs train encoder+projection on two augmented views per
    sample; 'ce' trains encoder+linear classifier end-to-end on one view.
    """
    if manifest.pixel_mean is None or manifest.pixel_std is None:
        raise MissingStats("manifest has no pixel stats; run the stats pass first")
    if (encoder_cfg.height, encoder_cfg.width) != (manifest.image_size, manifest.image_size):
        raise ConfigError(
            f"encoder expects {encoder_cfg.height}x{encoder_cfg.width} inputs but the "
            f"dataset renders {manifest.image_size}x{manifest.image_size} views")
    if augment_cfg is None:
        augment_cfg = datamod.AugmentConfig()
    augment_cfg.mean = manifest.pixel_mean
    augment_cfg.std = manifest.pixel_std

    seed = optim_cfg.seed
    params = modelmod.init_encoder_params(encoder_cfg, seed)
    if loss_spec.name == "ce":
        params.update(modelmod.init_classifier_params(
            encoder_cfg.feature_dim, len(manifest.classes), seed))
    else:
        params.update(modelmod.init_projection_params(
            projection_cfg, encoder_cfg.feature_dim, seed))

    samples = manifest.view_samples("train")
    if optim_cfg.batch_size > len(samples):
        raise ConfigError(f"batch_size {optim_cfg.batch_size} exceeds the "
                          f"{len(samples)} view-level training samples")
    sample_labels = [item.class_id for item, _ in samples]
    need_two = loss_spec.name in lossmod.SUPERVISED_CONTRASTIVE
    cache = {}
    log = TrainLog()
    step_index = 0

    for epoch in range(optim_cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, optim_cfg)
        batch_losses = []
        for chunk in _epoch_batches(samples, sample_labels, optim_cfg.batch_size,
                                    seed, epoch, need_two):
            batch = datamod.make_batch(manifest, samples, chunk, epoch, augment_cfg,
                                       seed, cache)
            if loss_spec.name == "ce":
                feats = modelmod.encoder_forward(params, encoder_cfg, ad.Tensor(batch.view_a))
                loss = lossmod.cross_entropy(modelmod.classifier_forward(params, feats),
                                             batch.labels)
            else:
                # both views share one forward pass: larger matmuls, half the tape
                stacked = np.concatenate([batch.view_a, batch.view_b], axis=0)
                feats = modelmod.encoder_forward(params, encoder_cfg, ad.Tensor(stacked))
                z = modelmod.projection_forward(params, feats)
                n = batch.view_a.shape[0]
                z_a = ad.narrow(z, 0, 0, n)
                z_b = ad.narrow(z, 0, n, 2 * n)
                loss = lossmod.apply_contrastive(loss_spec, z_a, z_b, batch.labels)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss at step {step_index}")
            ad.backward(loss)
            sgd_step(params, _collect_grads(params), lr, optim_cfg.weight_decay)
            batch_losses.append(value)
            step_index += 1
        seconds = time.perf_counter() - t0
        mean_loss = float(np.mean(batch_losses)) if batch_losses else float("nan")
        log.add(epoch, mean_loss, lr, seconds)
        if log_fn:
            log_fn(f"epoch {epoch:3d}  loss {mean_loss:.5f}  lr {lr:.3e}  {seconds:.1f}s")
    return params, log
