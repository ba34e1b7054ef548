"""Command-line entry point binding the full pipeline.

Subcommands: synth, render, stats, pretrain, embed, probe, knn, retrieve,
gradcheck, verify. Every command is a pure function of (inputs, config, seed):
identical invocations produce identical artifacts. Exit codes: 0 success,
1 validation/config error, 2 runtime failure.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import data as datamod
from . import evaluate as evalmod
from . import geometry
from . import losses as lossmod
from . import model as modelmod
from . import renderer
from . import train as trainmod
from . import verification
from .errors import ConfigError, MissingStats, ValidationError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


# ---------------------------------------------------------------------------
# run configuration

_CONFIG_SECTIONS = ("seed", "dataset", "encoder", "projection", "loss", "optim",
                    "augment", "eval")
_DATASET_KEYS = ("root", "n_views", "image_size")
_EVAL_KEYS = ("k", "map_at", "level")


class RunConfig:
    """Resolved configuration for one run; unknown JSON keys are a hard error."""

    def __init__(self, doc: dict):
        for key in doc:
            if key not in _CONFIG_SECTIONS:
                raise ConfigError(f"unknown config key '{key}'")
        self.seed = int(doc.get("seed", 0))
        self.dataset = dict(doc.get("dataset", {}))
        for key in self.dataset:
            if key not in _DATASET_KEYS:
                raise ConfigError(f"unknown dataset key '{key}'")
        try:
            self.encoder = modelmod.EncoderConfig(**doc.get("encoder", {}))
            self.projection = modelmod.ProjectionConfig(**doc.get("projection", {}))
            self.loss = lossmod.LossSpec(**{"name": "supcon", **doc.get("loss", {})})
            optim = dict(doc.get("optim", {}))
            optim["seed"] = self.seed  # all randomness flows from the top-level seed
            self.optim = trainmod.OptimConfig(**optim)
            self.augment = datamod.AugmentConfig(**doc.get("augment", {}))
        except TypeError as e:
            raise ConfigError(f"bad config field: {e}") from e
        evalsec = dict(doc.get("eval", {}))
        for key in evalsec:
            if key not in _EVAL_KEYS:
                raise ConfigError(f"unknown eval key '{key}'")
        self.eval_k = int(evalsec.get("k", 10))
        self.eval_map_at = int(evalsec.get("map_at", 10))
        self.eval_level = evalsec.get("level", "shape")
        if self.eval_level not in ("view", "shape"):
            raise ConfigError(f"eval.level must be view|shape, got '{self.eval_level}'")

    def to_dict(self):
        return {
            "seed": self.seed,
            "dataset": self.dataset,
            "encoder": asdict(self.encoder),
            "projection": asdict(self.projection),
            "loss": asdict(self.loss),
            "optim": asdict(self.optim),
            "augment": asdict(self.augment),
            "eval": {"k": self.eval_k, "map_at": self.eval_map_at, "level": self.eval_level},
        }


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig(json.load(fh))


def _load_manifest_for(root):
    manifest = datamod.load_or_build_manifest(root)
    return manifest


# ---------------------------------------------------------------------------
# subcommand handlers

def _cmd_synth(args):
    geometry.synth_corpus(args.out, n_classes=args.classes, per_class=args.per_class,
                          seed=args.seed, segments=args.segments)
    print(f"wrote {args.classes * args.per_class} meshes under {args.out}")
    return 0


def _cmd_render(args):
    params = renderer.RenderParams(image_size=args.size, n_views=args.views,
                                   elevation=args.elevation, distance=args.distance,
                                   background=args.background, supersample=args.supersample)
    n = renderer.render_corpus(args.meshes, args.out, params, workers=args.workers)
    print(f"rendered {n} shapes x {args.views} views into {args.out}")
    return 0


def _cmd_stats(args):
    manifest = datamod.build_manifest(args.data)
    datamod.compute_stats(manifest)
    path = datamod.save_manifest(manifest)
    print(f"pixel_mean={manifest.pixel_mean!r} pixel_std={manifest.pixel_std!r}")
    print(f"manifest written to {path}")
    return 0


def _cmd_pretrain(args):
    cfg = load_run_config(args.config)
    manifest = _load_manifest_for(args.data)
    if manifest.pixel_mean is None:
        raise MissingStats(f"{args.data}: run `mvshape stats --data {args.data}` first")
    if cfg.dataset.get("n_views") not in (None, manifest.n_views):
        raise ConfigError(f"config expects {cfg.dataset['n_views']} views, "
                          f"dataset has {manifest.n_views}")
    if cfg.dataset.get("image_size") not in (None, manifest.image_size):
        raise ConfigError(f"config expects {cfg.dataset['image_size']}px views, "
                          f"dataset has {manifest.image_size}px")
    root = cfg.dataset.get("root")
    if root and os.path.abspath(root) != os.path.abspath(args.data):
        raise ConfigError(f"config dataset.root {root!r} does not match --data {args.data!r}")
    os.makedirs(args.out, exist_ok=True)
    lock = os.path.join(args.out, "lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.close(fd)
    except FileExistsError:
        raise ValidationError(f"{args.out} is locked by another run (remove {lock})")
    try:
        params, log = trainmod.pretrain(
            manifest, cfg.encoder, cfg.projection, cfg.loss, cfg.optim, cfg.augment,
            log_fn=lambda msg: print(msg, flush=True))
        with open(os.path.join(args.out, "config.json"), "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=1)
        log.save(os.path.join(args.out, "train_log.csv"))
        modelmod.save_checkpoint(
            args.out, params, cfg.encoder,
            None if cfg.loss.name == "ce" else cfg.projection,
            metadata={"loss": cfg.loss.name, "epochs": cfg.optim.epochs, "seed": cfg.seed,
                      "classes": manifest.classes})
    finally:
        os.unlink(lock)
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_embed(args):
    params, meta = modelmod.load_checkpoint(args.ckpt)
    manifest = _load_manifest_for(args.data)
    emb = evalmod.compute_embeddings(params, meta["encoder"], manifest,
                                     split=args.split, level=args.level)
    datamod.export_embeddings(emb, args.out)
    print(f"{emb.rows.shape[0]} x {emb.rows.shape[1]} {args.level}-level embeddings -> {args.out}")
    return 0


def _cmd_probe(args):
    params, meta = modelmod.load_checkpoint(args.ckpt)
    cfg_path = os.path.join(args.ckpt, "config.json")
    level, seed = "shape", 0
    if os.path.exists(cfg_path):
        cfg = load_run_config(cfg_path)
        level, seed = cfg.eval_level, cfg.seed
    manifest = _load_manifest_for(args.data)
    train_emb = evalmod.compute_embeddings(params, meta["encoder"], manifest, "train", level)
    test_emb = evalmod.compute_embeddings(params, meta["encoder"], manifest, "test", level)
    probe_cfg = trainmod.OptimConfig(learning_rate=0.5, weight_decay=1e-4,
                                     schedule_gamma=0.95, epochs=100, batch_size=64, seed=seed)
    report = evalmod.linear_probe(train_emb, test_emb, probe_cfg,
                                  n_classes=len(manifest.classes))
    sys.stdout.write(report.to_kv_block())
    with open(os.path.join(args.ckpt, "metrics.json"), "w") as fh:
        fh.write(report.to_json())
    return 0


def _cmd_knn(args):
    corpus = datamod.import_embeddings(args.corpus)
    queries = datamod.import_embeddings(args.queries)
    report = evalmod.knn_report(corpus, queries, k=args.k)
    sys.stdout.write(report.to_kv_block())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json())
    return 0


def _cmd_retrieve(args):
    corpus = datamod.import_embeddings(args.corpus)
    queries = datamod.import_embeddings(args.queries)
    dump = None
    if args.dump_rankings:
        dump = open(args.dump_rankings, "w", newline="\n")
        dump.write("query_id,rank,corpus_id,similarity,relevant\n")
    try:
        report = evalmod.retrieval_report(corpus, queries, map_at=args.map_at, dump=dump)
    finally:
        if dump:
            dump.close()
    sys.stdout.write(report.to_kv_block())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json())
    return 0


def _cmd_gradcheck(args):
    names = lossmod.LOSS_NAMES if args.loss == "all" else (args.loss,)
    for name in names:
        if name not in lossmod.LOSS_NAMES:
            raise ValidationError(f"unknown loss '{name}'")
    rows = verification.gradcheck_table(names, seeds=(args.seed,))
    failed = 0
    for name, kind, seed, err, ok in rows:
        status = "PASS" if ok else "FAIL"
        print(f"{name:>15s} + {kind:<3s} seed={seed}: {status} max_rel_err={err:.3e}")
        failed += 0 if ok else 1
    return 0 if failed == 0 else 2


def _cmd_verify(args):
    checks = verification.run_invariant_suite(seed=args.seed)
    failed = 0
    for name, ok, detail in checks:
        status = "PASS" if ok else "FAIL"
        suffix = f" ({detail})" if detail else ""
        print(f"{status}: {name}{suffix}")
        failed += 0 if ok else 1
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 0 if failed == 0 else 2


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="mvshape",
                     description="multi-view shape representation learning pipeline")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a labeled synthetic OFF corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--per-class", type=int, default=75)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--segments", type=int, default=24)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("render", help="render meshes into multi-view PPM images")
    p.add_argument("--meshes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--elevation", type=float, default=30.0)
    p.add_argument("--distance", type=float, default=2.5)
    p.add_argument("--supersample", type=int, default=2)
    p.add_argument("--background", type=float, default=0.0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=_cmd_render)

    p = sub.add_parser("stats", help="compute pixel stats and write the manifest")
    p.add_argument("--data", required=True)
    p.set_defaults(fn=_cmd_stats)

    p = sub.add_parser("pretrain", help="stage-01 contrastive pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("embed", help="export frozen embeddings for a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), required=True)
    p.add_argument("--level", choices=("view", "shape"), default="shape")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_embed)

    p = sub.add_parser("probe", help="linear evaluation on frozen embeddings")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=_cmd_probe)

    p = sub.add_parser("knn", help="k-NN classification over embeddings")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_knn)

    p = sub.add_parser("retrieve", help="cosine retrieval with mAP evaluation")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--map-at", type=int, default=10)
    p.add_argument("--dump-rankings")
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_retrieve)

    p = sub.add_parser("gradcheck", help="finite-difference check of loss gradients")
    p.add_argument("--loss", default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("verify", help="run the invariant self-check suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "fn", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (ValidationError, ValueError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    except (OSError, json.JSONDecodeError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    except Exception as e:  # genuine runtime failure
        sys.stderr.write(f"runtime failure: {type(e).__name__}: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
