"""Command-line entry point: ``psm <subcommand> ...``.

Options shared by the pipeline stages are resolved as flags > ``--config``
file > defaults. The default seed comes from the ``PSM_SEED`` environment
variable. Exit status is 0 only when every requested stage succeeds.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from psm import pipeline
from psm.config import default_seed, load_config
from psm.networks import load_checkpoint
from psm.render import render
from psm.synth import SynthConfig, generate_dataset, load_image

# flags that map one-to-one onto PipelineConfig fields
CONFIG_FLAGS = {
    "proxy_task": str, "depth": int, "beta": float, "lam": float, "k": int, "seed": int,
    "proxy_epochs": int, "proxy_lr": float, "train_epochs": int, "lr": float, "batch_size": int,
    "width": int, "z_reduce": str, "fg_rule": str, "middle": str, "cluster_scope": str,
    "psm_smooth": float, "n_init": int, "max_pixels": int, "seed_disk_radius": float,
    "window_radius": int, "min_score": float, "smooth_sigma": float, "threshold": float,
    "min_area": int, "match_radius": float, "n_classes": int,
}


def _add_config_flags(p, task=True, skip=()):
    p.add_argument("--config", help="key = value configuration file")
    if task:
        p.add_argument("--task", choices=["seg", "det"])
    for name, kind in CONFIG_FLAGS.items():
        if name in skip:
            continue
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None)


def _config(args, task=None, **extra):
    flags = {k: getattr(args, k, None) for k in CONFIG_FLAGS}
    flags.update(extra)
    return load_config(args.config, task or getattr(args, "task", None), **flags)


def images_dir(path):
    """Accept either a dataset root (with ``images/``) or an image directory."""
    path = Path(path)
    return path / "images" if (path / "images").is_dir() else path


def cmd_synth(args):
    cfg = SynthConfig(size=args.size, seed=args.seed if args.seed is not None else default_seed(),
                      positive_fraction=args.positive_fraction)
    manifest = generate_dataset(cfg, args.n, args.out)
    print(manifest)


def cmd_train_proxy(args):
    cfg = _config(args)
    curve = pipeline.stage_train_proxy(images_dir(args.data), args.out, cfg)
    print(json.dumps({"loss": curve}))


def cmd_psm(args):
    cfg = _config(args)
    n = pipeline.stage_psm(args.ckpt, images_dir(args.data), args.out, cfg)
    print(f"{n} maps written to {args.out}")


def cmd_cluster(args):
    cfg = _config(args)
    print(json.dumps(pipeline.stage_cluster(images_dir(args.data), args.psm, args.out, cfg)))


def cmd_voronoi(args):
    cfg = _config(args)
    print(json.dumps(pipeline.stage_voronoi(args.masks, args.out, cfg)))


def cmd_train_seg(args):
    cfg = _config(args, task="seg")
    curve = pipeline.stage_train_seg(images_dir(args.data), args.voronoi, args.masks, args.out, cfg)
    print(json.dumps({"loss": curve}))


def cmd_train_det(args):
    cfg = _config(args, task="det")
    curve = pipeline.stage_train_det(images_dir(args.data), args.masks, args.out, cfg)
    print(json.dumps({"loss": curve}))


def cmd_infer(args):
    cfg = _config(args)
    src = Path(args.inp)
    if src.is_dir():
        n = pipeline.stage_infer(args.ckpt, images_dir(src), args.out, cfg)
        print(f"{n} predictions written to {args.out}")
        return
    net = load_checkpoint(args.ckpt)
    image = load_image(src).transpose(2, 0, 1).astype(np.float32)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pipeline.write_prediction(out, pipeline.infer_one(net, image, cfg), cfg.task)


def cmd_eval(args):
    summary = pipeline.stage_eval(args.pred, args.gt, args.out, args.task, args.radius)
    print(json.dumps(summary, sort_keys=True))


def cmd_ablate(args):
    cfg = _config(args)
    if args.what == "depth":
        depths = [int(d) for d in args.depths.split(",")]
        rows = pipeline.ablate_depth(cfg, args.data, args.out, depths)
    else:
        rows = pipeline.ablate_proxy(cfg, args.data, args.out)
    print(json.dumps(pipeline.summarize_ablation(rows, "aji" if cfg.task == "seg" else "det_f1")))


def cmd_render(args):
    render(args.artifact, args.kind, args.base, args.out)


def cmd_run(args):
    cfg = _config(args, evaluate=False if args.no_eval else None)
    report = pipeline.run_pipeline(cfg, args.data, args.out, proxy_ckpt=args.proxy_ckpt)
    print(json.dumps({"metrics": report["metrics"], "timings": report["timings"]}, sort_keys=True))


def build_parser():
    ap = argparse.ArgumentParser(prog="psm", description="Unsupervised cell segmentation and detection.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int)
    p.add_argument("--positive-fraction", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-proxy", help="train the activation network on a proxy task")
    _add_config_flags(p, task=False, skip=("proxy_task", "proxy_epochs", "proxy_lr", "lr"))
    p.add_argument("--task", dest="proxy_task", choices=["similarity", "contrastive"])
    p.add_argument("--epochs", dest="proxy_epochs", type=int)
    p.add_argument("--lr", dest="proxy_lr", type=float)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_proxy)

    p = sub.add_parser("psm", help="compute self-activation maps")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_psm)

    p = sub.add_parser("cluster", help="fuse maps with the image and cluster into pseudo masks")
    _add_config_flags(p)
    p.add_argument("--psm", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_cluster)

    p = sub.add_parser("voronoi", help="Voronoi label maps from pseudo masks")
    _add_config_flags(p)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_voronoi)

    p = sub.add_parser("train-seg", help="train the segmentation network")
    _add_config_flags(p, task=False, skip=("train_epochs",))
    p.add_argument("--data", required=True)
    p.add_argument("--voronoi", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--epochs", dest="train_epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_seg)

    p = sub.add_parser("train-det", help="train the detection network")
    _add_config_flags(p, task=False, skip=("train_epochs",))
    p.add_argument("--data", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--epochs", dest="train_epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_det)

    p = sub.add_parser("infer", help="predict instance masks or points")
    _add_config_flags(p)
    p.add_argument("--in", dest="inp", required=True, help="image file or directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--task", choices=["seg", "det"], required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--radius", type=float, default=6.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="depth or proxy-task ablation table")
    p.add_argument("what", choices=["depth", "proxy"])
    _add_config_flags(p)
    p.add_argument("--depths", default="1,2,3,4")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("render", help="overlay an artifact on its base image")
    p.add_argument("--kind", choices=["psm", "mask", "voronoi", "points"], required=True)
    p.add_argument("--artifact", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("run", help="full pipeline: proxy -> psm -> cluster -> train -> infer -> eval")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--proxy-ckpt", help="reuse a trained activation network")
    p.add_argument("--no-eval", action="store_true", help="skip evaluation (no ground truth is read)")
    p.set_defaults(fn=cmd_run)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except pipeline.StageError as exc:
        print(f"psm: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"psm {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
