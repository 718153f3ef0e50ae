"""End-to-end unsupervised pipeline.

Stages, each reading only raw images or artifacts of earlier stages::

    train-proxy -> psm -> cluster -> voronoi -> train-seg | train-det -> infer -> eval

Every stage takes explicit paths so it can be run (and tested) alone.
Ground truth is read only by ``stage_eval``; all file reads go through
``AUDIT`` so tests can verify that.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from pathlib import Path

import numpy as np
from PIL import Image

from psm import downstream, metrics, scm
from psm.config import PipelineConfig
from psm.networks import ActivationNet, ScoreNet, load_checkpoint, save_checkpoint
from psm.proxy import ProxyConfig, train_proxy
from psm.synth import load_label_png, read_points_csv, save_label_png, write_points_csv
from psm.tensor import load_psmt, save_psmt

log = logging.getLogger(__name__)

REPORT_SCHEMA = "psm-report/1"
SEG_HEADER = ["image", "pixel_iou", "pixel_f1", "dice_obj", "aji"]
DET_HEADER = ["image", "tp", "fp", "fn", "precision", "recall", "f1", "count_err_pos", "count_err_neg"]
ABLATION_HEADER = ["setting", "value", "pixel_f1", "aji", "det_f1"]


class StageError(RuntimeError):
    def __init__(self, stage, paths, cause):
        super().__init__(f"stage {stage!r} failed: {cause} (artifacts kept: {', '.join(map(str, paths))})")
        self.stage = stage
        self.paths = paths


class ReadAudit:
    """Records every path the pipeline reads."""

    def __init__(self):
        self.paths = []

    def note(self, path):
        self.paths.append(str(path))
        return path

    def clear(self):
        self.paths.clear()


AUDIT = ReadAudit()


def _read_image(path):
    AUDIT.note(path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def _read_labels(path):
    return load_label_png(AUDIT.note(path))


def image_paths(images_dir):
    paths = sorted(Path(images_dir).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG images in {images_dir}")
    return paths


def load_images(images_dir):
    """Names and a [N,3,H,W] float32 stack of the PNG images in a directory."""
    paths = image_paths(images_dir)
    stack = np.stack([_read_image(p).transpose(2, 0, 1) for p in paths])
    return [p.stem for p in paths], stack


def _write_csv(path, header, rows, schema=None):
    buf = io.StringIO()
    if schema:
        buf.write(f"# schema: {schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])
    Path(path).write_text(buf.getvalue())


def _write_curve(path, curve):
    _write_csv(path, ["epoch", "loss"], [(i + 1, float(v)) for i, v in enumerate(curve)])


# -- stages ------------------------------------------------------------------


def stage_train_proxy(images_dir, out_ckpt, cfg: PipelineConfig):
    _, images = load_images(images_dir)
    net = ActivationNet(seed=cfg.seed)
    curve = train_proxy(net, list(images), ProxyConfig(cfg.proxy_task, cfg.proxy_epochs, cfg.proxy_lr, cfg.seed))
    save_checkpoint(net, out_ckpt)
    _write_curve(Path(out_ckpt) / "loss.csv", curve)
    return curve


def extract_psm(net, image, depth, reduce="sum"):
    """Gradient-weighted activation map of one CHW image at the given tap depth."""
    net.eval()
    net.zero_grad()
    z, feats = net.forward_with_taps(image[None], depth, reduce)
    z.backward()
    alpha = scm.compute_alpha(feats.grad)
    return scm.compute_psm(feats.data, alpha, image.shape[1:])


def stage_psm(ckpt, images_dir, out_dir, cfg: PipelineConfig):
    net = load_checkpoint(AUDIT.note(ckpt))
    names, images = load_images(images_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in zip(names, images):
        save_psmt(out / f"{name}.psmt", extract_psm(net, img, cfg.depth, cfg.z_reduce).astype(np.float32))
    return len(names)


def stage_cluster(images_dir, psm_dir, out_dir, cfg: PipelineConfig):
    names, images = load_images(images_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = "seg" if cfg.task == "seg" else "det"
    fused = []
    for name, img in zip(names, images):
        psm = scm.smooth(load_psmt(AUDIT.note(Path(psm_dir) / f"{name}.psmt")), cfg.psm_smooth)
        fused.append(scm.fuse(psm, img, cfg.beta))
    if cfg.cluster_scope == "dataset":
        masks, ok = scm.cluster_dataset(fused, cfg.k, cfg.seed, cfg.max_pixels, task, cfg.fg_rule, cfg.middle,
                                       cfg.n_init)
        degenerate = 0 if ok else len(names)
    else:
        masks, degenerate = [], 0
        for i, f in enumerate(fused):
            labels, _ = scm.cluster_pixels(f, cfg.k, seed=cfg.seed + i, max_pixels=cfg.max_pixels, n_init=cfg.n_init)
            mask, ok = scm.clusters_to_mask(labels, f, task, cfg.fg_rule, cfg.middle)
            masks.append(mask)
            degenerate += not ok
    for name, mask in zip(names, masks):
        save_label_png(out / f"{name}.png", mask)
    return {"images": len(names), "degenerate": degenerate}


def stage_voronoi(mask_dir, out_dir, cfg: PipelineConfig):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    empty = 0
    for p in sorted(Path(mask_dir).glob("*.png")):
        mask = _read_labels(p)
        fg = (mask > 0) & (mask != scm.IGNORE)
        labels, seeds, ok = scm.voronoi_labels(fg.astype(np.uint8), cfg.seed_disk_radius)
        empty += not ok
        save_label_png(out / p.name, labels)
        write_points_csv(out / f"{p.stem}_seeds.csv", [(round(r), round(c), 1) for r, c in seeds])
    return {"empty": empty}


def _load_label_dir(names, directory):
    return np.stack([_read_labels(Path(directory) / f"{n}.png") for n in names])


def stage_train_seg(images_dir, vor_dir, mask_dir, out_ckpt, cfg: PipelineConfig):
    names, images = load_images(images_dir)
    vors = _load_label_dir(names, vor_dir)
    sgs = _load_label_dir(names, mask_dir)
    net = ScoreNet(1, cfg.width, seed=cfg.seed)
    curve = downstream.train_segmentation(
        net, images, vors, sgs, downstream.TrainConfig(cfg.train_epochs, cfg.lr, cfg.batch_size, cfg.seed, cfg.lam))
    save_checkpoint(net, out_ckpt)
    _write_curve(Path(out_ckpt) / "loss.csv", curve)
    return curve


def stage_train_det(images_dir, mask_dir, out_ckpt, cfg: PipelineConfig):
    names, images = load_images(images_dir)
    masks = _load_label_dir(names, mask_dir)
    net = ScoreNet(cfg.n_classes, cfg.width, seed=cfg.seed)
    curve = downstream.train_detection(
        net, images, masks, downstream.TrainConfig(cfg.train_epochs, cfg.lr, cfg.batch_size, cfg.seed, cfg.lam))
    save_checkpoint(net, out_ckpt)
    _write_curve(Path(out_ckpt) / "loss.csv", curve)
    return curve


def infer_one(net, image, cfg: PipelineConfig):
    """Instance mask (seg) or point list (det) for one CHW image."""
    score = downstream.predict(net, image[None])[0]
    if cfg.task == "seg":
        return downstream.segment_infer(score[0], cfg.threshold, cfg.min_area)
    return downstream.detect_points(score, cfg.window_radius, cfg.min_score, cfg.smooth_sigma)


def write_prediction(out_path, pred, task):
    if task == "seg":
        save_label_png(out_path.with_suffix(".png"), pred, bits=16)
    else:
        write_points_csv(out_path.with_suffix(".csv"), pred)


def stage_infer(ckpt, images_dir, out_dir, cfg: PipelineConfig):
    net = load_checkpoint(AUDIT.note(ckpt))
    names, images = load_images(images_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in zip(names, images):
        write_prediction(out / name, infer_one(net, img, cfg), cfg.task)
    return len(names)


def evaluate_seg(pred_dir, gt_dir):
    rows, counts, dices, ajis = [], np.zeros(3, np.int64), [], []
    for p in sorted(Path(pred_dir).glob("*.png")):
        pred = _read_labels(p)
        gt = _read_labels(Path(gt_dir) / p.name)
        c = metrics.pixel_counts(pred > 0, gt > 0)
        counts += c
        iou, f1 = metrics.iou_f1_from_counts(*c)
        d, a = metrics.dice_object(pred, gt), metrics.aji(pred, gt)
        dices.append(d)
        ajis.append(a)
        rows.append([p.stem, iou, f1, d, a])
    if not rows:
        raise FileNotFoundError(f"no predicted instance masks in {pred_dir}")
    iou, f1 = metrics.iou_f1_from_counts(*counts)
    summary = {"pixel_iou": iou, "pixel_f1": f1, "dice_obj": float(np.mean(dices)), "aji": float(np.mean(ajis))}
    rows.append(["ALL", iou, f1, summary["dice_obj"], summary["aji"]])
    return rows, summary


def evaluate_det(pred_dir, gt_dir, radius):
    rows, tot, preds, gts = [], np.zeros(3, np.int64), [], []
    greedy_short = 0
    for p in sorted(Path(pred_dir).glob("*.csv")):
        pred = read_points_csv(AUDIT.note(p))
        gt = read_points_csv(AUDIT.note(Path(gt_dir) / p.name))
        res, prec, rec, f1 = metrics.match_points(pred, gt, radius)
        # tracked statistic: images where greedy matching misses the optimal TP count
        greedy_short += res.tp < metrics.match_points(pred, gt, radius, optimal=True)[0].tp
        tot += (res.tp, res.fp, res.fn)
        mp, mn = metrics.counting_errors([pred], [gt])
        preds.append(pred)
        gts.append(gt)
        rows.append([p.stem, res.tp, res.fp, res.fn, prec, rec, f1, mp, mn])
    if not rows:
        raise FileNotFoundError(f"no predicted point files in {pred_dir}")
    prec, rec, f1 = metrics.prf_from_counts(*tot)
    mp, mn = metrics.counting_errors(preds, gts)
    summary = {"precision": prec, "recall": rec, "det_f1": f1, "mp": mp, "mn": mn,
               "greedy_suboptimal_images": int(greedy_short)}
    rows.append(["ALL", int(tot[0]), int(tot[1]), int(tot[2]), prec, rec, f1, mp, mn])
    return rows, summary


def stage_eval(pred_dir, gt_dir, out_csv, task, radius=6.0):
    """Per-image metrics plus an ``ALL`` aggregate row written to ``out_csv``."""
    if task == "seg":
        rows, summary = evaluate_seg(pred_dir, gt_dir)
        _write_csv(out_csv, SEG_HEADER, rows, schema="psm-eval-seg/1")
    else:
        rows, summary = evaluate_det(pred_dir, gt_dir, radius)
        _write_csv(out_csv, DET_HEADER, rows, schema="psm-eval-det/1")
    return summary


# -- orchestration -----------------------------------------------------------


def _stage(name, report, timings, paths, fn, *args):
    log.info("stage %s", name)
    t0 = time.perf_counter()
    try:
        result = fn(*args)
    except Exception as exc:
        raise StageError(name, paths, exc) from exc
    timings[name] = round(time.perf_counter() - t0, 3)
    report["stages"].append(name)
    return result


def run_pipeline(cfg: PipelineConfig, data_dir, out_dir, proxy_ckpt=None):
    """Run every stage; returns the report dict (also written as ``report.json``).

    ``proxy_ckpt`` reuses an existing activation-network checkpoint and
    skips proxy training.
    """
    data, out = Path(data_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    images = data / "images"
    report = {"schema": REPORT_SCHEMA, "task": cfg.task, "stages": [], "losses": {}, "metrics": {}}
    timings = {}
    ckpt = out / "proxy"
    if proxy_ckpt is None:
        report["losses"]["proxy"] = _stage("train-proxy", report, timings, [ckpt], stage_train_proxy, images, ckpt, cfg)
    else:
        ckpt = Path(proxy_ckpt)
    _stage("psm", report, timings, [out / "psm"], stage_psm, ckpt, images, out / "psm", cfg)
    report["cluster"] = _stage("cluster", report, timings, [out / "masks"], stage_cluster,
                               images, out / "psm", out / "masks", cfg)
    if cfg.task == "seg":
        report["voronoi"] = _stage("voronoi", report, timings, [out / "voronoi"], stage_voronoi,
                                   out / "masks", out / "voronoi", cfg)
        report["losses"]["seg"] = _stage("train-seg", report, timings, [out / "seg"], stage_train_seg,
                                         images, out / "voronoi", out / "masks", out / "seg", cfg)
        net_dir = out / "seg"
    else:
        report["losses"]["det"] = _stage("train-det", report, timings, [out / "det"], stage_train_det,
                                         images, out / "masks", out / "det", cfg)
        net_dir = out / "det"
    _stage("infer", report, timings, [out / "pred"], stage_infer, net_dir, images, out / "pred", cfg)
    if cfg.evaluate:
        gt = data / "gt" / ("instances" if cfg.task == "seg" else "points")
        report["metrics"] = _stage("eval", report, timings, [out / "eval.csv"], stage_eval,
                                   out / "pred", gt, out / "eval.csv", cfg.task, cfg.match_radius)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    report["timings"] = timings
    return report


def _metric_row(setting, value, m):
    return [setting, value, m.get("pixel_f1", ""), m.get("aji", ""), m.get("det_f1", "")]


def ablate_depth(cfg: PipelineConfig, data_dir, out_dir, depths=(1, 2, 3, 4)):
    """Vary only the tap depth; the proxy checkpoint is trained once and shared."""
    depths = list(depths)
    if len(depths) < 2:
        raise ValueError("depth ablation needs at least two depths")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "proxy"
    stage_train_proxy(Path(data_dir) / "images", ckpt, cfg)
    rows = []
    for d in depths:
        rep = run_pipeline(cfg.replace(depth=d), data_dir, out / f"depth{d}", proxy_ckpt=ckpt)
        rows.append(_metric_row("depth", d, rep["metrics"]))
    _write_csv(out / "ablate_depth.csv", ABLATION_HEADER, rows, schema="psm-ablation/1")
    return rows


def ablate_proxy(cfg: PipelineConfig, data_dir, out_dir, tasks=("similarity", "contrastive")):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for t in tasks:
        rep = run_pipeline(cfg.replace(proxy_task=t), data_dir, out / t)
        rows.append(_metric_row("proxy", t, rep["metrics"]))
    _write_csv(out / "ablate_proxy.csv", ABLATION_HEADER, rows, schema="psm-ablation/1")
    return rows


def summarize_ablation(rows, metric="aji"):
    """Which setting wins on ``metric`` (rows as produced by the ablations)."""
    col = ABLATION_HEADER.index(metric)
    scored = [(r[col], r[1]) for r in rows if r[col] != ""]
    best = max(scored)[1] if scored else None
    return {"metric": metric, "values": {str(r[1]): r[col] for r in rows}, "winner": best}
