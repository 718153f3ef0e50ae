import csv
import json
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from psm import pipeline
from psm.cli import main
from psm.config import PipelineConfig, load_config, parse_config_text
from psm.render import RED, render
from psm.synth import SynthConfig, generate_dataset, write_points_csv
from psm.tensor import ShapeError, save_psmt

ROOT = Path(__file__).resolve().parents[1]


def tiny(**kw):
    base = dict(seed=0, proxy_epochs=1, train_epochs=1, width=4, max_pixels=2000, n_init=2)
    base.update(kw)
    return PipelineConfig.preset(**base)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    generate_dataset(SynthConfig(size=32, count_range=(2, 4), seed=5), 6, d)
    return d


@pytest.fixture(scope="module")
def run_a(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run_a")
    return out, pipeline.run_pipeline(tiny(), data, out)


# -- configuration --------------------------------------------------------


def test_defaults_and_det_preset():
    cfg = PipelineConfig()
    assert (cfg.task, cfg.proxy_task, cfg.depth, cfg.beta, cfg.lam, cfg.k) == ("seg", "similarity", 1, 2.5, 0.5, 3)
    det = PipelineConfig.preset("det")
    assert det.beta == 4.0 and det.n_classes == 2


def test_precedence_flags_over_file_over_defaults(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("# comment\nbeta = 3.0\nk = 4\ndepth = 2\n")
    cfg = load_config(f, k=5)
    assert (cfg.beta, cfg.k, cfg.depth, cfg.lam) == (3.0, 5, 2, 0.5)
    # a file value for beta also overrides the det preset
    assert load_config(f, task="det").beta == 3.0


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv("PSM_SEED", "17")
    assert PipelineConfig().seed == 17
    assert load_config(seed=3).seed == 3


@pytest.mark.parametrize("bad", [dict(beta=-1), dict(lam=-0.1), dict(k=1), dict(depth=5), dict(task="cls"),
                                 dict(proxy_task="jigsaw")])
def test_validation_errors(bad):
    with pytest.raises(ValueError):
        PipelineConfig(**bad)


def test_config_parse_errors():
    with pytest.raises(ValueError):
        parse_config_text("nonsense = 1\n")
    with pytest.raises(ValueError):
        parse_config_text("beta 2\n")


def test_config_round_trips_through_text():
    cfg = tiny(beta=3.5, fg_rule="psm")
    assert load_config_text(cfg.to_text()) == cfg


def load_config_text(text):
    return PipelineConfig(**parse_config_text(text))


def test_shipped_acceptance_configs_parse():
    seg = load_config(ROOT / "configs/acceptance_seg.cfg")
    det = load_config(ROOT / "configs/acceptance_det.cfg")
    assert seg.task == "seg" and det.task == "det" and det.beta == 4.0


# -- full run -------------------------------------------------------------


def test_run_writes_every_artifact(run_a, data):
    out, rep = run_a
    n = len(list((data / "images").glob("*.png")))
    assert rep["stages"] == ["train-proxy", "psm", "cluster", "voronoi", "train-seg", "infer", "eval"]
    for sub, ext in [("psm", "psmt"), ("masks", "png"), ("voronoi", "png"), ("pred", "png")]:
        assert len(list((out / sub).glob(f"*.{ext}"))) == n
    for k in ("pixel_iou", "pixel_f1", "dice_obj", "aji"):
        assert np.isfinite(rep["metrics"][k])
    saved = json.loads((out / "report.json").read_text())
    assert saved["schema"] == pipeline.REPORT_SCHEMA and "timings" not in saved
    assert set(json.loads((out / "timings.json").read_text())) == set(rep["stages"])


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_rerun_is_byte_identical(run_a, data, tmp_path):
    out_a, rep_a = run_a
    rep_b = pipeline.run_pipeline(tiny(), data, tmp_path)
    a, b = _files(out_a), _files(tmp_path)
    a.pop(Path("timings.json"))
    b.pop(Path("timings.json"))
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []
    assert rep_a["metrics"] == rep_b["metrics"]


def test_eval_csv_schema(run_a):
    lines = (run_a[0] / "eval.csv").read_text().splitlines()
    assert lines[0] == "# schema: psm-eval-seg/1"
    assert lines[1].split(",") == pipeline.SEG_HEADER
    assert lines[-1].startswith("ALL,")


def test_eval_disabled_never_opens_ground_truth(data, tmp_path):
    opened = []
    active = [True]

    def hook(event, args):
        if active[0] and event == "open" and isinstance(args[0], (str, bytes, Path)):
            opened.append(str(args[0]))

    sys.addaudithook(hook)
    try:
        pipeline.AUDIT.clear()
        rep = pipeline.run_pipeline(tiny(evaluate=False), data, tmp_path)
    finally:
        active[0] = False
    gt = str(data / "gt")
    assert rep["metrics"] == {} and "eval" not in rep["stages"]
    assert any(str(data / "images") in p for p in opened)
    assert not [p for p in opened if p.startswith(gt)]
    assert not [p for p in pipeline.AUDIT.paths if str(p).startswith(gt)]


def test_detection_run(data, tmp_path):
    rep = pipeline.run_pipeline(tiny(task="det", n_classes=2), data, tmp_path)
    assert rep["stages"][-3:] == ["train-det", "infer", "eval"]
    assert {"precision", "recall", "det_f1", "mp", "mn", "greedy_suboptimal_images"} <= set(rep["metrics"])
    header = (tmp_path / "eval.csv").read_text().splitlines()[1]
    assert header.split(",") == pipeline.DET_HEADER


def test_stage_failure_names_stage(tmp_path):
    (tmp_path / "images").mkdir()
    with pytest.raises(pipeline.StageError) as err:
        pipeline.run_pipeline(tiny(), tmp_path, tmp_path / "out")
    assert err.value.stage == "train-proxy"


def test_missing_proxy_checkpoint_fails_in_psm_stage(data, tmp_path):
    with pytest.raises(pipeline.StageError) as err:
        pipeline.run_pipeline(tiny(), data, tmp_path, proxy_ckpt=tmp_path / "nope")
    assert err.value.stage == "psm" and tmp_path / "psm" in err.value.paths


def test_stages_run_independently_and_deterministically(run_a, data, tmp_path):
    out = run_a[0]
    cfg = tiny()
    pipeline.stage_cluster(data / "images", out / "psm", tmp_path / "masks", cfg)
    pipeline.stage_voronoi(tmp_path / "masks", tmp_path / "voronoi", cfg)
    for sub in ("masks", "voronoi"):
        assert _files(tmp_path / sub) == _files(out / sub)


# -- ablation -------------------------------------------------------------


def _read_table(path):
    lines = [line for line in Path(path).read_text().splitlines() if not line.startswith("#")]
    return list(csv.reader(lines))


def test_depth_ablation_table(data, tmp_path):
    rows = pipeline.ablate_depth(tiny(), data, tmp_path, depths=(4, 1))
    table = _read_table(tmp_path / "ablate_depth.csv")
    assert table[0] == pipeline.ABLATION_HEADER
    assert [r[1] for r in table[1:]] == ["4", "1"]
    assert all(r[2] and r[3] for r in table[1:])
    assert pipeline.summarize_ablation(rows)["winner"] in (1, 4)
    with pytest.raises(ValueError):
        pipeline.ablate_depth(tiny(), data, tmp_path, depths=(1,))


def test_proxy_ablation_table(data, tmp_path):
    pipeline.ablate_proxy(tiny(), data, tmp_path)
    table = _read_table(tmp_path / "ablate_proxy.csv")
    assert [r[1] for r in table[1:]] == ["similarity", "contrastive"]
    assert all(np.isfinite(float(r[3])) for r in table[1:])


# -- CLI ------------------------------------------------------------------


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["synth", "--n", "2", "--size", "32", "--seed", "1", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d/manifest.txt").is_file()
    assert main(["run", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    assert main(["eval", "--task", "seg", "--pred", str(tmp_path / "none"), "--gt", str(tmp_path),
                 "--out", str(tmp_path / "e.csv")]) == 1
    with pytest.raises(SystemExit):
        main(["ablate", "width"])


def test_cli_stage_chain(run_a, data, tmp_path):
    out = run_a[0]
    d = str(data)
    assert main(["cluster", "--psm", str(out / "psm"), "--data", d, "--out", str(tmp_path / "m"),
                 "--config", _cfg_file(tmp_path)]) == 0
    assert _files(tmp_path / "m") == _files(out / "masks")
    assert main(["eval", "--task", "seg", "--pred", str(out / "pred"), "--gt", str(data / "gt/instances"),
                 "--out", str(tmp_path / "e.csv")]) == 0
    assert (tmp_path / "e.csv").read_text() == (out / "eval.csv").read_text()


def _cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(tiny().to_text())
    return str(p)


# -- rendering ------------------------------------------------------------


@pytest.fixture
def base(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    path = tmp_path / "base.png"
    Image.fromarray(img).save(path)
    return path, img


def test_render_zero_psm_is_base(base, tmp_path):
    path, img = base
    save_psmt(tmp_path / "z.psmt", np.zeros((16, 16), np.float32))
    out = render(tmp_path / "z.psmt", "psm", path, tmp_path / "o.png")
    assert np.array_equal(out, img)
    assert np.array_equal(np.asarray(Image.open(tmp_path / "o.png")), img)


def test_render_all_ignore_voronoi_is_base(base, tmp_path):
    path, img = base
    Image.fromarray(np.full((16, 16), 255, np.uint8)).save(tmp_path / "v.png")
    assert np.array_equal(render(tmp_path / "v.png", "voronoi", path), img)


def test_render_one_point_gives_one_red_dot(tmp_path):
    img = np.full((16, 16, 3), 200, np.uint8)
    Image.fromarray(img).save(tmp_path / "b.png")
    write_points_csv(tmp_path / "p.csv", [(5, 9, 1)])
    render(tmp_path / "p.csv", "points", tmp_path / "b.png", tmp_path / "o.png")
    out = np.asarray(Image.open(tmp_path / "o.png"))
    red = np.all(out == RED, axis=2)
    assert red[5, 9]
    _, n = ndimage.label(red)
    assert n == 1
    assert tuple(np.round(ndimage.center_of_mass(red)).astype(int)) == (5, 9)
    assert np.array_equal(out[~red], img[~red])


def test_render_size_mismatch(base, tmp_path):
    path, _ = base
    save_psmt(tmp_path / "z.psmt", np.zeros((8, 8), np.float32))
    with pytest.raises(ShapeError):
        render(tmp_path / "z.psmt", "psm", path)
