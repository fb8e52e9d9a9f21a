import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from viewedit import io, pipeline
from viewedit.align import CropTransform
from viewedit.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main
from viewedit.config import PipelineConfig, merge_overrides
from viewedit.errors import InvalidArgument
from viewedit.invert import JointInversionResult, VideoLatents

SMALL = {
    "version": 1,
    "joint": {"num_steps": 20},
    "tune": {"num_steps": 5},
    "video": {"init_num_steps": 10, "num_steps": 5},
    "composite": {"num_steps": 5},
    "scene": {"num_frames": 4},
    "personalize": {"num_faces": 2},
}


def _config(tmp: Path, **sections) -> Path:
    data = json.loads(json.dumps(SMALL))
    for k, v in sections.items():
        data.setdefault(k, {}).update(v)
    p = tmp / "config.json"
    p.write_text(json.dumps(data))
    return p


def _chain(root: Path, seed: int = 0, edit_args=(), scene_frames=None) -> Path:
    """make-scene, personalize, invert-video, edit-composite, evaluate under ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    cfg = _config(root)
    common = ["--config", str(cfg), "--seed", str(seed)]
    scene = root / "scene"
    extra = ["--num-frames", str(scene_frames)] if scene_frames else []
    assert main(["make-scene", *common, "--out", str(scene), *extra]) == EXIT_OK
    paths = ["--frames", str(scene / "frames"), "--keypoints", str(scene / "keypoints.json")]
    run = root / "run"
    assert main(["personalize", *common, "--out", str(run), *paths]) == EXIT_OK
    assert main(["invert-video", *common, "--out", str(run), *paths]) == EXIT_OK
    assert main(["edit-composite", *common, "--out", str(run), *paths, *edit_args]) == EXIT_OK
    assert main(["evaluate", *common, "--out", str(run), "--frames", str(scene / "frames")]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    return _chain(tmp_path_factory.mktemp("chain"))


def _files(root: Path):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_chain_writes_declared_layout(chain):
    art = chain / "run" / "artifacts"
    assert sorted(p.name for p in art.iterdir()) == sorted(
        [pipeline.ARTIFACT_GENERATOR, pipeline.ARTIFACT_JOINT, pipeline.ARTIFACT_VIDEO, pipeline.ARTIFACT_CROPS]
    )
    assert len(list((chain / "run" / "frames").glob("frame_*.png"))) == 4
    metrics = json.loads((chain / "run" / "metrics.json").read_text())
    assert metrics["frames"] == 4 and "FID" in metrics["notes"][0]
    agg = metrics["aggregate"]["psnr"]
    assert agg["mean"] == pytest.approx(np.mean(metrics["per_frame"]["psnr"]))


def test_artifacts_load_back(chain):
    art = chain / "run" / "artifacts"
    gen = io.load_generator(art / pipeline.ARTIFACT_GENERATOR)
    assert gen.upsampler_frozen
    io.save_generator(gen, chain / "copy.bin")
    assert (chain / "copy.bin").read_bytes() == (art / pipeline.ARTIFACT_GENERATOR).read_bytes()
    joint = json.loads((art / pipeline.ARTIFACT_JOINT).read_text())
    assert len(joint["frames"]) == 2
    res = JointInversionResult.from_dict({k: v for k, v in joint.items() if k != "frames"})
    assert res.offsets.shape == (2, 64)


def test_video_cardinality_and_invertible_crops(chain):
    art = chain / "run" / "artifacts"
    lat = VideoLatents.load(art / pipeline.ARTIFACT_VIDEO)
    assert len(lat) == 4 and lat.cams.shape == (4, 2)
    ts = pipeline.load_crops(art / pipeline.ARTIFACT_CROPS)
    assert len(ts) == 4
    pts = np.array([[0.0, 0.0], [63.0, 63.0]])
    for t in ts:
        assert t.scale > 0 and abs(np.linalg.det(t.linear())) > 0
        assert np.allclose(t.apply_inverse(t.apply(pts)), pts, atol=1e-9)


def test_eight_frame_video_cardinality(tmp_path):
    cfg = _config(tmp_path)
    scene = tmp_path / "scene"
    assert main(["make-scene", "--config", str(cfg), "--out", str(scene), "--num-frames", "8"]) == EXIT_OK
    paths = ["--frames", str(scene / "frames"), "--keypoints", str(scene / "keypoints.json")]
    run = ["--config", str(cfg), "--out", str(tmp_path / "run"), *paths]
    assert main(["personalize", *run]) == EXIT_OK
    assert main(["invert-video", *run, "--num-steps", "2", "--init-num-steps", "3"]) == EXIT_OK
    lat = VideoLatents.load(tmp_path / "run" / "artifacts" / pipeline.ARTIFACT_VIDEO)
    assert lat.offsets.shape == (8, 64) and lat.cams.shape == (8, 2)
    assert lat.steps[0] <= 3 and all(s <= 2 for s in lat.steps[1:])


def test_rerun_is_bit_identical(chain, tmp_path):
    again = _chain(tmp_path / "again")
    a, b = _files(chain / "run"), _files(again / "run")
    assert a.keys() == b.keys()
    assert all(a[k] == b[k] for k in a), [str(k) for k in a if a[k] != b[k]]


def test_yaw_edit_changes_only_the_crop_support(chain, tmp_path):
    scene = chain / "scene"
    run = tmp_path / "yaw"
    run.mkdir()
    art = chain / "run" / "artifacts"
    args = ["--config", str(_config(tmp_path)), "--out", str(run), "--artifacts", str(art),
            "--frames", str(scene / "frames"), "--view-offset", "0.3", "0.0"]
    assert main(["edit-composite", *args]) == EXIT_OK
    frames = io.load_frames(scene / "frames")
    out = io.load_frames(run / "frames")
    log = json.loads((run / "composite_log.json").read_text())
    ts = pipeline.load_crops(art / pipeline.ARTIFACT_CROPS)
    h, w = frames[0].shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    for f, o, t, entry in zip(frames, out, ts, log["frames"]):
        p = t.translated(entry["d_frame"]).apply_inverse(np.stack([xx.ravel(), yy.ravel()], 1))
        box = ((p > -1) & (p < 64)).all(1).reshape(h, w)
        changed = np.any(f != o, axis=2)
        assert changed.any()
        assert not (changed & ~box).any()


def test_retargeting_two_identities(chain, tmp_path):
    other = tmp_path / "b"
    other.mkdir()
    cfg = _config(other)
    scene_b = other / "scene"
    assert main(["make-scene", "--config", str(cfg), "--seed", "3", "--out", str(scene_b)]) == EXIT_OK
    run_b = other / "run"
    assert main(["personalize", "--config", str(cfg), "--seed", "3", "--out", str(run_b),
                 "--frames", str(scene_b / "frames"), "--keypoints", str(scene_b / "keypoints.json")]) == EXIT_OK
    scene_a = chain / "scene"
    out = other / "retarget"
    assert main(["edit-composite", "--config", str(cfg), "--seed", "3", "--out", str(out),
                 "--artifacts", str(run_b / "artifacts"), "--frames", str(scene_a / "frames"),
                 "--driving", str(chain / "run" / "artifacts")]) == EXIT_OK
    assert len(io.load_frames(out / "frames")) == 4


def test_exit_codes(chain, tmp_path):
    cfg = str(_config(tmp_path))
    scene = chain / "scene"
    assert main(["personalize", "--config", cfg, "--out", str(tmp_path / "x"), "--frames", str(tmp_path / "nope")]) == EXIT_MISSING
    assert main(["invert-video", "--config", cfg, "--out", str(tmp_path / "x"), "--frames", str(scene / "frames")]) == EXIT_MISSING
    assert main(["invert-video", "--config", cfg, "--num-steps", "-1"]) == EXIT_CONFIG
    assert main(["personalize", "--config", str(tmp_path / "absent.json")]) == EXIT_MISSING
    assert main(["edit-composite", "--config", cfg, "--edit", "attr=smile,alpha=oops"]) == EXIT_CONFIG
    assert main(["evaluate", "--config", cfg, "--set", "flow.winsize=4"]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text(json.dumps({"version": 1, "video": {"num_step": 1}}))
    assert main(["personalize", "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG


def test_zero_faces_rejected_before_compute(tmp_path, chain, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("inversion must not start")

    monkeypatch.setattr(pipeline, "run_personalize", boom)
    scene = chain / "scene"
    code = main(["personalize", "--config", str(_config(tmp_path)), "--out", str(tmp_path / "r"),
                 "--frames", str(scene / "frames"), "--keypoints", str(scene / "keypoints.json"),
                 "--set", "personalize.num_faces=0"])
    assert code == EXIT_CONFIG
    assert not (tmp_path / "r" / "artifacts").exists() or not any((tmp_path / "r" / "artifacts").iterdir())


def test_failed_stage_rolls_back_partial_artifacts(chain, tmp_path, monkeypatch):
    scene = chain / "scene"
    run = tmp_path / "run"
    art = run / "artifacts"
    art.mkdir(parents=True)
    for name in (pipeline.ARTIFACT_GENERATOR, pipeline.ARTIFACT_JOINT):
        (art / name).write_bytes((chain / "run" / "artifacts" / name).read_bytes())

    def fail(*a, **k):
        raise InvalidArgument("disk full")

    monkeypatch.setattr(io, "write_json", fail)
    code = main(["invert-video", "--config", str(_config(tmp_path)), "--out", str(run),
                 "--frames", str(scene / "frames"), "--keypoints", str(scene / "keypoints.json")])
    assert code == EXIT_CONFIG
    assert not (art / pipeline.ARTIFACT_VIDEO).exists() and not (art / pipeline.ARTIFACT_CROPS).exists()
    assert (art / pipeline.ARTIFACT_GENERATOR).exists()


def test_stage_name_in_errors():
    with pytest.raises(InvalidArgument, match=r"\[align\]"):
        with pipeline._stage("align"):
            raise InvalidArgument("bad crop")


def test_flag_and_file_precedence(tmp_path):
    from viewedit.cli import build_parser, resolve_config

    cfg = _config(tmp_path, video={"num_steps": 7, "learning_rate": 0.02})
    args = build_parser().parse_args(["invert-video", "--config", str(cfg), "--num-steps", "9",
                                      "--out", str(tmp_path / "o"), "--seed", "5"])
    c = resolve_config(args)
    assert c.video.num_steps == 9 and c.video.learning_rate == 0.02 and c.seed == 5
    assert c.paths.artifacts == str(tmp_path / "o" / "artifacts") and c.paths.output == str(tmp_path / "o")
    args = build_parser().parse_args(["edit-composite", "--winsize", "11", "--border-size", "30", "--no-flow",
                                      "--edit", "attr=hair,alpha=1.5", "--trajectory", "orbit,yaw=-0.2,yaw_end=0.2"])
    c = resolve_config(args)
    assert (c.flow.winsize, c.composite.border_size, c.flow.enabled) == (11, 30, False)
    assert (c.edit.attr, c.edit.alpha, c.edit.trajectory) == ("hair", 1.5, "orbit,yaw=-0.2,yaw_end=0.2")


def test_ablation_report_has_five_variants(tmp_path):
    cfg = merge_overrides(
        PipelineConfig.from_dict(SMALL),
        {"scene.num_frames": 3, "ablation.personalize_faces": 2, "joint.num_steps": 5, "tune.num_steps": 2,
         "video.init_num_steps": 3, "video.num_steps": 2, "composite.num_steps": 2,
         "paths.output": str(tmp_path)},
    )
    report = pipeline.cmd_ablate(cfg)
    assert [r.variant for r in report.rows] == list(pipeline.ABLATION_VARIANTS)
    assert len(report.rows) == 5
    assert (tmp_path / "ablation.json").exists() and "no_flow" in (tmp_path / "ablation.txt").read_text()
    with pytest.raises(Exception):
        report.row("bogus")


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "viewedit", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "personalize" in r.stdout
