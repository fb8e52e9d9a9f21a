import json

import numpy as np
import pytest
import torch

from viewedit.config import TOY_VIDEO_LOSS_THRESHOLD, PipelineConfig, merge_overrides
from viewedit.errors import InvalidArgument, NotFound
from viewedit.io import ArtifactWriter, load_frames, load_generator, read_json, save_frames, save_generator
from viewedit.scene import SceneConfig, make_scene

from conftest import textured


def test_generator_round_trip_bit_exact(tmp_path, gen):
    tuned = gen.clone()
    with torch.no_grad():
        tuned.field_b1.add_(0.125)
    tuned.upsampler_frozen = True
    save_generator(tuned, tmp_path / "g.bin")
    back = load_generator(tmp_path / "g.bin")
    assert back.upsampler_frozen
    for (n1, a), (n2, b) in zip(tuned.state_dict().items(), back.state_dict().items()):
        assert n1 == n2 and a.dtype == b.dtype and torch.equal(a, b)
    save_generator(back, tmp_path / "g2.bin")
    assert (tmp_path / "g.bin").read_bytes() == (tmp_path / "g2.bin").read_bytes()


def test_generator_file_errors(tmp_path):
    with pytest.raises(NotFound):
        load_generator(tmp_path / "missing.bin")
    (tmp_path / "junk.bin").write_bytes(b"not a generator")
    with pytest.raises(InvalidArgument):
        load_generator(tmp_path / "junk.bin")


def test_frames_round_trip_quantized(tmp_path):
    frames = [textured((20, 24, 3), seed=i) for i in range(3)]
    paths = save_frames(frames, tmp_path / "f")
    assert [p.name for p in paths] == ["frame_00000.png", "frame_00001.png", "frame_00002.png"]
    back = load_frames(tmp_path / "f")
    assert len(back) == 3
    assert all(np.abs(a - b).max() <= 0.5 / 255 + 1e-12 for a, b in zip(frames, back))
    with pytest.raises(NotFound):
        load_frames(tmp_path / "nope")
    (tmp_path / "empty").mkdir()
    with pytest.raises(NotFound):
        load_frames(tmp_path / "empty")


def test_read_json_missing(tmp_path):
    with pytest.raises(NotFound):
        read_json(tmp_path / "x.json")


def test_artifact_writer_rollback(tmp_path):
    w = ArtifactWriter()
    p = w.path(tmp_path / "a" / "b.txt")
    p.write_text("x")
    w.path(tmp_path / "never_written.txt")
    w.rollback()
    assert not p.exists() and w.written == []


def test_default_config_valid_and_toy_threshold():
    cfg = PipelineConfig().validate()
    assert cfg.video.loss_threshold == TOY_VIDEO_LOSS_THRESHOLD
    assert cfg.joint.num_steps == 600 and cfg.tune.num_steps == 300


def test_config_file_round_trip(tmp_path):
    cfg = merge_overrides(PipelineConfig(), {"video.num_steps": 20, "flow.winsize": 11, "edit.attr": "smile"})
    cfg.save(tmp_path / "c.json")
    back = PipelineConfig.load(tmp_path / "c.json")
    assert back == cfg


def test_config_precedence_file_then_overrides(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"version": 1, "video": {"num_steps": 7, "learning_rate": 0.02}}))
    cfg = PipelineConfig.load(tmp_path / "c.json")
    assert cfg.video.num_steps == 7 and cfg.video.learning_rate == 0.02
    assert cfg.video.init_num_steps == 200  # untouched keys keep their defaults
    cfg = merge_overrides(cfg, {"video.num_steps": 9})
    assert cfg.video.num_steps == 9 and cfg.video.learning_rate == 0.02


@pytest.mark.parametrize(
    "payload",
    [
        {"version": 1, "videp": {}},
        {"version": 1, "video": {"num_step": 3}},
        {"version": 1, "video": {"num_steps": "3"}},
        {"version": 1, "debug": 1},
        {"version": 2},
        {"seed": 1},
        [],
    ],
)
def test_config_rejects_bad_files(tmp_path, payload):
    (tmp_path / "c.json").write_text(json.dumps(payload))
    with pytest.raises(InvalidArgument):
        PipelineConfig.load(tmp_path / "c.json").validate()


def test_config_missing_and_malformed(tmp_path):
    with pytest.raises(NotFound):
        PipelineConfig.load(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(InvalidArgument):
        PipelineConfig.load(tmp_path / "bad.json")


def test_config_semantic_validation():
    for over in ({"video.learning_rate": 0.0}, {"flow.winsize": 4}, {"providers.parser": "bisenet"},
                 {"composite.border_size": 0}, {"edit.view_offset": [0.1]}, {"seed": -1}):
        with pytest.raises(InvalidArgument):
            merge_overrides(PipelineConfig(), over).validate()
    with pytest.raises(InvalidArgument):
        merge_overrides(PipelineConfig(), {"video.nope": 1})
    merge_overrides(PipelineConfig(), {"tune.num_steps": 0}).validate()


def test_scene_is_seeded_and_consistent(gen, tmp_path):
    cfg = SceneConfig(num_frames=3, seed=4)
    a, b = make_scene(gen, cfg), make_scene(gen, cfg)
    fa, fb = a.render(), b.render()
    assert len(fa) == 3 and fa[0].shape == (128, 128, 3)
    assert all(np.array_equal(x, y) for x, y in zip(fa, fb))
    c = make_scene(gen, SceneConfig(num_frames=3, seed=5)).render()
    assert not np.array_equal(fa[0], c[0])
    a.save(tmp_path / "scene", novel_yaw=0.2)
    assert len(load_frames(tmp_path / "scene" / "frames")) == 3
