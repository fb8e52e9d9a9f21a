import numpy as np
import pytest
import torch

from viewedit.edit import (
    EditDirection, TrajectorySpec, apply_edit, discover_direction, make_trajectory, parse_edit_spec,
    render_edited_video,
)
from viewedit.errors import InsufficientData, InvalidArgument
from viewedit.invert import VideoLatents
from viewedit.providers import ToyAttributeClassifier
from viewedit.toygen import ATTRIBUTES, to_numpy_image


@pytest.fixture(scope="module")
def smile(gen):
    return discover_direction(gen, "smile", n_samples=500, seed=0)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def test_planted_direction_recovered(gen, smile):
    planted = gen.planted[ATTRIBUTES.index("smile")].detach().to(torch.float64).numpy()
    assert float(smile.direction @ _unit(planted)) >= 0.95
    assert abs(np.linalg.norm(smile.direction) - 1) <= 1e-9
    assert smile.svm_margin > 0


def test_discovery_is_deterministic(gen, smile):
    again = discover_direction(gen, "smile", n_samples=500, seed=0)
    assert np.array_equal(again.direction, smile.direction)


class _ConstantClassifier:
    def score(self, img, attr):
        return 0.7


def test_single_class_labels_raise(gen):
    with pytest.raises(InsufficientData):
        discover_direction(gen, "smile", n_samples=50, classifier=_ConstantClassifier())
    with pytest.raises(InvalidArgument):
        discover_direction(gen, "smile", n_samples=10)


def test_direction_file_round_trip(tmp_path, smile):
    smile.save(tmp_path / "d.json")
    back = EditDirection.load(tmp_path / "d.json")
    assert back.attribute == "smile" and np.array_equal(back.direction, smile.direction)
    with pytest.raises(InvalidArgument):
        EditDirection("x", np.ones(4))


def test_apply_edit_identity_inverse_linearity(gen, smile, rng):
    w = gen.w_avg.clone()
    assert torch.equal(apply_edit(w, smile, 0.0), w)
    wn = rng.normal(size=64)
    assert np.array_equal(apply_edit(wn, smile, 0.0), wn)
    back = apply_edit(apply_edit(wn, smile, 1.7), smile, -1.7)
    assert np.abs(back - wn).max() <= 1e-9
    assert np.allclose(apply_edit(wn, smile, 0.6 + 0.9), apply_edit(apply_edit(wn, smile, 0.6), smile, 0.9), atol=1e-12)
    with pytest.raises(InvalidArgument):
        apply_edit(np.zeros(3), smile, 1.0)


def test_edit_raises_classifier_score(gen, smile):
    clf = ToyAttributeClassifier.from_generator(gen)

    def score(alpha):
        w = apply_edit(gen.w_avg, smile, alpha)
        with torch.no_grad():
            img = to_numpy_image(gen.generate(w, gen.camera(0.0))[1])
        return clf.score(img, "smile")

    assert score(2.3) > score(0.0)


def test_trajectories():
    fixed = make_trajectory(TrajectorySpec("fixed"), 5)
    assert len(fixed) == 5 and all(p.yaw == 0 and p.pitch == 0 for p in fixed.poses)
    sweep = make_trajectory(TrajectorySpec.parse("linear-sweep,yaw=-0.4,yaw_end=0.4"), 5)
    assert np.allclose([p.yaw for p in sweep.poses], [-0.4, -0.2, 0.0, 0.2, 0.4], atol=1e-12)
    orbit = make_trajectory(TrajectorySpec("orbit", yaw=-0.5, pitch=0.1, yaw_end=0.7), 9)
    assert abs(orbit.poses[0].yaw + 0.5) <= 1e-9 and abs(orbit.poses[-1].yaw - 0.7) <= 1e-9
    assert all(p.pitch == 0.1 for p in orbit.poses)
    assert all(abs(p.radius - 2.5) < 1e-12 for p in orbit.poses)


@pytest.mark.parametrize("text", ["", "spiral", "fixed,yaw", "fixed,roll=1", "fixed,yaw=abc"])
def test_trajectory_parse_errors(text):
    with pytest.raises(InvalidArgument):
        make_trajectory(TrajectorySpec.parse(text), 3)


def test_trajectory_range_errors():
    with pytest.raises(InvalidArgument):
        make_trajectory(TrajectorySpec("fixed", yaw=4.0), 3)
    with pytest.raises(InvalidArgument):
        make_trajectory(TrajectorySpec("fixed", pitch=2.0), 3)
    with pytest.raises(InvalidArgument):
        make_trajectory(TrajectorySpec("fixed"), 0)


def _latents(gen, seed, T=3):
    r = np.random.default_rng(seed)
    w = gen.sample_latents(1, seed)[0]
    offsets = torch.as_tensor(r.normal(0, 0.05, (T, 64)), dtype=gen.dtype)
    cams = torch.as_tensor(np.c_[np.linspace(-0.2, 0.2, T), np.zeros(T)], dtype=gen.dtype)
    return VideoLatents(w, offsets, cams)


def test_render_unedited_matches_direct_render(gen, smile):
    lat = _latents(gen, 1)
    frames = render_edited_video(gen, lat, smile, 0.0)
    with torch.no_grad():
        raw, full = gen.generate(lat.w_person[None] + lat.offsets, lat.cams)
    assert all(torch.equal(f[1], full[i]) for i, f in enumerate(frames))
    assert render_edited_video(gen, lat)[0][1].shape == (3, 64, 64)


def test_render_fixed_frontal_trajectory(gen):
    lat = _latents(gen, 2)
    traj = make_trajectory(TrajectorySpec("fixed"), 3)
    frames = render_edited_video(gen, lat, traj=traj)
    with torch.no_grad():
        _, ref = gen.generate(lat.w_person[None] + lat.offsets, torch.zeros(3, 2, dtype=gen.dtype))
    assert all(torch.equal(f[1], ref[i]) for i, f in enumerate(frames))
    with pytest.raises(InvalidArgument):
        render_edited_video(gen, lat, traj=make_trajectory(TrajectorySpec("fixed"), 4))


def test_retargeting_recombination(gen):
    a, b = _latents(gen, 3), _latents(gen, 4)
    mixed = VideoLatents(b.w_person, a.offsets, a.cams)
    frames = render_edited_video(gen, mixed)
    assert len(frames) == 3 and all(torch.isfinite(f[1]).all() for f in frames)
    own = render_edited_video(gen, a)
    assert not torch.equal(frames[0][1], own[0][1])


def test_parse_edit_spec():
    assert parse_edit_spec("attr=smile,alpha=2.3") == {"attr": "smile", "alpha": 2.3}
    assert parse_edit_spec("attr=hair") == {"attr": "hair", "alpha": 0.0}
    for bad in ("alpha=1", "attr=smile,alpha=x", "attr=smile,beta=1", "smile"):
        with pytest.raises(InvalidArgument):
            parse_edit_spec(bad)
