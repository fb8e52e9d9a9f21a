import numpy as np
import pytest
import torch

from viewedit.align import CropTransform, crop_face
from viewedit.composite import (
    BoundaryRegions, CompositeConfig, alpha_blend, boundary_regions, composite_frame, inset_optimize,
    masked_l1, regions_from_inside, save_debug,
)
from viewedit.errors import InvalidArgument
from viewedit.providers import FaceClass, parse_face
from viewedit.toygen import to_numpy_image

from conftest import textured
from oracles import disc_dilation_bruteforce


def _disc(shape, centre, radius, label=FaceClass.SKIN):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    m = np.zeros(shape, dtype=np.uint8)
    m[(xx - centre[0]) ** 2 + (yy - centre[1]) ** 2 <= radius**2] = label
    return m


def test_scaled_sizes():
    cfg = CompositeConfig()
    assert cfg.scaled_sizes(512) == (50, 50)
    assert cfg.scaled_sizes(64) == (6, 6)
    assert cfg.scaled_sizes(8)[1] >= 1


def test_empty_masks_give_empty_regions():
    empty = np.zeros((32, 32), np.uint8)
    r = boundary_regions(empty, empty, border_size=4, edge_size=0)
    assert not r.inside.any() and not r.border.any() and r.outside.all()


def test_disc_border_matches_bruteforce_dilation():
    m = _disc((40, 40), (19.5, 19.5), 8)
    r = boundary_regions(m, m, border_size=4, edge_size=0)
    inside = m > 0
    expected = disc_dilation_bruteforce(inside, 4) & ~inside
    assert np.array_equal(r.border, expected)
    assert np.array_equal(r.inside, inside)


def test_union_of_two_masks_and_identical_masks():
    a = _disc((40, 40), (15, 20), 6)
    b = _disc((40, 40), (25, 20), 6, FaceClass.HAIR)
    r = boundary_regions(a, b, border_size=3, edge_size=0)
    assert np.array_equal(r.inside, (a > 0) | (b > 0))
    r2 = boundary_regions(a, a, border_size=3, edge_size=0)
    assert np.array_equal(r2.inside, a > 0)


def test_background_labels_are_not_inside():
    m = np.full((16, 16), FaceClass.BACKGROUND, np.uint8)
    m[4:8, 4:8] = FaceClass.NECK
    r = boundary_regions(m, m, border_size=2, edge_size=0)
    assert r.inside.sum() == 16


def test_regions_partition_and_edge_margin(gen):
    with torch.no_grad():
        img = to_numpy_image(gen.generate(gen.w_avg, gen.camera(0.2))[1])
    labels = parse_face(img)
    r = boundary_regions(labels, labels, CompositeConfig())
    total = r.inside.astype(int) + r.border.astype(int) + r.outside.astype(int)
    assert np.array_equal(total, np.ones_like(total))
    edge, _ = CompositeConfig().scaled_sizes(64)
    rim = np.ones((64, 64), bool)
    rim[edge:-edge, edge:-edge] = False
    assert not (r.border & rim).any()


def test_shape_mismatch_rejected():
    with pytest.raises(InvalidArgument):
        boundary_regions(np.zeros((8, 8)), np.zeros((8, 9)))


def test_alpha_values_and_ramp():
    m = _disc((48, 48), (23.5, 23.5), 10)
    r = boundary_regions(m, m, border_size=4, edge_size=0)
    a = r.alpha()
    assert np.all(a[r.inside] == 1.0) and np.all(a[r.outside] == 0.0)
    assert np.all((a[r.border] > 0) & (a[r.border] < 1))
    # midline of the width-4 band: pixels at distance 2 (+-0.5) from the inside set,
    # measured by brute force over all inside pixels
    iy, ix = np.nonzero(r.inside)
    by, bx = np.nonzero(r.border)
    d_in = np.sqrt((by[:, None] - iy[None]) ** 2 + (bx[:, None] - ix[None]) ** 2).min(1)
    mid = np.abs(d_in - 2.0) <= 0.5
    assert mid.any()
    assert np.all(np.abs(a[by[mid], bx[mid]] - 0.5) <= 0.15)


def test_alpha_continuity():
    m = _disc((64, 64), (31.5, 31.5), 12)
    r = boundary_regions(m, m, border_size=6, edge_size=0)
    a = r.alpha()
    limit = 1.0 / r.border_size + 1e-6
    ring = r.border
    for axis in (0, 1):
        diff = np.abs(np.diff(a, axis=axis))
        sel = ring[:-1, :] & ring[1:, :] if axis == 0 else ring[:, :-1] & ring[:, 1:]
        assert diff[sel].max() <= limit


def test_alpha_blend_identities():
    m = _disc((32, 32), (15.5, 15.5), 7)
    r = boundary_regions(m, m, border_size=3, edge_size=0)
    crop = textured((32, 32, 3), seed=1)
    out = alpha_blend(crop, crop, r)
    a = r.alpha()
    exact = (a == 0) | (a == 1)
    assert np.array_equal(out[exact], crop[exact])
    assert np.abs(out - crop).max() <= 1e-9
    inset = textured((32, 32, 3), seed=2)
    out = alpha_blend(inset, crop, r)
    assert np.array_equal(out[r.outside], crop[r.outside])
    assert np.array_equal(out[r.inside], inset[r.inside])


def test_masked_l1():
    a = torch.ones(3, 4, 4)
    b = torch.zeros(3, 4, 4)
    mask = torch.zeros(4, 4)
    assert masked_l1(a, b, mask).item() == 0.0
    mask[0, 0] = 1
    assert masked_l1(a, b, mask).item() == 1.0


def _inset_setup(gen, yaw=0.15):
    w = gen.w_avg.clone()
    delta = torch.zeros_like(w)
    cam = np.array([yaw, 0.0])
    with torch.no_grad():
        render = to_numpy_image(gen.generate(w + delta, torch.tensor(cam, dtype=gen.dtype))[1])
    labels = parse_face(render)
    regions = boundary_regions(labels, labels, CompositeConfig())
    return w, delta, cam, render, regions


def test_inset_already_consistent_exits_immediately(gen):
    w, delta, cam, render, regions = _inset_setup(gen)
    hist = []
    out = inset_optimize(gen, w, delta, cam, render, regions, CompositeConfig(), history=hist)
    assert len(hist) == 1 and hist[0] < CompositeConfig().border_loss_threshold
    assert np.abs(out - render).max() <= 1e-6


def test_inset_reduces_border_loss_and_respects_contract(gen):
    w, delta, cam, render, regions = _inset_setup(gen)
    target = render.copy()
    target[regions.border] = np.clip(target[regions.border] + 0.15, 0, 1)
    cfg = CompositeConfig(num_steps=20)
    params = [p.detach().clone() for p in gen.parameters()]
    delta_before = delta.clone()
    hist = []
    inset_optimize(gen, w, delta, cam, target, regions, cfg, history=hist)
    assert hist[-1] <= hist[0]
    assert hist[-1] < cfg.border_loss_threshold or len(hist) == cfg.num_steps + 1
    assert all(torch.equal(a, b) for a, b in zip(params, gen.parameters()))
    assert torch.equal(delta, delta_before)


def test_composite_frame_round_trip_and_support():
    frame = textured((96, 96, 3), seed=7)
    t = CropTransform(1.0, 0.0, (16.0, 20.0))
    crop = crop_face(frame, t, 64).image
    m = _disc((64, 64), (31.5, 31.5), 18)
    r = regions_from_inside(m > 0, 6, 6)
    out = composite_frame(frame, crop, t, (0.0, 0.0), r)
    assert np.abs(out - frame).max() <= 1e-6
    inset = np.zeros_like(crop)
    out = composite_frame(frame, inset, CropTransform(1.2, 0.1, (10.0, 12.0)), (0.0, 0.0), r)
    changed = np.any(out != frame, axis=2)
    fy, fx = np.mgrid[0:96, 0:96]
    p = CropTransform(1.2, 0.1, (10.0, 12.0)).apply_inverse(np.stack([fx.ravel(), fy.ravel()], 1))
    from viewedit.align import _bilinear

    support = _bilinear(r.alpha(), p[:, 0], p[:, 1], zero_outside=True).reshape(96, 96) > 0
    assert not (changed & ~support).any()


def test_composite_frame_shift_moves_centroid():
    frame = np.zeros((128, 128, 3))
    inset = np.ones((64, 64, 3))
    r = regions_from_inside(_disc((64, 64), (31.5, 31.5), 14) > 0, 4, 0)
    t = CropTransform(1.0, 0.0, (30.0, 30.0))

    def centroid(img):
        m = img[..., 0]
        yy, xx = np.mgrid[0:128, 0:128]
        return np.array([(xx * m).sum(), (yy * m).sum()]) / m.sum()

    a = centroid(composite_frame(frame, inset, t, (0.0, 0.0), r))
    b = centroid(composite_frame(frame, inset, t, (10.0, 0.0), r))
    assert np.abs((b - a) - [10.0, 0.0]).max() <= 1.0


def test_save_debug_writes_images(tmp_path):
    r = regions_from_inside(_disc((32, 32), (15.5, 15.5), 8) > 0, 3, 0)
    save_debug(r, tmp_path, 3)
    assert (tmp_path / "regions_00003.png").exists() and (tmp_path / "alpha_00003.png").exists()


def test_config_validation():
    with pytest.raises(InvalidArgument):
        CompositeConfig(num_steps=-1).validate()
    with pytest.raises(InvalidArgument):
        CompositeConfig(border_size=0).validate()
