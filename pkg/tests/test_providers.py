import numpy as np
import pytest
import torch

from viewedit import providers
from viewedit.errors import InvalidArgument, NotFound
from viewedit.providers import (
    EXPRESSION_CLASSES, FaceClass, ToyAttributeClassifier, cosine, expression_mask, head_mask, identity_embed,
    parse_face, pyramid_distance,
)
from viewedit.toygen import ATTRIBUTES, to_numpy_image

# Face-class pixel count (skin + expression parts) of the seed-0 average face
# at yaw 0, recorded on first run.
REFERENCE_FACE_PIXELS = 1645
FACE_CLASSES = (FaceClass.SKIN,) + EXPRESSION_CLASSES


def _render(gen, w, yaw=0.0, pitch=0.0):
    with torch.no_grad():
        return to_numpy_image(gen.generate(w, gen.camera(yaw, pitch))[1])


def test_perceptual_zero_on_identical_and_symmetric(rng):
    a = torch.as_tensor(rng.uniform(size=(3, 32, 32)))
    b = torch.as_tensor(rng.uniform(size=(3, 32, 32)))
    assert pyramid_distance(a, a).item() == 0.0
    assert abs(pyramid_distance(a, b).item() - pyramid_distance(b, a).item()) <= 1e-9


def test_perceptual_monotone_in_blend(rng, gen):
    a = torch.as_tensor(_render(gen, gen.w_avg)).permute(2, 0, 1)
    noise = torch.as_tensor(rng.uniform(size=a.shape))
    d = [pyramid_distance(a, (1 - t) * a + t * noise).item() for t in (0.1, 0.3, 0.5)]
    assert d[0] < d[1] < d[2]


def test_perceptual_shape_mismatch():
    with pytest.raises(InvalidArgument):
        pyramid_distance(torch.zeros(3, 8, 8), torch.zeros(3, 8, 9))


def test_perceptual_differentiable():
    a = torch.rand(3, 16, 16, dtype=torch.float64, requires_grad=True)
    b = torch.rand(3, 16, 16, dtype=torch.float64, requires_grad=True)
    pyramid_distance(a, b).backward()
    assert a.grad is not None and b.grad is not None and torch.isfinite(a.grad).all()


def test_parse_face_golden_count_and_totality(gen):
    labels = parse_face(_render(gen, gen.w_avg))
    assert labels.shape == (64, 64)
    assert set(np.unique(labels)) <= {int(c) for c in FaceClass}
    face = np.isin(labels, [int(c) for c in FACE_CLASSES]).sum()
    assert abs(face - REFERENCE_FACE_PIXELS) <= 0.2 * REFERENCE_FACE_PIXELS
    assert not (expression_mask(labels) & ~head_mask(labels)).any()


def test_parse_face_deterministic(gen):
    img = _render(gen, gen.w_avg, 0.2)
    assert np.array_equal(parse_face(img), parse_face(img))


def test_expression_mask_cases():
    assert not expression_mask(np.full((4, 4), FaceClass.SKIN)).any()
    assert expression_mask(np.full((4, 4), FaceClass.MOUTH)).all()
    m = np.zeros((4, 4), dtype=np.uint8)
    m[:2, :2] = FaceClass.EYES
    m[:2, 2:] = FaceClass.HAIR
    m[2:, :2] = FaceClass.NOSE
    m[2:, 2:] = FaceClass.NECK
    expected = np.zeros((4, 4), bool)
    expected[:2, :2] = True
    expected[2:, :2] = True
    assert np.array_equal(expression_mask(m), expected)


def test_mask_png_export(tmp_path, gen):
    from PIL import Image

    labels = parse_face(_render(gen, gen.w_avg))
    p = tmp_path / "mask.png"
    providers.save_mask_png(labels, p)
    im = Image.open(p)
    assert im.mode == "P"
    assert np.array_equal(np.asarray(im), labels)


def test_identity_embedding_unit_and_deterministic(gen):
    img = _render(gen, gen.w_avg)
    a, b = identity_embed(img), identity_embed(img)
    assert np.array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1) <= 1e-6
    assert abs(cosine(a, a) - 1) <= 1e-6


def test_identity_prefers_same_person_across_views(gen):
    wins = 0
    for trial in range(50):
        w1, w2 = gen.sample_latents(2, 1000 + trial)
        same = cosine(identity_embed(_render(gen, w1, 0.2)), identity_embed(_render(gen, w1, -0.2)))
        diff = cosine(identity_embed(_render(gen, w1)), identity_embed(_render(gen, w2)))
        wins += same > diff
    assert wins >= 45


def test_attribute_score_range_and_monotone(gen):
    clf = ToyAttributeClassifier.from_generator(gen)
    for i, attr in enumerate(ATTRIBUTES):
        v = gen.planted[i]
        scores = [clf.score(_render(gen, gen.w_avg + beta * v), attr) for beta in (-1.0, 0.0, 1.0)]
        assert all(0.0 <= s <= 1.0 for s in scores)
        assert scores[0] < scores[1] < scores[2], (attr, scores)
        img = _render(gen, gen.w_avg + 0.5 * v)
        assert clf.score(img, attr) == clf.score(img, attr)


def test_unknown_attribute_raises(gen):
    clf = ToyAttributeClassifier.from_generator(gen)
    with pytest.raises(NotFound):
        clf.score(_render(gen, gen.w_avg), "age")


def test_registry_defaults_and_unknown_names():
    for interface in providers.INTERFACES:
        assert providers.registered(interface)
    assert "toy" in providers.registered("parser")
    with pytest.raises(NotFound):
        providers.get_provider("parser", "bisenet")
    with pytest.raises(NotFound):
        providers.get_provider("depth", "toy")


def test_custom_provider_registration():
    providers.register("parser", "blank", lambda: (lambda img: np.zeros(np.asarray(img).shape[:2], np.uint8)))
    try:
        parser = providers.get_provider("parser", "blank")
        assert not parser(np.zeros((8, 8, 3))).any()
    finally:
        providers._REGISTRY["parser"].pop("blank")


def test_toy_keypoint_detector_tracks_head(gen):
    det = providers.get_provider("keypoints", "toy")
    img = _render(gen, gen.w_avg)
    kp = det(img)
    assert kp.shape == (5, 2)
    # a 2D blob fit has a few pixels of bias against the projected landmarks
    assert np.abs(kp - gen.canonical_keypoints(64)).max() < 5.0
    # integer shifts of the frame shift the detections by the same amount
    bg = img[0, 0]
    big = np.tile(bg, (96, 96, 1))
    big[10:74, 13:77] = img
    assert np.allclose(det(big), kp + [13, 10], atol=1e-9)
    with pytest.raises(InvalidArgument):
        det(np.zeros((64, 64, 3)))
