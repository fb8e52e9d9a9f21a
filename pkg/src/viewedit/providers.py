"""Perception providers with deterministic toy defaults.

The pipeline never talks to a network directly; it asks the registry for a
provider by interface and name.  Five interfaces exist:

``perceptual``
    differentiable image distance (stands in for LPIPS)
``parser``
    face parsing into :class:`FaceClass` labels (stands in for BiSeNet)
``identity``
    unit-norm identity embedding (stands in for ArcFace)
``keypoints``
    five facial landmarks per frame
``attributes``
    attribute classifier returning a score in ``[0, 1]``

The toy parser and classifier exploit the known layout of the toy generator:
the head is found as the foreground blob, and face parts are placed at the
template's relative positions inside it.
"""

from __future__ import annotations

import enum
import math
from pathlib import Path
from typing import Callable, Dict

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from . import toygen
from .errors import InvalidArgument, NotFound


class FaceClass(enum.IntEnum):
    BACKGROUND = 0
    SKIN = 1
    EYES = 2
    EYEBROWS = 3
    NOSE = 4
    MOUTH = 5
    HAIR = 6
    NECK = 7


EXPRESSION_CLASSES = (FaceClass.EYES, FaceClass.EYEBROWS, FaceClass.NOSE, FaceClass.MOUTH)
HEAD_CLASSES = tuple(c for c in FaceClass if c != FaceClass.BACKGROUND)


def _as_hwc(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        return toygen.to_numpy_image(img)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidArgument(f"expected an H x W x 3 image, got shape {img.shape}")
    return img


# --------------------------------------------------------------------------- #
# perceptual distance

_BLUR = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur_down(x: torch.Tensor) -> torch.Tensor:
    k = _BLUR.to(x.dtype)
    c = x.shape[1]
    x = F.pad(x, (2, 2, 2, 2), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, 5).expand(c, 1, 1, 5), groups=c)
    x = F.conv2d(x, k.view(1, 1, 5, 1).expand(c, 1, 5, 1), groups=c)
    return x[:, :, ::2, ::2]


def _grad_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    da = a - b
    gx = (da[..., :, 1:] - da[..., :, :-1]).abs().mean(dim=(-3, -2, -1))
    gy = (da[..., 1:, :] - da[..., :-1, :]).abs().mean(dim=(-3, -2, -1))
    return gx + gy


def pyramid_distance(a, b, levels: int = 3) -> torch.Tensor:
    """Mean L1 over a Gaussian pyramid plus L1 of image gradients.

    Accepts ``(3, H, W)`` or ``(N, 3, H, W)`` tensors (numpy ``H x W x 3`` is
    converted).  Returns a scalar, or a length-``N`` vector for batches.
    """
    if not isinstance(a, torch.Tensor):
        a = toygen.to_tensor_image(_as_hwc(a), torch.float64)
    if not isinstance(b, torch.Tensor):
        b = toygen.to_tensor_image(_as_hwc(b), a.dtype)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    single = a.dim() == 3
    if single:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    total = 0.0
    for level in range(levels):
        total = total + (a - b).abs().mean(dim=(1, 2, 3)) + _grad_l1(a, b)
        if level + 1 < levels and min(a.shape[-2:]) >= 2:
            a, b = _blur_down(a), _blur_down(b)
    total = total / levels
    return total[0] if single else total


# --------------------------------------------------------------------------- #
# face parsing

# Relative part layout (x to the right, y downwards) in units of the head's
# semi-axes, derived from the generator template.
_AX, _AY = toygen.HEAD_AXES[0], toygen.HEAD_AXES[1]


def _rel(x, y):
    return x / _AX, -(y - toygen.HEAD_CENTER_Y) / _AY


_PARTS = (
    # class, centre (relative), half-sizes (relative)
    (FaceClass.EYES, _rel(-toygen.EYE_X, toygen.EYE_Y), (0.17, 0.11)),
    (FaceClass.EYES, _rel(toygen.EYE_X, toygen.EYE_Y), (0.17, 0.11)),
    (FaceClass.EYEBROWS, _rel(-toygen.EYE_X, toygen.BROW_Y), (0.22, 0.07)),
    (FaceClass.EYEBROWS, _rel(toygen.EYE_X, toygen.BROW_Y), (0.22, 0.07)),
    (FaceClass.NOSE, _rel(toygen.NOSE_CENTER[0], toygen.NOSE_CENTER[1]), (0.13, 0.17)),
    (FaceClass.MOUTH, _rel(0.0, toygen.MOUTH_Y), (0.3, 0.1)),
)
_HAIRLINE = -0.72
_MOUTH_BAND = 0.3


def foreground_mask(img, threshold: float = 0.08) -> np.ndarray:
    """Largest blob that differs from the border colour (top, left and right edges)."""
    img = _as_hwc(img)
    border = np.concatenate([img[0], img[:, 0], img[:, -1]], axis=0)
    bg = np.median(border, axis=0)
    fg = np.abs(img - bg).max(axis=2) > threshold
    labels, n = ndimage.label(fg)
    if n == 0:
        return fg
    sizes = ndimage.sum(fg, labels, index=np.arange(1, n + 1))
    return labels == (1 + int(np.argmax(sizes)))


def head_ellipse(fg: np.ndarray):
    """Centre and semi-axes (pixels) of the head part of a foreground mask."""
    rows = np.nonzero(fg.any(axis=1))[0]
    if rows.size == 0:
        return None
    widths = fg.sum(axis=1)
    top = rows[0]
    widest = int(np.argmax(widths))
    cols = np.nonzero(fg[widest])[0]
    half_w = max(widths[widest] / 2.0, 1.0)
    cx = 0.5 * (cols[0] + cols[-1])
    half_h = half_w * _AY / _AX
    cy = top - 0.5 + half_h
    return cx, cy, half_w, half_h


def parse_face(img) -> np.ndarray:
    """Toy face parser: integer class map (``H x W``) over :class:`FaceClass`."""
    img = _as_hwc(img)
    h, w = img.shape[:2]
    labels = np.full((h, w), FaceClass.BACKGROUND, dtype=np.uint8)
    fg = foreground_mask(img)
    ell = head_ellipse(fg)
    if ell is None:
        return labels
    cx, cy, hw, hh = ell
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xr, yr = (xx - cx) / hw, (yy - cy) / hh
    inside = xr**2 + yr**2 <= 1.0
    labels[fg] = FaceClass.NECK
    labels[fg & (inside | (yr < 0.3))] = FaceClass.SKIN
    labels[fg & (yr < _HAIRLINE)] = FaceClass.HAIR
    for cls, (px, py), (sx, sy) in _PARTS:
        part = ((xr - px) / sx) ** 2 + ((yr - py) / sy) ** 2 <= 1.0
        labels[fg & inside & part] = cls
    return labels


def expression_mask(labels: np.ndarray) -> np.ndarray:
    return np.isin(labels, [int(c) for c in EXPRESSION_CLASSES])


def head_mask(labels: np.ndarray) -> np.ndarray:
    return np.isin(labels, [int(c) for c in HEAD_CLASSES])


def save_mask_png(labels: np.ndarray, path) -> None:
    """Export a class map as a single-channel indexed image."""
    from PIL import Image

    im = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    palette = [0, 0, 0, 224, 172, 105, 40, 40, 200, 90, 60, 20, 230, 120, 60, 220, 20, 60, 60, 30, 10, 200, 150, 120]
    im.putpalette(palette + [0] * (768 - len(palette)))
    im.save(path, optimize=False)


# --------------------------------------------------------------------------- #
# identity embedding


class ToyIdentityEmbedder:
    """Fixed random projection of a two-scale downsampled, mean-removed image.

    The global average colour (weighted up) carries most of the identity
    signal and is nearly pose invariant; a coarse 4 x 4 grid adds layout.
    """

    def __init__(self, dim: int = 32, grids=(1, 4), weights=(8.0, 1.0), seed: int = 1234):
        self.grids = tuple(grids)
        self.weights = tuple(weights)
        rng = np.random.default_rng(seed)
        n_feat = sum(3 * g * g for g in self.grids)
        self.proj = rng.standard_normal((dim, n_feat)) / math.sqrt(n_feat)

    def features(self, img) -> np.ndarray:
        x = toygen.to_tensor_image(_as_hwc(img), torch.float64).unsqueeze(0)
        parts = [wt * (F.adaptive_avg_pool2d(x, g)[0] - 0.5).reshape(-1).numpy() for g, wt in zip(self.grids, self.weights)]
        return np.concatenate(parts)

    def __call__(self, img) -> np.ndarray:
        e = self.proj @ self.features(img)
        n = np.linalg.norm(e)
        if n == 0:
            e = np.zeros_like(e)
            e[0] = 1.0
            return e
        return e / n


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


# --------------------------------------------------------------------------- #
# attribute classification


def _redness(px: np.ndarray) -> np.ndarray:
    return px[..., 0] - 0.5 * (px[..., 1] + px[..., 2])


def _region_stat(img: np.ndarray, attr: str) -> float:
    """Colour statistic behind the toy attribute scores.

    ``hair``: mean brightness of the hair pixels farthest from the hairline.
    ``smile``: redness of the mouth stripe, found as the row inside a
    generous band around the expected mouth position whose redness departs
    most from the median skin redness (the band tolerates head-fit error).
    """
    labels = parse_face(img)
    if attr == "hair":
        region = labels == FaceClass.HAIR
        if not region.any():
            return 0.0
        depth = ndimage.distance_transform_edt(region)
        return float(img[depth >= depth.max() - 1].mean())
    fg = foreground_mask(img)
    ell = head_ellipse(fg)
    skin = labels == FaceClass.SKIN
    if ell is None or not skin.any():
        return 0.0
    cx, cy, hw, hh = ell
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    mx, my = _rel(0.0, toygen.MOUTH_Y)
    band = fg & (np.abs((xx - cx) / hw - mx) <= _MOUTH_BAND) & (np.abs((yy - cy) / hh - my) <= _MOUTH_BAND)
    rows = np.unique(np.nonzero(band)[0])
    if rows.size == 0:
        return 0.0
    red = _redness(img)
    skin_red = float(np.median(red[skin]))
    dev = [abs(red[r][band[r]].mean() - skin_red) for r in rows]
    r = int(rows[int(np.argmax(dev))])
    window = slice(max(r - 1, 0), r + 2)
    return float(red[window][band[window]].mean())


class ToyAttributeClassifier:
    """Sigmoid of a linear functional of region colour statistics.

    ``hair`` scores hair brightness, ``smile`` scores mouth redness.  The
    decision threshold is the statistic of the generator's average face.
    """

    attributes = ("hair", "smile")

    def __init__(self, references: Dict[str, float], gain: float = 20.0):
        self.references = dict(references)
        self.gain = gain

    @classmethod
    def from_generator(cls, gen: toygen.ToyGenerator) -> "ToyAttributeClassifier":
        with torch.no_grad():
            _, img = gen.generate(gen.w_avg, gen.camera(0.0, 0.0))
        img = toygen.to_numpy_image(img)
        return cls({a: _region_stat(img, a) for a in cls.attributes})

    def score(self, img, attr: str) -> float:
        if attr not in self.references:
            raise NotFound(f"unknown attribute {attr!r}; registered: {sorted(self.references)}")
        s = _region_stat(_as_hwc(img), attr)
        return float(1.0 / (1.0 + math.exp(-self.gain * (s - self.references[attr]))))

    __call__ = score


# --------------------------------------------------------------------------- #
# keypoints


class ToyKeypointDetector:
    """Landmarks placed at template positions inside the detected head blob."""

    def __call__(self, frame) -> np.ndarray:
        img = _as_hwc(frame)
        ell = head_ellipse(foreground_mask(img))
        if ell is None:
            raise InvalidArgument("no face found in frame")
        cx, cy, hw, hh = ell
        rel = np.array([_rel(x, y) for x, y, _ in toygen.LANDMARKS_3D])
        return np.stack([cx + rel[:, 0] * hw, cy + rel[:, 1] * hh], axis=1)


class FileKeypoints:
    """Keypoints read from a structured-text file, looked up by frame index."""

    def __init__(self, path):
        from .align import load_keypoints

        self.path = Path(path)
        self.sequence = load_keypoints(self.path)

    def __call__(self, frame=None, index: int = 0) -> np.ndarray:
        if not 0 <= index < len(self.sequence):
            raise NotFound(f"no keypoints for frame {index} in {self.path}")
        return self.sequence[index]


# --------------------------------------------------------------------------- #
# registry

INTERFACES = ("perceptual", "parser", "identity", "keypoints", "attributes")
_REGISTRY: Dict[str, Dict[str, Callable]] = {k: {} for k in INTERFACES}


def register(interface: str, name: str, factory: Callable) -> None:
    """Register ``factory(**kwargs) -> provider`` under ``interface/name``."""
    if interface not in _REGISTRY:
        raise NotFound(f"unknown provider interface {interface!r}")
    _REGISTRY[interface][name] = factory


def get_provider(interface: str, name: str = "toy", **kwargs):
    if interface not in _REGISTRY:
        raise NotFound(f"unknown provider interface {interface!r}")
    try:
        factory = _REGISTRY[interface][name]
    except KeyError:
        raise NotFound(
            f"no {interface} provider named {name!r}; registered: {sorted(_REGISTRY[interface])}"
        ) from None
    return factory(**kwargs)


def registered(interface: str):
    return sorted(_REGISTRY[interface])


register("perceptual", "toy", lambda: pyramid_distance)
register("parser", "toy", lambda: parse_face)
register("identity", "toy", lambda **kw: ToyIdentityEmbedder(**kw))
register("keypoints", "toy", lambda: ToyKeypointDetector())
register("keypoints", "file", lambda path: FileKeypoints(path))
register("attributes", "toy", lambda generator: ToyAttributeClassifier.from_generator(generator))


# module-level conveniences mirroring the provider interfaces
perceptual_distance = pyramid_distance
_default_embedder = ToyIdentityEmbedder()


def identity_embed(img) -> np.ndarray:
    return _default_embedder(img)


def classify_attribute(img, attr: str, classifier: ToyAttributeClassifier) -> float:
    return classifier.score(img, attr)

