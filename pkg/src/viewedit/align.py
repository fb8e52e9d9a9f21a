"""Keypoint-driven face alignment, cropping and re-insertion.

Coordinates are ``(x, y)`` in pixels with pixel centres on integer
positions; images are ``H x W x C`` float arrays.  A :class:`CropTransform`
maps crop coordinates into frame coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import DegenerateInput, InvalidArgument


@dataclass(frozen=True)
class CropTransform:
    """Similarity transform ``p_frame = scale * R(rotation) @ p_crop + translation``."""

    scale: float
    rotation: float
    translation: tuple

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidArgument(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    @classmethod
    def identity(cls) -> "CropTransform":
        return cls(1.0, 0.0, (0.0, 0.0))

    def linear(self) -> np.ndarray:
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        return np.hstack([self.linear(), np.array(self.translation)[:, None]])

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.linear().T + np.array(self.translation)

    def inverse(self) -> "CropTransform":
        inv_t = -(self.linear().T / self.scale**2) @ np.array(self.translation)
        return CropTransform(1.0 / self.scale, -self.rotation, tuple(inv_t))

    def apply_inverse(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64) - np.array(self.translation)
        return pts @ np.linalg.inv(self.linear()).T

    def compose(self, other: "CropTransform") -> "CropTransform":
        """``self ∘ other``: apply ``other`` first."""
        t = self.linear() @ np.array(other.translation) + np.array(self.translation)
        return CropTransform(self.scale * other.scale, self.rotation + other.rotation, tuple(t))

    def translated(self, d) -> "CropTransform":
        return CropTransform(self.scale, self.rotation, tuple(np.array(self.translation) + np.asarray(d, float)))

    def to_dict(self) -> dict:
        return {"scale": self.scale, "rotation": self.rotation, "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, d: dict) -> "CropTransform":
        return cls(float(d["scale"]), float(d["rotation"]), tuple(d["translation"]))


@dataclass
class FaceCrop:
    image: np.ndarray
    transform: CropTransform
    frame_index: int = 0


def estimate_similarity(src, dst) -> CropTransform:
    """Least-squares similarity transform taking ``src`` keypoints onto ``dst``.

    Closed form: with centred points written as complex numbers, the optimal
    ``scale * exp(i * rotation)`` is ``sum(conj(s) * d) / sum(|s|^2)``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise InvalidArgument(f"keypoint arrays must both be K x 2, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise InvalidArgument("at least 3 keypoints are required")
    if not (np.isfinite(src).all() and np.isfinite(dst).all()):
        raise InvalidArgument("keypoints must be finite")
    ms, md = src.mean(0), dst.mean(0)
    s = (src[:, 0] - ms[0]) + 1j * (src[:, 1] - ms[1])
    d = (dst[:, 0] - md[0]) + 1j * (dst[:, 1] - md[1])
    spread = float(np.sum(np.abs(s) ** 2))
    if spread <= 1e-12 * max(1.0, float(np.sum(np.abs(src) ** 2))):
        raise DegenerateInput("source keypoints have zero spread")
    a = np.sum(np.conj(s) * d) / spread
    if abs(a) == 0:
        raise DegenerateInput("destination keypoints have zero spread")
    scale, rot = float(abs(a)), float(np.angle(a))
    lin = scale * np.array([[np.cos(rot), -np.sin(rot)], [np.sin(rot), np.cos(rot)]])
    return CropTransform(scale, rot, tuple(md - lin @ ms))


def smooth_keypoints(seq: Sequence[np.ndarray], sigma: float = 1.5) -> List[np.ndarray]:
    """Temporal Gaussian smoothing of each keypoint coordinate (reflective ends)."""
    if sigma < 0:
        raise InvalidArgument("sigma must be >= 0")
    arr = np.stack([np.asarray(k, dtype=np.float64) for k in seq])
    if sigma == 0:
        return [k.copy() for k in arr]
    out = gaussian_filter1d(arr, sigma, axis=0, mode="reflect", truncate=4.0)
    return list(out)


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray, zero_outside: bool = False) -> np.ndarray:
    """Sample ``img`` (H x W or H x W x C) at float coordinates.

    Edge-clamped; with ``zero_outside`` samples beyond the pixel lattice fade
    to zero instead (used for masks).
    """
    h, w = img.shape[:2]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1, y1 = x0 + 1, y0 + 1
    if img.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]

    def at(yy, xx):
        v = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        if zero_outside:
            inside = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            v = np.where(inside[..., None] if img.ndim == 3 else inside, v, 0.0)
        return v

    top = at(y0, x0) * (1 - fx) + at(y0, x1) * fx
    bot = at(y1, x0) * (1 - fx) + at(y1, x1) * fx
    return top * (1 - fy) + bot * fy


def warp_coords(shape, t: CropTransform):
    """Frame coordinates of every pixel of a crop of the given ``(h, w)`` shape."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = t.apply(np.stack([xx.ravel(), yy.ravel()], 1))
    return pts[:, 0].reshape(h, w), pts[:, 1].reshape(h, w)


def crop_face(frame: np.ndarray, t: CropTransform, size: int = 64, frame_index: int = 0) -> FaceCrop:
    """Bilinear crop of ``size x size`` pixels through ``t`` (crop -> frame)."""
    frame = np.asarray(frame, dtype=np.float64)
    fx, fy = warp_coords((size, size), t)
    return FaceCrop(_bilinear(frame, fx, fy), t, frame_index)


def paste_crop(frame: np.ndarray, crop: np.ndarray, t: CropTransform, mask: np.ndarray) -> np.ndarray:
    """Alpha-composite ``crop`` into ``frame`` through ``t`` using ``mask`` as alpha.

    Frame pixels whose warped alpha is zero are returned untouched.
    """
    frame = np.asarray(frame, dtype=np.float64)
    crop = np.asarray(crop, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != crop.shape[:2]:
        raise InvalidArgument("mask shape must equal crop shape")
    if mask.min() < 0 or mask.max() > 1:
        raise InvalidArgument("mask values must lie in [0, 1]")
    out = frame.copy()
    h, w = frame.shape[:2]
    s = crop.shape[0]
    corners = t.apply(np.array([[-1, -1], [s, -1], [-1, s], [s, s]], dtype=np.float64))
    x_lo, y_lo = np.maximum(np.floor(corners.min(0)).astype(int), 0)
    x_hi, y_hi = np.minimum(np.ceil(corners.max(0)).astype(int) + 1, [w, h])
    if x_lo >= x_hi or y_lo >= y_hi:
        return out
    yy, xx = np.mgrid[y_lo:y_hi, x_lo:x_hi].astype(np.float64)
    p = t.apply_inverse(np.stack([xx.ravel(), yy.ravel()], 1))
    cx, cy = p[:, 0].reshape(xx.shape), p[:, 1].reshape(xx.shape)
    alpha = _bilinear(mask, cx, cy, zero_outside=True)
    vals = _bilinear(crop, cx, cy)
    region = out[y_lo:y_hi, x_lo:x_hi]
    sel = alpha > 0
    a = alpha[sel][:, None] if frame.ndim == 3 else alpha[sel]
    region[sel] = a * vals[sel] + (1 - a) * region[sel]
    return out


def align_crop(frame: np.ndarray, keypoints, template, size: int, frame_index: int = 0) -> FaceCrop:
    """Crop the face whose ``keypoints`` should land on the crop ``template``."""
    t = estimate_similarity(template, keypoints)
    return crop_face(frame, t, size, frame_index)


def save_keypoints(seq: Sequence[np.ndarray], path) -> None:
    payload = {"version": 1, "frames": [np.asarray(k, dtype=np.float64).tolist() for k in seq]}
    Path(path).write_text(json.dumps(payload, indent=1))


def load_keypoints(path) -> List[np.ndarray]:
    data = json.loads(Path(path).read_text())
    if data.get("version") != 1:
        raise InvalidArgument(f"unsupported keypoint file version {data.get('version')!r}")
    frames = [np.asarray(f, dtype=np.float64) for f in data["frames"]]
    for f in frames:
        if f.ndim != 2 or f.shape[1] != 2:
            raise InvalidArgument("each keypoint record must be K x 2")
    return frames
