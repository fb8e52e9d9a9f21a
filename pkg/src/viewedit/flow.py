"""Dense optical flow (Farnebäck polynomial expansion) and dominant displacement.

Flow follows the warped-target convention: for images ``a`` and ``b`` the
returned field satisfies ``b(x + u, y + v) ~= a(x, y)``.
"""

from __future__ import annotations

import functools
import json
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate, gaussian_filter, gaussian_filter1d, map_coordinates, uniform_filter

from .errors import InvalidArgument

# OpenCV works on 0..255 intensities and regularizes the 2x2 solve with a
# fixed 1e-3; scaling our [0, 1] images keeps the same numerical regime.
_INTENSITY_SCALE = 255.0
_SOLVE_EPS = 1e-3
_MIN_LEVEL_SIZE = 32

_FLOW_MAGIC = b"VEFLOW01"


class AllInvalidWarning(UserWarning):
    """Every displacement in a sequence was invalid; zeros were returned."""


@dataclass(frozen=True)
class FlowParams:
    pyr_scale: float = 0.5
    levels: int = 8
    winsize: int = 25
    iterations: int = 7
    poly_n: int = 5
    poly_sigma: float = 1.2

    def __post_init__(self):
        if not 0 < self.pyr_scale < 1:
            raise InvalidArgument("pyr_scale must lie in (0, 1)")
        if self.levels < 1 or self.iterations < 1:
            raise InvalidArgument("levels and iterations must be >= 1")
        if self.winsize < 1 or self.winsize % 2 == 0:
            raise InvalidArgument("winsize must be a positive odd integer")
        if self.poly_n < 1 or self.poly_n % 2 == 0:
            raise InvalidArgument("poly_n must be a positive odd integer")
        if self.poly_sigma <= 0:
            raise InvalidArgument("poly_sigma must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise InvalidArgument("u and v must be equal-shaped 2-D arrays")

    @property
    def shape(self):
        return self.u.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    def save(self, path) -> None:
        """Write a two-plane little-endian float32 binary with a JSON header."""
        h, w = self.shape
        header = json.dumps({"height": h, "width": w, "dtype": "<f4", "planes": ["u", "v"]}).encode()
        with open(path, "wb") as fh:
            fh.write(_FLOW_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(self.u.astype("<f4").tobytes())
            fh.write(self.v.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "FlowField":
        raw = Path(path).read_bytes()
        if raw[:8] != _FLOW_MAGIC:
            raise InvalidArgument(f"{path}: not a flow file")
        (n,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12 : 12 + n])
        h, w = header["height"], header["width"]
        data = np.frombuffer(raw[12 + n :], dtype="<f4")
        if data.size != 2 * h * w:
            raise InvalidArgument(f"{path}: truncated flow file")
        return cls(data[: h * w].reshape(h, w), data[h * w :].reshape(h, w))


@dataclass
class DisplacementEstimate:
    d_dom: np.ndarray
    magnitude: float
    direction: float
    valid: bool

    @classmethod
    def invalid(cls) -> "DisplacementEstimate":
        return cls(np.zeros(2), 0.0, 0.0, False)

    def to_dict(self) -> dict:
        return {
            "d_dom": [float(x) for x in self.d_dom],
            "magnitude": self.magnitude,
            "direction": self.direction,
            "valid": self.valid,
        }


def grayscale(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img.copy()
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


@functools.lru_cache(maxsize=8)
def _expansion_kernels(n: int, sigma: float) -> np.ndarray:
    """Correlation kernels for the weighted least-squares quadratic fit.

    Returns a ``(6, 2n+1, 2n+1)`` array whose correlation with an image gives
    the coefficients of ``f ~ c + bx x + by y + axx x^2 + ayy y^2 + axy xy``.
    """
    r = np.arange(-n, n + 1, dtype=np.float64)
    g = np.exp(-(r**2) / (2 * sigma**2))
    g /= g.sum()
    yy, xx = np.meshgrid(r, r, indexing="ij")
    basis = np.stack([np.ones_like(xx), xx, yy, xx**2, yy**2, xx * yy], -1).reshape(-1, 6)
    weights = np.outer(g, g).ravel()
    gram = basis.T @ (weights[:, None] * basis)
    kernels = np.linalg.solve(gram, basis.T * weights).reshape(6, 2 * n + 1, 2 * n + 1)
    return kernels


def poly_expansion(img: np.ndarray, n: int, sigma: float):
    """Per-pixel quadratic expansion; returns ``(A, b)`` with shapes HxWx2x2, HxWx2."""
    coef = [correlate(img, k, mode="reflect") for k in _expansion_kernels(n, float(sigma))]
    _, bx, by, axx, ayy, axy = coef
    A = np.empty(img.shape + (2, 2))
    A[..., 0, 0] = axx
    A[..., 1, 1] = ayy
    A[..., 0, 1] = A[..., 1, 0] = axy / 2
    return A, np.stack([bx, by], -1)


def _sample(field: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear, edge-clamped sampling of a stack of planes ``H x W x ...``."""
    h, w = field.shape[:2]
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2 if w > 1 else 0)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2 if h > 1 else 0)
    fx = (x - x0).reshape(x.shape + (1,) * (field.ndim - 2))
    fy = (y - y0).reshape(y.shape + (1,) * (field.ndim - 2))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = field[y0, x0] * (1 - fx) + field[y0, x1] * fx
    bot = field[y1, x0] * (1 - fx) + field[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _update_matrices(A1, b1, A2, b2, flow):
    h, w = flow.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    A2w = _sample(A2, xx + flow[..., 0], yy + flow[..., 1])
    b2w = _sample(b2, xx + flow[..., 0], yy + flow[..., 1])
    A = 0.5 * (A1 + A2w)
    db = -0.5 * (b2w - b1) + np.einsum("...ij,...j->...i", A, flow)
    # normal equations of A d = db
    G = np.einsum("...ki,...kj->...ij", A, A)
    hvec = np.einsum("...ki,...k->...i", A, db)
    return np.concatenate([G.reshape(h, w, 4), hvec], -1)


def _solve(M, winsize):
    M = uniform_filter(M, size=(winsize, winsize, 1), mode="reflect")
    g11, g12, g22 = M[..., 0], M[..., 1], M[..., 3]
    h1, h2 = M[..., 4], M[..., 5]
    idet = 1.0 / (g11 * g22 - g12 * g12 + _SOLVE_EPS)
    return np.stack([(g22 * h1 - g12 * h2) * idet, (g11 * h2 - g12 * h1) * idet], -1)


def _resize(img: np.ndarray, shape) -> np.ndarray:
    h, w = img.shape[:2]
    th, tw = shape
    ys = (np.arange(th) + 0.5) * (h / th) - 0.5
    xs = (np.arange(tw) + 0.5) * (w / tw) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    if img.ndim == 2:
        return map_coordinates(img, [yy, xx], order=1, mode="nearest")
    return np.stack([map_coordinates(img[..., c], [yy, xx], order=1, mode="nearest") for c in range(img.shape[2])], -1)


def _pyramid_shapes(shape, p: FlowParams):
    shapes = [tuple(shape)]
    scale = 1.0
    for _ in range(1, p.levels):
        scale *= p.pyr_scale
        s = (int(round(shape[0] * scale)), int(round(shape[1] * scale)))
        if min(s) < _MIN_LEVEL_SIZE:
            break
        shapes.append(s)
    return shapes


def farneback_flow(a: np.ndarray, b: np.ndarray, p: FlowParams = FlowParams()) -> FlowField:
    """Dense flow from ``a`` to ``b`` such that ``b(x + u, y + v) ~= a(x, y)``.

    Args:
        a: Source grayscale image (H x W, values in [0, 1]).
        b: Target grayscale image of the same shape.
        p: Pyramid, window and polynomial-expansion parameters.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise InvalidArgument(f"expected equal-shaped grayscale images, got {a.shape} and {b.shape}")
    if min(a.shape) < 2 * p.poly_n:
        raise InvalidArgument(f"images of shape {a.shape} are too small for poly_n={p.poly_n}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise InvalidArgument("images must be finite")
    a = a * _INTENSITY_SCALE
    b = b * _INTENSITY_SCALE

    shapes = _pyramid_shapes(a.shape, p)
    flow = None
    for k in range(len(shapes) - 1, -1, -1):
        shape = shapes[k]
        if k == 0:
            ak, bk = a, b
        else:
            sigma = (1.0 / p.pyr_scale**k - 1) * 0.5
            ak = _resize(gaussian_filter(a, sigma, mode="reflect"), shape)
            bk = _resize(gaussian_filter(b, sigma, mode="reflect"), shape)
        if flow is None:
            flow = np.zeros(shape + (2,))
        else:
            prev = flow.shape[:2]
            flow = _resize(flow, shape)
            flow[..., 0] *= shape[1] / prev[1]
            flow[..., 1] *= shape[0] / prev[0]
        A1, b1 = poly_expansion(ak, p.poly_n, p.poly_sigma)
        A2, b2 = poly_expansion(bk, p.poly_n, p.poly_sigma)
        M = _update_matrices(A1, b1, A2, b2, flow)
        for _ in range(p.iterations):
            flow = _solve(M, p.winsize)
            M = _update_matrices(A1, b1, A2, b2, flow)
    return FlowField(flow[..., 0], flow[..., 1])


def dominant_displacement(
    flow: FlowField, face_mask: np.ndarray | None = None, eps: float = 0.5, bins: int = 36
) -> DisplacementEstimate:
    """Dominant displacement of a flow field restricted to ``face_mask``.

    Vectors shorter than ``eps`` are dropped, the remaining directions are
    histogrammed into ``bins`` equal bins over ``[-pi, pi)``, and the most
    populated bin (ties broken by larger summed magnitude) provides the
    median direction and the maximum magnitude.
    """
    if eps < 0:
        raise InvalidArgument("eps must be >= 0")
    if bins < 4:
        raise InvalidArgument("bins must be >= 4")
    u, v = flow.u, flow.v
    if face_mask is None:
        face_mask = np.ones(u.shape, dtype=bool)
    face_mask = np.asarray(face_mask, dtype=bool)
    if face_mask.shape != u.shape:
        raise InvalidArgument("face_mask shape must equal flow shape")
    u, v = u[face_mask], v[face_mask]
    mag = np.hypot(u, v)
    keep = mag >= eps
    if eps == 0:
        keep &= mag > 0
    if not keep.any():
        return DisplacementEstimate.invalid()
    mag, phi = mag[keep], np.arctan2(v[keep], u[keep])
    idx = bin_index(phi, bins)
    counts = np.bincount(idx, minlength=bins)
    sums = np.bincount(idx, weights=mag, minlength=bins)
    best = max(range(bins), key=lambda i: (counts[i], sums[i]))
    in_bin = idx == best
    direction = float(np.median(phi[in_bin]))
    magnitude = float(mag[in_bin].max())
    d = magnitude * np.array([np.cos(direction), np.sin(direction)])
    return DisplacementEstimate(d, magnitude, direction, True)


def bin_index(phi: np.ndarray, bins: int) -> np.ndarray:
    """Bin of each angle for ``bins`` equal bins over ``[-pi, pi)`` (``pi`` wraps to 0)."""
    idx = np.floor((np.asarray(phi) + np.pi) / (2 * np.pi) * bins).astype(np.int64)
    return np.mod(idx, bins)


def reproject_displacement(d, t) -> np.ndarray:
    """Map an inset-space displacement into frame space (linear part of ``t`` only)."""
    return t.linear() @ np.asarray(d, dtype=np.float64)


def smooth_displacements(seq: Sequence[DisplacementEstimate], sigma: float = 1.5) -> np.ndarray:
    """Temporally smooth ``d_dom`` vectors, filling invalid frames by interpolation."""
    if sigma < 0:
        raise InvalidArgument("sigma must be >= 0")
    n = len(seq)
    if n == 0:
        return np.zeros((0, 2))
    valid = np.array([e.valid for e in seq])
    d = np.array([np.asarray(e.d_dom, dtype=np.float64) for e in seq]).reshape(n, 2)
    if not valid.any():
        warnings.warn("all displacement estimates are invalid; using zeros", AllInvalidWarning, stacklevel=2)
        return np.zeros((n, 2))
    t = np.arange(n)
    if not valid.all():
        for c in range(2):
            d[:, c] = np.interp(t, t[valid], d[valid, c])
    if sigma == 0:
        return d
    return gaussian_filter1d(d, sigma, axis=0, mode="reflect")
