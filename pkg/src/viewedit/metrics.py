"""Reconstruction and identity metrics for frame sequences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidArgument
from .providers import cosine, identity_embed

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at :data:`PSNR_CAP`."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(peak**2 / mse)))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, sigma: float = 1.5) -> float:
    """Mean structural similarity with an 11-tap Gaussian window, channels averaged.

    Uses the standard constants ``K1 = 0.01`` and ``K2 = 0.03`` with
    Gaussian-weighted (population) moments; pixels within 5 px of the border
    are excluded from the mean.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    truncate = 5 / sigma  # radius 5 -> 11 x 11 window
    pad = 5
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]

        def filt(img):
            return gaussian_filter(img, sigma, truncate=truncate, mode="reflect")

        ux, uy = filt(x), filt(y)
        vx = filt(x * x) - ux * ux
        vy = filt(y * y) - uy * uy
        vxy = filt(x * y) - ux * uy
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
        vals.append(s[pad:-pad, pad:-pad].mean())
    return float(np.mean(vals))


def _stats(values: Sequence[float]) -> Dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"min": float("nan"), "max": float("nan"), "mean": float("nan")}
    return {"min": float(v.min()), "max": float(v.max()), "mean": float(v.mean())}


@dataclass
class MetricsReport:
    psnr: List[float]
    ssim: List[float]
    identity: List[float]
    temporal: List[float]
    notes: List[str] = field(default_factory=lambda: ["FID omitted: it needs a pretrained feature network."])

    def aggregate(self) -> Dict[str, Dict[str, float]]:
        return {
            "psnr": _stats(self.psnr),
            "ssim": _stats(self.ssim),
            "identity": _stats(self.identity),
            "temporal": _stats(self.temporal),
        }

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "frames": len(self.psnr),
            "per_frame": {"psnr": self.psnr, "ssim": self.ssim, "identity": self.identity, "temporal": self.temporal},
            "aggregate": self.aggregate(),
            "notes": list(self.notes),
        }


def temporal_differences(embeddings: Sequence[np.ndarray]) -> List[float]:
    return [1.0 - cosine(embeddings[i], embeddings[i + 1]) for i in range(len(embeddings) - 1)]


def evaluate_sequences(
    output: Sequence[np.ndarray],
    reference: Sequence[np.ndarray],
    face_crops: Optional[Callable[[int, np.ndarray], np.ndarray]] = None,
    embed: Callable = identity_embed,
) -> MetricsReport:
    """Compare two equally long frame sequences.

    Args:
        output: frames under test.
        reference: ground-truth frames.
        face_crops: optional ``(index, frame) -> crop`` used for identity
            embeddings; whole frames are embedded otherwise.
        embed: identity embedder.
    """
    if len(output) != len(reference):
        raise InvalidArgument(f"sequence lengths differ: {len(output)} vs {len(reference)}")
    crop = face_crops or (lambda i, f: f)
    p, s, ids, embs = [], [], [], []
    for i, (o, r) in enumerate(zip(output, reference)):
        p.append(psnr(o, r))
        s.append(ssim(o, r))
        eo, er = embed(crop(i, o)), embed(crop(i, r))
        ids.append(cosine(eo, er))
        embs.append(eo)
    return MetricsReport(p, s, ids, temporal_differences(embs))
