"""Boundary regions, inset optimization and alpha-blended re-insertion."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import distance_transform_edt

from . import align
from .errors import InvalidArgument, NumericFailure
from .providers import HEAD_CLASSES, pyramid_distance
from .toygen import ToyGenerator, to_numpy_image, to_tensor_image

log = logging.getLogger(__name__)

REFERENCE_CROP = 512


@dataclass
class CompositeConfig:
    weight_foreground: float = 1.0
    weight_border: float = 2.0
    edge_size: int = 50
    border_size: int = 50
    num_steps: int = 150
    learning_rate: float = 1e-2
    border_loss_threshold: float = 0.05

    def validate(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise InvalidArgument(f"composite.{k} must be nonnegative, got {v}")
        if self.border_size < 1:
            raise InvalidArgument("composite.border_size must be >= 1")
        return self

    def scaled_sizes(self, crop_size: int):
        """``(edge_size, border_size)`` in pixels for a crop of ``crop_size``.

        The defaults refer to 512-pixel crops and scale proportionally.
        """
        f = crop_size / REFERENCE_CROP
        return int(round(self.edge_size * f)), max(1, int(round(self.border_size * f)))


@dataclass
class BoundaryRegions:
    inside: np.ndarray
    border: np.ndarray
    outside: np.ndarray
    border_size: int

    @property
    def shape(self):
        return self.inside.shape

    def alpha(self) -> np.ndarray:
        """1 inside, 0 outside, a distance-based linear ramp across the border."""
        alpha = self.inside.astype(np.float64)
        if self.border.any():
            d_in = distance_transform_edt(~self.inside) if self.inside.any() else np.full(self.shape, np.inf)
            d_out = distance_transform_edt(~self.outside) if self.outside.any() else np.full(self.shape, np.inf)
            b = self.border
            alpha[b] = d_out[b] / (d_in[b] + d_out[b])
        return alpha

    def support(self) -> np.ndarray:
        return self.inside | self.border


def boundary_regions(
    mask_src: np.ndarray,
    mask_edit: np.ndarray,
    cfg: Optional[CompositeConfig] = None,
    border_size: Optional[int] = None,
    edge_size: Optional[int] = None,
) -> BoundaryRegions:
    """Regions from the union of the head classes of two label maps.

    Args:
        mask_src: label map of the source crop.
        mask_edit: label map of the edited render.
        cfg: supplies ``border_size``/``edge_size`` scaled to the crop size.
        border_size: explicit dilation radius in pixels (Euclidean disc).
        edge_size: explicit width of the crop margin the border stays out of.
    """
    cfg = cfg or CompositeConfig()
    e_scaled, b_scaled = cfg.scaled_sizes(np.shape(mask_src)[0])
    border_size = b_scaled if border_size is None else border_size
    edge_size = e_scaled if edge_size is None else edge_size
    mask_src = np.asarray(mask_src)
    mask_edit = np.asarray(mask_edit)
    if mask_src.shape != mask_edit.shape:
        raise InvalidArgument("masks must have equal shapes")
    head = np.array([int(c) for c in HEAD_CLASSES])
    inside = np.isin(mask_src, head) | np.isin(mask_edit, head)
    return regions_from_inside(inside, border_size, edge_size)


def regions_from_inside(inside: np.ndarray, border_size: int, edge_size: int = 0) -> BoundaryRegions:
    inside = np.asarray(inside, dtype=bool)
    if border_size < 1:
        raise InvalidArgument("border_size must be >= 1")
    if inside.any():
        border = (distance_transform_edt(~inside) <= border_size) & ~inside
    else:
        border = np.zeros_like(inside)
    if edge_size > 0:
        h, w = inside.shape
        yy, xx = np.mgrid[0:h, 0:w]
        near_edge = np.minimum(np.minimum(yy, h - 1 - yy), np.minimum(xx, w - 1 - xx)) < edge_size
        border &= ~near_edge
    outside = ~(inside | border)
    return BoundaryRegions(inside, border, outside, int(border_size))


def alpha_blend(inset: np.ndarray, frame_crop: np.ndarray, regions: BoundaryRegions) -> np.ndarray:
    inset = np.asarray(inset, dtype=np.float64)
    frame_crop = np.asarray(frame_crop, dtype=np.float64)
    if inset.shape != frame_crop.shape or inset.shape[:2] != regions.shape:
        raise InvalidArgument("inset, frame crop and regions must share a shape")
    alpha = regions.alpha()[..., None]
    out = frame_crop.copy()
    ramp = regions.border
    out[regions.inside] = inset[regions.inside]
    out[ramp] = (alpha[ramp] * inset[ramp] + (1 - alpha[ramp]) * frame_crop[ramp])
    return out


def masked_l1(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over the pixels where ``mask`` is set."""
    n = mask.sum() * a.shape[-3]
    if n == 0:
        return a.new_zeros(())
    return ((a - b).abs() * mask).sum() / n


def inset_loss(gen: ToyGenerator, w: torch.Tensor, cam: torch.Tensor, target: torch.Tensor,
               border: torch.Tensor, inside: torch.Tensor, anchor: torch.Tensor, cfg: CompositeConfig):
    """Weighted border + foreground-anchor loss of the inset rendered from ``w`` at ``cam``.

    Returns ``(total, border_loss, image)``.
    """
    img = gen.generate(w, cam)[1]
    border_loss = masked_l1(img, target, border)
    fg = pyramid_distance(img * inside, anchor * inside) + masked_l1(img, anchor, inside)
    return cfg.weight_border * border_loss + cfg.weight_foreground * fg, border_loss, img


def inset_optimize(
    gen: ToyGenerator,
    w_edit: torch.Tensor,
    delta_t: torch.Tensor,
    cam_t,
    target_crop: np.ndarray,
    regions: BoundaryRegions,
    cfg: CompositeConfig = CompositeConfig(),
    history: Optional[List[float]] = None,
    frame: Optional[int] = None,
) -> np.ndarray:
    """Optimize a copy of the frame offset so the border matches the source crop.

    The foreground is anchored to the render before optimization.  Returns
    the final inset as an ``H x W x 3`` array.  Per-step border losses are
    appended to ``history`` when given.
    """
    dtype = gen.dtype
    w_edit = torch.as_tensor(w_edit, dtype=dtype).detach()
    delta = torch.as_tensor(delta_t, dtype=dtype).detach().clone().requires_grad_(True)
    cam = torch.as_tensor(np.asarray(cam_t, dtype=np.float64), dtype=dtype)
    target = to_tensor_image(target_crop, dtype)
    border = torch.as_tensor(regions.border, dtype=dtype)
    inside = torch.as_tensor(regions.inside, dtype=dtype)
    with torch.no_grad():
        anchor = gen.generate(w_edit + delta, cam)[1]
    opt = torch.optim.Adam([delta], lr=cfg.learning_rate)
    requires = [p.requires_grad for p in gen.parameters()]
    for p in gen.parameters():
        p.requires_grad_(False)
    try:
        img = anchor
        for step in range(cfg.num_steps + 1):
            loss, border_loss, img = inset_loss(gen, w_edit + delta, cam, target, border, inside, anchor, cfg)
            if not torch.isfinite(border_loss):
                raise NumericFailure("non-finite border loss", step=step, frame=frame)
            if history is not None:
                history.append(border_loss.item())
            if border_loss.item() < cfg.border_loss_threshold or step == cfg.num_steps:
                break
            opt.zero_grad()
            loss.backward()
            if not torch.isfinite(delta.grad).all():
                raise NumericFailure("non-finite gradient", step=step, frame=frame)
            opt.step()
    finally:
        for p, r in zip(gen.parameters(), requires):
            p.requires_grad_(r)
    return to_numpy_image(img.detach())


def composite_frame(
    frame: np.ndarray, inset: np.ndarray, t: align.CropTransform, d_frame, regions: BoundaryRegions
) -> np.ndarray:
    """Paste ``inset`` into ``frame`` at ``t`` shifted by ``d_frame`` using the blend alpha.

    Frame pixels outside the warped inside+border support are unchanged.
    """
    t2 = t.translated(np.asarray(d_frame, dtype=np.float64))
    return align.paste_crop(frame, inset, t2, regions.alpha())


def save_debug(regions: BoundaryRegions, directory, frame_index: int) -> None:
    """Write region labels (0 outside, 128 border, 255 inside) and alpha as PNGs."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lab = np.zeros(regions.shape, np.uint8)
    lab[regions.border] = 128
    lab[regions.inside] = 255
    Image.fromarray(lab, mode="L").save(d / f"regions_{frame_index:05d}.png")
    a = np.clip(np.round(regions.alpha() * 255), 0, 255).astype(np.uint8)
    Image.fromarray(a, mode="L").save(d / f"alpha_{frame_index:05d}.png")
