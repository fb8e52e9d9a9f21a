"""Synthetic talking-head videos with planted ground truth.

A scene is rendered by a *true* generator, a seeded perturbation of the base
generator, so that personalization has something to learn.  The head is
composited over a static textured background and torso through a slowly
drifting similarity transform; planted keypoints accompany every frame.

Novel-view ground truth re-renders the true head from a shifted yaw and
pastes it so that a pivot point on the neck stays fixed in the frame, the
way a real head turns on a static body.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from . import align
from .errors import InvalidArgument
from .io import save_frames, write_json
from .toygen import (
    FACE_FRONT_Z, HEAD_AXES, HEAD_CENTER_Y, NECK_Z_SHIFT, ToyGenerator, to_numpy_image
)

TORSO_COLOR = (0.22, 0.28, 0.42)


@dataclass
class SceneConfig:
    num_frames: int = 10
    frame_size: int = 128
    crop_scale: float = 1.15
    yaw_amplitude: float = 0.3
    pitch_amplitude: float = 0.06
    drift: float = 3.0
    roll_amplitude: float = 0.03
    perturbation: float = 0.35
    delta_scale: float = 0.03
    smile_amplitude: float = 0.3
    texture_amplitude: float = 0.03
    keypoint_noise: float = 0.3
    seed: int = 0

    def validate(self) -> "SceneConfig":
        if self.num_frames < 1:
            raise InvalidArgument("scene.num_frames must be >= 1")
        if self.frame_size < 32:
            raise InvalidArgument("scene.frame_size must be >= 32")
        if self.crop_scale <= 0:
            raise InvalidArgument("scene.crop_scale must be positive")
        return self


def perturb_generator(base: ToyGenerator, amount: float, seed: int) -> ToyGenerator:
    """Copy of ``base`` whose field weights carry seeded relative noise."""
    gen = base.clone()
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name in ("field_pe", "field_lat", "field_w2", "field_out", "shape_lat"):
            p = getattr(gen, name)
            noise = torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype)
            p.add_(amount * p.std() * noise)
    return gen


@dataclass
class Scene:
    config: SceneConfig
    generator: ToyGenerator
    w_true: torch.Tensor
    offsets: torch.Tensor
    cams: torch.Tensor
    transforms: List[align.CropTransform]
    background: np.ndarray
    keypoints: List[np.ndarray]
    frames: List[np.ndarray]

    def __len__(self):
        return len(self.frames)

    @property
    def crop_size(self) -> int:
        return self.generator.config.res

    def pivot_shift(self, cam, cam2) -> np.ndarray:
        """Crop-pixel motion of the neck pivot between two camera poses."""
        p = np.array([[0.0, HEAD_CENTER_Y - 0.5 * HEAD_AXES[1], FACE_FRONT_Z - HEAD_AXES[2] + NECK_Z_SHIFT]])
        g = self.generator
        a = g.project(p, g.camera(*cam))[0]
        b = g.project(p, g.camera(*cam2))[0]
        return a - b

    def render(self, yaw_offset: float = 0.0, w: Optional[torch.Tensor] = None) -> List[np.ndarray]:
        """Frames with the true head turned by ``yaw_offset`` (neck pivot held still)."""
        w = self.w_true if w is None else w
        cams = self.cams.clone()
        cams[:, 0] += yaw_offset
        heads, alphas = _render_heads(self.generator, w.unsqueeze(0) + self.offsets, cams)
        out = []
        for i in range(len(self.frames)):
            t = self.transforms[i]
            if yaw_offset != 0.0:
                shift = self.pivot_shift(self.cams[i].tolist(), cams[i].tolist())
                t = t.translated(t.linear() @ shift)
            out.append(align.paste_crop(self.background, heads[i], t, alphas[i]))
        return out

    def save(self, directory, novel_yaw: float = 0.0) -> None:
        d = Path(directory)
        save_frames(self.frames, d / "frames")
        align.save_keypoints(self.keypoints, d / "keypoints.json")
        write_json(
            {
                "version": 1,
                "config": asdict(self.config),
                "w_true": [float(x) for x in self.w_true.to(torch.float64)],
                "cams": [{"yaw": float(c[0]), "pitch": float(c[1])} for c in self.cams.to(torch.float64)],
                "transforms": [t.to_dict() for t in self.transforms],
                "novel_yaw": novel_yaw,
            },
            d / "scene.json",
        )
        if novel_yaw != 0.0:
            save_frames(self.render(novel_yaw), d / "novel_view_frames")


def _render_heads(gen: ToyGenerator, w: torch.Tensor, cams: torch.Tensor):
    with torch.no_grad():
        raw, acc = gen.render_raw(w, cams, return_alpha=True)
        full = gen.upsample(raw)
        alpha = F.interpolate(acc, scale_factor=gen.config.factor, mode="bilinear", align_corners=False)
    heads = [to_numpy_image(f) for f in full]
    alphas = [np.clip(a[0].to(torch.float64).numpy(), 0.0, 1.0) for a in alpha]
    return heads, alphas


def _background(gen: ToyGenerator, w: torch.Tensor, size: int, amplitude: float, rng) -> np.ndarray:
    with torch.no_grad():
        img = gen.render_raw(w, gen.camera(0.0, 0.0))
    color = img[:, 0, 0].to(torch.float64).numpy()
    tex = gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(4, 4, 0))
    tex = tex / (np.abs(tex).max() + 1e-12)
    ramp = np.linspace(-0.5, 0.5, size)[:, None, None]
    bg = color[None, None, :] + amplitude * tex + 0.5 * amplitude * ramp
    return np.clip(bg, 0.0, 1.0)


def make_scene(base: ToyGenerator, cfg: Optional[SceneConfig] = None) -> Scene:
    """Render a planted scene from ``base`` and ``cfg`` (fully determined by ``cfg.seed``)."""
    cfg = (cfg or SceneConfig()).validate()
    rng = np.random.default_rng(cfg.seed)
    gen = perturb_generator(base, cfg.perturbation, cfg.seed + 17)
    T, S, res = cfg.num_frames, cfg.frame_size, gen.config.res
    w = gen.sample_latents(1, cfg.seed + 1)[0]
    s = np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)
    phase = rng.uniform(0, 2 * math.pi)
    yaw = cfg.yaw_amplitude * np.sin(2 * math.pi * s + phase)
    pitch = cfg.pitch_amplitude * np.cos(math.pi * s + phase)
    cams = torch.tensor(np.stack([yaw, pitch], 1), dtype=torch.float64).to(gen.dtype)

    noise = gaussian_filter(rng.standard_normal((T, gen.config.w_dim)), sigma=(2.0, 0), mode="reflect")
    noise = noise / (noise.std() + 1e-12) * cfg.delta_scale
    smile = cfg.smile_amplitude * np.sin(4 * math.pi * s)
    offsets = torch.as_tensor(noise, dtype=torch.float64) + torch.as_tensor(smile)[:, None] * gen.planted[1].to(torch.float64)
    offsets = offsets.to(gen.dtype)

    background = _background(gen, w, S, cfg.texture_amplitude, rng)
    yy, xx = np.mgrid[0:S, 0:S]
    centre = np.array([S / 2 - 0.5, S * 0.45])
    torso_top = centre[1] + 0.5 * res * cfg.crop_scale - 6
    torso = ((xx - centre[0]) / (0.42 * S)) ** 2 + ((yy - (torso_top + 0.5 * S)) / (0.5 * S)) ** 2 <= 1
    background = background.copy()
    background[torso] = np.array(TORSO_COLOR)

    drift = cfg.drift * np.stack([np.sin(2 * math.pi * s), 0.5 * np.sin(math.pi * s)], 1)
    roll = cfg.roll_amplitude * np.sin(2 * math.pi * s + 1.0)
    c_crop = np.array([res / 2 - 0.5, res / 2 - 0.5])
    transforms = []
    for i in range(T):
        lin = align.CropTransform(cfg.crop_scale, float(roll[i]), (0.0, 0.0)).linear()
        transforms.append(align.CropTransform(cfg.crop_scale, float(roll[i]), tuple(centre + drift[i] - lin @ c_crop)))

    heads, alphas = _render_heads(gen, w.unsqueeze(0) + offsets, cams)
    frames, keypoints = [], []
    for i in range(T):
        frames.append(align.paste_crop(background, heads[i], transforms[i], alphas[i]))
        kp = transforms[i].apply(gen.keypoints(gen.camera(yaw[i], pitch[i]), res))
        keypoints.append(kp + cfg.keypoint_noise * rng.standard_normal(kp.shape))
    return Scene(cfg, gen, w, offsets, cams, transforms, background, keypoints, frames)
