"""A small differentiable 3D-aware face generator.

The generator mirrors the structure of a style-based 3D GAN at toy scale:

* a mapping network ``z -> w``,
* a coordinate-MLP neural field conditioned on ``w`` that is rendered by
  ray marching from a camera on a sphere around the head (``render_raw``),
* a 2D upsampler that turns the raw render into the full-resolution image.

The field is a procedural head (ellipsoid, neck, nose bump, eye/brow/mouth
blobs and a hair cap) whose shape and colours are modulated by ``w``.  The
rotation pivot sits on the face surface, so yaw changes swing the mass of
the head and the neck sideways while the facial keypoints stay put.  Two
unit directions in w-space are planted as semantic attributes (``hair`` and
``smile``) and act on those regions only, which gives attribute editing a
known ground truth.

Images produced by the generator are torch tensors laid out ``(3, H, W)``
(or ``(N, 3, H, W)`` when batched) with values in ``[0, 1]``.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidArgument

ATTRIBUTES = ("hair", "smile")
ATTRIBUTE_STD = 2.5

# Procedural head layout in world units; the camera orbits the origin.
FACE_FRONT_Z = 0.01
HEAD_AXES = (0.25, 0.31, 0.27)
HEAD_CENTER_Y = -0.02
NECK_RADIUS = 0.11
NECK_Z_SHIFT = 0.06
EYE_X, EYE_Y, EYE_SIGMA = 0.09, 0.0, 0.028
BROW_Y = 0.065
MOUTH_Y, MOUTH_HALF_WIDTH = -0.175, 0.055
NOSE_CENTER = (0.0, -0.085, 0.0)
NOSE_AXES = (0.035, 0.06, 0.05)

SKIN_LOGIT = (0.9, 0.15, -0.35)
HAIR_LOGIT = (-0.6, -1.0, -1.3)
EYE_LOGIT = (-2.2, -2.2, -1.8)
BROW_LOGIT = (-1.5, -1.8, -2.0)
MOUTH_LOGIT = (0.9, -1.3, -1.0)
BACKGROUND_LOGIT = (0.3, 0.45, 0.7)

# Five canonical landmarks: eye centres, nose tip, mouth corners.
LANDMARKS_3D = np.array(
    [
        [-EYE_X, EYE_Y, FACE_FRONT_Z],
        [EYE_X, EYE_Y, FACE_FRONT_Z],
        [NOSE_CENTER[0], NOSE_CENTER[1], NOSE_CENTER[2] + NOSE_AXES[2]],
        [-MOUTH_HALF_WIDTH, MOUTH_Y, FACE_FRONT_Z],
        [MOUTH_HALF_WIDTH, MOUTH_Y, FACE_FRONT_Z],
    ]
)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class CameraPose:
    """Camera on a sphere around the origin, looking at the origin."""

    yaw: float = 0.0
    pitch: float = 0.0
    radius: float = 2.5
    fov_deg: float = 18.0

    def __post_init__(self):
        if not (math.isfinite(self.yaw) and -math.pi <= self.yaw <= math.pi):
            raise InvalidArgument(f"yaw {self.yaw} outside [-pi, pi]")
        if not (math.isfinite(self.pitch) and -math.pi / 2 <= self.pitch <= math.pi / 2):
            raise InvalidArgument(f"pitch {self.pitch} outside [-pi/2, pi/2]")
        if self.radius <= 0 or self.fov_deg <= 0:
            raise InvalidArgument("radius and fov_deg must be positive")


@dataclass(frozen=True)
class GeneratorConfig:
    z_dim: int = 32
    w_dim: int = 64
    raw_res: int = 32
    factor: int = 2
    num_samples: int = 24
    radius: float = 2.5
    fov_deg: float = 18.0
    bound: float = 0.6
    hidden: int = 32
    pe_freqs: int = 3
    up_channels: int = 8
    seed: int = 0
    dtype: str = "float32"

    @property
    def res(self) -> int:
        return self.raw_res * self.factor

    @property
    def near(self) -> float:
        return self.radius - self.bound

    @property
    def far(self) -> float:
        return self.radius + self.bound

    def validate(self):
        if self.dtype not in _DTYPES:
            raise InvalidArgument(f"dtype must be one of {sorted(_DTYPES)}")
        for name in ("z_dim", "w_dim", "raw_res", "factor", "num_samples", "hidden", "up_channels"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        if self.z_dim <= len(ATTRIBUTES) or self.w_dim <= len(ATTRIBUTES):
            raise InvalidArgument(f"z_dim and w_dim must exceed the {len(ATTRIBUTES)} planted attributes")
        if not 0 < self.bound < self.radius:
            raise InvalidArgument("bound must lie in (0, radius)")


CamLike = Union[CameraPose, torch.Tensor, Sequence[float]]


def _positional_encoding(x: torch.Tensor, freqs: int) -> torch.Tensor:
    out = [x]
    for k in range(freqs):
        out.append(torch.sin((2.0**k) * math.pi * x))
        out.append(torch.cos((2.0**k) * math.pi * x))
    return torch.cat(out, dim=-1)


class Upsampler(nn.Module):
    """Bilinear upsampling followed by a small residual conv in logit space.

    The output is corrected block by block so that its area average equals
    the raw input exactly: the learned residual adds only sub-pixel detail,
    and downsampling a full-resolution render gives back the raw render.
    """

    def __init__(self, factor: int, channels: int, gen: torch.Generator):
        super().__init__()
        self.factor = factor
        self.conv1 = nn.Conv2d(3, channels, 3)
        self.conv2 = nn.Conv2d(channels, 3, 3)
        with torch.no_grad():
            self.conv1.weight.copy_(torch.randn(self.conv1.weight.shape, generator=gen) * 0.3)
            self.conv1.bias.copy_(torch.randn(self.conv1.bias.shape, generator=gen) * 0.1)
            self.conv2.weight.copy_(torch.randn(self.conv2.weight.shape, generator=gen) * 0.02)
            self.conv2.bias.zero_()

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(raw, scale_factor=self.factor, mode="bilinear", align_corners=False)
        logit = torch.logit(x, eps=1e-6)
        h = F.silu(self.conv1(F.pad(logit, (1, 1, 1, 1), mode="replicate")))
        out = torch.sigmoid(logit + self.conv2(F.pad(h, (1, 1, 1, 1), mode="replicate")))
        block_mean = F.avg_pool2d(out, self.factor)
        return out + F.interpolate(raw - block_mean, scale_factor=self.factor, mode="nearest")


class ToyGenerator(nn.Module):
    """Toy 3D-aware generator; its state plays the role of the generator weights."""

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        config = config or GeneratorConfig()
        config.validate()
        self.config = config
        g = torch.Generator().manual_seed(config.seed)
        D, Z, Hd = config.w_dim, config.z_dim, config.hidden
        pe_dim = 3 * (1 + 2 * config.pe_freqs)

        def randn(*shape, scale=1.0):
            return nn.Parameter(torch.randn(shape, generator=g, dtype=torch.float64) * scale)

        # mapping network
        self.map_w1 = randn(D, Z - len(ATTRIBUTES), scale=1.0 / math.sqrt(Z - len(ATTRIBUTES)))
        self.map_b1 = randn(D, scale=0.5)
        self.map_w2 = randn(D, D, scale=2.0 / math.sqrt(D))
        self.map_b2 = randn(D, scale=0.1)

        # neural field
        self.field_pe = randn(Hd, pe_dim, scale=1.0 / math.sqrt(pe_dim))
        self.field_lat = randn(Hd, D, scale=0.8 / math.sqrt(D))
        self.field_b1 = randn(Hd, scale=0.3)
        self.field_w2 = randn(Hd, Hd, scale=1.0 / math.sqrt(Hd))
        self.field_b2 = randn(Hd, scale=0.3)
        self.field_out = randn(3, Hd, scale=1.2 / math.sqrt(Hd))
        self.shape_lat = randn(3, D, scale=1.0 / math.sqrt(D))
        self.bg_lat = randn(3, D, scale=0.4 / math.sqrt(D))
        self.attr_gain = nn.Parameter(torch.tensor([0.7, 0.7], dtype=torch.float64))

        self.upsampler = Upsampler(config.factor, config.up_channels, g).to(torch.float64)

        planted, _ = torch.linalg.qr(torch.randn(D, len(ATTRIBUTES), generator=g, dtype=torch.float64))
        self.register_buffer("planted", planted.T.contiguous())
        with torch.no_grad():
            z = torch.randn(4096, Z, generator=g, dtype=torch.float64)
            self.register_buffer("w_avg", self._map(z).mean(0))
        self._upsampler_frozen = False
        self.to(_DTYPES[config.dtype])

    # ------------------------------------------------------------------ #
    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.config.dtype]

    @property
    def upsampler_frozen(self) -> bool:
        return self._upsampler_frozen

    @upsampler_frozen.setter
    def upsampler_frozen(self, value: bool):
        self._upsampler_frozen = bool(value)
        for p in self.upsampler.parameters():
            p.requires_grad_(not self._upsampler_frozen)

    def field_parameters(self):
        """Parameters that fine-tuning may update (everything but the upsampler)."""
        return [p for n, p in self.named_parameters() if not n.startswith("upsampler.")]

    def camera(self, yaw: float = 0.0, pitch: float = 0.0) -> CameraPose:
        return CameraPose(float(yaw), float(pitch), self.config.radius, self.config.fov_deg)

    def as_tensor(self, x) -> torch.Tensor:
        return torch.as_tensor(x, dtype=self.dtype)

    # ------------------------------------------------------------------ #
    def _map(self, z: torch.Tensor) -> torch.Tensor:
        # the first len(ATTRIBUTES) coordinates of z set the planted attribute
        # amounts; the MLP output supplies every other direction of w
        k = len(ATTRIBUTES)
        w = F.silu(z[..., k:] @ self.map_w1.T + self.map_b1) @ self.map_w2.T + self.map_b2
        w = w - (w @ self.planted.T) @ self.planted
        return w + (ATTRIBUTE_STD * z[..., :k]) @ self.planted

    def map_latent(self, z) -> torch.Tensor:
        """Map ``z`` (``(z_dim,)`` or ``(N, z_dim)``) into w-space."""
        z = self.as_tensor(z)
        if z.shape[-1] != self.config.z_dim or z.dim() not in (1, 2):
            raise InvalidArgument(f"expected z of dimension {self.config.z_dim}, got shape {tuple(z.shape)}")
        if not torch.isfinite(z).all():
            raise InvalidArgument("z contains non-finite values")
        return self._map(z)

    def sample_latents(self, n: int, seed: int) -> torch.Tensor:
        g = torch.Generator().manual_seed(seed)
        z = torch.randn(n, self.config.z_dim, generator=g, dtype=torch.float64).to(self.dtype)
        with torch.no_grad():
            return self.map_latent(z)

    def attribute_amounts(self, w: torch.Tensor) -> torch.Tensor:
        return (w - self.w_avg) @ self.planted.T

    # ------------------------------------------------------------------ #
    def _cam_tensor(self, cam: CamLike, batch: int | None) -> torch.Tensor:
        if isinstance(cam, CameraPose):
            if not (
                math.isclose(cam.radius, self.config.radius) and math.isclose(cam.fov_deg, self.config.fov_deg)
            ):
                raise InvalidArgument("camera radius/fov differ from the generator's fixed intrinsics")
            cam = torch.tensor([cam.yaw, cam.pitch], dtype=self.dtype)
        elif not isinstance(cam, torch.Tensor):
            cam = torch.as_tensor(np.asarray(cam, dtype=np.float64)).to(self.dtype)
        if cam.dim() == 1:
            cam = cam.unsqueeze(0)
        if batch is not None and cam.shape[0] != batch:
            if cam.shape[0] == 1:
                cam = cam.expand(batch, 2)
            else:
                raise InvalidArgument("camera batch does not match latent batch")
        return cam

    def camera_frame(self, cam: torch.Tensor):
        """Camera origin and (right, up, forward) axes for a ``(N, 2)`` yaw/pitch batch."""
        yaw, pitch = cam[:, 0], cam[:, 1]
        r = self.config.radius
        origin = torch.stack(
            [r * torch.cos(pitch) * torch.sin(yaw), r * torch.sin(pitch), r * torch.cos(pitch) * torch.cos(yaw)], -1
        )
        forward = -origin / r
        right = torch.stack([torch.cos(yaw), torch.zeros_like(yaw), -torch.sin(yaw)], -1)
        up = torch.cross(right, forward, dim=-1)
        return origin, right, up, forward

    def _rays(self, cam: torch.Tensor, res: int):
        origin, right, up, forward = self.camera_frame(cam)
        tan = math.tan(math.radians(self.config.fov_deg) / 2)
        c = (torch.arange(res, dtype=self.dtype) + 0.5) / res * 2 - 1
        ndc_y, ndc_x = torch.meshgrid(-c, c, indexing="ij")
        ndc = torch.stack([ndc_x.reshape(-1), ndc_y.reshape(-1)], -1) * tan  # (P, 2)
        dirs = (
            forward[:, None, :]
            + ndc[None, :, 0:1] * right[:, None, :]
            + ndc[None, :, 1:2] * up[:, None, :]
        )
        return origin, dirs / dirs.norm(dim=-1, keepdim=True)

    def _field(self, x: torch.Tensor, w: torch.Tensor):
        """Density and colour logits at points ``x`` ``(N, P, 3)`` for latents ``w`` ``(N, D)``."""
        amounts = self.attribute_amounts(w)
        w_perp = w - amounts @ self.planted
        axes = torch.as_tensor(HEAD_AXES, dtype=self.dtype) * torch.exp(0.08 * torch.tanh(w_perp @ self.shape_lat.T))
        center = torch.stack(
            [torch.zeros_like(axes[:, 0]), torch.full_like(axes[:, 0], HEAD_CENTER_Y), FACE_FRONT_Z - axes[:, 2]], -1
        )
        px, py, pz = x[..., 0], x[..., 1], x[..., 2]
        u = (x - center[:, None, :]) / axes[:, None, :]
        beta, smax = 8.0, 40.0
        sigma = smax * torch.sigmoid(beta * (1 - (u * u).sum(-1)))
        neck_z = center[:, 2:3] + NECK_Z_SHIFT
        qn = (px**2 + (pz - neck_z) ** 2) / NECK_RADIUS**2
        neck_top = HEAD_CENTER_Y - 0.5 * axes[:, 1:2]
        sigma = sigma + smax * torch.sigmoid(beta * (1 - qn)) * torch.sigmoid(20.0 * (neck_top - py))
        nose = torch.as_tensor(NOSE_CENTER, dtype=self.dtype)
        qnose = (((x - nose) / torch.as_tensor(NOSE_AXES, dtype=self.dtype)) ** 2).sum(-1)
        sigma = sigma + smax * torch.sigmoid(beta * (1 - qnose))

        def const(v):
            return torch.as_tensor(v, dtype=self.dtype)

        hair_w = torch.sigmoid(10.0 * (0.8 * u[..., 1] - 0.6 * u[..., 2] - 0.05))[..., None]
        front = torch.sigmoid(15.0 * (u[..., 2] - 0.55))
        a_hair = amounts[:, 0:1, None]
        a_smile = amounts[:, 1:2, None]
        hair_logit = const(HAIR_LOGIT) + self.attr_gain[0] * a_hair
        logit = const(SKIN_LOGIT) * (1 - hair_w) + hair_logit * hair_w

        h = F.silu(
            _positional_encoding(x, self.config.pe_freqs) @ self.field_pe.T
            + (w_perp @ self.field_lat.T)[:, None, :]
            + self.field_b1
        )
        h = F.silu(h @ self.field_w2.T + self.field_b2)
        eyes = torch.exp(-((px.abs() - EYE_X) ** 2 + (py - EYE_Y) ** 2) / (2 * EYE_SIGMA**2))
        brows = torch.exp(-((px.abs() - EYE_X) ** 2) / (2 * 0.04**2) - (py - BROW_Y) ** 2 / (2 * 0.012**2))
        mouth = torch.exp(-(px**2) / (2 * MOUTH_HALF_WIDTH**2) - (py - MOUTH_Y) ** 2 / (2 * 0.018**2))
        # the residual colour texture stays off the facial features, whose
        # colours are then set by the planted attributes alone
        features = front * torch.maximum(torch.maximum(eyes, brows), mouth)
        logit = logit + ((1 - hair_w) * (1 - features)[..., None]) * (h @ self.field_out.T)

        for weight, target in (
            (brows, const(BROW_LOGIT)),
            (eyes, const(EYE_LOGIT)),
            (mouth, const(MOUTH_LOGIT) + self.attr_gain[1] * a_smile * const((0.8, -0.6, -0.6))),
        ):
            weight = (front * weight)[..., None]
            logit = logit * (1 - weight) + target * weight
        return sigma, logit, w_perp

    def render_raw(self, w, cam: CamLike, return_alpha: bool = False):
        """Volume-render the neural field at raw resolution.

        Args:
            w: latent ``(D,)`` or ``(N, D)``.
            cam: a :class:`CameraPose`, or a yaw/pitch tensor ``(2,)`` / ``(N, 2)``
                (pass a tensor to differentiate with respect to the pose).
            return_alpha: also return the accumulated opacity ``(N, 1, H, W)``.
        """
        w = self.as_tensor(w) if not isinstance(w, torch.Tensor) else w
        single = w.dim() == 1
        if single:
            w = w.unsqueeze(0)
        if w.shape[-1] != self.config.w_dim:
            raise InvalidArgument(f"expected latent of dimension {self.config.w_dim}")
        if not torch.isfinite(w).all():
            raise InvalidArgument("latent contains non-finite values")
        n, res, s = w.shape[0], self.config.raw_res, self.config.num_samples
        cam = self._cam_tensor(cam, n)
        origin, dirs = self._rays(cam, res)
        step = (self.config.far - self.config.near) / s
        t = self.config.near + (torch.arange(s, dtype=self.dtype) + 0.5) * step
        pts = origin[:, None, None, :] + dirs[:, :, None, :] * t[None, None, :, None]
        sigma, logit, w_perp = self._field(pts.reshape(n, -1, 3), w)
        sigma = sigma.reshape(n, res * res, s)
        rgb = torch.sigmoid(logit).reshape(n, res * res, s, 3)
        alpha = 1 - torch.exp(-sigma * step)
        trans = torch.cumprod(torch.cat([torch.ones_like(alpha[..., :1]), 1 - alpha[..., :-1] + 1e-10], -1), -1)
        weights = alpha * trans
        acc = weights.sum(-1, keepdim=True)
        bg = torch.sigmoid(torch.as_tensor(BACKGROUND_LOGIT, dtype=self.dtype) + w_perp @ self.bg_lat.T)
        color = (weights[..., None] * rgb).sum(-2) + (1 - acc) * bg[:, None, :]
        img = color.transpose(1, 2).reshape(n, 3, res, res)
        acc = acc.transpose(1, 2).reshape(n, 1, res, res)
        if single:
            img, acc = img[0], acc[0]
        return (img, acc) if return_alpha else img

    def upsample(self, raw: torch.Tensor) -> torch.Tensor:
        single = raw.dim() == 3
        out = self.upsampler(raw.unsqueeze(0) if single else raw)
        return out[0] if single else out

    def generate(self, w, cam: CamLike):
        raw = self.render_raw(w, cam)
        return raw, self.upsample(raw)

    # ------------------------------------------------------------------ #
    def project(self, points: np.ndarray, cam: CameraPose, res: int | None = None) -> np.ndarray:
        """Pixel coordinates ``(x, y)`` of world points in a ``res``-pixel render."""
        res = res or self.config.res
        ct = torch.tensor([[cam.yaw, cam.pitch]], dtype=torch.float64)
        origin, right, up, forward = (a[0].numpy() for a in self.camera_frame(ct))
        rel = np.asarray(points, dtype=np.float64) - origin
        depth = rel @ forward
        tan = math.tan(math.radians(self.config.fov_deg) / 2)
        ndc_x = (rel @ right) / depth / tan
        ndc_y = (rel @ up) / depth / tan
        return np.stack([(ndc_x + 1) / 2 * res - 0.5, (1 - ndc_y) / 2 * res - 0.5], -1)

    def keypoints(self, cam: CameraPose, res: int | None = None) -> np.ndarray:
        return self.project(LANDMARKS_3D, cam, res)

    def canonical_keypoints(self, res: int | None = None) -> np.ndarray:
        """Five-point template of a frontal render; the crop alignment target."""
        return self.keypoints(self.camera(0.0, 0.0), res)

    def clone(self) -> "ToyGenerator":
        return copy.deepcopy(self)

    def with_dtype(self, dtype: str) -> "ToyGenerator":
        other = copy.deepcopy(self)
        other.config = dataclasses.replace(self.config, dtype=dtype)
        other.to(_DTYPES[dtype])
        return other


def render_raw(w, cam: CamLike, gen: ToyGenerator):
    return gen.render_raw(w, cam)


def upsample(raw: torch.Tensor, gen: ToyGenerator):
    return gen.upsample(raw)


def generate(w, cam: CamLike, gen: ToyGenerator):
    return gen.generate(w, cam)


def map_latent(z, gen: ToyGenerator):
    return gen.map_latent(z)


def to_numpy_image(img: torch.Tensor) -> np.ndarray:
    """``(3, H, W)`` tensor to an ``H x W x 3`` float64 array."""
    return img.detach().to(torch.float64).permute(1, 2, 0).cpu().numpy()


def to_tensor_image(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1)), dtype=dtype)
