"""Generator personalization and video inversion.

Three optimizations share one loss family:

* joint inversion of several face crops into a person latent ``w_person``,
  per-face offsets ``delta_n`` and per-face cameras;
* fine-tuning of the generator (upsampler frozen) on those crops;
* warm-started frame-by-frame inversion of a video into offsets and cameras
  relative to a fixed ``w_person``.

Every optimization returns its minimum-loss iterate.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgument, NumericFailure
from .providers import expression_mask, parse_face, pyramid_distance
from .toygen import CameraPose, ToyGenerator, to_tensor_image

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

YAW_BOUND = math.pi
PITCH_BOUND = math.pi / 2


@dataclass
class InversionConfig:
    """Loss weights and schedule of one optimization stage.

    ``lr_rampdown``/``lr_rampup`` are fractions of ``num_steps`` over which the
    usual cosine ramp-down and linear ramp-up of the learning rate act; zero
    disables them.  ``use_face_term`` toggles the masked expression term.
    """

    weight_l1: float = 0.05
    weight_face: float = 1.0
    weight_lpips: float = 0.75
    weight_wdist: float = 0.05
    weight_wdist_target: float = 0.005
    learning_rate: float = 1e-2
    num_steps: int = 600
    init_num_steps: int = 0
    loss_threshold: float = 0.0
    lr_rampdown: float = 0.25
    lr_rampup: float = 0.05
    use_face_term: bool = True

    @classmethod
    def joint(cls, **kw) -> "InversionConfig":
        return cls(**kw)

    @classmethod
    def tune(cls, **kw) -> "InversionConfig":
        base = dict(
            weight_l1=1.0, weight_face=0.0, weight_lpips=0.3, weight_wdist=0.0, weight_wdist_target=0.0,
            learning_rate=1e-3, num_steps=300, lr_rampdown=0.0, lr_rampup=0.0, use_face_term=False,
        )
        base.update(kw)
        return cls(**base)

    @classmethod
    def video(cls, **kw) -> "InversionConfig":
        base = dict(
            weight_l1=0.25, weight_face=1.2, weight_lpips=1.0, weight_wdist=0.01, weight_wdist_target=0.01,
            learning_rate=1e-2, num_steps=50, init_num_steps=200, loss_threshold=0.25,
            lr_rampdown=0.0, lr_rampup=0.0,
        )
        base.update(kw)
        return cls(**base)

    def validate(self) -> "InversionConfig":
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and (not math.isfinite(v) or v < 0):
                raise InvalidArgument(f"{f.name} must be a nonnegative finite number, got {v}")
        if self.learning_rate <= 0:
            raise InvalidArgument("learning_rate must be > 0")
        if self.num_steps < 1 and self.init_num_steps < 1:
            raise InvalidArgument("num_steps must be >= 1")
        if self.weight_wdist_target > self.weight_wdist:
            raise InvalidArgument("weight_wdist_target must not exceed weight_wdist")
        if self.lr_rampdown > 1 or self.lr_rampup > 1:
            raise InvalidArgument("learning-rate ramp fractions must lie in [0, 1]")
        return self

    def reg_weight(self, step: int) -> float:
        """Linearly ramped offset-regularization weight at ``step``."""
        if self.num_steps <= 1:
            return self.weight_wdist
        t = min(max(step / (self.num_steps - 1), 0.0), 1.0)
        return self.weight_wdist + (self.weight_wdist_target - self.weight_wdist) * t

    def lr_at(self, step: int, total: Optional[int] = None) -> float:
        total = total or self.num_steps
        t = step / max(total, 1)
        ramp = 1.0
        if self.lr_rampdown > 0:
            ramp = min(1.0, (1.0 - t) / self.lr_rampdown)
            ramp = 0.5 - 0.5 * math.cos(ramp * math.pi)
        if self.lr_rampup > 0:
            ramp *= min(1.0, t / self.lr_rampup)
        return self.learning_rate * ramp


# --------------------------------------------------------------------------- #
# targets


@dataclass
class Targets:
    """Full-resolution target crops with their raw-resolution versions and masks."""

    full: torch.Tensor  # (N, 3, H, W)
    raw: torch.Tensor  # (N, 3, h, w)
    masks: torch.Tensor  # (N, 1, H, W) expression masks

    def __len__(self):
        return self.full.shape[0]

    def subset(self, idx) -> "Targets":
        return Targets(self.full[idx], self.raw[idx], self.masks[idx])


def _image_of(face) -> np.ndarray:
    return np.asarray(getattr(face, "image", face), dtype=np.float64)


def prepare_targets(gen: ToyGenerator, faces: Sequence, parser: Callable = parse_face) -> Targets:
    """Stack crops, area-average them to raw resolution and parse expression masks."""
    if len(faces) == 0:
        raise InvalidArgument("at least one face crop is required")
    imgs = [_image_of(f) for f in faces]
    res = gen.config.res
    for im in imgs:
        if im.shape != (res, res, 3):
            raise InvalidArgument(f"face crops must be {res} x {res} x 3, got {im.shape}")
    full = torch.stack([to_tensor_image(im, gen.dtype) for im in imgs])
    raw = F.avg_pool2d(full, gen.config.factor) if gen.config.factor > 1 else full.clone()
    masks = torch.stack(
        [torch.as_tensor(expression_mask(parser(im)), dtype=gen.dtype)[None] for im in imgs]
    )
    return Targets(full, raw, masks)


def _l1(a, b):
    return (a - b).abs().mean(dim=(-3, -2, -1))


def loss_inv(
    gen: ToyGenerator,
    w_person: torch.Tensor,
    offsets: torch.Tensor,
    cams: torch.Tensor,
    targets: Targets,
    cfg: InversionConfig,
    reg_weight: float,
    perceptual: Callable = pyramid_distance,
) -> torch.Tensor:
    """Summed inversion loss over all faces.

    The perceptual and L1 terms compare raw renders with area-averaged
    targets; the expression term compares full-resolution renders and
    targets, both masked with the target's expression mask.

    Args:
        gen: generator (its weights are not modified).
        w_person: ``(D,)`` person latent.
        offsets: ``(N, D)`` per-face offsets.
        cams: ``(N, 2)`` yaw/pitch tensor.
        targets: prepared targets of length ``N``.
        cfg: loss weights.
        reg_weight: weight of the squared offset norm.
    """
    w = w_person.unsqueeze(0) + offsets
    need_full = cfg.use_face_term and cfg.weight_face > 0
    need_raw = cfg.weight_lpips > 0 or cfg.weight_l1 > 0
    total = w.new_zeros(())
    if need_raw or need_full:
        raw = gen.render_raw(w, cams)
        if need_raw:
            if cfg.weight_lpips > 0:
                total = total + cfg.weight_lpips * perceptual(raw, targets.raw).sum()
            if cfg.weight_l1 > 0:
                total = total + cfg.weight_l1 * _l1(raw, targets.raw).sum()
        if need_full:
            full = gen.upsample(raw)
            total = total + cfg.weight_face * perceptual(full * targets.masks, targets.full * targets.masks).sum()
    if reg_weight > 0:
        total = total + reg_weight * (offsets**2).sum()
    return total


def loss_tune(gen: ToyGenerator, w: torch.Tensor, cams: torch.Tensor, targets: Targets, cfg: InversionConfig,
              perceptual: Callable = pyramid_distance) -> torch.Tensor:
    """Full-resolution perceptual + L1 reconstruction loss summed over faces."""
    _, full = gen.generate(w, cams)
    return (cfg.weight_lpips * perceptual(full, targets.full) + cfg.weight_l1 * _l1(full, targets.full)).sum()


# --------------------------------------------------------------------------- #
# camera parameterization


def cams_to_params(cams: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`params_to_cams` (with a small margin from the bounds)."""
    cams = torch.as_tensor(cams)
    y = torch.clamp(cams[..., 0] / YAW_BOUND, -0.999999, 0.999999)
    p = torch.clamp(cams[..., 1] / PITCH_BOUND, -0.999999, 0.999999)
    return torch.stack([torch.atanh(y), torch.atanh(p)], -1)


def params_to_cams(u: torch.Tensor) -> torch.Tensor:
    """Map unconstrained reals to in-range ``(yaw, pitch)``."""
    return torch.stack([YAW_BOUND * torch.tanh(u[..., 0]), PITCH_BOUND * torch.tanh(u[..., 1])], -1)


def _poses(cams: torch.Tensor, gen: ToyGenerator) -> List[CameraPose]:
    return [gen.camera(float(y), float(p)) for y, p in cams.detach().to(torch.float64).tolist()]


class _FrozenGenerator:
    """Context manager that disables gradients of generator weights."""

    def __init__(self, gen: ToyGenerator):
        self.gen = gen

    def __enter__(self):
        self.flags = [p.requires_grad for p in self.gen.parameters()]
        for p in self.gen.parameters():
            p.requires_grad_(False)
        return self.gen

    def __exit__(self, *exc):
        for p, f in zip(self.gen.parameters(), self.flags):
            p.requires_grad_(f)
        return False


# --------------------------------------------------------------------------- #
# results


def _vec(t: torch.Tensor) -> list:
    return [float(x) for x in t.detach().to(torch.float64).reshape(-1).tolist()]


@dataclass
class JointInversionResult:
    w_person: torch.Tensor
    offsets: torch.Tensor
    cams: torch.Tensor  # (N, 2) yaw/pitch
    final_loss: float
    steps: int = 0
    history: List[float] = field(default_factory=list)

    def poses(self, gen: ToyGenerator) -> List[CameraPose]:
        return _poses(self.cams, gen)

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "kind": "joint_inversion",
            "dtype": str(self.w_person.dtype).replace("torch.", ""),
            "w_person": _vec(self.w_person),
            "offsets": [_vec(d) for d in self.offsets],
            "cams": [{"yaw": float(c[0]), "pitch": float(c[1])} for c in self.cams.detach().to(torch.float64)],
            "final_loss": float(self.final_loss),
            "steps": int(self.steps),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JointInversionResult":
        _check_version(d, "joint_inversion")
        dt = getattr(torch, d.get("dtype", "float32"))
        return cls(
            torch.tensor(d["w_person"], dtype=torch.float64).to(dt),
            torch.tensor(d["offsets"], dtype=torch.float64).to(dt),
            torch.tensor([[c["yaw"], c["pitch"]] for c in d["cams"]], dtype=torch.float64).to(dt),
            float(d["final_loss"]),
            int(d.get("steps", 0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "JointInversionResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class VideoLatents:
    w_person: torch.Tensor
    offsets: torch.Tensor  # (T, D)
    cams: torch.Tensor  # (T, 2)
    steps: List[int] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)

    def __len__(self):
        return self.offsets.shape[0]

    def poses(self, gen: ToyGenerator) -> List[CameraPose]:
        return _poses(self.cams, gen)

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "kind": "video_latents",
            "dtype": str(self.w_person.dtype).replace("torch.", ""),
            "w_person": _vec(self.w_person),
            "offsets": [_vec(d) for d in self.offsets],
            "cams": [{"yaw": float(c[0]), "pitch": float(c[1])} for c in self.cams.detach().to(torch.float64)],
            "steps": [int(s) for s in self.steps],
            "losses": [float(x) for x in self.losses],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VideoLatents":
        _check_version(d, "video_latents")
        dt = getattr(torch, d.get("dtype", "float32"))
        return cls(
            torch.tensor(d["w_person"], dtype=torch.float64).to(dt),
            torch.tensor(d["offsets"], dtype=torch.float64).reshape(len(d["offsets"]), -1).to(dt),
            torch.tensor([[c["yaw"], c["pitch"]] for c in d["cams"]], dtype=torch.float64).reshape(-1, 2).to(dt),
            list(d.get("steps", [])),
            list(d.get("losses", [])),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "VideoLatents":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_version(d: dict, kind: str) -> None:
    if d.get("version") != FORMAT_VERSION or d.get("kind") != kind:
        raise InvalidArgument(f"expected a version-{FORMAT_VERSION} {kind} file, got {d.get('kind')!r} v{d.get('version')!r}")


# --------------------------------------------------------------------------- #
# optimizations


def invert_joint(
    gen: ToyGenerator,
    faces: Sequence,
    cfg: Optional[InversionConfig] = None,
    init_cams=None,
    targets: Optional[Targets] = None,
    perceptual: Callable = pyramid_distance,
) -> JointInversionResult:
    """Jointly invert ``faces`` into a person latent, offsets and cameras.

    Args:
        gen: generator whose weights stay fixed.
        faces: N face crops (``FaceCrop`` or ``H x W x 3`` arrays at generator resolution).
        cfg: stage configuration; defaults to :meth:`InversionConfig.joint`.
        init_cams: optional ``(N, 2)`` initial yaw/pitch; frontal otherwise.
        targets: precomputed targets (skips parsing).
    """
    cfg = (cfg or InversionConfig.joint()).validate()
    if cfg.num_steps < 1:
        raise InvalidArgument("joint inversion needs num_steps >= 1")
    if targets is None:
        targets = prepare_targets(gen, faces)
    n, dtype = len(targets), gen.dtype
    if n == 0:
        raise InvalidArgument("at least one face crop is required")
    w = gen.w_avg.detach().clone().requires_grad_(True)
    offsets = torch.zeros(n, gen.config.w_dim, dtype=dtype, requires_grad=True)
    cams0 = torch.zeros(n, 2, dtype=dtype) if init_cams is None else torch.as_tensor(np.asarray(init_cams), dtype=dtype)
    u = cams_to_params(cams0).detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([w, offsets, u], lr=cfg.learning_rate)
    best = (math.inf, None)
    history = []
    with _FrozenGenerator(gen):
        for step in range(cfg.num_steps):
            for g in opt.param_groups:
                g["lr"] = cfg.lr_at(step)
            loss = loss_inv(gen, w, offsets, params_to_cams(u), targets, cfg, cfg.reg_weight(step), perceptual)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericFailure("non-finite inversion loss", step=step)
            history.append(value)
            if value < best[0]:
                best = (value, (w.detach().clone(), offsets.detach().clone(), params_to_cams(u).detach().clone()))
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step % 100 == 0:
                log.debug("joint step %d loss %.5f", step, value)
    bw, bo, bc = best[1]
    return JointInversionResult(bw, bo, bc, best[0], cfg.num_steps, history)


def fine_tune(
    gen: ToyGenerator,
    result: JointInversionResult,
    faces: Sequence,
    cfg: Optional[InversionConfig] = None,
    targets: Optional[Targets] = None,
    perceptual: Callable = pyramid_distance,
    history: Optional[List[float]] = None,
) -> ToyGenerator:
    """Fine-tune a copy of ``gen`` on the inverted faces; the upsampler stays frozen.

    Latents and cameras from ``result`` are held fixed.  Returns the tuned
    copy at its minimum-loss iterate; ``gen`` itself is left untouched.
    """
    cfg = cfg or InversionConfig.tune()
    tuned = gen.clone()
    if cfg.num_steps == 0:
        # zero steps means "skip tuning"; the other fields are still checked
        dataclasses.replace(cfg, num_steps=1).validate()
        return tuned
    cfg.validate()
    if targets is None:
        targets = prepare_targets(gen, faces)
    w = (result.w_person.unsqueeze(0) + result.offsets).detach().to(tuned.dtype)
    cams = result.cams.detach().to(tuned.dtype)
    tuned.upsampler_frozen = True
    params = [p for p in tuned.field_parameters()]
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    best_value, best_state = math.inf, None
    for step in range(cfg.num_steps + 1):
        for g in opt.param_groups:
            g["lr"] = cfg.lr_at(step)
        loss = loss_tune(tuned, w, cams, targets, cfg, perceptual)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericFailure("non-finite fine-tuning loss", step=step)
        if history is not None:
            history.append(value)
        if value < best_value:
            best_value = value
            best_state = [p.detach().clone() for p in params]
        if step == cfg.num_steps:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        for p, b in zip(params, best_state):
            p.copy_(b)
    return tuned


def invert_video(
    gen: ToyGenerator,
    frames: Sequence,
    w_person: torch.Tensor,
    cfg: Optional[InversionConfig] = None,
    init_offset: Optional[torch.Tensor] = None,
    init_cam=None,
    targets: Optional[Targets] = None,
    perceptual: Callable = pyramid_distance,
    progress: Optional[Callable[[int, int, float], None]] = None,
) -> VideoLatents:
    """Frame-by-frame inversion with warm starts and early stopping.

    Frame 0 starts from ``init_offset`` (typically the mean of the joint
    offsets) and a frontal camera and runs up to ``init_num_steps``; every
    later frame starts from its predecessor's result and runs up to
    ``num_steps``.  A frame stops as soon as its total loss falls below
    ``loss_threshold``.
    """
    cfg = (cfg or InversionConfig.video()).validate()
    if targets is None:
        targets = prepare_targets(gen, frames)
    dtype = gen.dtype
    w_person = w_person.detach()
    delta = torch.zeros(gen.config.w_dim, dtype=dtype) if init_offset is None else torch.as_tensor(init_offset, dtype=dtype).detach().clone()
    cam = torch.zeros(2, dtype=dtype) if init_cam is None else torch.as_tensor(np.asarray(init_cam), dtype=dtype)
    offsets, cams, steps_used, losses = [], [], [], []
    with _FrozenGenerator(gen):
        for t in range(len(targets)):
            tgt = targets.subset(slice(t, t + 1))
            budget = cfg.init_num_steps if t == 0 else cfg.num_steps
            d = delta.clone().unsqueeze(0).requires_grad_(True)
            u = cams_to_params(cam.unsqueeze(0)).detach().clone().requires_grad_(True)
            opt = torch.optim.Adam([d, u], lr=cfg.learning_rate)
            best_value, best = math.inf, (d.detach().clone(), cam.unsqueeze(0).clone())
            used = 0
            for step in range(budget + 1):
                c = params_to_cams(u) if step > 0 else cam.unsqueeze(0)
                loss = loss_inv(gen, w_person, d, c, tgt, cfg, cfg.weight_wdist, perceptual)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericFailure("non-finite video inversion loss", step=step, frame=t)
                if value < best_value:
                    best_value, best = value, (d.detach().clone(), c.detach().clone())
                if value < cfg.loss_threshold or step == budget:
                    break
                for g in opt.param_groups:
                    g["lr"] = cfg.lr_at(step, budget)
                opt.zero_grad()
                loss.backward()
                opt.step()
                used += 1
            delta, cam = best[0][0], best[1][0]
            offsets.append(delta)
            cams.append(cam)
            steps_used.append(used)
            losses.append(best_value)
            if progress is not None:
                progress(t, used, best_value)
    return VideoLatents(w_person.clone(), torch.stack(offsets), torch.stack(cams), steps_used, losses)
