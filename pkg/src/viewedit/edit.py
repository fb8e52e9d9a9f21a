"""Latent-space semantic edits and camera trajectories."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from sklearn.svm import LinearSVC

from .errors import InsufficientData, InvalidArgument
from .providers import get_provider
from .toygen import CameraPose, ToyGenerator, to_numpy_image

DIRECTION_VERSION = 1


@dataclass
class EditDirection:
    attribute: str
    direction: np.ndarray
    svm_margin: float = 0.0

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(-1)
        n = np.linalg.norm(self.direction)
        if not np.isfinite(n) or abs(n - 1.0) > 1e-6:
            raise InvalidArgument(f"edit direction must be unit norm, got norm {n}")

    def save(self, path) -> None:
        payload = {
            "version": DIRECTION_VERSION,
            "attribute": self.attribute,
            "svm_margin": float(self.svm_margin),
            "direction": [float(x) for x in self.direction],
        }
        Path(path).write_text(json.dumps(payload, indent=1))

    @classmethod
    def load(cls, path) -> "EditDirection":
        d = json.loads(Path(path).read_text())
        if d.get("version") != DIRECTION_VERSION:
            raise InvalidArgument(f"{path}: unsupported direction file version {d.get('version')!r}")
        return cls(d["attribute"], np.array(d["direction"], dtype=np.float64), float(d.get("svm_margin", 0.0)))


def discover_direction(
    gen: ToyGenerator,
    attr: str,
    n_samples: int = 500,
    seed: int = 0,
    classifier=None,
    batch: int = 50,
    svm_c: float = 3e-4,
) -> EditDirection:
    """Fit a linear max-margin separator of classifier labels in latent space.

    Latents come from mapping random ``z``; each is rendered frontally,
    scored, and binarized at 0.5.  The unit normal points toward the
    positive class.

    ``svm_c`` is the soft-margin penalty.  With a few hundred samples in a
    64-dimensional space a near-hard margin bends toward the handful of
    points closest to the boundary; a small penalty averages over all of
    them and recovers the attribute axis far more reliably.
    """
    if n_samples < 50:
        raise InvalidArgument("n_samples must be >= 50")
    if classifier is None:
        classifier = get_provider("attributes", "toy", generator=gen)
    w = gen.sample_latents(n_samples, seed)
    scores = []
    with torch.no_grad():
        for i in range(0, n_samples, batch):
            chunk = w[i : i + batch]
            _, imgs = gen.generate(chunk, torch.zeros(chunk.shape[0], 2, dtype=gen.dtype))
            scores.extend(classifier.score(to_numpy_image(im), attr) for im in imgs)
    labels = (np.asarray(scores) >= 0.5).astype(int)
    if labels.min() == labels.max():
        raise InsufficientData(f"all {n_samples} samples received the same label for {attr!r}")
    x = w.detach().to(torch.float64).numpy()
    x = x - x.mean(0)
    svm = LinearSVC(C=svm_c, loss="hinge", dual=True, max_iter=200000, tol=1e-6, random_state=seed)
    svm.fit(x, labels)
    coef = svm.coef_.reshape(-1)
    norm = float(np.linalg.norm(coef))
    if norm == 0:
        raise InsufficientData("separator has a zero normal")
    return EditDirection(attr, coef / norm, 1.0 / norm)


def apply_edit(w, direction: EditDirection, alpha: float):
    """``w + alpha * direction``; works on numpy arrays and tensors alike."""
    if alpha == 0:
        return w.clone() if isinstance(w, torch.Tensor) else np.array(w, copy=True)
    if isinstance(w, torch.Tensor):
        if w.shape[-1] != direction.direction.shape[0]:
            raise InvalidArgument("latent and direction dimensions differ")
        return w + alpha * torch.as_tensor(direction.direction, dtype=w.dtype)
    w = np.asarray(w)
    if w.shape[-1] != direction.direction.shape[0]:
        raise InvalidArgument("latent and direction dimensions differ")
    return w + alpha * direction.direction


# --------------------------------------------------------------------------- #
# trajectories


@dataclass
class TrajectorySpec:
    kind: str = "fixed"
    yaw: float = 0.0
    pitch: float = 0.0
    yaw_end: float = 0.0
    pitch_end: float = 0.0

    KINDS = ("fixed", "linear-sweep", "orbit")

    @classmethod
    def parse(cls, text: str) -> "TrajectorySpec":
        """Parse ``kind[,key=value...]``, e.g. ``linear-sweep,yaw=-0.4,yaw_end=0.4``."""
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts:
            raise InvalidArgument("empty trajectory spec")
        kw = {}
        for p in parts[1:]:
            if "=" not in p:
                raise InvalidArgument(f"malformed trajectory option {p!r}")
            k, v = p.split("=", 1)
            if k not in ("yaw", "pitch", "yaw_end", "pitch_end"):
                raise InvalidArgument(f"unknown trajectory option {k!r}")
            try:
                kw[k] = float(v)
            except ValueError:
                raise InvalidArgument(f"trajectory option {k} needs a number, got {v!r}") from None
        return cls(parts[0], **kw)


@dataclass
class CameraTrajectory:
    poses: List[CameraPose]
    spec: TrajectorySpec = field(default_factory=TrajectorySpec)

    def __len__(self):
        return len(self.poses)

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor([[p.yaw, p.pitch] for p in self.poses], dtype=torch.float64).to(dtype)


def make_trajectory(spec: TrajectorySpec, T: int, radius: float = 2.5, fov_deg: float = 18.0) -> CameraTrajectory:
    if T < 1:
        raise InvalidArgument("trajectory length must be >= 1")
    if spec.kind not in TrajectorySpec.KINDS:
        raise InvalidArgument(f"unknown trajectory kind {spec.kind!r}; expected one of {TrajectorySpec.KINDS}")
    for name in ("yaw", "yaw_end"):
        if not -math.pi <= getattr(spec, name) <= math.pi:
            raise InvalidArgument(f"{name} outside [-pi, pi]")
    for name in ("pitch", "pitch_end"):
        if not -math.pi / 2 <= getattr(spec, name) <= math.pi / 2:
            raise InvalidArgument(f"{name} outside [-pi/2, pi/2]")
    s = np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)
    if spec.kind == "fixed":
        pairs = [(spec.yaw, spec.pitch)] * T
    elif spec.kind == "linear-sweep":
        pairs = [
            (spec.yaw + (spec.yaw_end - spec.yaw) * x, spec.pitch + (spec.pitch_end - spec.pitch) * x) for x in s
        ]
    else:
        # constant angular speed along the arc, camera height fixed
        pairs = [(spec.yaw + (spec.yaw_end - spec.yaw) * x, spec.pitch) for x in s]
    poses = [CameraPose(float(y), float(p), radius, fov_deg) for y, p in pairs]
    if T > 1 and spec.kind != "fixed":
        end_pitch = spec.pitch_end if spec.kind == "linear-sweep" else spec.pitch
        poses[-1] = CameraPose(spec.yaw_end, end_pitch, radius, fov_deg)
    return CameraTrajectory(poses, spec)


def render_edited_video(
    gen: ToyGenerator,
    latents,
    direction: Optional[EditDirection] = None,
    alpha: float = 0.0,
    traj: Optional[CameraTrajectory] = None,
    batch: int = 16,
) -> List[Tuple[torch.Tensor, torch.Tensor]]:
    """Render ``(raw, full)`` frames from the edited person latent plus offsets."""
    T = len(latents)
    if traj is not None and len(traj) != T:
        raise InvalidArgument(f"trajectory has {len(traj)} poses for {T} frames")
    w_person = latents.w_person.to(gen.dtype)
    if direction is not None and alpha != 0:
        w_person = apply_edit(w_person, direction, alpha)
    cams = latents.cams.to(gen.dtype) if traj is None else traj.as_tensor(gen.dtype)
    w = w_person.unsqueeze(0) + latents.offsets.to(gen.dtype)
    out = []
    with torch.no_grad():
        for i in range(0, T, batch):
            raw, full = gen.generate(w[i : i + batch], cams[i : i + batch])
            out.extend(zip(raw, full))
    return out


def parse_edit_spec(text: str) -> Dict[str, object]:
    """Parse an edit string such as ``attr=smile,alpha=2.3``."""
    out: Dict[str, object] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise InvalidArgument(f"malformed edit option {part!r}; expected key=value")
        k, v = (s.strip() for s in part.split("=", 1))
        if k == "attr":
            out["attr"] = v
        elif k == "alpha":
            try:
                out["alpha"] = float(v)
            except ValueError:
                raise InvalidArgument(f"alpha must be a number, got {v!r}") from None
        else:
            raise InvalidArgument(f"unknown edit option {k!r}")
    if "attr" not in out:
        raise InvalidArgument("edit spec needs attr=<name>")
    out.setdefault("alpha", 0.0)
    return out
