"""Pipeline configuration: nested dataclasses loaded from versioned JSON."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from .composite import CompositeConfig
from .errors import InvalidArgument, NotFound
from .flow import FlowParams
from .invert import InversionConfig
from .providers import INTERFACES, registered
from .scene import SceneConfig

CONFIG_VERSION = 1

# Early-stop level for per-frame video inversion on the toy generator.  The
# LPIPS-scale value 0.25 has no meaning for the much smaller toy losses; on
# the toy model the total video loss grows by about 0.35 per radian of yaw
# error, and 0.005 corresponds to a camera within roughly 0.01 rad.
TOY_VIDEO_LOSS_THRESHOLD = 0.005


@dataclass
class GeneratorSection:
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
    dtype: str = "float32"


@dataclass
class ProvidersSection:
    perceptual: str = "toy"
    parser: str = "toy"
    identity: str = "toy"
    keypoints: str = "file"
    attributes: str = "toy"


@dataclass
class AlignSection:
    keypoint_sigma: float = 1.5


@dataclass
class PersonalizeSection:
    frames: List[int] = field(default_factory=list)
    num_faces: int = 5


@dataclass
class FlowSection:
    pyr_scale: float = 0.5
    levels: int = 8
    winsize: int = 25
    iterations: int = 7
    poly_n: int = 5
    poly_sigma: float = 1.2
    eps: float = 0.5
    bins: int = 36
    smooth_sigma: float = 1.5
    enabled: bool = True

    def params(self) -> FlowParams:
        return FlowParams(self.pyr_scale, self.levels, self.winsize, self.iterations, self.poly_n, self.poly_sigma)


@dataclass
class EditSection:
    attr: Optional[str] = None
    alpha: float = 0.0
    direction_samples: int = 500
    trajectory: Optional[str] = None
    view_offset: List[float] = field(default_factory=lambda: [0.0, 0.0])


@dataclass
class AblationSection:
    novel_yaw: float = 0.35
    personalize_faces: int = 5


@dataclass
class PathsSection:
    frames: Optional[str] = None
    keypoints: Optional[str] = None
    artifacts: str = "artifacts"
    output: str = "output"
    reference: Optional[str] = None
    driving: Optional[str] = None
    direction: Optional[str] = None


@dataclass
class PipelineConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    providers: ProvidersSection = field(default_factory=ProvidersSection)
    align: AlignSection = field(default_factory=AlignSection)
    personalize: PersonalizeSection = field(default_factory=PersonalizeSection)
    joint: InversionConfig = field(default_factory=InversionConfig.joint)
    tune: InversionConfig = field(default_factory=InversionConfig.tune)
    video: InversionConfig = field(
        default_factory=lambda: InversionConfig.video(loss_threshold=TOY_VIDEO_LOSS_THRESHOLD)
    )
    flow: FlowSection = field(default_factory=FlowSection)
    composite: CompositeConfig = field(default_factory=CompositeConfig)
    debug: bool = False
    edit: EditSection = field(default_factory=EditSection)
    scene: SceneConfig = field(default_factory=SceneConfig)
    ablation: AblationSection = field(default_factory=AblationSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # ------------------------------------------------------------------ #
    def validate(self) -> "PipelineConfig":
        if self.version != CONFIG_VERSION:
            raise InvalidArgument(f"unsupported config version {self.version}; expected {CONFIG_VERSION}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise InvalidArgument("seed must be a nonnegative integer")
        self.generator_config().validate()
        for name in INTERFACES:
            choice = getattr(self.providers, name)
            if choice not in registered(name):
                raise InvalidArgument(f"providers.{name}: {choice!r} is not registered ({registered(name)})")
        if self.align.keypoint_sigma < 0:
            raise InvalidArgument("align.keypoint_sigma must be >= 0")
        if self.personalize.num_faces < 0 or any(i < 0 for i in self.personalize.frames):
            raise InvalidArgument("personalize frame indices/counts must be nonnegative")
        for stage in ("joint", "tune", "video"):
            sec = getattr(self, stage)
            if stage == "tune" and sec.num_steps == 0:
                sec = dataclasses.replace(sec, num_steps=1)  # zero steps skips tuning
            try:
                sec.validate()
            except InvalidArgument as e:
                raise InvalidArgument(f"{stage}: {e}") from None
        self.flow.params()
        if self.flow.eps < 0 or self.flow.bins < 4 or self.flow.smooth_sigma < 0:
            raise InvalidArgument("flow.eps >= 0, flow.bins >= 4 and flow.smooth_sigma >= 0 are required")
        self.composite.validate()
        if len(self.edit.view_offset) != 2:
            raise InvalidArgument("edit.view_offset must be [yaw, pitch]")
        if self.edit.direction_samples < 50:
            raise InvalidArgument("edit.direction_samples must be >= 50")
        self.scene_config().validate()
        return self

    def generator_config(self):
        from .toygen import GeneratorConfig

        return GeneratorConfig(**dataclasses.asdict(self.generator), seed=self.seed)

    def scene_config(self) -> SceneConfig:
        return dataclasses.replace(self.scene, seed=self.seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scene"].pop("seed", None)
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        return _build(cls, data, "", cls())

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        p = Path(path)
        if not p.exists():
            raise NotFound(f"config file {p} does not exist")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise InvalidArgument(f"{p}: invalid JSON ({e})") from None
        if not isinstance(data, dict):
            raise InvalidArgument(f"{p}: top level must be an object")
        if "version" not in data:
            raise InvalidArgument(f"{p}: missing 'version' field")
        return cls.from_dict(data)


_EXCLUDED = {SceneConfig: {"seed"}}


def _build(cls, data, where: str, base):
    if not isinstance(data, dict):
        raise InvalidArgument(f"{where or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in _EXCLUDED.get(cls, ())}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise InvalidArgument(f"{where or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    for name, f in fields.items():
        key = f"{where}.{name}" if where else name
        if name not in data:
            continue
        value = data[name]
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, key, getattr(base, name))
        else:
            kwargs[name] = _coerce(hint, value, key)
    return dataclasses.replace(base, **kwargs)


def _coerce(hint, value, key):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin in (list, List):
        if not isinstance(value, list):
            raise InvalidArgument(f"{key}: expected a list")
        return [_coerce(args[0], v, key) for v in value]
    if hint is bool:
        if not isinstance(value, bool):
            raise InvalidArgument(f"{key}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidArgument(f"{key}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidArgument(f"{key}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise InvalidArgument(f"{key}: expected a string")
        return value
    return value


def merge_overrides(cfg: PipelineConfig, overrides: dict) -> PipelineConfig:
    """Apply dotted-key overrides such as ``{"video.num_steps": 20}``."""
    data = cfg.to_dict()
    for dotted, value in overrides.items():
        node = data
        parts = dotted.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise InvalidArgument(f"unknown config section in override {dotted!r}")
            node = node[p]
        if parts[-1] not in node:
            raise InvalidArgument(f"unknown config key in override {dotted!r}")
        node[parts[-1]] = value
    return PipelineConfig.from_dict(data)
