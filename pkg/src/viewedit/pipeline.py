"""Stage orchestration: personalize, invert a video, edit and composite, evaluate, ablate.

The ``run_*`` functions work in memory; the ``cmd_*`` functions wrap them
with artifact I/O under ``paths.artifacts`` and ``paths.output``.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import align, composite, edit, flow, io
from .config import PipelineConfig
from .errors import InvalidArgument, NotFound, ViewEditError
from .invert import (
    InversionConfig, JointInversionResult, VideoLatents, fine_tune, invert_joint, invert_video, prepare_targets
)
from .metrics import MetricsReport, evaluate_sequences
from .providers import get_provider
from .scene import Scene, make_scene
from .toygen import ToyGenerator, to_numpy_image

log = logging.getLogger(__name__)

ARTIFACT_GENERATOR = "generator.bin"
ARTIFACT_JOINT = "joint_inversion.json"
ARTIFACT_VIDEO = "video_latents.json"
ARTIFACT_CROPS = "crops.json"

ABLATION_VARIANTS = ("full", "no_finetune", "no_flow", "no_reg", "single_input")


def _stage(name):
    """Prefix errors raised inside a stage with the stage name."""

    class _Ctx:
        def __enter__(self):
            self.t0 = time.perf_counter()
            log.info("stage %s: start", name)

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and isinstance(exc, ViewEditError) and exc.args:
                msg = str(exc.args[0])
                if not msg.startswith(f"[{name}]"):
                    exc.args = (f"[{name}] {msg}",) + exc.args[1:]
            else:
                log.info("stage %s: done in %.1fs", name, time.perf_counter() - self.t0)
            return False

    return _Ctx()


# --------------------------------------------------------------------------- #
# alignment


def load_keypoint_sequence(cfg: PipelineConfig, frames: Sequence[np.ndarray]) -> List[np.ndarray]:
    if cfg.providers.keypoints == "file":
        if not cfg.paths.keypoints:
            raise InvalidArgument("paths.keypoints is required with the 'file' keypoint provider")
        if not Path(cfg.paths.keypoints).exists():
            raise NotFound(f"keypoint file {cfg.paths.keypoints} does not exist")
        seq = get_provider("keypoints", "file", path=cfg.paths.keypoints).sequence
    else:
        detector = get_provider("keypoints", cfg.providers.keypoints)
        seq = [detector(f) for f in frames]
    if len(seq) != len(frames):
        raise InvalidArgument(f"{len(seq)} keypoint records for {len(frames)} frames")
    return seq


def compute_crops(
    gen: ToyGenerator, frames: Sequence[np.ndarray], keypoints: Sequence[np.ndarray], sigma: float
) -> Tuple[List[align.CropTransform], List[np.ndarray]]:
    """Smooth keypoints over time, align them to the generator template and crop."""
    res = gen.config.res
    template = gen.canonical_keypoints(res)
    smoothed = align.smooth_keypoints(keypoints, sigma)
    transforms = [align.estimate_similarity(template, k) for k in smoothed]
    crops = [align.crop_face(f, t, res, i).image for i, (f, t) in enumerate(zip(frames, transforms))]
    return transforms, crops


def select_faces(cfg: PipelineConfig, num_frames: int) -> List[int]:
    idx = list(cfg.personalize.frames)
    if not idx:
        n = min(cfg.personalize.num_faces, num_frames)
        idx = sorted(set(np.linspace(0, num_frames - 1, n).round().astype(int).tolist())) if n > 0 else []
    if not idx:
        raise InvalidArgument("no faces selected for personalization")
    if max(idx) >= num_frames:
        raise InvalidArgument(f"personalization frame {max(idx)} out of range (have {num_frames})")
    return idx


# --------------------------------------------------------------------------- #
# in-memory stages


def run_personalize(
    base: ToyGenerator, crops: Sequence[np.ndarray], joint_cfg: InversionConfig, tune_cfg: InversionConfig,
    parser=None, finetune: bool = True,
) -> Tuple[ToyGenerator, JointInversionResult]:
    parser = parser or get_provider("parser", "toy")
    targets = prepare_targets(base, crops, parser)
    with _stage("invert_joint"):
        result = invert_joint(base, crops, joint_cfg, targets=targets)
    if not finetune:
        return base.clone(), result
    with _stage("fine_tune"):
        tuned = fine_tune(base, result, crops, tune_cfg, targets=targets)
    return tuned, result


def run_invert_video(
    gen: ToyGenerator, crops: Sequence[np.ndarray], joint: JointInversionResult, cfg: InversionConfig, parser=None
) -> VideoLatents:
    parser = parser or get_provider("parser", "toy")
    targets = prepare_targets(gen, crops, parser)
    with _stage("invert_video"):
        return invert_video(gen, crops, joint.w_person, cfg, init_offset=joint.offsets.mean(0), targets=targets)


@dataclass
class FrameDiagnostics:
    displacement: dict
    d_frame: List[float]
    inset_steps: int
    border_loss_initial: float
    border_loss_final: float


def run_edit_composite(
    gen: ToyGenerator,
    frames: Sequence[np.ndarray],
    transforms: Sequence[align.CropTransform],
    latents: VideoLatents,
    cfg: PipelineConfig,
    direction: Optional[edit.EditDirection] = None,
    alpha: float = 0.0,
    cams: Optional[torch.Tensor] = None,
    use_flow: Optional[bool] = None,
    parser=None,
    debug_dir=None,
) -> Tuple[List[np.ndarray], List[FrameDiagnostics]]:
    """Render the edit for every frame, place it with flow correction and blend it in."""
    T = len(frames)
    if len(transforms) != T or len(latents) != T:
        raise InvalidArgument(f"{T} frames but {len(transforms)} crops and {len(latents)} latents")
    parser = parser or get_provider("parser", "toy")
    use_flow = cfg.flow.enabled if use_flow is None else use_flow
    res = gen.config.res
    w_edit = latents.w_person.to(gen.dtype)
    if direction is not None and alpha != 0:
        w_edit = edit.apply_edit(w_edit, direction, alpha)
    cams = latents.cams.to(gen.dtype) if cams is None else torch.as_tensor(cams).to(gen.dtype)
    if cams.shape != (T, 2):
        raise InvalidArgument(f"expected {T} cameras, got shape {tuple(cams.shape)}")
    offsets = latents.offsets.to(gen.dtype)

    with torch.no_grad():
        renders = [to_numpy_image(gen.generate(w_edit + offsets[t], cams[t])[1]) for t in range(T)]
    source = [align.crop_face(frames[t], transforms[t], res, t).image for t in range(T)]

    estimates = []
    for t in range(T):
        if use_flow:
            f = flow.farneback_flow(flow.grayscale(source[t]), flow.grayscale(renders[t]), cfg.flow.params())
            mask = composite.boundary_regions(parser(source[t]), parser(renders[t]), cfg.composite).inside
            estimates.append(flow.dominant_displacement(f, mask, cfg.flow.eps, cfg.flow.bins))
        else:
            estimates.append(flow.DisplacementEstimate.invalid())
    if use_flow and any(e.valid for e in estimates):
        smoothed = flow.smooth_displacements(estimates, cfg.flow.smooth_sigma)
    else:
        smoothed = np.zeros((T, 2))

    out, diags = [], []
    for t in range(T):
        d_frame = -flow.reproject_displacement(smoothed[t], transforms[t])
        t2 = transforms[t].translated(d_frame)
        target = align.crop_face(frames[t], t2, res, t).image
        regions = composite.boundary_regions(parser(target), parser(renders[t]), cfg.composite)
        history: List[float] = []
        inset = composite.inset_optimize(
            gen, w_edit, offsets[t], cams[t].detach().cpu().numpy().astype(np.float64), target, regions,
            cfg.composite, history=history, frame=t,
        )
        out.append(composite.composite_frame(frames[t], inset, transforms[t], d_frame, regions))
        if debug_dir is not None:
            composite.save_debug(regions, debug_dir, t)
        diags.append(
            FrameDiagnostics(estimates[t].to_dict(), [float(x) for x in d_frame], len(history) - 1,
                             history[0], history[-1])
        )
    return out, diags


def face_crop_fn(transforms: Sequence[align.CropTransform], size: int):
    def crop(i, frame):
        return align.crop_face(frame, transforms[i], size, i).image

    return crop


# --------------------------------------------------------------------------- #
# commands


def _base_generator(cfg: PipelineConfig) -> ToyGenerator:
    return ToyGenerator(cfg.generator_config())


def _frames(cfg: PipelineConfig) -> List[np.ndarray]:
    if not cfg.paths.frames:
        raise InvalidArgument("paths.frames is required")
    return io.load_frames(cfg.paths.frames)


def _with_rollback(fn):
    def wrapped(cfg: PipelineConfig, *a, **kw):
        writer = io.ArtifactWriter()
        try:
            return fn(cfg, writer, *a, **kw)
        except BaseException:
            writer.rollback()
            raise

    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


@_with_rollback
def cmd_personalize(cfg: PipelineConfig, writer: io.ArtifactWriter) -> Dict[str, Path]:
    """Align the selected faces, invert them jointly and fine-tune the generator."""
    cfg.validate()
    frames = _frames(cfg)
    idx = select_faces(cfg, len(frames))
    keypoints = load_keypoint_sequence(cfg, frames)
    base = _base_generator(cfg)
    parser = get_provider("parser", cfg.providers.parser)
    with _stage("align"):
        _, crops = compute_crops(base, frames, keypoints, cfg.align.keypoint_sigma)
    tuned, result = run_personalize(base, [crops[i] for i in idx], cfg.joint, cfg.tune, parser)
    art = Path(cfg.paths.artifacts)
    gen_path = writer.path(art / ARTIFACT_GENERATOR)
    io.save_generator(tuned, gen_path)
    joint_path = writer.path(art / ARTIFACT_JOINT)
    payload = result.to_dict()
    payload["frames"] = idx
    io.write_json(payload, joint_path)
    return {"generator": gen_path, "joint": joint_path}


def _load_joint(art: Path) -> JointInversionResult:
    return JointInversionResult.from_dict({k: v for k, v in io.read_json(art / ARTIFACT_JOINT).items() if k != "frames"})


def load_crops(path) -> List[align.CropTransform]:
    data = io.read_json(path)
    if data.get("version") != 1:
        raise InvalidArgument(f"{path}: unsupported crops file version")
    return [align.CropTransform.from_dict(d) for d in data["transforms"]]


@_with_rollback
def cmd_invert_video(cfg: PipelineConfig, writer: io.ArtifactWriter) -> Dict[str, Path]:
    """Crop every frame and invert the sequence with the personalized generator."""
    cfg.validate()
    art = Path(cfg.paths.artifacts)
    gen = io.load_generator(art / ARTIFACT_GENERATOR)
    joint = _load_joint(art)
    frames = _frames(cfg)
    keypoints = load_keypoint_sequence(cfg, frames)
    with _stage("align"):
        transforms, crops = compute_crops(gen, frames, keypoints, cfg.align.keypoint_sigma)
    latents = run_invert_video(gen, crops, joint, cfg.video, get_provider("parser", cfg.providers.parser))
    vpath = writer.path(art / ARTIFACT_VIDEO)
    latents.save(vpath)
    cpath = writer.path(art / ARTIFACT_CROPS)
    io.write_json({"version": 1, "size": gen.config.res, "transforms": [t.to_dict() for t in transforms]}, cpath)
    return {"video": vpath, "crops": cpath}


def _edit_cams(cfg: PipelineConfig, latents: VideoLatents, gen: ToyGenerator) -> torch.Tensor:
    T = len(latents)
    if cfg.edit.trajectory:
        traj = edit.make_trajectory(edit.TrajectorySpec.parse(cfg.edit.trajectory), T, gen.config.radius,
                                    gen.config.fov_deg)
        cams = traj.as_tensor(torch.float64)
    else:
        cams = latents.cams.to(torch.float64).clone()
    cams = cams + torch.tensor(cfg.edit.view_offset, dtype=torch.float64)
    return cams.to(gen.dtype)


def _direction(cfg: PipelineConfig, gen: ToyGenerator, writer: Optional[io.ArtifactWriter], out: Path):
    if not cfg.edit.attr or cfg.edit.alpha == 0:
        return None
    if cfg.paths.direction:
        d = edit.EditDirection.load(cfg.paths.direction)
        if d.attribute != cfg.edit.attr:
            raise InvalidArgument(f"direction file is for {d.attribute!r}, edit asks for {cfg.edit.attr!r}")
        return d
    classifier = get_provider("attributes", cfg.providers.attributes, generator=gen)
    with _stage("discover_direction"):
        d = edit.discover_direction(gen, cfg.edit.attr, cfg.edit.direction_samples, cfg.seed, classifier)
    if writer is not None:
        d.save(writer.path(out / f"direction_{cfg.edit.attr}.json"))
    return d


@_with_rollback
def cmd_edit_composite(cfg: PipelineConfig, writer: io.ArtifactWriter) -> Dict[str, object]:
    """Render the edited video and composite it into the source frames."""
    cfg.validate()
    art = Path(cfg.paths.artifacts)
    out = Path(cfg.paths.output)
    gen = io.load_generator(art / ARTIFACT_GENERATOR)
    frames = _frames(cfg)
    if cfg.paths.driving:
        # retargeting: motion (offsets, cameras, crops) from another video,
        # identity from this personalization
        drv = Path(cfg.paths.driving)
        driving = VideoLatents.load(_require(drv / ARTIFACT_VIDEO))
        transforms = load_crops(drv / ARTIFACT_CROPS)
        joint = _load_joint(art)
        latents = VideoLatents(joint.w_person.to(driving.offsets.dtype), driving.offsets, driving.cams)
    else:
        latents = VideoLatents.load(_require(art / ARTIFACT_VIDEO))
        transforms = load_crops(art / ARTIFACT_CROPS)
    if len(frames) != len(latents):
        raise InvalidArgument(f"{len(frames)} frames but {len(latents)} inverted latents")
    direction = _direction(cfg, gen, writer, out)
    cams = _edit_cams(cfg, latents, gen)
    debug_dir = out / "debug" if cfg.debug else None
    with _stage("edit_composite"):
        result, diags = run_edit_composite(
            gen, frames, transforms, latents, cfg, direction, cfg.edit.alpha, cams,
            parser=get_provider("parser", cfg.providers.parser), debug_dir=debug_dir,
        )
    for p in io.save_frames(result, out / "frames"):
        writer.written.append(p)
    dpath = writer.path(out / "composite_log.json")
    io.write_json({"version": 1, "frames": [dataclasses.asdict(d) for d in diags]}, dpath)
    return {"frames": out / "frames", "log": dpath}


def _require(p: Path) -> Path:
    if not p.exists():
        raise NotFound(f"artifact {p} does not exist")
    return p


@_with_rollback
def cmd_evaluate(cfg: PipelineConfig, writer: io.ArtifactWriter) -> MetricsReport:
    """Compare output frames with reference frames and write ``metrics.json``."""
    cfg.validate()
    out = Path(cfg.paths.output)
    output = io.load_frames(out / "frames")
    ref_dir = cfg.paths.reference or cfg.paths.frames
    if not ref_dir:
        raise InvalidArgument("paths.reference or paths.frames is required")
    reference = io.load_frames(ref_dir)
    crops_path = Path(cfg.paths.artifacts) / ARTIFACT_CROPS
    crop = None
    if crops_path.exists():
        data = io.read_json(crops_path)
        transforms = [align.CropTransform.from_dict(d) for d in data["transforms"]]
        if len(transforms) == len(output):
            crop = face_crop_fn(transforms, int(data.get("size", 64)))
    embedder = get_provider("identity", cfg.providers.identity)
    report = evaluate_sequences(output, reference, crop, embedder)
    io.write_json(report.to_dict(), writer.path(out / "metrics.json"))
    return report


# --------------------------------------------------------------------------- #
# ablation


@dataclass
class AblationRow:
    variant: str
    face_similarity: float
    psnr: float
    ssim: float
    recon_face_similarity: float
    recon_psnr: float
    recon_ssim: float
    seconds: float = 0.0
    #: every inset optimization ended below the border threshold or spent its budget
    inset_exit_ok: bool = True


@dataclass
class AblationReport:
    rows: List[AblationRow]
    novel_yaw: float
    notes: List[str] = field(default_factory=list)

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.variant == name:
                return r
        raise NotFound(f"no ablation variant {name!r}")

    def to_dict(self) -> dict:
        return {"version": 1, "novel_yaw": self.novel_yaw, "rows": [dataclasses.asdict(r) for r in self.rows],
                "notes": self.notes}

    def table(self) -> str:
        head = f"{'variant':<14}{'face_sim':>10}{'psnr':>9}{'ssim':>8}   {'rec_sim':>9}{'rec_psnr':>9}{'rec_ssim':>9}"
        lines = [f"novel view (yaw {self.novel_yaw:+.2f}) | reconstruction", head]
        for r in self.rows:
            lines.append(
                f"{r.variant:<14}{r.face_similarity:>10.4f}{r.psnr:>9.3f}{r.ssim:>8.4f}   "
                f"{r.recon_face_similarity:>9.4f}{r.recon_psnr:>9.3f}{r.recon_ssim:>9.4f}"
            )
        return "\n".join(lines)


def run_ablation(cfg: PipelineConfig, scene: Optional[Scene] = None) -> AblationReport:
    """Full pipeline and four ablations on a planted scene with novel-view ground truth.

    Variants share every stage they have in common (same seeds, same
    intermediate results).  Metrics are means over frames; face similarity
    compares identity embeddings of face crops at the true crop transforms.
    """
    cfg.validate()
    base = _base_generator(cfg)
    scene = scene or make_scene(base, cfg.scene_config())
    parser = get_provider("parser", cfg.providers.parser)
    embed = get_provider("identity", cfg.providers.identity)
    frames = scene.frames
    T = len(frames)
    novel_yaw = cfg.ablation.novel_yaw
    novel_truth = scene.render(novel_yaw)
    crop_eval = face_crop_fn(scene.transforms, scene.crop_size)

    transforms, crops = compute_crops(base, frames, scene.keypoints, cfg.align.keypoint_sigma)
    cfg_personalize = dataclasses.replace(cfg.personalize, num_faces=cfg.ablation.personalize_faces)
    idx = select_faces(dataclasses.replace(cfg, personalize=cfg_personalize), T)
    faces = [crops[i] for i in idx]
    single = [faces[int(np.argmin([abs(float(scene.cams[i, 0])) for i in idx]))]]

    no_reg_joint = dataclasses.replace(cfg.joint, weight_wdist=0.0, weight_wdist_target=0.0)
    no_reg_video = dataclasses.replace(cfg.video, weight_wdist=0.0, weight_wdist_target=0.0)

    cache: Dict[str, tuple] = {}

    def personalize(key):
        if key not in cache:
            t0 = time.perf_counter()
            if key == "full":
                cache[key] = run_personalize(base, faces, cfg.joint, cfg.tune, parser)
            elif key == "no_finetune":
                tuned, joint = personalize("full")
                cache[key] = (base.clone(), joint)
            elif key == "no_reg":
                cache[key] = run_personalize(base, faces, no_reg_joint, cfg.tune, parser)
            elif key == "single_input":
                cache[key] = run_personalize(base, single, cfg.joint, cfg.tune, parser)
            log.info("ablation: personalize %s in %.1fs", key, time.perf_counter() - t0)
        return cache[key]

    rows = []
    video_cache: Dict[str, VideoLatents] = {}
    for variant in ABLATION_VARIANTS:
        t0 = time.perf_counter()
        key = "full" if variant == "no_flow" else variant
        gen, joint = personalize(key)
        if key not in video_cache:
            vcfg = no_reg_video if variant == "no_reg" else cfg.video
            video_cache[key] = run_invert_video(gen, crops, joint, vcfg, parser)
        latents = video_cache[key]
        use_flow = variant != "no_flow" and cfg.flow.enabled
        recon, diag_r = run_edit_composite(gen, frames, transforms, latents, cfg, use_flow=use_flow, parser=parser)
        cams = latents.cams.to(torch.float64).clone()
        cams[:, 0] += novel_yaw
        novel, diag_n = run_edit_composite(gen, frames, transforms, latents, cfg, cams=cams, use_flow=use_flow,
                                           parser=parser)
        exit_ok = all(
            d.border_loss_final < cfg.composite.border_loss_threshold or d.inset_steps == cfg.composite.num_steps
            for d in diag_r + diag_n
        )
        m_novel = evaluate_sequences(novel, novel_truth, crop_eval, embed).aggregate()
        m_recon = evaluate_sequences(recon, frames, crop_eval, embed).aggregate()
        rows.append(
            AblationRow(
                variant, m_novel["identity"]["mean"], m_novel["psnr"]["mean"], m_novel["ssim"]["mean"],
                m_recon["identity"]["mean"], m_recon["psnr"]["mean"], m_recon["ssim"]["mean"],
                time.perf_counter() - t0, exit_ok,
            )
        )
        log.info("ablation %s: psnr %.3f (%.1fs)", variant, rows[-1].psnr, rows[-1].seconds)
    notes = [
        "Primary columns compare novel-view composites against planted novel-view ground truth.",
        "rec_* columns compare identity-edit composites against the input frames.",
    ]
    return AblationReport(rows, novel_yaw, notes)


@_with_rollback
def cmd_ablate(cfg: PipelineConfig, writer: io.ArtifactWriter) -> AblationReport:
    """Run the ablation study and write ``ablation.json`` and ``ablation.txt``."""
    report = run_ablation(cfg)
    out = Path(cfg.paths.output)
    io.write_json(report.to_dict(), writer.path(out / "ablation.json"))
    writer.path(out / "ablation.txt").write_text(report.table() + "\n")
    return report


@_with_rollback
def cmd_make_scene(cfg: PipelineConfig, writer: io.ArtifactWriter, novel_yaw: float = 0.0) -> Path:
    """Write a planted toy scene (frames, keypoints, ground truth) under ``paths.output``."""
    cfg.validate()
    scene = make_scene(_base_generator(cfg), cfg.scene_config())
    out = Path(cfg.paths.output)
    scene.save(out, novel_yaw)
    for p in sorted(out.rglob("*")):
        if p.is_file():
            writer.written.append(p)
    return out
