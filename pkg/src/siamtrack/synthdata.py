"""Seeded synthetic sequences, dataset persistence, and training-pair sampling.

Scenes are scripted: every object follows center + velocity*t plus seeded
jitter, so ground truth comes from the script rather than from the pixels.
Three scene kinds are provided:
  - "easy": one salient object gliding over a plain background (the regime
    where center saliency is enough to track);
  - "hard": same-shape distractors scripted to cross the target's path plus
    a brief occluder pass (the regime that punishes saliency-only tracking);
  - "drift": easy motion but the target's colors/stripes drift every frame
    (for the template-staleness analysis).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import (Box, CropSizes, CropSpec, channel_means, clip_box,
                       crop_and_resize, frame_to_grid, make_search_crop_spec,
                       make_target_crop_spec)
from .model import TOTAL_STRIDE, encode_offsets, heatmap_disc_target

SHAPES = ("ellipse", "rectangle", "triangle")


class DatasetError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: tuple = (200.0, 80.0, 60.0)
    stripe_color: tuple = (240.0, 220.0, 90.0)
    stripe_freq: float = 0.0          # cycles across the object width; 0 = solid
    stripe_phase: float = 0.0
    stripe_angle: float = 0.0
    center: tuple = (0.0, 0.0)
    velocity: tuple = (0.0, 0.0)
    size: tuple = (30.0, 30.0)
    scale_drift: float = 0.0          # per-frame multiplicative size change
    jitter_std: float = 0.0
    color_drift: tuple = (0.0, 0.0, 0.0)
    phase_drift: float = 0.0
    is_target: bool = False
    similarity_class: int = 0

    def state_at(self, t: int):
        """Deterministic (center, size, color, phase) before jitter."""
        cx = self.center[0] + self.velocity[0] * t
        cy = self.center[1] + self.velocity[1] * t
        s = (1.0 + self.scale_drift) ** t
        w, h = self.size[0] * s, self.size[1] * s
        color = tuple(float(np.clip(c + d * t, 0, 255))
                      for c, d in zip(self.color, self.color_drift))
        return (cx, cy), (w, h), color, self.stripe_phase + self.phase_drift * t


@dataclass(frozen=True)
class BackgroundSpec:
    color: tuple = (90.0, 100.0, 110.0)
    gradient: tuple = (0.15, 0.1)     # per-pixel RGB slope along x and y
    wave_amp: float = 6.0             # gentle large-scale sinusoid
    wave_freq: float = 0.02
    noise_std: float = 2.0


@dataclass(frozen=True)
class SceneScript:
    seed: int
    num_frames: int
    frame_size: tuple                 # (W, H)
    objects: tuple
    occluders: tuple = ()
    background: BackgroundSpec = field(default_factory=BackgroundSpec)

    def __post_init__(self):
        targets = [o for o in self.objects if o.is_target]
        if len(targets) != 1:
            raise ValueError(f"script must have exactly one target, got {len(targets)}")

    def target(self) -> ObjectSpec:
        return next(o for o in self.objects if o.is_target)


@dataclass(frozen=True)
class Annotation:
    frame: int
    box: Box
    visible: bool


@dataclass
class Sequence:
    frames: list                      # uint8 (H, W, 3) arrays
    annotations: list                 # one Annotation per frame

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def frame_size(self) -> tuple:
        h, w = self.frames[0].shape[:2]
        return (w, h)


@dataclass
class SequenceRecord:
    seq_id: str
    sequence: Sequence
    tags: tuple = ()


def _object_mask(shape: str, center, size, xx, yy) -> np.ndarray:
    cx, cy = center
    w, h = size
    u = xx - cx
    v = yy - cy
    if shape == "ellipse":
        return (u / (0.5 * w)) ** 2 + (v / (0.5 * h)) ** 2 <= 1.0
    if shape == "rectangle":
        return (np.abs(u) <= 0.5 * w) & (np.abs(v) <= 0.5 * h)
    if shape == "triangle":
        # isoceles triangle: apex at top center, base at the bottom edge
        inside_y = (v >= -0.5 * h) & (v <= 0.5 * h)
        half_width = 0.5 * w * (v + 0.5 * h) / h
        return inside_y & (np.abs(u) <= half_width)
    raise ValueError(f"unknown shape {shape!r}")


def _paint_object(frame: np.ndarray, obj: ObjectSpec, t: int, jitter, xx, yy) -> Box:
    (cx, cy), (w, h), color, phase = obj.state_at(t)
    cx += jitter[0]
    cy += jitter[1]
    mask = _object_mask(obj.shape, (cx, cy), (w, h), xx, yy)
    if obj.stripe_freq > 0:
        ca, sa = math.cos(obj.stripe_angle), math.sin(obj.stripe_angle)
        s = ((xx - cx) * ca + (yy - cy) * sa) / max(w, 1e-6)
        pattern = np.sin(2 * math.pi * obj.stripe_freq * s + phase) >= 0
        col = np.where(pattern[:, :, None], np.asarray(color), np.asarray(obj.stripe_color))
        frame[mask] = col[mask]
    else:
        frame[mask] = np.asarray(color, dtype=np.float32)
    return Box.from_center(cx, cy, w, h)


def _render_background(bg: BackgroundSpec, size, rng) -> np.ndarray:
    w, h = size
    xx, yy = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
    img = np.empty((h, w, 3), dtype=np.float32)
    img[:] = np.asarray(bg.color, dtype=np.float32)
    ramp = bg.gradient[0] * xx + bg.gradient[1] * yy
    wave = bg.wave_amp * np.sin(2 * math.pi * bg.wave_freq * (xx + 0.7 * yy))
    img += (ramp + wave)[:, :, None]
    if bg.noise_std > 0:
        img += rng.normal(0.0, bg.noise_std, size=(h, w, 1)).astype(np.float32)
    return img


def render_sequence(script: SceneScript) -> Sequence:
    """Rasterize a script; same seed always yields byte-identical frames."""
    w, h = script.frame_size
    rng = np.random.default_rng(script.seed)
    xx, yy = np.meshgrid(np.arange(w, dtype=np.float32) + 0.5,
                         np.arange(h, dtype=np.float32) + 0.5)
    background = _render_background(script.background, script.frame_size, rng)
    frame_box = Box(0, 0, w, h)

    # jitter draws happen in one fixed order so rendering stays reproducible
    drawables = list(script.objects) + list(script.occluders)
    jitters = [
        [rng.normal(0.0, o.jitter_std, size=2) if o.jitter_std > 0 else np.zeros(2)
         for o in drawables]
        for _ in range(script.num_frames)
    ]

    frames, annotations = [], []
    for t in range(script.num_frames):
        frame = background.copy()
        target_box = None
        occluder_boxes = []
        # distractors first, target on top, occluders over everything
        order = sorted(range(len(script.objects)), key=lambda i: script.objects[i].is_target)
        for i in order:
            box = _paint_object(frame, script.objects[i], t, jitters[t][i], xx, yy)
            if script.objects[i].is_target:
                target_box = box
        for k, occ in enumerate(script.occluders):
            occluder_boxes.append(
                _paint_object(frame, occ, t, jitters[t][len(script.objects) + k], xx, yy))

        area = target_box.area()
        if area <= 0:
            raise ValueError(f"target has degenerate size at frame {t}")
        in_frame = _overlap_area(target_box, frame_box) / area
        if t == 0 and in_frame == 0:
            raise ValueError("target starts fully off-frame")
        occluded = max((_overlap_area(target_box, ob) / area for ob in occluder_boxes),
                       default=0.0)
        visible = in_frame >= 0.25 and occluded <= 0.75
        clipped = clip_box(target_box, frame_box)
        if clipped.area() <= 0:
            visible = False
        annotations.append(Annotation(frame=t, box=clipped, visible=visible))
        frames.append(np.clip(frame, 0, 255).astype(np.uint8))
    return Sequence(frames=frames, annotations=annotations)


def _overlap_area(a: Box, b: Box) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    return max(ix, 0.0) * max(iy, 0.0)


# ---------------------------------------------------------------------------
# scene factories


def derive_seed(global_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1)[0])


def _random_texture(rng):
    base = tuple(rng.uniform(40, 230, size=3))
    stripe = tuple(rng.uniform(40, 230, size=3))
    freq = float(rng.uniform(1.5, 4.0))
    phase = float(rng.uniform(0, 2 * math.pi))
    angle = float(rng.uniform(0, math.pi))
    return base, stripe, freq, phase, angle


def _path_through(frame_size, num_frames, rng, speed_range=(0.8, 2.2), margin=36.0):
    """Random start/velocity keeping the path inside the frame margins."""
    w, h = frame_size
    ang = rng.uniform(0, 2 * math.pi)
    speed = rng.uniform(*speed_range)
    vx, vy = speed * math.cos(ang), speed * math.sin(ang)
    span_x = vx * (num_frames - 1)
    span_y = vy * (num_frames - 1)
    x_lo = margin + max(0.0, -span_x)
    x_hi = w - margin - max(0.0, span_x)
    y_lo = margin + max(0.0, -span_y)
    y_hi = h - margin - max(0.0, span_y)
    if x_hi <= x_lo or y_hi <= y_lo:
        # too fast for the frame; slow down deterministically
        return _path_through(frame_size, num_frames, rng,
                             (speed_range[0] * 0.5, speed_range[1] * 0.5), margin)
    return (float(rng.uniform(x_lo, x_hi)), float(rng.uniform(y_lo, y_hi))), (vx, vy)


def make_scene_script(kind: str, seed: int, num_frames: int = 40,
                      frame_size: tuple = (192, 160)) -> SceneScript:
    rng = np.random.default_rng(seed)
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    base, stripe, freq, phase, angle = _random_texture(rng)
    tw = float(rng.uniform(26, 40))
    th = float(rng.uniform(0.7, 1.3)) * tw
    center, vel = _path_through(frame_size, num_frames, rng)
    # every scene carries mild appearance drift (lighting-change stand-in);
    # the "drift" kind makes it strong enough to decorrelate stale templates
    target = ObjectSpec(shape=shape, color=base, stripe_color=stripe, stripe_freq=freq,
                        stripe_phase=phase, stripe_angle=angle, center=center,
                        velocity=vel, size=(tw, th), jitter_std=0.3,
                        scale_drift=float(rng.uniform(-0.002, 0.002)),
                        color_drift=tuple(rng.uniform(-1.2, 1.2, size=3)),
                        phase_drift=float(rng.uniform(0.02, 0.08)),
                        is_target=True, similarity_class=SHAPES.index(shape))
    objects = [target]
    occluders = []

    if kind == "drift":
        target = replace(target,
                         color_drift=tuple(rng.uniform(-3.0, 3.0, size=3)),
                         phase_drift=float(rng.uniform(0.15, 0.35)))
        objects = [target]
    elif kind == "hard":
        for _ in range(int(rng.integers(2, 4))):
            dbase, dstripe, dfreq, dphase, dangle = _random_texture(rng)
            t_cross = int(rng.integers(num_frames // 4, 3 * num_frames // 4))
            ang = rng.uniform(0, 2 * math.pi)
            speed = rng.uniform(1.2, 2.6)
            dvx, dvy = speed * math.cos(ang), speed * math.sin(ang)
            # meet the target's path at t_cross (hard distractor: same shape,
            # comparable size, different texture)
            tx = target.center[0] + target.velocity[0] * t_cross
            ty = target.center[1] + target.velocity[1] * t_cross
            off = rng.uniform(-6, 6, size=2)
            objects.append(ObjectSpec(
                shape=shape, color=dbase, stripe_color=dstripe, stripe_freq=dfreq,
                stripe_phase=dphase, stripe_angle=dangle,
                center=(tx - dvx * t_cross + off[0], ty - dvy * t_cross + off[1]),
                velocity=(dvx, dvy), size=(tw * rng.uniform(0.85, 1.15),
                                           th * rng.uniform(0.85, 1.15)),
                jitter_std=0.3, similarity_class=SHAPES.index(shape)))
        t_occ = int(rng.integers(num_frames // 3, 2 * num_frames // 3))
        ospeed = rng.uniform(3.0, 5.0)
        odir = rng.uniform(0, 2 * math.pi)
        ovx, ovy = ospeed * math.cos(odir), ospeed * math.sin(odir)
        tx = target.center[0] + target.velocity[0] * t_occ
        ty = target.center[1] + target.velocity[1] * t_occ
        occluders.append(ObjectSpec(
            shape="rectangle", color=tuple(rng.uniform(30, 220, size=3)),
            center=(tx - ovx * t_occ, ty - ovy * t_occ), velocity=(ovx, ovy),
            size=(tw * 1.3, th * 1.3)))
    elif kind != "easy":
        raise ValueError(f"unknown scene kind {kind!r}")

    bg = BackgroundSpec(color=tuple(rng.uniform(60, 140, size=3)),
                        gradient=(float(rng.uniform(-0.2, 0.2)), float(rng.uniform(-0.2, 0.2))),
                        wave_amp=float(rng.uniform(2, 8)),
                        wave_freq=float(rng.uniform(0.01, 0.03)),
                        noise_std=2.0)
    return SceneScript(seed=derive_seed(seed, 1), num_frames=num_frames,
                       frame_size=frame_size, objects=tuple(objects),
                       occluders=tuple(occluders), background=bg)


# ---------------------------------------------------------------------------
# dataset persistence
# layout: <root>/<sequence_id>/frames/%06d.png, <root>/<sequence_id>/annotations.jsonl,
#         <root>/manifest.json


def write_dataset(root, records) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = []
    for rec in records:
        seq = rec.sequence
        w, h = seq.frame_size
        sdir = root / rec.seq_id
        (sdir / "frames").mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(seq.frames):
            Image.fromarray(frame).save(sdir / "frames" / f"{i:06d}.png")
        with open(sdir / "annotations.jsonl", "w") as f:
            for ann in seq.annotations:
                f.write(json.dumps({
                    "frame": ann.frame,
                    "x_min": ann.box.x_min, "y_min": ann.box.y_min,
                    "x_max": ann.box.x_max, "y_max": ann.box.y_max,
                    "visible": ann.visible,
                }, sort_keys=True) + "\n")
        manifest.append({"id": rec.seq_id, "width": w, "height": h,
                         "num_frames": seq.num_frames, "tags": list(rec.tags)})
    with open(root / "manifest.json", "w") as f:
        json.dump({"sequences": manifest}, f, indent=2, sort_keys=True)
        f.write("\n")


def read_dataset(root, tags=None):
    """Load records, optionally keeping only sequences carrying all `tags`."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        if not root.exists() or not any(root.iterdir()):
            return []
        raise DatasetError(f"no manifest.json in non-empty dataset dir {root}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    records = []
    want = set(tags or ())
    for ent in manifest["sequences"]:
        if want and not want.issubset(set(ent["tags"])):
            continue
        sdir = root / ent["id"]
        ann_path = sdir / "annotations.jsonl"
        annotations = []
        with open(ann_path) as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    annotations.append(Annotation(
                        frame=int(rec["frame"]),
                        box=Box(rec["x_min"], rec["y_min"], rec["x_max"], rec["y_max"]),
                        visible=bool(rec["visible"])))
                except (json.JSONDecodeError, KeyError) as e:
                    raise DatasetError(f"{ann_path}:{lineno}: bad annotation ({e})") from e
        frames = []
        for i in range(ent["num_frames"]):
            fpath = sdir / "frames" / f"{i:06d}.png"
            if not fpath.exists():
                raise DatasetError(f"missing frame {fpath}")
            frames.append(np.asarray(Image.open(fpath).convert("RGB")))
        if len(annotations) != len(frames):
            raise DatasetError(f"{ann_path}: {len(annotations)} annotations "
                               f"for {len(frames)} frames")
        records.append(SequenceRecord(seq_id=ent["id"],
                                      sequence=Sequence(frames=frames, annotations=annotations),
                                      tags=tuple(ent["tags"])))
    return records


# ---------------------------------------------------------------------------
# training-pair sampling and augmentation


@dataclass(frozen=True)
class SamplerConfig:
    tau: int = 2                      # sub-sequence length the search index is drawn from
    target_rule: str = "random_causal"  # or "first_frame"
    translation_frac: float = 0.15    # max content shift, fraction of the search crop
    scale_jitter: float = 0.15        # multiplicative crop-side jitter
    contrast: float = 0.25
    saturation: float = 0.25
    hue: float = 0.05                 # fraction of a full hue rotation
    heat_radius: float = 5.0          # disc radius in search-crop pixels
    max_retries: int = 20

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.target_rule not in ("random_causal", "first_frame"):
            raise ValueError(f"unknown target rule {self.target_rule!r}")


@dataclass
class TrainingExample:
    target: np.ndarray                # (m, m, 3) float32
    search: np.ndarray                # (n, n, 3) float32
    detector_frame: np.ndarray        # (n, n, 3) float32
    heat_target: np.ndarray           # (g, g) float32 in {0, 1}
    offset_target: np.ndarray         # (4, g, g) float32, grid units
    offset_mask: np.ndarray           # (g, g) float32 in {0, 1}
    det_heat_target: np.ndarray       # (g, g) float32
    search_spec: CropSpec
    detector_spec: CropSpec
    gt_box: Box
    indices: tuple


def sample_pair(num_frames: int, cfg: SamplerConfig, rng, t: int | None = None):
    """Draw (target_idx, search_idx) with the target strictly before the search.

    The search index comes from a sub-sequence [t, t+tau); the target index is
    frame 0 or uniform over [0, t-1] depending on the rule.
    """
    if num_frames < cfg.tau + 1:
        raise SamplingError(f"sequence of {num_frames} frames is shorter than tau+1")
    if t is None:
        t = int(rng.integers(1, num_frames - cfg.tau + 1))
    if not 1 <= t <= num_frames - cfg.tau:
        raise SamplingError(f"sub-sequence start {t} out of range")
    search_idx = t + int(rng.integers(cfg.tau))
    if cfg.target_rule == "first_frame":
        target_idx = 0
    else:
        target_idx = int(rng.integers(t))
    return target_idx, search_idx


def detector_crop_spec(frame_size, out_size: int) -> CropSpec:
    """Whole-frame letterbox spec used by the detector branch."""
    w, h = frame_size
    return CropSpec((w / 2.0, h / 2.0), float(max(w, h)), out_size)


def apply_photometric(img: np.ndarray, cfg: SamplerConfig, rng) -> np.ndarray:
    """Random contrast/saturation/hue perturbation; draws 3 values per call."""
    c = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
    s = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation)
    theta = rng.uniform(-cfg.hue, cfg.hue) * 2 * math.pi
    out = img.astype(np.float32)
    mean = out.mean()
    out = mean + (out - mean) * c
    gray = out @ np.asarray([0.299, 0.587, 0.114], dtype=np.float32)
    out = gray[:, :, None] + (out - gray[:, :, None]) * s
    if theta != 0.0:
        ca, sa = math.cos(theta), math.sin(theta)
        k = 1.0 / 3.0
        m = np.full((3, 3), k * (1 - ca), dtype=np.float32)
        m += ca * np.eye(3, dtype=np.float32)
        cross = np.asarray([[0, -1, 1], [1, 0, -1], [-1, 1, 0]], dtype=np.float32)
        m += sa / math.sqrt(3.0) * cross
        out = out @ m.T
    return np.clip(out, 0, 255).astype(np.float32)


def build_training_example(seq: Sequence, indices, cfg: SamplerConfig,
                           sizes: CropSizes, rng) -> TrainingExample:
    """Crop, augment, and encode one supervision example.

    Draw order per call: search scale (1), search translation (2), then
    photometric triples for target, search, and detector frame (9).
    """
    ti, si = indices
    ann = seq.annotations
    if not (ann[ti].visible and ann[si].visible and ann[si - 1].visible):
        raise SamplingError(f"target not visible at indices {indices}")

    target_box = ann[ti].box
    prev_box = ann[si - 1].box
    gt_box = ann[si].box
    stride = sizes.stride
    radius_grid = cfg.heat_radius / stride

    tspec = make_target_crop_spec(target_box, sizes.target_size)
    sspec = make_search_crop_spec(prev_box, sizes.search_size, sizes.ratio())

    scale = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)
    shift = rng.uniform(-cfg.translation_frac, cfg.translation_frac, size=2) * sizes.search_size
    side = sspec.side * scale
    # `shift` is the content displacement in crop pixels; the crop window
    # moves the opposite way in frame space
    center = (sspec.center[0] - shift[0] * side / sizes.search_size,
              sspec.center[1] - shift[1] * side / sizes.search_size)
    sspec = CropSpec(center, side, sizes.search_size)

    dspec = detector_crop_spec(seq.frame_size, sizes.search_size)

    target_frame = seq.frames[ti]
    search_frame = seq.frames[si]
    target_crop = crop_and_resize(target_frame, tspec, channel_means(target_frame))
    search_crop = crop_and_resize(search_frame, sspec, channel_means(search_frame))
    det_crop = crop_and_resize(search_frame, dspec, channel_means(search_frame))

    g = sizes.search_grid()
    heat = heatmap_disc_target(frame_to_grid(gt_box.center(), sspec, stride), g, radius_grid)
    offsets, mask = encode_offsets(gt_box, sspec, stride, radius_grid)
    det_heat = heatmap_disc_target(frame_to_grid(gt_box.center(), dspec, stride), g, radius_grid)

    return TrainingExample(
        target=apply_photometric(target_crop, cfg, rng),
        search=apply_photometric(search_crop, cfg, rng),
        detector_frame=apply_photometric(det_crop, cfg, rng),
        heat_target=heat,
        offset_target=offsets,
        offset_mask=mask,
        det_heat_target=det_heat,
        search_spec=sspec,
        detector_spec=dspec,
        gt_box=gt_box,
        indices=(ti, si),
    )


def sample_training_example(seq: Sequence, cfg: SamplerConfig, sizes: CropSizes,
                            rng) -> TrainingExample:
    """sample_pair + build_training_example with bounded visibility retries."""
    for _ in range(cfg.max_retries):
        indices = sample_pair(seq.num_frames, cfg, rng)
        ti, si = indices
        ann = seq.annotations
        if ann[ti].visible and ann[si].visible and ann[si - 1].visible:
            return build_training_example(seq, indices, cfg, sizes, rng)
    raise SamplingError(f"no visible training pair found in {cfg.max_retries} tries")
