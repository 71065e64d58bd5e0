"""Turn raw network output into box proposals and a per-frame selection.

Cells are indexed (row, col) when they come out of the heatmap and passed to
the offset decoder as (col, row); suppression uses the even 6x6 window
anchored [-3, +2] around a mode, while offset averaging uses the symmetric
5x5 core of that window so a linear offset field decodes without bias.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import (Box, CropSizes, CropSpec, channel_means, clip_box,
                       context_side, crop_and_resize, make_search_crop_spec,
                       make_target_crop_spec)
from .model import TrackerNet, TrackerOutput, decode_offsets


@dataclass(frozen=True)
class SelectConfig:
    num_proposals: int = 5
    nms_window: int = 6               # suppression window, grid cells
    penalty_k: float = 0.055          # aspect/scale change penalty strength
    window_weight: float = 0.40       # cosine window influence in [0, 1]

    def __post_init__(self):
        if self.num_proposals < 1 or self.nms_window < 1:
            raise ValueError("need num_proposals >= 1 and nms_window >= 1")
        if not 0.0 <= self.window_weight <= 1.0:
            raise ValueError("window_weight must be in [0, 1]")
        if self.penalty_k < 0:
            raise ValueError("penalty_k must be >= 0")


@dataclass(frozen=True)
class Proposal:
    box: Box
    score: float                      # positive-class probability at the mode
    cell: tuple                       # (row, col) of the heatmap mode


def suppression_span(window: int) -> tuple[int, int]:
    """Inclusive (lo, hi) cell offsets covered by the NMS window."""
    lo = -(window // 2)
    return lo, lo + window - 1


def top_modes(probs: np.ndarray, cfg: SelectConfig) -> list:
    """Greedy NMS: up to num_proposals (row, col) maxima, each suppressing
    its window. Ties resolve to the smallest (row, col)."""
    work = np.asarray(probs, dtype=np.float64).copy()
    lo, hi = suppression_span(cfg.nms_window)
    g_r, g_c = work.shape
    modes = []
    for _ in range(cfg.num_proposals):
        if np.isneginf(work).all():
            break
        flat = int(np.argmax(work))          # first occurrence = (row, col) order
        r, c = divmod(flat, g_c)
        modes.append((r, c))
        work[max(r + lo, 0):min(r + hi + 1, g_r),
             max(c + lo, 0):min(c + hi + 1, g_c)] = -np.inf
    return modes


def proposals_from_output(out: TrackerOutput, spec: CropSpec, cfg: SelectConfig,
                          stride: int = 4) -> list:
    """Decode the top heatmap modes into frame-space proposals.

    Offsets are averaged over the symmetric core window around each mode and
    decoded at the mode cell; boxes are clipped to the crop footprint.
    """
    if out.heat_logits.shape[0] != 1:
        raise ValueError("proposals_from_output expects a single-example output")
    probs = out.probs()[0].detach().cpu().numpy()
    offsets = out.offsets[0].detach().cpu().numpy()
    half = (cfg.nms_window - 1) // 2
    footprint = spec.footprint()
    g = probs.shape[0]

    proposals = []
    for r, c in top_modes(probs, cfg):
        r0, r1 = max(r - half, 0), min(r + half + 1, g)
        c0, c1 = max(c - half, 0), min(c + half + 1, g)
        mean_off = offsets[:, r0:r1, c0:c1].mean(axis=(1, 2))
        box = decode_offsets((c, r), mean_off, spec, stride)
        box = clip_box(box, footprint)
        proposals.append(Proposal(box=box, score=float(probs[r, c]), cell=(r, c)))
    return proposals


def _change(x: float) -> float:
    return max(x, 1.0 / x)


def _context_scale(w: float, h: float) -> float:
    p = 0.5 * (w + h)
    return ((w + p) * (h + p)) ** 0.5


def penalized_score(p: Proposal, prev_box: Box, spec: CropSpec, cfg: SelectConfig) -> float:
    """score * exp(-k*(ratio_change*scale_change - 1)) * ((1-l) + l*cosine_window)."""
    w = max(p.box.width(), 1e-6)
    h = max(p.box.height(), 1e-6)
    pw = max(prev_box.width(), 1e-6)
    ph = max(prev_box.height(), 1e-6)
    r_c = _change((w / h) / (pw / ph))
    s_c = _change(_context_scale(w, h) / _context_scale(pw, ph))
    penalty = float(np.exp(-cfg.penalty_k * (r_c * s_c - 1.0)))

    (cx, cy), (px, py) = p.box.center(), prev_box.center()
    dist = ((cx - px) ** 2 + (cy - py) ** 2) ** 0.5
    u = min(dist / (0.5 * spec.side), 1.0)
    cos_win = 0.5 * (1.0 + np.cos(np.pi * u))
    return p.score * penalty * ((1.0 - cfg.window_weight) + cfg.window_weight * cos_win)


def select_proposal(proposals, prev_box: Box, spec: CropSpec, cfg: SelectConfig) -> Proposal:
    """Pick the proposal with the best temporal-consistency-penalized score."""
    if not proposals:
        raise ValueError("no proposals to select from")
    scored = []
    for p in proposals:
        cx, cy = p.box.center()
        scored.append((-penalized_score(p, prev_box, spec, cfg), -p.score, cx, cy, p))
    scored.sort(key=lambda t: t[:4])
    return scored[0][4]


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float/uint8 -> (1, 3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(
        img.astype(np.float32).transpose(2, 0, 1)))[None]


def encode_template(model: TrackerNet, frame: np.ndarray, box: Box,
                    sizes: CropSizes) -> torch.Tensor:
    """Crop the target template from a frame and encode it."""
    spec = make_target_crop_spec(box, sizes.target_size)
    crop = crop_and_resize(frame, spec, channel_means(frame))
    with torch.no_grad():
        return model.encode(to_tensor(crop))


def encode_template_image(model: TrackerNet, crop: np.ndarray) -> torch.Tensor:
    """Encode an already-cropped template image (ablation entry point)."""
    with torch.no_grad():
        return model.encode(to_tensor(crop))


def predict_box(model: TrackerNet, template: torch.Tensor, frame: np.ndarray,
                search_spec: CropSpec, prev_box: Box, sizes: CropSizes,
                cfg: SelectConfig) -> Proposal:
    """One tracking step: crop the search window, infer, decode, select."""
    crop = crop_and_resize(frame, search_spec, channel_means(frame))
    with torch.no_grad():
        out = model.track_from_features(template, model.encode(to_tensor(crop)))
    proposals = proposals_from_output(out, search_spec, cfg, sizes.stride)
    return select_proposal(proposals, prev_box, search_spec, cfg)


def _valid_state(box: Box) -> Box:
    """Keep the recursion state croppable: inflate near-degenerate boxes."""
    w = max(box.width(), 2.0)
    h = max(box.height(), 2.0)
    cx, cy = box.center()
    return Box.from_center(cx, cy, w, h)


def track_sequence(model: TrackerNet, frames, init_box: Box, sizes: CropSizes,
                   cfg: SelectConfig, template_crop: np.ndarray | None = None):
    """Track through a frame list from a first-frame box.

    The template is cropped from frame 0 (or taken from `template_crop`) and
    held fixed; each search window is centered on the previous output box.
    Returns (boxes, scores) with boxes[0] == init_box.
    """
    if template_crop is None:
        template = encode_template(model, frames[0], init_box, sizes)
    else:
        template = encode_template_image(model, template_crop)
    boxes = [init_box]
    scores = [1.0]
    prev = _valid_state(init_box)
    for t in range(1, len(frames)):
        spec = make_search_crop_spec(prev, sizes.search_size, sizes.ratio())
        sel = predict_box(model, template, frames[t], spec, prev, sizes, cfg)
        boxes.append(sel.box)
        scores.append(sel.score)
        prev = _valid_state(sel.box)
    return boxes, scores


def write_tracks(path, seq_id: str, boxes, scores) -> None:
    """Persist one sequence's track as JSON lines (frames without a box are skipped)."""
    with open(path, "w") as f:
        for i, (b, s) in enumerate(zip(boxes, scores)):
            if b is None:
                continue
            f.write(json.dumps({
                "sequence_id": seq_id, "frame": i,
                "x_min": b.x_min, "y_min": b.y_min,
                "x_max": b.x_max, "y_max": b.y_max,
                "score": s,
            }, sort_keys=True) + "\n")
