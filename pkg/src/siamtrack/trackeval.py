"""Reset-based supervised evaluation, robustness/accuracy, and ablation tables.

A failure is a predicted box with zero IoU against visible ground truth; the
tracker is then re-initialized from ground truth a few frames later. The
aggregate robustness is the length-weighted mean failure count
R = sum_s(L_s * F_s) / sum_s(L_s); accuracy is the mean IoU over scored
frames (burn-in frames after each (re-)init are not scored).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .decode import SelectConfig, encode_template, encode_template_image, predict_box, _valid_state
from .geometry import Box, CropSizes, channel_means, context_side, crop_and_resize, iou, CropSpec, make_search_crop_spec
from .model import TrackerNet

TARGET_MODES = ("ground_truth_first_frame", "random_patch_first_frame")


@dataclass(frozen=True)
class EvalConfig:
    reset_skip: int = 5               # frames skipped after a failure
    burn_in: int = 10                 # frames after (re-)init excluded from accuracy
    target_mode: str = "ground_truth_first_frame"
    patch_seed: int = 0               # rng seed for random-patch targets

    def __post_init__(self):
        if self.reset_skip < 0 or self.burn_in < 0:
            raise ValueError("reset_skip and burn_in must be >= 0")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"unknown target mode {self.target_mode!r}")


@dataclass
class SequenceEval:
    seq_id: str
    length: int
    failures: int
    ious: list                        # per-frame IoU, nan where not scored
    pred_boxes: list
    pred_scores: list

    def mean_iou(self) -> float:
        vals = [v for v in self.ious if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")


@dataclass
class EvalResult:
    per_sequence: list = field(default_factory=list)

    def robustness(self) -> float:
        num = sum(s.length * s.failures for s in self.per_sequence)
        den = sum(s.length for s in self.per_sequence)
        return num / den if den else float("nan")

    def accuracy(self) -> float:
        vals = [v for s in self.per_sequence for v in s.ious if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")


def random_target_patches(frame: np.ndarray, gt_box: Box, count: int, rng,
                          sizes: CropSizes, max_tries: int = 200):
    """Target-geometry crops of the first frame that do not touch the target.

    Returns a list of (crop, footprint_box) pairs; crop positions are uniform
    over placements that keep the square inside the frame and at zero IoU
    with the ground-truth box.
    """
    h, w = frame.shape[:2]
    side = context_side(gt_box)
    if side >= w or side >= h:
        raise ValueError("frame too small for a disjoint target-sized patch")
    patches = []
    means = channel_means(frame)
    for _ in range(count):
        for attempt in range(max_tries):
            cx = rng.uniform(side / 2, w - side / 2)
            cy = rng.uniform(side / 2, h - side / 2)
            box = Box.from_center(cx, cy, side, side)
            if iou(box, gt_box) == 0.0:
                spec = CropSpec((cx, cy), side, sizes.target_size)
                patches.append((crop_and_resize(frame, spec, means), box))
                break
        else:
            raise ValueError(f"no disjoint patch placement found in {max_tries} tries")
    return patches


def _template_for(model, seq, init_frame, eval_cfg, sizes, rng):
    """Template features for an init at `init_frame` under the configured mode."""
    if eval_cfg.target_mode == "random_patch_first_frame":
        crop, _ = random_target_patches(seq.frames[0], seq.annotations[0].box,
                                        1, rng, sizes)[0]
        return encode_template_image(model, crop)
    box = seq.annotations[init_frame].box
    return encode_template(model, seq.frames[init_frame], box, sizes)


def evaluate_sequence(model: TrackerNet, record, eval_cfg: EvalConfig,
                      select_cfg: SelectConfig, sizes: CropSizes,
                      rng=None, predict=None) -> SequenceEval:
    """Run the reset protocol over one sequence.

    `predict` defaults to the real tracker step and exists so tests can
    substitute oracle behaviors: predict(template, frame, spec, prev) -> Box.
    """
    seq = record.sequence
    ann = seq.annotations
    T = seq.num_frames
    if not ann or ann[0].frame != 0 or not ann[0].visible:
        raise ValueError(f"{record.seq_id}: no visible frame-0 annotation")
    if rng is None:
        rng = np.random.default_rng(eval_cfg.patch_seed)
    if predict is None:
        def predict(template, frame, spec, prev):
            return predict_box(model, template, frame, spec, prev, sizes, select_cfg)

    ious = [float("nan")] * T
    preds: list = [None] * T
    scores: list = [None] * T
    failures = 0
    init_t = 0
    while init_t < T - 1:
        template = _template_for(model, seq, init_t, eval_cfg, sizes, rng)
        prev = _valid_state(ann[init_t].box)
        preds[init_t] = ann[init_t].box
        scores[init_t] = 1.0
        failed_at = None
        for u in range(init_t + 1, T):
            spec = make_search_crop_spec(prev, sizes.search_size, sizes.ratio())
            sel = predict(template, seq.frames[u], spec, prev)
            preds[u] = sel.box
            scores[u] = sel.score
            if ann[u].visible:
                overlap = iou(sel.box, ann[u].box)
                if u - init_t > eval_cfg.burn_in:
                    ious[u] = overlap
                if overlap == 0.0:
                    failures += 1
                    ious[u] = float("nan")   # failure frame is not scored
                    failed_at = u
                    break
            prev = _valid_state(sel.box)
        if failed_at is None:
            break
        init_t = failed_at + eval_cfg.reset_skip
        while init_t < T and not ann[init_t].visible:
            init_t += 1
    return SequenceEval(seq_id=record.seq_id, length=T, failures=failures,
                        ious=ious, pred_boxes=preds, pred_scores=scores)


def supervised_evaluate(model: TrackerNet, records, eval_cfg: EvalConfig,
                        select_cfg: SelectConfig, sizes: CropSizes,
                        predict=None) -> EvalResult:
    rng = np.random.default_rng(eval_cfg.patch_seed)
    result = EvalResult()
    for rec in records:
        result.per_sequence.append(
            evaluate_sequence(model, rec, eval_cfg, select_cfg, sizes,
                              rng=rng, predict=predict))
    return result


# ---------------------------------------------------------------------------
# ablation aggregation


@dataclass
class AblationRow:
    variant: str
    split: str
    n_seeds: int
    robustness_mean: float
    robustness_se: float
    accuracy_mean: float
    accuracy_se: float


def _mean_se(values) -> tuple:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise ValueError("standard error needs at least 2 seeds")
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def ablation_table(per_cell: dict) -> list:
    """Aggregate {(variant, split): [(R, A) per seed]} into mean +/- SE rows."""
    rows = []
    for (variant, split), vals in sorted(per_cell.items()):
        r_mean, r_se = _mean_se([v[0] for v in vals])
        a_mean, a_se = _mean_se([v[1] for v in vals])
        rows.append(AblationRow(variant=variant, split=split, n_seeds=len(vals),
                                robustness_mean=r_mean, robustness_se=r_se,
                                accuracy_mean=a_mean, accuracy_se=a_se))
    return rows


def write_eval_csv(path, model_name: str, seed, split: str, result: EvalResult) -> None:
    """One row per sequence: model, seed, split, sequence, L, F, mean IoU."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "seed", "split", "sequence", "length", "failures", "mean_iou"])
        for s in result.per_sequence:
            w.writerow([model_name, seed, split, s.seq_id, s.length, s.failures,
                        repr(s.mean_iou())])


def write_ablation_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "split", "n_seeds", "robustness_mean", "robustness_se",
                    "accuracy_mean", "accuracy_se"])
        for r in rows:
            w.writerow([r.variant, r.split, r.n_seeds, repr(r.robustness_mean),
                        repr(r.robustness_se), repr(r.accuracy_mean), repr(r.accuracy_se)])
