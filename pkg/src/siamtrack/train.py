"""Optimization loop with a step-keyed reproducible sampler and periodic eval.

Every batch is drawn from an rng seeded by (run seed, step index), so a run
resumed from a checkpoint consumes exactly the same data stream as an
uninterrupted one; together with the saved Adam moments this makes
save -> load -> continue bit-identical.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .decode import SelectConfig
from .geometry import CropSizes
from .model import (BackboneConfig, LossWeights, TrackerNet, detector_loss,
                    joint_loss, load_checkpoint, restore_model, save_checkpoint,
                    tracker_loss)
from .synthdata import SamplerConfig, sample_training_example
from .trackeval import EvalConfig, supervised_evaluate

VARIANTS = ("with_detector", "no_detector")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 20000
    base_lr: float = 1e-4
    lr_drop_frac: float = 0.95        # drop point as a fraction of total steps
    lr_drop_factor: float = 0.1
    batch_size: int = 8
    eval_every: int = 500
    seed: int = 0
    variant: str = "with_detector"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0.0 <= self.lr_drop_frac < 1.0:
            raise ValueError("lr_drop_frac must be in [0, 1)")
        if self.total_steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("bad train config")

    def drop_step(self) -> int:
        return int(round(self.total_steps * self.lr_drop_frac))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Piecewise-constant schedule: base_lr, dropped once at drop_step()."""
    if not 0 <= step < max(cfg.total_steps, 1):
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    if cfg.total_steps > 0 and step >= cfg.drop_step():
        return cfg.base_lr * cfg.lr_drop_factor
    return cfg.base_lr


@dataclass
class MetricsRow:
    step: int
    loss_total: float
    loss_heat: float
    loss_offset: float
    loss_det: float
    robustness: float
    accuracy: float
    grad_norm: float = float("nan")


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    model: object = None              # populated by in-process train_run calls


def _batch_rng(seed: int, step: int):
    return np.random.default_rng(np.random.SeedSequence([seed, step]))


def make_batch(records, sampler_cfg: SamplerConfig, sizes: CropSizes,
               batch_size: int, rng):
    """Sample a batch of training examples across sequences."""
    examples = []
    for _ in range(batch_size):
        rec = records[int(rng.integers(len(records)))]
        examples.append(sample_training_example(rec.sequence, sampler_cfg, sizes, rng))
    def stack(getter, transpose=False):
        arr = np.stack([getter(e) for e in examples])
        if transpose:
            arr = arr.transpose(0, 3, 1, 2)
        return torch.from_numpy(np.ascontiguousarray(arr))
    return {
        "target": stack(lambda e: e.target, transpose=True),
        "search": stack(lambda e: e.search, transpose=True),
        "detector_frame": stack(lambda e: e.detector_frame, transpose=True),
        "heat_target": stack(lambda e: e.heat_target),
        "offset_target": stack(lambda e: e.offset_target),
        "offset_mask": stack(lambda e: e.offset_mask),
        "det_heat_target": stack(lambda e: e.det_heat_target),
    }


def compute_losses(model: TrackerNet, batch, weights: LossWeights, variant: str):
    """Forward pass + joint loss; skips the detector branch entirely for the
    no_detector variant."""
    z_t = model.encode(batch["target"])
    if variant == "with_detector":
        b = batch["search"].shape[0]
        z_sd = model.encode(torch.cat([batch["search"], batch["detector_frame"]]))
        z_s, z_d = z_sd[:b], z_sd[b:]
    else:
        z_s = model.encode(batch["search"])
        z_d = None
    out = model.track_from_features(z_t, z_s)
    track_total, terms = tracker_loss(out, batch["heat_target"], batch["offset_target"],
                                      batch["offset_mask"], weights)
    det_term = None
    if z_d is not None:
        det_term = detector_loss(model.detect_from_features(z_t, z_d),
                                 batch["det_heat_target"])
    total = joint_loss(track_total, det_term, weights)
    return total, {
        "heat": float(terms["heat"].detach()),
        "offset": float(terms["offset"].detach()),
        "det": float(det_term.detach()) if det_term is not None else 0.0,
        "total": float(total.detach()),
    }


def _grad_norm(model: TrackerNet) -> float:
    total = 0.0
    for p in model.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def _restore_optimizer(optimizer, model, tensors):
    for name, p in model.named_parameters():
        key = f"optim.{name}.exp_avg"
        if key not in tensors:
            continue
        step_val = float(np.asarray(tensors[f"optim.{name}.step"]).reshape(-1)[0])
        optimizer.state[p] = {
            "step": torch.tensor(step_val, dtype=torch.float32),
            "exp_avg": torch.from_numpy(tensors[key]).clone(),
            "exp_avg_sq": torch.from_numpy(tensors[f"optim.{name}.exp_avg_sq"]).clone(),
        }


def train_run(cfg: TrainConfig, train_records, eval_records,
              sampler_cfg: SamplerConfig, sizes: CropSizes,
              model_cfg: BackboneConfig, weights: LossWeights,
              select_cfg: SelectConfig, eval_cfg: EvalConfig,
              out_dir=None, resume_from=None, log=print) -> RunRecord:
    """Run (or resume) one seeded training run; returns the metrics record.

    Checkpoints and a metrics CSV land in out_dir when given. The eval split
    drives the periodic robustness/accuracy numbers.
    """
    if not train_records:
        raise ValueError("empty training dataset")
    weights = replace(weights, detector=0.0) if cfg.variant == "no_detector" else weights

    if resume_from is not None:
        tensors, ckpt_cfg, start_step, _ = load_checkpoint(resume_from)
        model = restore_model(tensors, ckpt_cfg)
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.base_lr,
                                     betas=cfg.adam_betas, eps=cfg.adam_eps)
        _restore_optimizer(optimizer, model, tensors)
    else:
        model = TrackerNet(replace(model_cfg, init_seed=cfg.seed))
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.base_lr,
                                     betas=cfg.adam_betas, eps=cfg.adam_eps)
        start_step = 0

    record = RunRecord(config={"variant": cfg.variant, "seed": cfg.seed,
                               "total_steps": cfg.total_steps})
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint(step):
        if out_dir is None:
            return None
        path = out_dir / f"ckpt_{step:08d}.ckpt"
        save_checkpoint(path, model, step, optimizer=optimizer,
                        extra={"variant": cfg.variant, "seed": cfg.seed})
        record.checkpoints.append(str(path))
        return path

    if start_step == 0:
        checkpoint(0)

    acc = {"heat": 0.0, "offset": 0.0, "det": 0.0, "total": 0.0, "n": 0}
    for step in range(start_step, cfg.total_steps):
        for group in optimizer.param_groups:
            group["lr"] = lr_at(step, cfg)
        batch = make_batch(train_records, sampler_cfg, sizes, cfg.batch_size,
                           _batch_rng(cfg.seed, step))
        optimizer.zero_grad(set_to_none=True)
        total, terms = compute_losses(model, batch, weights, cfg.variant)
        if not math.isfinite(terms["total"]):
            if out_dir is not None:
                save_checkpoint(out_dir / "diverged.ckpt", model, step,
                                optimizer=optimizer, extra={"loss": terms})
            raise TrainingDiverged(f"non-finite loss at step {step}: {terms}")
        total.backward()
        optimizer.step()
        for k in ("heat", "offset", "det", "total"):
            acc[k] += terms[k]
        acc["n"] += 1

        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.total_steps:
            gnorm = _grad_norm(model)
            result = supervised_evaluate(model, eval_records, eval_cfg, select_cfg, sizes)
            n = max(acc["n"], 1)
            row = MetricsRow(step=done, loss_total=acc["total"] / n,
                             loss_heat=acc["heat"] / n, loss_offset=acc["offset"] / n,
                             loss_det=acc["det"] / n,
                             robustness=result.robustness(), accuracy=result.accuracy(),
                             grad_norm=gnorm)
            record.rows.append(row)
            acc = {"heat": 0.0, "offset": 0.0, "det": 0.0, "total": 0.0, "n": 0}
            checkpoint(done)
            if log is not None:
                log(f"[{cfg.variant} seed={cfg.seed}] step {done}/{cfg.total_steps} "
                    f"loss={row.loss_total:.4f} R={row.robustness:.3f} A={row.accuracy:.3f}")

    if out_dir is not None:
        write_metrics_csv(out_dir / "metrics.csv", record.rows, cfg.variant, cfg.seed)
    record.model = model
    return record


def write_metrics_csv(path, rows, variant: str, seed: int) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "variant", "seed", "loss_total", "loss_heat",
                    "loss_offset", "loss_det", "R", "A"])
        for r in rows:
            w.writerow([r.step, variant, seed, repr(r.loss_total), repr(r.loss_heat),
                        repr(r.loss_offset), repr(r.loss_det),
                        repr(r.robustness), repr(r.accuracy)])


def read_metrics_csv(path):
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.append({
                "step": int(rec["step"]), "variant": rec["variant"],
                "seed": int(rec["seed"]), "loss_total": float(rec["loss_total"]),
                "R": float(rec["R"]), "A": float(rec["A"]),
            })
    return rows


def multi_seed(runs) -> list:
    """Pointwise mean and standard error across runs with aligned eval steps.

    `runs` is a list of row lists (RunRecord.rows or read_metrics_csv output).
    Returns rows {step, r_mean, r_se, a_mean, a_se}.
    """
    if len(runs) < 2:
        raise ValueError("need at least 2 seeds to aggregate")
    def steps_of(rows):
        return [r.step if isinstance(r, MetricsRow) else r["step"] for r in rows]
    ref = steps_of(runs[0])
    for rows in runs[1:]:
        if steps_of(rows) != ref:
            raise ValueError("runs have misaligned eval steps")
    out = []
    for i, step in enumerate(ref):
        rs = [rows[i].robustness if isinstance(rows[i], MetricsRow) else rows[i]["R"]
              for rows in runs]
        accs = [rows[i].accuracy if isinstance(rows[i], MetricsRow) else rows[i]["A"]
                for rows in runs]
        r = np.asarray(rs, dtype=np.float64)
        a = np.asarray(accs, dtype=np.float64)
        out.append({
            "step": step,
            "r_mean": float(r.mean()), "r_se": float(r.std(ddof=1) / math.sqrt(r.size)),
            "a_mean": float(a.mean()), "a_se": float(a.std(ddof=1) / math.sqrt(a.size)),
        })
    return out
