"""Displacement and staleness sweeps: how inference degrades when the crops move.

Each sweep perturbs one conditioning input of the tracker over adjacent
annotated frame pairs (t, t+1):
  - search sweep: displace the search window, target template fixed at t;
  - target sweep: displace the target crop, search window fixed;
  - staleness sweep: keep the search window, take the template dt frames back.
IoU against the t+1 ground truth is normalized per pair by its value at the
null perturbation; pairs whose baseline IoU is zero are dropped and counted.
All sweeps are deterministic functions of (model, dataset, config).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .decode import (SelectConfig, encode_template, proposals_from_output,
                     select_proposal, to_tensor)
from .geometry import (Box, CropSizes, channel_means, crop_and_resize, iou,
                       make_search_crop_spec, make_target_crop_spec)
from .model import TrackerNet, TrackerOutput


@dataclass(frozen=True)
class SweepConfig:
    extent: float = 2.0               # displacement range in size-factor units
    step: float = 0.2
    max_dt: int = 50
    max_pairs: int | None = None      # deterministic even subsample of pairs
    chunk: int = 32                   # inference batch size

    def __post_init__(self):
        if self.extent <= 0 or self.step <= 0:
            raise ValueError("extent and step must be positive")
        if self.max_dt < 1:
            raise ValueError("max_dt must be >= 1")

    def axis(self) -> list:
        k = int(round(self.extent / self.step))
        return [round(i * self.step, 10) for i in range(-k, k + 1)]


@dataclass
class SweepGrid:
    axis_x: list
    axis_y: list | None               # None for 1-D curves (dt sweeps)
    mean: np.ndarray                  # (ny, nx) or (nx,)
    counts: np.ndarray
    dropped: int = 0                  # pairs/anchors with zero baseline IoU
    name: str = ""


def _adjacent_pairs(records):
    pairs = []
    for rec in records:
        ann = rec.sequence.annotations
        for t in range(rec.sequence.num_frames - 1):
            if ann[t].visible and ann[t + 1].visible:
                pairs.append((rec, t))
    return pairs


def _subsample(items, cap):
    if cap is None or len(items) <= cap:
        return items
    idx = np.unique(np.linspace(0, len(items) - 1, cap).round().astype(int))
    return [items[i] for i in idx]


def _select_boxes(model: TrackerNet, z_t: torch.Tensor, z_s: torch.Tensor,
                  specs, prev_box: Box, cfg: SelectConfig, stride: int):
    """Run the head on (possibly broadcast) feature batches and select per example."""
    b = max(z_t.shape[0], z_s.shape[0])
    if z_t.shape[0] == 1 and b > 1:
        z_t = z_t.expand(b, -1, -1, -1).contiguous()
    if z_s.shape[0] == 1 and b > 1:
        z_s = z_s.expand(b, -1, -1, -1).contiguous()
    with torch.no_grad():
        out = model.track_from_features(z_t, z_s)
    boxes = []
    for i in range(b):
        sub = TrackerOutput(out.heat_logits[i:i + 1], out.offsets[i:i + 1])
        props = proposals_from_output(sub, specs[i], cfg, stride)
        boxes.append(select_proposal(props, prev_box, specs[i], cfg).box)
    return boxes


def _encode_crops(model: TrackerNet, frame, specs, pad) -> torch.Tensor:
    crops = np.stack([crop_and_resize(frame, s, pad) for s in specs])
    with torch.no_grad():
        return model.encode(torch.from_numpy(
            np.ascontiguousarray(crops.transpose(0, 3, 1, 2))))


def search_sweep(model: TrackerNet, records, cfg: SweepConfig,
                 select_cfg: SelectConfig, sizes: CropSizes) -> SweepGrid:
    """IoU vs. search-window displacement, normalized at (0, 0) per pair."""
    axis = cfg.axis()
    pairs = _subsample(_adjacent_pairs(records), cfg.max_pairs)
    if not pairs:
        raise ValueError("no adjacent annotated frame pairs in dataset")
    n = len(axis)
    sums = np.zeros((n, n))
    retained = 0
    dropped = 0
    for rec, t in pairs:
        seq = rec.sequence
        box_t = seq.annotations[t].box
        gt_next = seq.annotations[t + 1].box
        sf = box_t.size_factor()
        base = make_search_crop_spec(box_t, sizes.search_size, sizes.ratio())
        template = encode_template(model, seq.frames[t], box_t, sizes)
        frame = seq.frames[t + 1]
        pad = channel_means(frame)

        specs = [base.with_center(base.center[0] + dx * sf, base.center[1] + dy * sf)
                 for dy in axis for dx in axis]
        values = np.empty(len(specs))
        for lo in range(0, len(specs), cfg.chunk):
            chunk = specs[lo:lo + cfg.chunk]
            z_s = _encode_crops(model, frame, chunk, pad)
            boxes = _select_boxes(model, template, z_s, chunk, box_t,
                                  select_cfg, sizes.stride)
            for k, b in enumerate(boxes):
                values[lo + k] = iou(b, gt_next)
        grid = values.reshape(n, n)
        base_iou = grid[n // 2, n // 2]
        if base_iou == 0.0:
            dropped += 1
            continue
        sums += grid / base_iou
        retained += 1
    if retained == 0:
        raise ValueError("all pairs had zero baseline IoU")
    return SweepGrid(axis_x=axis, axis_y=axis, mean=sums / retained,
                     counts=np.full((n, n), retained, dtype=int),
                     dropped=dropped, name="search_sweep")


def target_sweep(model: TrackerNet, records, cfg: SweepConfig,
                 select_cfg: SelectConfig, sizes: CropSizes) -> SweepGrid:
    """IoU vs. target-crop displacement with the search window held fixed."""
    axis = cfg.axis()
    pairs = _subsample(_adjacent_pairs(records), cfg.max_pairs)
    if not pairs:
        raise ValueError("no adjacent annotated frame pairs in dataset")
    n = len(axis)
    sums = np.zeros((n, n))
    retained = 0
    dropped = 0
    for rec, t in pairs:
        seq = rec.sequence
        box_t = seq.annotations[t].box
        gt_next = seq.annotations[t + 1].box
        sf = box_t.size_factor()
        spec_s = make_search_crop_spec(box_t, sizes.search_size, sizes.ratio())
        frame_next = seq.frames[t + 1]
        crop_s = crop_and_resize(frame_next, spec_s, channel_means(frame_next))
        with torch.no_grad():
            z_s = model.encode(to_tensor(crop_s))

        tbase = make_target_crop_spec(box_t, sizes.target_size)
        tspecs = [tbase.with_center(tbase.center[0] + dx * sf, tbase.center[1] + dy * sf)
                  for dy in axis for dx in axis]
        frame_t = seq.frames[t]
        pad_t = channel_means(frame_t)
        values = np.empty(len(tspecs))
        for lo in range(0, len(tspecs), cfg.chunk):
            chunk = tspecs[lo:lo + cfg.chunk]
            z_t = _encode_crops(model, frame_t, chunk, pad_t)
            boxes = _select_boxes(model, z_t, z_s, [spec_s] * len(chunk), box_t,
                                  select_cfg, sizes.stride)
            for k, b in enumerate(boxes):
                values[lo + k] = iou(b, gt_next)
        grid = values.reshape(n, n)
        base_iou = grid[n // 2, n // 2]
        if base_iou == 0.0:
            dropped += 1
            continue
        sums += grid / base_iou
        retained += 1
    if retained == 0:
        raise ValueError("all pairs had zero baseline IoU")
    return SweepGrid(axis_x=axis, axis_y=axis, mean=sums / retained,
                     counts=np.full((n, n), retained, dtype=int),
                     dropped=dropped, name="target_sweep")


def staleness_sweep(model: TrackerNet, records, cfg: SweepConfig,
                    select_cfg: SelectConfig, sizes: CropSizes) -> SweepGrid:
    """IoU vs. template age dt, search window fixed, normalized at dt=1."""
    pairs = _subsample(_adjacent_pairs(records), cfg.max_pairs)
    if not pairs:
        raise ValueError("no adjacent annotated frame pairs in dataset")
    dts = list(range(1, cfg.max_dt + 1))
    sums = np.zeros(len(dts))
    counts = np.zeros(len(dts), dtype=int)
    dropped = 0
    for rec, t in pairs:
        seq = rec.sequence
        ann = seq.annotations
        box_t = ann[t].box
        gt_next = ann[t + 1].box
        spec_s = make_search_crop_spec(box_t, sizes.search_size, sizes.ratio())
        frame_next = seq.frames[t + 1]
        crop_s = crop_and_resize(frame_next, spec_s, channel_means(frame_next))
        with torch.no_grad():
            z_s = model.encode(to_tensor(crop_s))

        valid = [dt for dt in dts if t + 1 - dt >= 0 and ann[t + 1 - dt].visible]
        if 1 not in valid:
            continue
        values = {}
        for lo in range(0, len(valid), cfg.chunk):
            chunk = valid[lo:lo + cfg.chunk]
            z_t = torch.cat([
                encode_template(model, seq.frames[t + 1 - dt], ann[t + 1 - dt].box, sizes)
                for dt in chunk])
            boxes = _select_boxes(model, z_t, z_s, [spec_s] * len(chunk), box_t,
                                  select_cfg, sizes.stride)
            for dt, b in zip(chunk, boxes):
                values[dt] = iou(b, gt_next)
        if values[1] == 0.0:
            dropped += 1
            continue
        for dt, v in values.items():
            sums[dt - 1] += v / values[1]
            counts[dt - 1] += 1
    if counts[0] == 0:
        raise ValueError("no anchors with nonzero dt=1 IoU")
    mean = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return SweepGrid(axis_x=dts, axis_y=None, mean=mean, counts=counts,
                     dropped=dropped, name="staleness_sweep")


# ---------------------------------------------------------------------------
# summaries, CSV, plots


def summarize_grid(grid: SweepGrid) -> dict:
    if grid.axis_y is None:
        vals = grid.mean[grid.counts > 0]
        start = float(grid.mean[0])
        tail = max(1, int(0.2 * len(vals)))
        asymptote = float(vals[-tail:].mean())
        return {"start": start, "asymptote": asymptote,
                "drop": start - asymptote, "min": float(vals.min())}
    ax = np.asarray(grid.axis_x)
    xx, yy = np.meshgrid(ax, np.asarray(grid.axis_y))
    cheb = np.maximum(np.abs(xx), np.abs(yy))
    center = float(grid.mean[cheb == 0][0])
    inner = float(grid.mean[cheb <= 0.5].mean())
    outer_lim = min(1.0, float(cheb.max()))
    background = float(grid.mean[cheb >= outer_lim].mean())
    vmin = float(grid.mean.min())
    return {"center": center, "inner_plateau": inner, "background": background,
            "min": vmin, "dip_depth": center - vmin,
            "center_background_gap": center - background}


def write_sweep_csv(path, grid: SweepGrid) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        if grid.axis_y is None:
            w.writerow(["axis_x", "mean_norm_iou", "n_samples"])
            for i, x in enumerate(grid.axis_x):
                if grid.counts[i] > 0:
                    w.writerow([repr(float(x)), repr(float(grid.mean[i])),
                                int(grid.counts[i])])
        else:
            w.writerow(["axis_x", "axis_y", "mean_norm_iou", "n_samples"])
            for iy, y in enumerate(grid.axis_y):
                for ix, x in enumerate(grid.axis_x):
                    w.writerow([repr(float(x)), repr(float(y)),
                                repr(float(grid.mean[iy, ix])), int(grid.counts[iy, ix])])


def plot_sweep(path, grid: SweepGrid) -> None:
    fig, axp = plt.subplots(figsize=(5, 4))
    if grid.axis_y is None:
        keep = grid.counts > 0
        xs = np.asarray(grid.axis_x)[keep]
        axp.plot(xs, grid.mean[keep], marker="o", markersize=3)
        axp.set_xlabel("template age dt (frames)")
        axp.set_ylabel("mean normalized IoU")
    else:
        x0, x1 = grid.axis_x[0], grid.axis_x[-1]
        y0, y1 = grid.axis_y[0], grid.axis_y[-1]
        im = axp.imshow(grid.mean, origin="lower", extent=(x0, x1, y0, y1),
                        cmap="viridis")
        fig.colorbar(im, ax=axp)
        axp.set_xlabel("dx (size-factor units)")
        axp.set_ylabel("dy (size-factor units)")
    axp.set_title(grid.name)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)


def summarize_sweeps(sweeps: dict, out_dir) -> dict:
    """Write per-sweep CSV + plot and one summary CSV; returns the summaries."""
    from pathlib import Path
    if not sweeps:
        raise ValueError("no sweeps to summarize")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summaries = {}
    for name, grid in sorted(sweeps.items()):
        write_sweep_csv(out / f"{name}.csv", grid)
        plot_sweep(out / f"{name}.png", grid)
        summaries[name] = summarize_grid(grid)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sweep", "key", "value"])
        for name in sorted(summaries):
            for key in sorted(summaries[name]):
                w.writerow([name, key, repr(float(summaries[name][key]))])
    return summaries
