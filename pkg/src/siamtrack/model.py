"""The tracking network: shared backbone, cross-convolution join, and heads.

Architecture summary:
  - a small 5-layer stride-4 convolutional backbone shared by the target,
    search, and detector branches, followed by a linear 1x1 projection;
  - the join correlates each search channel with the matching target channel
    ("same" padding), so the joined map keeps the search spatial size;
  - the tracker head is a single 1x1 convolution to 6 channels: 2 heatmap
    logits (negative, positive) + 4 corner offsets; nothing else is allowed
    between the join and the output on purpose;
  - the detector head is a separate 1x1 convolution to 2 heatmap channels
    applied to the same join against full-frame features.

Offsets are expressed in output-grid units: channel order is
(tl_dx, tl_dy, br_dx, br_dy), each relative to the cell it lives on.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Box, CropSpec, ceil_div, frame_to_grid, grid_to_frame

TOTAL_STRIDE = 4


@dataclass(frozen=True)
class BackboneConfig:
    """Widths and init seed for the from-scratch backbone (total stride 4)."""

    channels: tuple = (8, 16, 32, 32)
    feat_channels: int = 32
    proj_channels: int = 32
    init_seed: int = 0
    include_detector: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return BackboneConfig(**d)


@dataclass(frozen=True)
class LossWeights:
    heatmap: float = 1.0
    offset: float = 0.3
    detector: float = 1.0

    def __post_init__(self):
        if min(self.heatmap, self.offset, self.detector) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrackerOutput:
    """Raw head output: heatmap logits (B,2,g,g) and corner offsets (B,4,g,g)."""

    heat_logits: torch.Tensor
    offsets: torch.Tensor

    def probs(self) -> torch.Tensor:
        """Positive-class probability map (B,g,g)."""
        return torch.softmax(self.heat_logits, dim=1)[:, 1]


def cross_convolve(z_t: torch.Tensor, z_s: torch.Tensor) -> torch.Tensor:
    """Per-channel "same"-padded correlation of search features with target kernels.

    z_t: (B, C, ht, wt) used as one 2-D kernel per channel.
    z_s: (B, C, hs, ws). Returns (B, C, hs, ws).
    """
    if z_t.shape[:2] != z_s.shape[:2]:
        raise ValueError(f"channel/batch mismatch: {tuple(z_t.shape)} vs {tuple(z_s.shape)}")
    b, c, ht, wt = z_t.shape
    hs, ws = z_s.shape[2:]
    if ht > hs or wt > ws:
        raise ValueError("target feature map larger than search feature map")
    pt, pl = (ht - 1) // 2, (wt - 1) // 2
    padded = F.pad(z_s, (pl, wt - 1 - pl, pt, ht - 1 - pt))
    out = F.conv2d(
        padded.reshape(1, b * c, padded.shape[2], padded.shape[3]),
        z_t.reshape(b * c, 1, ht, wt),
        groups=b * c,
    )
    return out.reshape(b, c, hs, ws)


def kernel_center(ht: int, wt: int) -> tuple[int, int]:
    """(row, col) of the kernel tap that aligns with the output cell under "same" padding."""
    return ((ht - 1) // 2, (wt - 1) // 2)


class TrackerNet(nn.Module):
    """Siamese tracker with an optional instance-detection head.

    All three image branches (target, search, detector frame) share the
    backbone and projection; the detector differs only in its 2-channel
    output projection and in the data it is fed.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.init_seed)
            layers = []
            cin = 3
            widths = list(cfg.channels) + [cfg.feat_channels]
            strides = [2, 2, 1, 1, 1]
            for w, s in zip(widths, strides):
                layers += [
                    nn.Conv2d(cin, w, 3, stride=s, padding=1, bias=False),
                    nn.GroupNorm(min(4, w), w),
                    nn.ReLU(inplace=True),
                ]
                cin = w
            self.backbone = nn.Sequential(*layers)
            self.project = nn.Conv2d(cin, cfg.proj_channels, 1)
            self.track_head = nn.Conv2d(cfg.proj_channels, 6, 1)
            # bias the positive heatmap channel toward the ~1% positive rate
            with torch.no_grad():
                self.track_head.bias[1] = -4.0
            if cfg.include_detector:
                # constructed last so tracker init draws are unchanged by its presence
                self.detect_head = nn.Conv2d(cfg.proj_channels, 2, 1)
                with torch.no_grad():
                    self.detect_head.bias[1] = -4.0
            else:
                self.detect_head = None

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """Backbone + linear projection. Expects (B,3,H,W) in 0..255."""
        side = images.shape[-1]
        if images.shape[-2] != side or (side % 4 != 0 and side not in (127, 255)):
            raise ValueError(f"input must be square with side a multiple of 4 "
                             f"(or 127/255), got {tuple(images.shape[-2:])}")
        x = images / 127.5 - 1.0
        return self.project(self.backbone(x))

    def join(self, z_t: torch.Tensor, z_s: torch.Tensor) -> torch.Tensor:
        # fixed 1/sqrt(taps) scaling keeps logits O(1); not a trainable layer
        return cross_convolve(z_t, z_s) / math.sqrt(z_t.shape[2] * z_t.shape[3])

    def track_from_features(self, z_t: torch.Tensor, z_s: torch.Tensor) -> TrackerOutput:
        out = self.track_head(self.join(z_t, z_s))
        return TrackerOutput(heat_logits=out[:, :2], offsets=out[:, 2:])

    def track(self, target: torch.Tensor, search: torch.Tensor) -> TrackerOutput:
        return self.track_from_features(self.encode(target), self.encode(search))

    def detect_from_features(self, z_t: torch.Tensor, z_d: torch.Tensor) -> torch.Tensor:
        if self.detect_head is None:
            raise RuntimeError("model was built without a detector head")
        return self.detect_head(self.join(z_t, z_d))

    def detect(self, target: torch.Tensor, frame: torch.Tensor) -> torch.Tensor:
        return self.detect_from_features(self.encode(target), self.encode(frame))

    def forward(self, target: torch.Tensor, search: torch.Tensor) -> TrackerOutput:
        return self.track(target, search)

    def tracker_parameters(self):
        """Parameters touched by the tracking loss (everything but the detector head)."""
        for name, p in self.named_parameters():
            if not name.startswith("detect_head"):
                yield p


def tracker_loss(out: TrackerOutput, heat_target: torch.Tensor,
                 offset_target: torch.Tensor, offset_mask: torch.Tensor,
                 weights: LossWeights):
    """Weighted heatmap cross-entropy + masked L1 offset regression.

    heat_target: (B,g,g) binary; offset_target: (B,4,g,g); offset_mask: (B,g,g).
    Returns (total, terms dict). The offset term is the mean absolute error
    over valid cells and channels, 0 when the mask is empty.
    """
    heat = F.cross_entropy(out.heat_logits, heat_target.long())
    mask = offset_mask.unsqueeze(1)
    denom = mask.sum() * 4
    if denom.item() > 0:
        offset = (mask * (out.offsets - offset_target).abs()).sum() / denom
    else:
        offset = out.offsets.sum() * 0.0
    total = weights.heatmap * heat + weights.offset * offset
    return total, {"heat": heat, "offset": offset}


def detector_loss(det_logits: torch.Tensor, heat_target: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(det_logits, heat_target.long())


def joint_loss(tracker_total: torch.Tensor, detector_term, weights: LossWeights) -> torch.Tensor:
    """tracker loss + w_detector * detector heatmap loss; w=0 reproduces the baseline."""
    if detector_term is None:
        return tracker_total
    return tracker_total + weights.detector * detector_term


def heatmap_disc_target(center_cell, grid_size: int, radius: float) -> np.ndarray:
    """Binary (g,g) grid: 1 on cells within `radius` grid units of center_cell.

    center_cell is continuous (col, row); distances are measured between the
    cell lattice points and the (possibly fractional) center.
    """
    cx, cy = center_cell
    jj, ii = np.meshgrid(np.arange(grid_size), np.arange(grid_size))
    d2 = (jj - cx) ** 2 + (ii - cy) ** 2
    return (d2 <= radius * radius).astype(np.float32)


def encode_offsets(box: Box, spec: CropSpec, stride: int, radius: float):
    """Corner-offset targets for a box seen through a crop.

    Returns (offsets, mask): offsets is (4,g,g) float32 holding
    (tl_dx, tl_dy, br_dx, br_dy) in grid units for *every* cell; mask is the
    (g,g) validity disc centered on the box center (empty when the box lies
    outside the crop's grid).
    """
    g = ceil_div(spec.out_size, stride)
    tlx, tly = frame_to_grid((box.x_min, box.y_min), spec, stride)
    brx, bry = frame_to_grid((box.x_max, box.y_max), spec, stride)
    cx, cy = frame_to_grid(box.center(), spec, stride)
    jj, ii = np.meshgrid(np.arange(g, dtype=np.float32), np.arange(g, dtype=np.float32))
    offsets = np.stack([tlx - jj, tly - ii, brx - jj, bry - ii]).astype(np.float32)
    mask = heatmap_disc_target((cx, cy), g, radius)
    return offsets, mask


def decode_offsets(cell, offsets, spec: CropSpec, stride: int) -> Box:
    """Inverse of encode_offsets at one cell: (col,row) + 4 offsets -> frame Box."""
    j, i = cell
    tl = grid_to_frame((j + float(offsets[0]), i + float(offsets[1])), spec, stride)
    br = grid_to_frame((j + float(offsets[2]), i + float(offsets[3])), spec, stride)
    x0, x1 = sorted((tl[0], br[0]))
    y0, y1 = sorted((tl[1], br[1]))
    return Box(x0, y0, x1, y1)


# ---------------------------------------------------------------------------
# checkpoint archive: JSON header + raw little-endian tensor payload.
# Writing the same state twice produces identical bytes.

_MAGIC = b"SIAMTRACK-CKPT-1\n"


def save_checkpoint(path, model: TrackerNet, step: int, optimizer: torch.optim.Optimizer | None = None,
                    extra: dict | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, t in model.state_dict().items():
        tensors[f"model.{name}"] = t.detach().cpu().numpy()
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        params = [p for _, p in model.named_parameters()]
        for name, p in zip(names, params):
            state = optimizer.state.get(p)
            if not state:
                continue
            tensors[f"optim.{name}.exp_avg"] = state["exp_avg"].detach().cpu().numpy()
            tensors[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
            tensors[f"optim.{name}.step"] = np.asarray(
                float(state["step"]), dtype=np.float64)

    entries = []
    payload = io.BytesIO()
    for key in sorted(tensors):
        arr = np.ascontiguousarray(tensors[key])
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append({"key": key, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        payload.write(arr.tobytes())

    header = {
        "format": 1,
        "step": int(step),
        "backbone": model.cfg.to_dict(),
        "extra": extra or {},
        "tensors": entries,
    }
    head_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(head_bytes)))
        f.write(head_bytes)
        f.write(payload.getvalue())


def load_checkpoint(path):
    """Returns (tensors dict of np arrays, BackboneConfig, step, extra dict)."""
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        tensors = {}
        for ent in header["tensors"]:
            dt = np.dtype(ent["dtype"])
            count = int(np.prod(ent["shape"])) if ent["shape"] else 1
            buf = f.read(count * dt.itemsize)
            tensors[ent["key"]] = np.frombuffer(buf, dtype=dt).reshape(ent["shape"]).copy()
    cfg = BackboneConfig.from_dict(header["backbone"])
    return tensors, cfg, header["step"], header.get("extra", {})


def restore_model(tensors: dict, cfg: BackboneConfig) -> TrackerNet:
    model = TrackerNet(cfg)
    state = {k[len("model."):]: torch.from_numpy(v) for k, v in tensors.items()
             if k.startswith("model.")}
    model.load_state_dict(state)
    return model


def load_model(path) -> tuple[TrackerNet, int, dict]:
    tensors, cfg, step, extra = load_checkpoint(path)
    return restore_model(tensors, cfg), step, extra
