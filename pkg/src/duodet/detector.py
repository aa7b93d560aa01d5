"""Two-stream quality-gated detector.

Layout: per-modality stem (stride 2) and three stages (stride 2 each,
two conv blocks per stage).  At every stage each stream predicts a
single-channel sigmoid quality mask of the *other* stream's usefulness
and receives the other stream's features scaled by that mask:

    rgb' = rgb + mask(tir) * tir
    tir' = tir + mask(rgb) * rgb

Stage features are fused (concat + 1x1 conv), merged top-down in a
small nearest-neighbor pyramid, and decoded by per-level anchor-free
heads (objectness, class logits, box offsets).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops, t4io
from .errors import CheckpointError
from .ops import ShapeError
from .tensor import Parameter, Tensor

__all__ = [
    "ArchConfig",
    "DetectorParams",
    "HeadOutput",
    "LevelOutput",
    "Detections",
    "build_params",
    "forward",
    "forward_with_features",
    "cross_gate",
    "decode",
    "save_params",
    "load_params",
    "checkpoint_sha256",
]

LEVEL_NAMES = ("p3", "p4", "p5")
STAGE_NAMES = ("s3", "s4", "s5")
# Clamp raw log-sizes before exp at inference so an untrained net cannot
# overflow; training-side decoding is left exact.
_DECODE_LOG_CLAMP = 30.0


@dataclass(frozen=True)
class ArchConfig:
    num_classes: int = 2
    rgb_channels: int = 3
    tir_channels: int = 1
    stem_channels: int = 8
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    neck_channels: int = 16
    leaky_slope: float = 0.1
    interaction: bool = True

    @property
    def strides(self) -> tuple[int, int, int]:
        return (4, 8, 16)

    @property
    def min_divisor(self) -> int:
        return 16

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["stage_channels"] = tuple(d["stage_channels"])
        return cls(**d)


@dataclass
class LevelOutput:
    name: str
    stride: int
    obj: Tensor  # (N, 1, h, w)
    cls: Tensor  # (N, K, h, w)
    reg: Tensor  # (N, 4, h, w): x/y offsets then log-sizes


@dataclass
class HeadOutput:
    levels: list[LevelOutput]

    def geometry(self) -> list[tuple[str, int, int, int]]:
        return [(lv.name, lv.stride, lv.obj.shape[2], lv.obj.shape[3]) for lv in self.levels]


@dataclass
class Detections:
    boxes: np.ndarray   # (D, 4) x1, y1, x2, y2
    scores: np.ndarray  # (D,) descending
    classes: np.ndarray  # (D,) int

    def __len__(self) -> int:
        return len(self.scores)

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=int))


class DetectorParams:
    """Named parameter set for one detector instance."""

    def __init__(self, arch: ArchConfig, params: dict[str, Parameter]):
        self.arch = arch
        self.params = params

    def __getitem__(self, pid: str) -> Parameter:
        return self.params[pid]

    def ids(self) -> list[str]:
        return sorted(self.params)

    def values(self) -> list[Parameter]:
        return [self.params[k] for k in self.ids()]

    def copy(self) -> "DetectorParams":
        return DetectorParams(self.arch, {k: Parameter(v.data.copy(), k)
                                          for k, v in self.params.items()})

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite values in place; the id sets must match exactly."""
        missing = sorted(set(self.params) - set(arrays))
        extra = sorted(set(arrays) - set(self.params))
        if missing or extra:
            raise CheckpointError(f"parameter id mismatch: missing={missing} extra={extra}")
        for k, arr in arrays.items():
            if self.params[k].data.shape != arr.shape:
                raise CheckpointError(f"parameter {k!r}: shape {arr.shape} "
                                      f"does not match {self.params[k].data.shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)


def _conv_shapes(arch: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def conv(pid: str, c_out: int, c_in: int, k: int):
        shapes.append((f"{pid}.w", (c_out, c_in, k, k)))
        shapes.append((f"{pid}.b", (c_out,)))

    for stream, c_in in (("rgb", arch.rgb_channels), ("tir", arch.tir_channels)):
        conv(f"{stream}.stem", arch.stem_channels, c_in, 3)
        prev = arch.stem_channels
        for name, c in zip(STAGE_NAMES, arch.stage_channels):
            conv(f"{stream}.{name}.conv1", c, prev, 3)
            conv(f"{stream}.{name}.conv2", c, c, 3)
            prev = c
    if arch.interaction:
        for name, c in zip(STAGE_NAMES, arch.stage_channels):
            conv(f"gate.{name}.rgb", 1, c, 3)
            conv(f"gate.{name}.tir", 1, c, 3)
    for name, c in zip(STAGE_NAMES, arch.stage_channels):
        conv(f"fuse.{name}", c, 2 * c, 1)
    for name, c in zip(STAGE_NAMES, arch.stage_channels):
        conv(f"neck.lat.{name}", arch.neck_channels, c, 1)
    for name in LEVEL_NAMES:
        conv(f"head.{name}.stem", arch.neck_channels, arch.neck_channels, 3)
        conv(f"head.{name}.obj", 1, arch.neck_channels, 1)
        conv(f"head.{name}.cls", arch.num_classes, arch.neck_channels, 1)
        conv(f"head.{name}.reg", 4, arch.neck_channels, 1)
    return shapes


def build_params(arch: ArchConfig, rng: np.random.Generator | None = None) -> DetectorParams:
    """He fan-in init for conv weights, zero biases (gates included, so the
    initial masks sit at 0.5).  With ``rng=None`` everything is zeros."""
    params: dict[str, Parameter] = {}
    for pid, shape in _conv_shapes(arch):
        if pid.endswith(".b") or rng is None:
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[pid] = Parameter(data, pid)
    return DetectorParams(arch, params)


def _conv_block(p: DetectorParams, pid: str, x: Tensor, stride: int,
                kernel_pad: int, slope: float) -> Tensor:
    out = ops.conv2d(x, p[f"{pid}.w"], p[f"{pid}.b"], stride=stride, padding=kernel_pad)
    return ops.leaky_relu(out, slope)


def cross_gate(x_rgb: Tensor, x_tir: Tensor, m_rgb: Tensor, m_tir: Tensor
               ) -> tuple[Tensor, Tensor]:
    """Add each stream's features, scaled by its own quality mask, to the other."""
    out_rgb = ops.add(x_rgb, ops.mul(x_tir, m_tir))
    out_tir = ops.add(x_tir, ops.mul(x_rgb, m_rgb))
    return out_rgb, out_tir


def forward(p: DetectorParams, rgb: Tensor, tir: Tensor
            ) -> tuple[HeadOutput, dict[str, tuple[Tensor, Tensor]]]:
    """Run the detector; inputs are normalized (N, C, H, W) planes in [0, 1].

    Returns the raw head outputs and the per-stage quality masks
    (empty dict when the interaction gates are disabled).
    """
    head, masks, _ = forward_with_features(p, rgb, tir)
    return head, masks


def forward_with_features(p: DetectorParams, rgb: Tensor, tir: Tensor
                          ) -> tuple[HeadOutput, dict[str, tuple[Tensor, Tensor]],
                                     dict[str, Tensor]]:
    """Like :func:`forward` but also returns the merged pyramid features
    per level (used for feature export)."""
    arch = p.arch
    if rgb.ndim != 4 or tir.ndim != 4:
        raise ShapeError("forward expects 4-D inputs")
    if rgb.shape[0] != tir.shape[0] or rgb.shape[2:] != tir.shape[2:]:
        raise ShapeError(f"modality shapes disagree: {rgb.shape} vs {tir.shape}")
    if rgb.shape[1] != arch.rgb_channels or tir.shape[1] != arch.tir_channels:
        raise ShapeError(f"channel counts {rgb.shape[1]}/{tir.shape[1]} do not match "
                         f"architecture {arch.rgb_channels}/{arch.tir_channels}")
    h, w = rgb.shape[2:]
    if h % arch.min_divisor or w % arch.min_divisor:
        raise ShapeError(f"input extents must be divisible by {arch.min_divisor}, "
                         f"got {h}x{w}")

    slope = arch.leaky_slope
    x_r = _conv_block(p, "rgb.stem", rgb, 2, 1, slope)
    x_t = _conv_block(p, "tir.stem", tir, 2, 1, slope)

    masks: dict[str, tuple[Tensor, Tensor]] = {}
    fused: list[Tensor] = []
    for name in STAGE_NAMES:
        x_r = _conv_block(p, f"rgb.{name}.conv2",
                          _conv_block(p, f"rgb.{name}.conv1", x_r, 2, 1, slope), 1, 1, slope)
        x_t = _conv_block(p, f"tir.{name}.conv2",
                          _conv_block(p, f"tir.{name}.conv1", x_t, 2, 1, slope), 1, 1, slope)
        if arch.interaction:
            m_r = ops.sigmoid(ops.conv2d(x_r, p[f"gate.{name}.rgb.w"],
                                         p[f"gate.{name}.rgb.b"], stride=1, padding=1))
            m_t = ops.sigmoid(ops.conv2d(x_t, p[f"gate.{name}.tir.w"],
                                         p[f"gate.{name}.tir.b"], stride=1, padding=1))
            masks[name] = (m_r, m_t)
            x_r, x_t = cross_gate(x_r, x_t, m_r, m_t)
        fused.append(ops.leaky_relu(
            ops.conv2d(ops.concat_channels([x_r, x_t]),
                       p[f"fuse.{name}.w"], p[f"fuse.{name}.b"]), slope))

    laterals = [ops.conv2d(f, p[f"neck.lat.{name}.w"], p[f"neck.lat.{name}.b"])
                for name, f in zip(STAGE_NAMES, fused)]
    p5 = laterals[2]
    p4 = ops.add(laterals[1], ops.upsample_nearest2x(p5))
    p3 = ops.add(laterals[0], ops.upsample_nearest2x(p4))

    levels = []
    neck: dict[str, Tensor] = {}
    for name, stride, feat in zip(LEVEL_NAMES, arch.strides, (p3, p4, p5)):
        neck[name] = feat
        hshared = _conv_block(p, f"head.{name}.stem", feat, 1, 1, slope)
        levels.append(LevelOutput(
            name=name, stride=stride,
            obj=ops.conv2d(hshared, p[f"head.{name}.obj.w"], p[f"head.{name}.obj.b"]),
            cls=ops.conv2d(hshared, p[f"head.{name}.cls.w"], p[f"head.{name}.cls.b"]),
            reg=ops.conv2d(hshared, p[f"head.{name}.reg.w"], p[f"head.{name}.reg.b"])))
    return HeadOutput(levels), masks, neck


def decode(head: HeadOutput, score_threshold: float, nms_iou: float,
           image_hw: tuple[int, int]) -> list[Detections]:
    """Turn raw head maps into per-image, score-sorted, NMS-filtered boxes.

    Per cell and class: ``score = sigmoid(obj) * sigmoid(cls)``; the box
    center is ``(grid + offset) * stride`` and its size ``exp(reg) * stride``.
    """
    img_h, img_w = image_hw
    n = head.levels[0].obj.shape[0]
    out: list[Detections] = []
    per_level = []
    for lv in head.levels:
        obj_p = ops.stable_sigmoid(lv.obj.data)
        cls_p = ops.stable_sigmoid(lv.cls.data)
        scores = obj_p * cls_p  # (N, K, h, w)
        reg = lv.reg.data
        hh, ww = reg.shape[2], reg.shape[3]
        gx = np.arange(ww)[None, None, :]
        gy = np.arange(hh)[None, :, None]
        cx = (gx + reg[:, 0]) * lv.stride
        cy = (gy + reg[:, 1]) * lv.stride
        bw = np.exp(np.clip(reg[:, 2], -_DECODE_LOG_CLAMP, _DECODE_LOG_CLAMP)) * lv.stride
        bh = np.exp(np.clip(reg[:, 3], -_DECODE_LOG_CLAMP, _DECODE_LOG_CLAMP)) * lv.stride
        boxes = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1)
        per_level.append((scores, boxes))

    k = head.levels[0].cls.shape[1]
    for i in range(n):
        cand_boxes, cand_scores, cand_cls = [], [], []
        for scores, boxes in per_level:
            s = scores[i].reshape(k, -1)
            b = boxes[i].reshape(4, -1)
            keep = s >= score_threshold
            for c in range(k):
                sel = keep[c]
                if sel.any():
                    cand_boxes.append(b[:, sel].T)
                    cand_scores.append(s[c, sel])
                    cand_cls.append(np.full(int(sel.sum()), c, dtype=int))
        if not cand_scores:
            out.append(Detections.empty())
            continue
        boxes = np.concatenate(cand_boxes)
        scores = np.concatenate(cand_scores)
        classes = np.concatenate(cand_cls)
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, img_w)
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, img_h)
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, scores, classes = boxes[valid], scores[valid], classes[valid]
        order = np.lexsort((classes, boxes[:, 3], boxes[:, 2], boxes[:, 1],
                            boxes[:, 0], -scores))
        boxes, scores, classes = boxes[order], scores[order], classes[order]
        keep_idx = _nms_classwise(boxes, scores, classes, nms_iou)
        out.append(Detections(boxes[keep_idx], scores[keep_idx], classes[keep_idx]))
    return out


def _nms_classwise(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray,
                   iou_thr: float) -> np.ndarray:
    keep: list[int] = []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)  # already score-sorted
        alive = np.ones(len(idx), dtype=bool)
        b = boxes[idx]
        for j in range(len(idx)):
            if not alive[j]:
                continue
            keep.append(idx[j])
            rest = np.flatnonzero(alive[j + 1:]) + j + 1
            if len(rest):
                alive[rest] &= pairwise_iou(b[j:j + 1], b[rest])[0] <= iou_thr
        del alive
    return np.array(sorted(keep), dtype=int)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between (A, 4) and (B, 4) boxes."""
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


FORMAT_TAG = "duodet-params-v1"


def save_params(p: DetectorParams, path) -> None:
    """One file: a JSON manifest line, then T4 payloads in id-sorted order."""
    ids = p.ids()
    header = {
        "format": FORMAT_TAG,
        "arch": p.arch.to_dict(),
        "params": [[pid, list(p[pid].data.shape)] for pid in ids],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for pid in ids:
            t4io.write_record(fh, p[pid].data)


def load_params(path) -> DetectorParams:
    """Rebuild a detector from a parameter file (architecture included)."""
    arch, arrays = read_param_file(path)
    p = build_params(arch, rng=None)
    p.load_state(arrays)
    return p


def read_param_file(path) -> tuple[ArchConfig, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: bad manifest line: {e}") from e
        if header.get("format") != FORMAT_TAG:
            raise CheckpointError(f"{path}: unknown format {header.get('format')!r}")
        arch = ArchConfig.from_dict(header["arch"])
        arrays: dict[str, np.ndarray] = {}
        for pid, shape in header["params"]:
            arr = t4io.read_record(fh)
            if int(np.prod(shape)) != arr.size:
                raise CheckpointError(f"{path}: payload for {pid!r} has {arr.size} "
                                      f"values, manifest says {shape}")
            arrays[pid] = arr.reshape(shape)
    return arch, arrays


def checkpoint_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
