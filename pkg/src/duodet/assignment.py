"""Ground-truth assignment for the anchor-free head and the composite loss.

A cell is positive for an annotation when its center falls inside the box
and the box's longer side lands in the cell's level range; the ranges
split (0, inf) at twice each stride, so every box belongs to exactly one
level.  Overlap ties go to the smaller box, with a coordinate tie-break
that makes the result independent of annotation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .detector import HeadOutput
from .losses import bce_with_logits, diou_loss, l2_loss
from .ops import ShapeError
from .synthdata import Annotation
from .tensor import Tensor

__all__ = [
    "LevelGeometry",
    "Targets",
    "LossBreakdown",
    "level_ranges",
    "assign",
    "encode_box",
    "decode_cell_box",
    "detection_loss",
    "consistency_loss",
    "CONSISTENCY_BRANCHES",
]

CONSISTENCY_BRANCHES = ("obj", "cls", "reg")


@dataclass(frozen=True)
class LevelGeometry:
    name: str
    stride: int
    h: int
    w: int


@dataclass
class LevelTargets:
    geometry: LevelGeometry
    obj: np.ndarray        # (N, 1, h, w) 0/1
    pos_n: np.ndarray      # (P,) image index
    pos_y: np.ndarray      # (P,) cell row
    pos_x: np.ndarray      # (P,) cell column
    pos_class: np.ndarray  # (P,)
    pos_box: np.ndarray    # (P, 4) annotation boxes
    pos_enc: np.ndarray    # (P, 4) encoded offsets/log-sizes


@dataclass
class Targets:
    levels: list[LevelTargets]
    num_classes: int

    @property
    def num_positives(self) -> int:
        return sum(len(lt.pos_n) for lt in self.levels)


def level_ranges(strides: Sequence[int]) -> list[tuple[float, float]]:
    """Longer-side ranges per level: (0, 2*s1], (2*s1, 2*s2], ..., (2*s_last, inf)."""
    bounds = [2.0 * s for s in strides]
    ranges = []
    lo = 0.0
    for i, b in enumerate(bounds):
        hi = b if i < len(bounds) - 1 else np.inf
        ranges.append((lo, hi))
        lo = b
    return ranges


def geometry_of(head: HeadOutput) -> list[LevelGeometry]:
    return [LevelGeometry(name, stride, h, w) for name, stride, h, w in head.geometry()]


def encode_box(box, stride: int, gy: np.ndarray, gx: np.ndarray) -> np.ndarray:
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    tw = np.log((x2 - x1) / stride)
    th = np.log((y2 - y1) / stride)
    return np.stack([cx / stride - gx, cy / stride - gy,
                     np.full_like(gx, tw, dtype=np.float64),
                     np.full_like(gy, th, dtype=np.float64)], axis=-1)


def decode_cell_box(enc: np.ndarray, stride: int, gy: np.ndarray, gx: np.ndarray) -> np.ndarray:
    cx = (gx + enc[..., 0]) * stride
    cy = (gy + enc[..., 1]) * stride
    w = np.exp(enc[..., 2]) * stride
    h = np.exp(enc[..., 3]) * stride
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def assign(annotations: Sequence[Sequence[Annotation]],
           geoms: Sequence[LevelGeometry], num_classes: int) -> Targets:
    """Build supervision maps for a batch of per-image annotation lists."""
    n = len(annotations)
    ranges = level_ranges([g.stride for g in geoms])
    out_levels = []
    for geom, (lo, hi) in zip(geoms, ranges):
        obj = np.zeros((n, 1, geom.h, geom.w))
        pos_n, pos_y, pos_x, pos_cls, pos_box, pos_enc = [], [], [], [], [], []
        cy = (np.arange(geom.h) + 0.5) * geom.stride
        cx = (np.arange(geom.w) + 0.5) * geom.stride
        gxx, gyy = np.meshgrid(np.arange(geom.w), np.arange(geom.h))
        for i, anns in enumerate(annotations):
            here = [a for a in anns if lo < a.longer_side <= hi]
            # Smaller boxes claim contested cells; coordinate tie-break keeps
            # the outcome independent of list order.
            here.sort(key=lambda a: (a.area, a.box, a.class_id))
            taken = np.zeros((geom.h, geom.w), dtype=bool)
            for a in here:
                x1, y1, x2, y2 = a.box
                inside = ((cx[None, :] > x1) & (cx[None, :] < x2)
                          & (cy[:, None] > y1) & (cy[:, None] < y2) & ~taken)
                if not inside.any():
                    continue
                taken |= inside
                ys, xs = np.nonzero(inside)
                obj[i, 0, ys, xs] = 1.0
                enc = encode_box(a.box, geom.stride, gyy[ys, xs], gxx[ys, xs])
                pos_n.append(np.full(len(ys), i))
                pos_y.append(ys)
                pos_x.append(xs)
                pos_cls.append(np.full(len(ys), a.class_id))
                pos_box.append(np.tile(np.asarray(a.box, dtype=np.float64), (len(ys), 1)))
                pos_enc.append(enc)

        def cat(parts, empty_shape):
            return np.concatenate(parts) if parts else np.zeros(empty_shape, dtype=np.float64)

        out_levels.append(LevelTargets(
            geometry=geom, obj=obj,
            pos_n=cat(pos_n, (0,)).astype(int),
            pos_y=cat(pos_y, (0,)).astype(int),
            pos_x=cat(pos_x, (0,)).astype(int),
            pos_class=cat(pos_cls, (0,)).astype(int),
            pos_box=cat(pos_box, (0, 4)),
            pos_enc=cat(pos_enc, (0, 4))))
    return Targets(levels=out_levels, num_classes=num_classes)


@dataclass
class LossBreakdown:
    l_obj: float
    l_cls: float
    l_reg: float
    l_consist: float
    l_total: float

    @classmethod
    def zero(cls) -> "LossBreakdown":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


def _combine(parts: list[tuple[Tensor, int]]) -> Tensor:
    """Global mean from per-level (sum, count) pieces."""
    total_count = sum(c for _, c in parts)
    acc = None
    for t, _ in parts:
        acc = t if acc is None else ops.add(acc, t)
    if acc is None or total_count == 0:
        return Tensor(np.float64(0.0))
    return ops.scale(acc, 1.0 / total_count)


def detection_loss(head: HeadOutput, targets: Targets
                   ) -> tuple[Tensor, Tensor, Tensor]:
    """(objectness, classification, regression) loss tensors.

    Objectness is BCE over every cell; classification is BCE over positive
    cells only (one-hot targets); regression is the mean distance-IoU of
    decoded positive boxes against their annotations.
    """
    if len(head.levels) != len(targets.levels):
        raise ShapeError("head/target level counts differ")
    obj_parts: list[tuple[Tensor, int]] = []
    cls_parts: list[tuple[Tensor, int]] = []
    reg_parts: list[tuple[Tensor, int]] = []
    for lv, lt in zip(head.levels, targets.levels):
        if lv.obj.shape[2:] != (lt.geometry.h, lt.geometry.w):
            raise ShapeError(f"level {lv.name}: head {lv.obj.shape[2:]} vs "
                             f"targets {(lt.geometry.h, lt.geometry.w)}")
        obj_parts.append((bce_with_logits(lv.obj, lt.obj, reduction="sum"),
                          int(np.prod(lv.obj.shape))))
        p = len(lt.pos_n)
        if p == 0:
            continue
        cls_at = ops.gather_cells(lv.cls, lt.pos_n, lt.pos_y, lt.pos_x)
        onehot = np.zeros((p, targets.num_classes))
        onehot[np.arange(p), lt.pos_class] = 1.0
        cls_parts.append((bce_with_logits(cls_at, onehot, reduction="sum"),
                          p * targets.num_classes))
        reg_at = ops.gather_cells(lv.reg, lt.pos_n, lt.pos_y, lt.pos_x)
        boxes = _decode_positions(reg_at, lt)
        reg_parts.append((diou_loss(boxes, lt.pos_box, reduction="sum"), p))
    return _combine(obj_parts), _combine(cls_parts), _combine(reg_parts)


def _decode_positions(reg_at: Tensor, lt: LevelTargets) -> Tensor:
    """Differentiable box decode at positive cells: (P, 4) raw -> (P, 4) box."""
    s = float(lt.geometry.stride)
    gx = Tensor(lt.pos_x.astype(np.float64))
    gy = Tensor(lt.pos_y.astype(np.float64))
    cx = ops.scale(ops.add(ops.column(reg_at, 0), gx), s)
    cy = ops.scale(ops.add(ops.column(reg_at, 1), gy), s)
    half_w = ops.scale(ops.exp(ops.column(reg_at, 2)), 0.5 * s)
    half_h = ops.scale(ops.exp(ops.column(reg_at, 3)), 0.5 * s)
    return ops.stack_columns([
        ops.sub(cx, half_w), ops.sub(cy, half_h),
        ops.add(cx, half_w), ops.add(cy, half_h)])


def consistency_loss(aux_head: HeadOutput, base_head: HeadOutput,
                     branches: Sequence[str] = CONSISTENCY_BRANCHES) -> Tensor:
    """Mean squared difference between raw head maps of the two detectors.

    Gradient reaches the auxiliary side only; the base maps enter as
    constants.
    """
    for b in branches:
        if b not in CONSISTENCY_BRANCHES:
            raise ValueError(f"unknown consistency branch {b!r}")
    if aux_head.geometry() != base_head.geometry():
        raise ShapeError(f"head geometries differ: {aux_head.geometry()} "
                         f"vs {base_head.geometry()}")
    parts: list[tuple[Tensor, int]] = []
    for a_lv, b_lv in zip(aux_head.levels, base_head.levels):
        for branch in branches:
            a_t = getattr(a_lv, branch)
            b_t = getattr(b_lv, branch)
            parts.append((l2_loss(a_t, b_t.data, reduction="sum"),
                          int(np.prod(a_t.shape))))
    return _combine(parts)
