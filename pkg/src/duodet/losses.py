"""Loss functions with analytic gradients: BCE-with-logits, DIoU, L2."""

from __future__ import annotations

import numpy as np

from .ops import ShapeError, stable_sigmoid
from .tensor import Tensor

__all__ = ["bce_with_logits", "l2_loss", "diou_loss"]


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _reduced(value_sum: float, count: int, reduction: str) -> tuple[float, float]:
    """Return (value, gradient scale) for the requested reduction."""
    if reduction == "mean":
        return value_sum / count, 1.0 / count
    if reduction == "sum":
        return value_sum, 1.0
    raise ValueError(f"unknown reduction {reduction!r}")


def _scalar(value: float, parents, backward) -> Tensor:
    out = Tensor(np.float64(value))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def bce_with_logits(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Binary cross entropy on raw logits, in the overflow-safe form.

    ``loss = max(z, 0) - z*t + log(1 + exp(-|z|))`` stays finite for any
    finite logit.  Gradient flows to the logits only.
    """
    t = _as_array(targets)
    z = logits.data
    if z.shape != t.shape:
        raise ShapeError(f"bce shapes differ: {z.shape} vs {t.shape}")
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError("bce targets must lie in [0, 1]")
    per_el = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    value, gscale = _reduced(float(per_el.sum()), z.size, reduction)

    def backward(g: np.ndarray) -> None:
        logits._accum((stable_sigmoid(z) - t) * (float(g) * gscale))

    return _scalar(value, (logits,), backward)


def l2_loss(a, b, reduction: str = "mean", stop_gradient: str | None = None) -> Tensor:
    """Squared-difference loss between two equal-shape tensors.

    ``stop_gradient`` may name one side ("a" or "b") whose gradient is
    discarded; passing a plain array for that side has the same effect.
    """
    if stop_gradient not in (None, "a", "b"):
        raise ValueError(f"stop_gradient must be None, 'a' or 'b', got {stop_gradient!r}")
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ShapeError(f"l2 shapes differ: {av.shape} vs {bv.shape}")
    diff = av - bv
    value, gscale = _reduced(float((diff * diff).sum()), diff.size, reduction)

    grad_a = isinstance(a, Tensor) and a.requires_grad and stop_gradient != "a"
    grad_b = isinstance(b, Tensor) and b.requires_grad and stop_gradient != "b"

    def backward(g: np.ndarray) -> None:
        d = diff * (2.0 * float(g) * gscale)
        if grad_a:
            a._accum(d)
        if grad_b:
            b._accum(-d)

    parents = tuple(p for p, live in ((a, grad_a), (b, grad_b)) if live)
    return _scalar(value, parents, backward)


def diou_loss(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    """Distance-IoU loss over (P, 4) boxes given as (x1, y1, x2, y2).

    ``1 - IoU + d^2 / c^2`` where d is the center distance and c the
    diagonal of the smallest enclosing box.  Differentiable with respect
    to the predicted coordinates only.
    """
    t = _as_array(target)
    p = pred.data
    if p.ndim != 2 or p.shape[1] != 4 or p.shape != t.shape:
        raise ShapeError(f"diou expects matching (P, 4) boxes, got {p.shape} vs {t.shape}")
    px1, py1, px2, py2 = p[:, 0], p[:, 1], p[:, 2], p[:, 3]
    tx1, ty1, tx2, ty2 = t[:, 0], t[:, 1], t[:, 2], t[:, 3]
    pw, ph = px2 - px1, py2 - py1
    if p.size and (pw.min() <= 0 or ph.min() <= 0):
        bad = int(np.argmax((pw <= 0) | (ph <= 0)))
        raise ValueError(f"degenerate predicted box at row {bad}: {p[bad].tolist()}")
    if t.size and ((tx2 - tx1).min() <= 0 or (ty2 - ty1).min() <= 0):
        raise ValueError("degenerate target box")

    iw_raw = np.minimum(px2, tx2) - np.maximum(px1, tx1)
    ih_raw = np.minimum(py2, ty2) - np.maximum(py1, ty1)
    iw = np.maximum(iw_raw, 0.0)
    ih = np.maximum(ih_raw, 0.0)
    inter = iw * ih
    area_p = pw * ph
    area_t = (tx2 - tx1) * (ty2 - ty1)
    union = area_p + area_t - inter
    iou = inter / union

    dx = 0.5 * (px1 + px2) - 0.5 * (tx1 + tx2)
    dy = 0.5 * (py1 + py2) - 0.5 * (ty1 + ty2)
    d2 = dx * dx + dy * dy
    cw = np.maximum(px2, tx2) - np.minimum(px1, tx1)
    ch = np.maximum(py2, ty2) - np.minimum(py1, ty1)
    c2 = cw * cw + ch * ch

    per_box = 1.0 - iou + d2 / c2
    n = max(p.shape[0], 1)
    value, gscale = _reduced(float(per_box.sum()), n, reduction)

    def backward(g: np.ndarray) -> None:
        live = iw_raw > 0
        live &= ih_raw > 0
        # Intersection edges: which box supplies each clamp decides the subgradient.
        diw = {"x1": np.where(live & (px1 > tx1), -1.0, 0.0),
               "x2": np.where(live & (px2 < tx2), 1.0, 0.0)}
        dih = {"y1": np.where(live & (py1 > ty1), -1.0, 0.0),
               "y2": np.where(live & (py2 < ty2), 1.0, 0.0)}
        dinter = {"x1": ih * diw["x1"], "x2": ih * diw["x2"],
                  "y1": iw * dih["y1"], "y2": iw * dih["y2"]}
        darea = {"x1": -ph, "x2": ph, "y1": -pw, "y2": pw}
        # d(iou) = (d(inter)*(union + inter) - inter*d(area_p)) / union^2
        u2 = union * union
        diou_d = {k: (dinter[k] * (union + inter) - inter * darea[k]) / u2
                  for k in ("x1", "y1", "x2", "y2")}
        dd2 = {"x1": dx, "x2": dx, "y1": dy, "y2": dy}
        dc2 = {"x1": 2.0 * cw * np.where(px1 < tx1, -1.0, 0.0),
               "x2": 2.0 * cw * np.where(px2 > tx2, 1.0, 0.0),
               "y1": 2.0 * ch * np.where(py1 < ty1, -1.0, 0.0),
               "y2": 2.0 * ch * np.where(py2 > ty2, 1.0, 0.0)}
        c4 = c2 * c2
        gtot = float(g) * gscale
        grad = np.empty_like(p)
        for j, k in enumerate(("x1", "y1", "x2", "y2")):
            dratio = (dd2[k] * c2 - d2 * dc2[k]) / c4
            grad[:, j] = (-diou_d[k] + dratio) * gtot
        pred._accum(grad)

    return _scalar(value, (pred,), backward)
