"""Detection metrics and test-condition sweeps.

Matching is per image: detections in descending score order greedily
claim the unmatched same-class annotation of highest IoU at threshold
0.5.  From the one-to-one match flags we sweep every unique detection
score to build the miss-rate / false-positives-per-image trade-off
curve, then summarize it two ways:

* log-average miss rate (LAMR): the geometric mean of the miss rate read
  at nine reference FPPI values log-spaced over [1e-2, 1e0]; when the
  curve never reaches a reference we fall back to its highest miss rate,
  and miss rates are floored before taking logs.
* AP50: COCO-style 101-point interpolated average precision per class.

Sweeps corrupt the test set per condition, evaluate, and emit a report
document, per-condition curve files, and a rendered figure.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .degrade import TestCondition, apply_condition, parse_condition
from .detector import (
    Detections,
    DetectorParams,
    checkpoint_sha256,
    decode,
    forward,
    forward_with_features,
    pairwise_iou,
)
from .synthdata import Annotation, ModalityPair
from .tensor import Tensor, no_grad

__all__ = [
    "EvalConfig",
    "MatchResult",
    "match",
    "sweep_curve",
    "lamr",
    "ap50",
    "evaluate_detections",
    "run_inference",
    "sweep",
    "export_features",
    "write_report",
]

IOU_THRESHOLD = 0.5
FPPI_REFERENCES = np.logspace(-2.0, 0.0, 9)


@dataclass(frozen=True)
class EvalConfig:
    nms_iou: float = 0.65
    score_floor: float = 0.001
    batch_size: int = 16
    seed: int = 0
    mr_floor: float = 1e-4


@dataclass
class MatchResult:
    """One image's one-to-one matching at a fixed IoU threshold."""

    det_scores: np.ndarray   # (D,) descending
    det_tp: np.ndarray       # (D,) bool
    gt_match_score: np.ndarray  # (G,) score of the claiming detection, nan if missed
    gt_classes: np.ndarray   # (G,)
    det_classes: np.ndarray  # (D,)


def _canonical_order(dets: Detections) -> np.ndarray:
    b = dets.boxes
    return np.lexsort((dets.classes, b[:, 3], b[:, 2], b[:, 1], b[:, 0], -dets.scores))


def match(dets: Detections, annotations: Sequence[Annotation],
          iou_threshold: float = IOU_THRESHOLD) -> MatchResult:
    """Greedy score-descending matching; equal scores break on box
    coordinates so detection order never matters."""
    order = _canonical_order(dets)
    boxes = dets.boxes[order]
    scores = dets.scores[order]
    classes = dets.classes[order]

    gt_sorted = sorted(annotations, key=lambda a: (a.box, a.class_id))
    gt_boxes = np.array([a.box for a in gt_sorted], dtype=np.float64).reshape(-1, 4)
    gt_classes = np.array([a.class_id for a in gt_sorted], dtype=int)
    gt_score = np.full(len(gt_sorted), np.nan)

    tp = np.zeros(len(scores), dtype=bool)
    taken = np.zeros(len(gt_sorted), dtype=bool)
    if len(scores) and len(gt_sorted):
        iou = pairwise_iou(boxes, gt_boxes)
        for d in range(len(scores)):
            candidates = np.flatnonzero((gt_classes == classes[d]) & ~taken
                                        & (iou[d] >= iou_threshold))
            if len(candidates):
                best = candidates[np.argmax(iou[d, candidates])]
                taken[best] = True
                tp[d] = True
                gt_score[best] = scores[d]
    return MatchResult(det_scores=scores, det_tp=tp, gt_match_score=gt_score,
                       gt_classes=gt_classes, det_classes=classes)


def sweep_curve(results: Sequence[MatchResult], n_images: int
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds desc, fppi, miss_rate) over every unique detection score."""
    scores = np.concatenate([r.det_scores for r in results]) if results else np.zeros(0)
    tp = np.concatenate([r.det_tp for r in results]) if results else np.zeros(0, bool)
    n_gt = sum(len(r.gt_match_score) for r in results)
    if scores.size == 0 or n_images == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    thresholds = np.unique(scores)[::-1]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    # Index of the last detection admitted at each threshold.
    idx = np.searchsorted(-scores, -thresholds, side="right") - 1
    tp_at = cum_tp[idx]
    fp_at = cum_fp[idx]
    fppi = fp_at / n_images
    miss = 1.0 - tp_at / n_gt if n_gt else np.zeros_like(fppi)
    return thresholds, fppi, miss


def lamr(fppi: np.ndarray, miss: np.ndarray, mr_floor: float = 1e-4) -> float:
    """Log-average miss rate in percent over the reference FPPI points.

    Points arrive in threshold-descending order (fppi non-decreasing,
    miss non-increasing).  An empty curve means nothing was ever
    detected: 100.
    """
    if fppi.size == 0:
        return 100.0
    samples = []
    for ref in FPPI_REFERENCES:
        ok = np.flatnonzero(fppi <= ref)
        mr = miss[ok[-1]] if len(ok) else miss.max()
        samples.append(max(mr, mr_floor))
    return float(np.exp(np.mean(np.log(samples))) * 100.0)


def ap50(results: Sequence[MatchResult], class_id: int) -> float | None:
    """COCO-style 101-point interpolated AP (percent) for one class; None
    when the class has no annotations."""
    n_gt = sum(int((r.gt_classes == class_id).sum()) for r in results)
    if n_gt == 0:
        return None
    scores = np.concatenate([r.det_scores[r.det_classes == class_id] for r in results]) \
        if results else np.zeros(0)
    tp = np.concatenate([r.det_tp[r.det_classes == class_id] for r in results]) \
        if results else np.zeros(0, bool)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tp[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    sampled = []
    for r in np.linspace(0.0, 1.0, 101):
        idx = np.searchsorted(recall, r, side="left")
        sampled.append(envelope[idx] if idx < len(recall) else 0.0)
    return float(np.mean(sampled) * 100.0)


def run_inference(params: DetectorParams, pairs: Sequence[ModalityPair],
                  cfg: EvalConfig) -> list[Detections]:
    """Batched no-grad decode over already-corrupted pairs."""
    dets: list[Detections] = []
    for start in range(0, len(pairs), cfg.batch_size):
        chunk = pairs[start:start + cfg.batch_size]
        rgb = Tensor(np.stack([p.rgb for p in chunk]) / 255.0)
        tir = Tensor(np.stack([p.tir for p in chunk]) / 255.0)
        with no_grad():
            head, _ = forward(params, rgb, tir)
        dets.extend(decode(head, cfg.score_floor, cfg.nms_iou,
                           (chunk[0].height, chunk[0].width)))
    return dets


def evaluate_detections(pairs: Sequence[ModalityPair], dets: Sequence[Detections],
                        class_names: Sequence[str], mr_floor: float) -> dict:
    """Metrics block for one condition: LAMR overall and per day/night tag,
    AP50 per class, raw counts, and the full trade-off curve."""
    results = [match(d, p.annotations) for p, d in zip(pairs, dets)]

    def lamr_of(indices):
        subset = [results[i] for i in indices]
        n_img = len(indices)
        if n_img == 0 or sum(len(r.gt_classes) for r in subset) == 0:
            return None, (np.zeros(0), np.zeros(0))
        _, fppi, miss = sweep_curve(subset, n_img)
        return lamr(fppi, miss, mr_floor), (fppi, miss)

    every = list(range(len(pairs)))
    value_all, curve = lamr_of(every)
    by_tag = {}
    for tag in ("day", "night"):
        idx = [i for i, p in enumerate(pairs) if p.meta.get("tag") == tag]
        by_tag[tag], _ = lamr_of(idx)

    ap_block: dict[str, float | None] = {}
    per_class = []
    for cid, name in enumerate(class_names):
        v = ap50(results, cid)
        ap_block[name] = v
        if v is not None:
            per_class.append(v)
    ap_block["mean"] = float(np.mean(per_class)) if per_class else None

    block = {
        "lamr": value_all,
        "lamr_day": by_tag["day"],
        "lamr_night": by_tag["night"],
        "ap50": ap_block,
        "counts": {
            "images": len(pairs),
            "annotations": int(sum(len(p.annotations) for p in pairs)),
            "detections": int(sum(len(d) for d in dets)),
        },
    }
    return block, curve


# Seed-stream tag for noise conditions (region conditions carry their own seed).
_STREAM_NOISE = 3


def _condition_rng(cond: TestCondition, cfg: EvalConfig, idx: int
                   ) -> np.random.Generator | None:
    if cond.kind == "noise":
        return np.random.default_rng(np.random.SeedSequence([cfg.seed, _STREAM_NOISE, idx]))
    if cond.kind == "region":
        return np.random.default_rng(np.random.SeedSequence([cond.seed, idx]))
    return None


def sweep(params: DetectorParams, pairs: Sequence[ModalityPair],
          conditions: Sequence[str | TestCondition], class_names: Sequence[str],
          cfg: EvalConfig | None = None, out_dir=None,
          checkpoint_path=None, dataset_path=None) -> dict:
    """Evaluate under every condition; optionally write report, curve data,
    and the rendered figure under ``out_dir``."""
    cfg = cfg or EvalConfig()
    conds = [c if isinstance(c, TestCondition) else parse_condition(c)
             for c in conditions]  # grammar errors surface before any inference

    report: dict = {
        "checkpoint": str(checkpoint_path) if checkpoint_path else None,
        "checkpoint_sha256": checkpoint_sha256(checkpoint_path) if checkpoint_path else None,
        "dataset": str(dataset_path) if dataset_path else None,
        "classes": list(class_names),
        "eval": asdict(cfg),
        "conditions": {},
    }
    curves: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for cond in conds:
        corrupted = [apply_condition(p, cond, _condition_rng(cond, cfg, i))
                     for i, p in enumerate(pairs)]
        dets = run_inference(params, corrupted, cfg)
        block, curve = evaluate_detections(corrupted, dets, class_names, cfg.mr_floor)
        report["conditions"][cond.name] = block
        curves[cond.name] = curve

    if out_dir is not None:
        write_report(report, curves, out_dir)
    return report


def _safe_name(condition: str) -> str:
    return condition.replace(":", "_").replace(".", "p")


def write_report(report: dict, curves: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    curve_dir = out / "curves"
    curve_dir.mkdir(exist_ok=True)
    for name, (fppi, miss) in curves.items():
        lines = ["fppi,miss_rate"]
        lines += [f"{f!r},{m!r}" for f, m in zip(fppi.tolist(), miss.tolist())]
        (curve_dir / f"{_safe_name(name)}.csv").write_text("\n".join(lines) + "\n")
    from .figures import render_mr_fppi
    render_mr_fppi(curves, out / "mr_fppi.png")
    return report_path


def export_features(params: DetectorParams, pairs: Sequence[ModalityPair],
                    out_path, levels: Sequence[str] = ("p3", "p4", "p5"),
                    batch_size: int = 16) -> int:
    """Dump the pyramid feature vector at every positive cell.

    One CSV row per positive location: sample id, level, class, then the
    feature components.  Returns the row count.
    """
    from .assignment import assign, geometry_of

    width = params.arch.neck_channels
    header = "id,level,class," + ",".join(f"f{i:02d}" for i in range(width))
    rows: list[str] = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        rgb = Tensor(np.stack([p.rgb for p in chunk]) / 255.0)
        tir = Tensor(np.stack([p.tir for p in chunk]) / 255.0)
        with no_grad():
            head, _, neck = forward_with_features(params, rgb, tir)
        targets = assign([p.annotations for p in chunk], geometry_of(head),
                         params.arch.num_classes)
        for lt in targets.levels:
            name = lt.geometry.name
            if name not in levels:
                continue
            feats = neck[name].data[lt.pos_n, :, lt.pos_y, lt.pos_x]
            for j in range(len(lt.pos_n)):
                vec = ",".join(repr(float(v)) for v in feats[j])
                rows.append(f"{chunk[lt.pos_n[j]].id},{name},{int(lt.pos_class[j])},{vec}")
    Path(out_path).write_text("\n".join([header] + rows) + "\n")
    return len(rows)
