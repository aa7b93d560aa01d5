"""Synthetic aligned two-modality detection scenes.

Each sample is a registered (visible, thermal) image pair over a textured
background, populated with blob objects whose contrast differs per
modality and per day/night tag: "warm" objects stand out in the thermal
plane, "cool" objects in the visible plane, and night scenes dim the
visible contrast so neither plane alone suffices over a whole test set.
Pixels live in [0, 255]; geometry is sub-pixel with anti-aliased edges.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import t4io
from .errors import DatasetError

__all__ = [
    "Annotation",
    "ModalityPair",
    "ClassProfile",
    "SceneConfig",
    "generate_dataset",
    "load_dataset",
    "load_batches",
    "normalize_for_net",
    "contrast_stats",
]

META_NAME = "meta.json"


@dataclass(frozen=True)
class Annotation:
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 in pixels
    class_id: int
    vis_rgb: bool = True
    vis_tir: bool = True

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)

    @property
    def longer_side(self) -> float:
        x1, y1, x2, y2 = self.box
        return max(x2 - x1, y2 - y1)


@dataclass
class ModalityPair:
    id: str
    rgb: np.ndarray  # (C, H, W) in [0, 255]
    tir: np.ndarray  # (1, H, W) in [0, 255]
    annotations: list[Annotation]
    meta: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.rgb.shape[1]

    @property
    def width(self) -> int:
        return self.rgb.shape[2]


@dataclass(frozen=True)
class ClassProfile:
    """Appearance of one object class across modalities and day/night tags."""

    name: str
    shape: str  # "ellipse" or "box"
    w_range: tuple[float, float]
    h_range: tuple[float, float]
    rgb_contrast: dict  # tag -> multiplier in [0, 1]
    tir_contrast: dict
    rgb_polarity: float = 1.0
    tir_polarity: float = 1.0


DEFAULT_PROFILES = (
    # Warm, person-like blob: strong thermal signature, visible contrast
    # collapses at night.
    ClassProfile("pedestrian", "ellipse", (4.5, 8.0), (9.0, 16.0),
                 rgb_contrast={"day": 0.55, "night": 0.12},
                 tir_contrast={"day": 0.90, "night": 0.90},
                 rgb_polarity=-1.0, tir_polarity=1.0),
    # Cool, vehicle-like box: crisp in the visible plane by day, faint in
    # the thermal plane always.
    ClassProfile("vehicle", "box", (10.0, 18.0), (6.0, 10.0),
                 rgb_contrast={"day": 0.85, "night": 0.22},
                 tir_contrast={"day": 0.35, "night": 0.35},
                 rgb_polarity=1.0, tir_polarity=1.0),
)

_RGB_BG = {"day": 115.0, "night": 70.0}
_TIR_BG = 95.0
_AMPLITUDE = 90.0
_VIS_THRESHOLD = 0.05


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 80
    rgb_channels: int = 3
    min_objects: int = 1
    max_objects: int = 4
    night_ratio: float = 0.5
    bg_noise: float = 4.0
    seed: int = 0
    profiles: tuple[ClassProfile, ...] = DEFAULT_PROFILES

    def __post_init__(self):
        if self.height % 8 or self.width % 8:
            raise ValueError(f"image extents must be divisible by 8, got "
                             f"{self.height}x{self.width}")
        if not 0.0 <= self.night_ratio <= 1.0:
            raise ValueError(f"night_ratio must lie in [0, 1], got {self.night_ratio}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if self.rgb_channels not in (1, 3):
            raise ValueError("rgb_channels must be 1 or 3")

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.profiles)


def _soft_mask(profile: ClassProfile, box, h: int, w: int) -> np.ndarray:
    """Anti-aliased coverage of the object inside its box, via 2x2 supersampling."""
    x1, y1, x2, y2 = box
    ys = (np.arange(h * 2) + 0.5) / 2.0
    xs = (np.arange(w * 2) + 0.5) / 2.0
    gx, gy = np.meshgrid(xs, ys)
    if profile.shape == "ellipse":
        cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        rx, ry = (x2 - x1) / 2.0, (y2 - y1) / 2.0
        hard = (((gx - cx) / rx) ** 2 + ((gy - cy) / ry) ** 2) <= 1.0
    else:
        hard = (gx >= x1) & (gx < x2) & (gy >= y1) & (gy < y2)
    return hard.reshape(h, 2, w, 2).mean(axis=(1, 3))


def _render_background(rng: np.random.Generator, level: float, noise: float,
                       h: int, w: int) -> np.ndarray:
    yy = np.linspace(-1.0, 1.0, h)[:, None]
    xx = np.linspace(-1.0, 1.0, w)[None, :]
    slope = rng.uniform(-6.0, 6.0, size=2)
    plane = level + slope[0] * yy + slope[1] * xx
    return plane + rng.normal(0.0, noise, size=(h, w))


def render_sample(config: SceneConfig, sample_id: str, tag: str,
                  rng: np.random.Generator) -> ModalityPair:
    h, w = config.height, config.width
    rgb_luma = _render_background(rng, _RGB_BG[tag], config.bg_noise, h, w)
    tir = _render_background(rng, _TIR_BG, config.bg_noise, h, w)

    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    annotations: list[Annotation] = []
    for _ in range(count):
        cls = int(rng.integers(len(config.profiles)))
        profile = config.profiles[cls]
        bw = rng.uniform(*profile.w_range)
        bh = rng.uniform(*profile.h_range)
        x1 = rng.uniform(0.0, w - bw)
        y1 = rng.uniform(0.0, h - bh)
        box = (x1, y1, x1 + bw, y1 + bh)
        mask = _soft_mask(profile, box, h, w)
        texture = 1.0 + rng.normal(0.0, 0.08, size=(h, w))
        c_rgb = profile.rgb_contrast[tag]
        c_tir = profile.tir_contrast[tag]
        rgb_luma += mask * texture * (profile.rgb_polarity * c_rgb * _AMPLITUDE)
        tir += mask * texture * (profile.tir_polarity * c_tir * _AMPLITUDE)
        annotations.append(Annotation(
            box=box, class_id=cls,
            vis_rgb=c_rgb >= _VIS_THRESHOLD, vis_tir=c_tir >= _VIS_THRESHOLD))

    rgb_luma = np.clip(rgb_luma, 0.0, 255.0)
    tir = np.clip(tir, 0.0, 255.0)
    if config.rgb_channels == 3:
        # Mild per-channel tint so the visible plane is genuinely 3-channel.
        tint = rng.uniform(0.92, 1.08, size=3)
        rgb = np.clip(rgb_luma[None, :, :] * tint[:, None, None], 0.0, 255.0)
    else:
        rgb = rgb_luma[None, :, :]
    return ModalityPair(id=sample_id, rgb=rgb, tir=tir[None, :, :],
                        annotations=annotations, meta={"tag": tag})


def _sample_rng(seed: int, split_no: int, idx: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, split_no, idx]))


def _ann_lines(annotations: Sequence[Annotation]) -> str:
    lines = []
    for a in annotations:
        x1, y1, x2, y2 = (repr(float(v)) for v in a.box)
        lines.append(f"{a.class_id} {x1} {y1} {x2} {y2} "
                     f"{int(a.vis_rgb)} {int(a.vis_tir)}")
    return "\n".join(lines) + ("\n" if lines else "")


def _parse_ann(text: str, sample_id: str) -> list[Annotation]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) != 7:
            raise DatasetError(f"sample {sample_id!r}: annotation line {lineno} "
                               f"has {len(tok)} fields, expected 7")
        out.append(Annotation(
            box=(float(tok[1]), float(tok[2]), float(tok[3]), float(tok[4])),
            class_id=int(tok[0]),
            vis_rgb=bool(int(tok[5])), vis_tir=bool(int(tok[6]))))
    return out


def generate_dataset(config: SceneConfig, n_train: int, n_test: int, out_dir) -> Path:
    """Render and persist a dataset; fully determined by the config seed."""
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory {root}: {e}") from e

    manifest_samples: dict[str, list[dict]] = {}
    for split_no, (split, count, prefix) in enumerate(
            (("train", n_train, "tr"), ("test", n_test, "te"))):
        split_dir = root / split
        split_dir.mkdir(exist_ok=True)
        entries = []
        for idx in range(count):
            rng = _sample_rng(config.seed, split_no, idx)
            tag = "night" if rng.random() < config.night_ratio else "day"
            sample_id = f"{prefix}{idx:04d}"
            pair = render_sample(config, sample_id, tag, rng)
            t4io.save(split_dir / f"{sample_id}.rgb.t4", pair.rgb[None])
            t4io.save(split_dir / f"{sample_id}.tir.t4", pair.tir[None])
            (split_dir / f"{sample_id}.ann").write_text(_ann_lines(pair.annotations))
            entries.append({"id": sample_id, "tag": tag})
        manifest_samples[split] = entries

    meta = {
        "classes": list(config.class_names),
        "height": config.height,
        "width": config.width,
        "rgb_channels": config.rgb_channels,
        "seed": config.seed,
        "n_train": n_train,
        "n_test": n_test,
        "samples": manifest_samples,
    }
    (root / META_NAME).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return root


def load_meta(root) -> dict:
    path = Path(root) / META_NAME
    if not path.exists():
        raise DatasetError(f"no {META_NAME} found under {root}")
    return json.loads(path.read_text())


def load_dataset(root, split: str = "train") -> list[ModalityPair]:
    """Load one split; every sample must have both modality files."""
    meta = load_meta(root)
    if split not in meta["samples"]:
        raise DatasetError(f"unknown split {split!r}; have {sorted(meta['samples'])}")
    split_dir = Path(root) / split
    pairs = []
    for entry in meta["samples"][split]:
        sid = entry["id"]
        paths = {m: split_dir / f"{sid}.{m}.t4" for m in ("rgb", "tir")}
        for mod, p in paths.items():
            if not p.exists():
                raise DatasetError(f"sample {sid!r}: missing {mod} file {p}")
        rgb = t4io.load(paths["rgb"])[0]
        tir = t4io.load(paths["tir"])[0]
        if rgb.shape[1:] != tir.shape[1:]:
            raise DatasetError(f"sample {sid!r}: modality extents differ "
                               f"{rgb.shape[1:]} vs {tir.shape[1:]}")
        annotations = _parse_ann((split_dir / f"{sid}.ann").read_text(), sid)
        _validate(annotations, rgb.shape[2], rgb.shape[1], sid)
        pairs.append(ModalityPair(id=sid, rgb=rgb, tir=tir,
                                  annotations=annotations, meta={"tag": entry["tag"]}))
    return pairs


def _validate(annotations: Sequence[Annotation], w: int, h: int, sid: str) -> None:
    for a in annotations:
        x1, y1, x2, y2 = a.box
        if not (0.0 <= x1 < x2 <= w and 0.0 <= y1 < y2 <= h):
            raise DatasetError(f"sample {sid!r}: box {a.box} outside {w}x{h}")
        if not (a.vis_rgb or a.vis_tir):
            raise DatasetError(f"sample {sid!r}: object invisible in both modalities")


def load_batches(pairs: Sequence[ModalityPair], batch_size: int,
                 shuffle_seed: int | None = None) -> Iterator[list[ModalityPair]]:
    """Yield batches in order (or a seed-determined shuffle); the last short
    batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(pairs))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(order)
    for start in range(0, len(pairs), batch_size):
        yield [pairs[i] for i in order[start:start + batch_size]]


def normalize_for_net(pair: ModalityPair) -> tuple[np.ndarray, np.ndarray]:
    """Map [0, 255] pixels to [0, 1] network inputs (after any degradation)."""
    return pair.rgb / 255.0, pair.tir / 255.0


def contrast_stats(pairs: Sequence[ModalityPair]) -> dict[str, float]:
    """Mean Weber contrast of annotated objects against the background,
    per modality, over all objects in ``pairs``."""
    ratios = {"rgb": [], "tir": []}
    for pair in pairs:
        h, w = pair.height, pair.width
        inside = np.zeros((h, w), dtype=bool)
        for a in pair.annotations:
            x1, y1, x2, y2 = a.box
            inside[int(y1):int(np.ceil(y2)), int(x1):int(np.ceil(x2))] = True
        if not inside.any() or inside.all():
            continue
        for mod, img in (("rgb", pair.rgb.mean(axis=0)), ("tir", pair.tir[0])):
            bg = img[~inside].mean()
            for a in pair.annotations:
                x1, y1, x2, y2 = a.box
                patch = img[int(y1):int(np.ceil(y2)), int(x1):int(np.ceil(x2))]
                ratios[mod].append(abs(patch.mean() - bg) / bg)
    return {mod: float(np.mean(vals)) if vals else 0.0 for mod, vals in ratios.items()}
