"""Training-time pseudo degradation and test-time corruption modes.

Training degradation rewrites one randomly chosen modality as
``clamp(b + c * x, 0, 255)`` with ``c ~ U(0, u)`` and ``b ~ N(mu, sigma2)``,
leaving the other modality and the annotations untouched.  Test-time
conditions cover deterministic contrast reduction toward mid-gray, full
modality drop, additive Gaussian noise, and contrast loss restricted to a
sampled rectangle (a field-of-view mismatch stand-in).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConditionError
from .synthdata import ModalityPair

__all__ = [
    "DegradeParams",
    "DegradationSpec",
    "TestCondition",
    "pseudo_degrade",
    "parse_condition",
    "apply_condition",
    "CONDITION_GRAMMAR",
]

MID_GRAY = 127.5

CONDITION_GRAMMAR = ("balanced | contrast:<rgb|tir>:<f> | drop:<rgb|tir> | "
                     "noise:<rgb|tir>:<sigma> | region:<rgb|tir>:<f>:<seed>")


@dataclass(frozen=True)
class DegradeParams:
    probability: float = 0.3
    u: float = 0.7
    mu: float = 127.45
    sigma2: float = 2440.0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.probability}")
        if not 0.0 < self.u < 1.0:
            raise ValueError(f"u must lie in (0, 1), got {self.u}")
        if self.sigma2 <= 0.0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")


@dataclass(frozen=True)
class DegradationSpec:
    applied: bool
    modality: str = ""
    c: float = 0.0
    b: float = 0.0
    scope: str | tuple = "global"
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class TestCondition:
    __test__ = False  # not a pytest class, despite the name

    name: str
    kind: str  # balanced | contrast | drop | noise | region
    modality: str = ""
    factor: float = 1.0
    sigma: float = 0.0
    seed: int = 0


def _with_plane(pair: ModalityPair, modality: str, plane: np.ndarray) -> ModalityPair:
    if modality == "rgb":
        return replace(pair, rgb=plane)
    return replace(pair, tir=plane)


def _plane(pair: ModalityPair, modality: str) -> np.ndarray:
    return pair.rgb if modality == "rgb" else pair.tir


def pseudo_degrade(pair: ModalityPair, params: DegradeParams,
                   rng: np.random.Generator) -> tuple[ModalityPair, DegradationSpec]:
    """Degrade at most one modality; draws happen only when applied."""
    if rng.random() >= params.probability:
        return pair, DegradationSpec(applied=False)
    modality = "rgb" if rng.random() < 0.5 else "tir"
    c = float(rng.uniform(0.0, params.u))
    b = float(rng.normal(params.mu, np.sqrt(params.sigma2)))
    degraded = np.clip(b + c * _plane(pair, modality), 0.0, 255.0)
    spec = DegradationSpec(applied=True, modality=modality, c=c, b=b)
    return _with_plane(pair, modality, degraded), spec


def parse_condition(text: str) -> TestCondition:
    """Parse a condition string; raises :class:`ConditionError` on any typo."""
    parts = text.strip().split(":")
    kind = parts[0]

    def bad(reason: str):
        return ConditionError(f"bad condition {text!r} ({reason}); "
                              f"grammar: {CONDITION_GRAMMAR}")

    def modality(tok: str) -> str:
        if tok not in ("rgb", "tir"):
            raise bad(f"unknown modality {tok!r}")
        return tok

    if kind == "balanced":
        if len(parts) != 1:
            raise bad("balanced takes no arguments")
        return TestCondition(name=text, kind="balanced")
    if kind == "contrast":
        if len(parts) != 3:
            raise bad("expected contrast:<modality>:<f>")
        f = _parse_float(parts[2], bad)
        if not 0.0 <= f <= 1.0:
            raise bad("factor must lie in [0, 1]")
        return TestCondition(name=text, kind="contrast", modality=modality(parts[1]), factor=f)
    if kind == "drop":
        if len(parts) != 2:
            raise bad("expected drop:<modality>")
        # A dropped sensor is contrast reduced all the way to mid-gray.
        return TestCondition(name=text, kind="contrast", modality=modality(parts[1]), factor=0.0)
    if kind == "noise":
        if len(parts) != 3:
            raise bad("expected noise:<modality>:<sigma>")
        sigma = _parse_float(parts[2], bad)
        if sigma < 0.0:
            raise bad("sigma must be non-negative")
        return TestCondition(name=text, kind="noise", modality=modality(parts[1]), sigma=sigma)
    if kind == "region":
        if len(parts) != 4:
            raise bad("expected region:<modality>:<f>:<seed>")
        f = _parse_float(parts[2], bad)
        if not 0.0 <= f <= 1.0:
            raise bad("factor must lie in [0, 1]")
        try:
            seed = int(parts[3])
        except ValueError:
            raise bad(f"seed {parts[3]!r} is not an integer") from None
        return TestCondition(name=text, kind="region", modality=modality(parts[1]),
                             factor=f, seed=seed)
    raise bad(f"unknown condition kind {kind!r}")


def _parse_float(tok: str, bad) -> float:
    try:
        return float(tok)
    except ValueError:
        raise bad(f"{tok!r} is not a number") from None


def sample_region(height: int, width: int, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """A rectangle covering 25-60% of the image, aspect ratio in [0.5, 2]."""
    frac = rng.uniform(0.25, 0.6)
    aspect = rng.uniform(0.5, 2.0)
    area = frac * height * width
    rw = min(width, max(2, int(round(np.sqrt(area * aspect)))))
    rh = min(height, max(2, int(round(area / rw))))
    x1 = int(rng.integers(0, width - rw + 1))
    y1 = int(rng.integers(0, height - rh + 1))
    return x1, y1, x1 + rw, y1 + rh


def apply_condition(pair: ModalityPair, cond: TestCondition,
                    rng: Optional[np.random.Generator] = None) -> ModalityPair:
    """Corrupt a pair per a test condition; pixel domain in, pixel domain out."""
    if cond.kind == "balanced":
        return pair
    plane = _plane(pair, cond.modality)
    if cond.kind == "contrast":
        out = MID_GRAY * (1.0 - cond.factor) + cond.factor * plane
        return _with_plane(pair, cond.modality, out)
    if cond.kind == "noise":
        if rng is None:
            raise ValueError("noise condition needs an rng")
        noisy = np.clip(plane + rng.normal(0.0, cond.sigma, size=plane.shape), 0.0, 255.0)
        return _with_plane(pair, cond.modality, noisy)
    if cond.kind == "region":
        if rng is None:
            raise ValueError("region condition needs an rng")
        x1, y1, x2, y2 = sample_region(pair.height, pair.width, rng)
        out = plane.copy()
        out[:, y1:y2, x1:x2] = MID_GRAY * (1.0 - cond.factor) + cond.factor * out[:, y1:y2, x1:x2]
        return _with_plane(pair, cond.modality, out)
    raise ConditionError(f"unhandled condition kind {cond.kind!r}")
