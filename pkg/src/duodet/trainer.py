"""Base-and-auxiliary training loop.

Each step: corrupt the batch (maybe), run the frozen base detector on the
original samples without recording gradients, run the auxiliary detector
on the corrupted samples, optimize the auxiliary on detection loss plus
an output-consistency term against the base, then fold the auxiliary into
the base by exponential moving average:

    base <- alpha * aux + (1 - alpha) * base     (per parameter)

The base detector is never back-propagated and is the deliverable model;
the auxiliary is discarded after training.  With the auxiliary framework
disabled the loop degrades to plain supervised training of one detector.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .assignment import (
    CONSISTENCY_BRANCHES,
    LossBreakdown,
    assign,
    consistency_loss,
    detection_loss,
    geometry_of,
)
from .degrade import DegradeParams, pseudo_degrade
from .detector import ArchConfig, DetectorParams, build_params, forward, save_params
from .errors import NumericError
from .optim import SGD
from .synthdata import ModalityPair, load_batches
from .tensor import Tensor, no_grad

__all__ = ["TrainConfig", "TrainState", "StepMetrics", "init_state", "train_step",
           "train", "METRICS_HEADER"]

METRICS_HEADER = "step,l_obj,l_cls,l_reg,l_consist,l_total,degraded_frac,seconds"

# Seed-stream tags so toggling one feature never shifts another's draws.
_STREAM_INIT = 0
_STREAM_SHUFFLE = 1
_STREAM_DEGRADE = 2


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 30
    batch_size: int = 8
    alpha: float = 0.001
    interaction: bool = True
    pseudo_degrade: bool = True
    aux: bool = True
    consistency: bool = True
    seed: int = 0
    w_obj: float = 1.0
    w_cls: float = 1.0
    w_reg: float = 1.0
    w_consist: float = 1.0
    consistency_branches: str = "obj,cls,reg"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.consistency and not self.aux:
            raise ValueError("consistency supervision requires the auxiliary framework")
        branches = self.branch_tuple()
        for b in branches:
            if b not in CONSISTENCY_BRANCHES:
                raise ValueError(f"unknown consistency branch {b!r}")

    def branch_tuple(self) -> tuple[str, ...]:
        return tuple(b.strip() for b in self.consistency_branches.split(",") if b.strip())


@dataclass
class StepMetrics:
    step: int
    losses: LossBreakdown
    degraded_frac: float
    seconds: float


@dataclass
class TrainState:
    config: TrainConfig
    arch: ArchConfig
    aux: DetectorParams
    base: DetectorParams | None
    optimizer: SGD
    degrade_rng: np.random.Generator
    degrade_params: DegradeParams
    step: int = 0
    applied_total: int = 0
    seen_total: int = 0

    @property
    def running_applied_frac(self) -> float:
        return self.applied_total / self.seen_total if self.seen_total else 0.0


def init_state(config: TrainConfig, arch: ArchConfig,
               degrade_params: DegradeParams | None = None) -> TrainState:
    """Fresh state: auxiliary initialized, base an exact value copy of it."""
    if arch.interaction != config.interaction:
        arch = ArchConfig(**{**arch.to_dict(), "interaction": config.interaction})
    init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _STREAM_INIT]))
    aux = build_params(arch, init_rng)
    base = aux.copy() if config.aux else None
    optimizer = SGD(aux.values(), lr=config.lr, momentum=config.momentum,
                    weight_decay=config.weight_decay)
    degrade_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _STREAM_DEGRADE]))
    return TrainState(config=config, arch=arch, aux=aux, base=base,
                      optimizer=optimizer, degrade_rng=degrade_rng,
                      degrade_params=degrade_params or DegradeParams())


def _stack_inputs(pairs: Sequence[ModalityPair]) -> tuple[Tensor, Tensor]:
    rgb = np.stack([p.rgb for p in pairs]) / 255.0
    tir = np.stack([p.tir for p in pairs]) / 255.0
    return Tensor(rgb), Tensor(tir)


def train_step(state: TrainState, batch: Sequence[ModalityPair]) -> StepMetrics:
    if not batch:
        raise ValueError("empty batch")
    cfg = state.config
    t0 = time.perf_counter()

    if cfg.pseudo_degrade:
        degraded, specs = zip(*(pseudo_degrade(p, state.degrade_params, state.degrade_rng)
                                for p in batch))
        applied = sum(s.applied for s in specs)
    else:
        degraded, applied = batch, 0
    state.applied_total += applied
    state.seen_total += len(batch)

    base_head = None
    if cfg.consistency:
        rgb0, tir0 = _stack_inputs(batch)
        with no_grad():
            base_head, _ = forward(state.base, rgb0, tir0)

    rgb, tir = _stack_inputs(degraded)
    aux_head, _ = forward(state.aux, rgb, tir)
    targets = assign([p.annotations for p in batch], geometry_of(aux_head),
                     state.arch.num_classes)

    l_obj, l_cls, l_reg = detection_loss(aux_head, targets)
    terms = {"objectness": l_obj, "classification": l_cls, "regression": l_reg}
    total = ops.add(ops.add(ops.scale(l_obj, cfg.w_obj), ops.scale(l_cls, cfg.w_cls)),
                    ops.scale(l_reg, cfg.w_reg))
    l_consist = Tensor(np.float64(0.0))
    if cfg.consistency:
        l_consist = consistency_loss(aux_head, base_head, cfg.branch_tuple())
        terms["consistency"] = l_consist
        total = ops.add(total, ops.scale(l_consist, cfg.w_consist))

    for name, term in terms.items():
        if not np.isfinite(term.item()):
            raise NumericError(f"{name} loss became non-finite at step {state.step}")

    graph = total.backward()
    state.optimizer.step()
    state.optimizer.zero_grad()
    graph.clear()

    if cfg.aux:
        alpha = cfg.alpha
        for pid in state.aux.ids():
            state.base[pid].data = alpha * state.aux[pid].data \
                + (1.0 - alpha) * state.base[pid].data

    state.step += 1
    losses = LossBreakdown(
        l_obj=l_obj.item(), l_cls=l_cls.item(), l_reg=l_reg.item(),
        l_consist=l_consist.item(),
        l_total=l_obj.item() * cfg.w_obj + l_cls.item() * cfg.w_cls
        + l_reg.item() * cfg.w_reg + l_consist.item() * cfg.w_consist)
    return StepMetrics(step=state.step, losses=losses,
                       degraded_frac=state.running_applied_frac,
                       seconds=time.perf_counter() - t0)


def metrics_line(m: StepMetrics) -> str:
    ls = m.losses
    return (f"{m.step},{ls.l_obj!r},{ls.l_cls!r},{ls.l_reg!r},{ls.l_consist!r},"
            f"{ls.l_total!r},{m.degraded_frac!r},{m.seconds:.4f}")


def train(config: TrainConfig, arch: ArchConfig, pairs: Sequence[ModalityPair],
          out_dir=None, degrade_params: DegradeParams | None = None,
          quiet: bool = False) -> tuple[TrainState, list[StepMetrics]]:
    """Run the full schedule; persist checkpoints and the per-step metrics log."""
    if not pairs:
        raise ValueError("empty training set")
    state = init_state(config, arch, degrade_params)

    steps_per_epoch = (len(pairs) + config.batch_size - 1) // config.batch_size
    total_steps = steps_per_epoch * config.epochs
    if config.aux:
        residue = (1.0 - config.alpha) ** total_steps
        if residue > 0.05 and not quiet:
            print(f"warning: after {total_steps} steps the base detector still "
                  f"carries {residue:.1%} of its random initialization; "
                  f"raise alpha or epochs", file=sys.stderr)

    metrics: list[StepMetrics] = []
    for epoch in range(config.epochs):
        shuffle_seed = np.random.SeedSequence([config.seed, _STREAM_SHUFFLE, epoch])
        shuffle_int = int(shuffle_seed.generate_state(1)[0])
        epoch_losses = []
        for batch in load_batches(pairs, config.batch_size, shuffle_seed=shuffle_int):
            m = train_step(state, batch)
            metrics.append(m)
            epoch_losses.append(m.losses.l_total)
        if not quiet:
            print(f"epoch {epoch + 1}/{config.epochs}: "
                  f"l_total {np.mean(epoch_losses):.4f} "
                  f"degraded {state.running_applied_frac:.2f}", file=sys.stderr)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = [METRICS_HEADER] + [metrics_line(m) for m in metrics]
        (out / "metrics.csv").write_text("\n".join(lines) + "\n")
        save_params(state.aux, out / "ckpt.aux")
        if state.base is not None:
            save_params(state.base, out / "ckpt.base")
    return state, metrics


def deliverable_name(config: TrainConfig) -> str:
    """The checkpoint to evaluate: the base detector when the auxiliary
    framework ran, otherwise the only detector there is."""
    return "ckpt.base" if config.aux else "ckpt.aux"
