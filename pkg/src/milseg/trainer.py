"""Full-batch Adam training of the weakly-supervised objective.

Every iteration runs forward/backward once per bag (gradients reduce into
the parameters in a fixed bag order, so results do not depend on
scheduling), then applies one Adam step per parameter.  Side-output heads
use a scaled-down learning rate; weight decay is decoupled and applies
only to convolution kernels, never biases.  Runs are fully determined by
(seed, data, config).
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backbone import NetworkState, SideOutputs, forward, save_checkpoint
from .losses import Bag, LossBreakdown, LossWeights, total_loss
from .superpixels import SuperpixelMap, slic
from .tensor import ShapeError, Tape, backward, select_batch

# Bags per vectorized forward/backward; purely a throughput knob, the
# reduction order over bags stays fixed.
_MICRO_BATCH = 12


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    side_lr_scale: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0005
    iterations: int = 300
    batch_size: Optional[int] = None  # None = full batch (the default regime)
    r: float = 4.0
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    plateau_window: int = 50
    plateau_tol: float = 1e-5
    superpixel_k: Optional[int] = None  # group pixels into ~k instances per bag
    superpixel_compactness: float = 10.0
    superpixel_iterations: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        # side_lr_scale = 0 freezes the side heads entirely.
        if not 0.0 <= self.side_lr_scale <= 1.0:
            raise ValueError("side_lr_scale must lie in [0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive when given")
        if self.r < 1:
            raise ValueError("generalized-mean exponent r must be >= 1")


@dataclass
class TrainLog:
    """Per-iteration loss terms plus run metadata."""

    entries: list[LossBreakdown] = field(default_factory=list)
    wall_time_s: float = 0.0
    checkpoint_path: Optional[str] = None

    def write_tsv(self, path) -> None:
        if self.entries:
            t_layers = len(self.entries[0].mil_side)
        else:
            t_layers = 0
        columns = ["iteration", "total", "side_sum", "fuse_sum"]
        columns += [f"mil_side{t + 1}" for t in range(t_layers)]
        columns += [f"ac_side{t + 1}" for t in range(t_layers)]
        columns += ["mil_fuse", "ac_fuse"]
        lines = ["\t".join(columns)]
        for i, entry in enumerate(self.entries):
            row = [str(i), repr(entry.total), repr(entry.side_sum), repr(entry.fuse_sum)]
            row += [repr(v) for v in entry.mil_side]
            row += [repr(v) for v in entry.ac_side]
            row += [repr(entry.mil_fuse), repr(entry.ac_fuse)]
            lines.append("\t".join(row))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


class AdamState:
    """First/second moment buffers and step counter for one parameter."""

    def __init__(self, shape):
        self.m = np.zeros(shape, dtype=np.float64)
        self.v = np.zeros(shape, dtype=np.float64)
        self.step = 0


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is decoupled: the update is
    p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * p.
    """
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"state {state.m.shape}"
        )
    state.step += 1
    g = grad.astype(np.float64, copy=False)
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * (g * g)
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    if weight_decay:
        update = update + lr * weight_decay * param.astype(np.float64, copy=False)
    param -= update.astype(param.dtype, copy=False)


def _decays(name: str) -> bool:
    return name.endswith(".weight")


def train(network: NetworkState, bags: Sequence[Bag], config: TrainConfig,
          checkpoint_path=None) -> TrainLog:
    """Optimize the network on the given bags; returns the iteration log.

    Aborts with ``TrainingDivergedError`` (carrying the iteration index)
    if the loss stops being finite.  With ``iterations = 0`` the
    parameters are returned untouched and the log is empty.
    """
    if not bags:
        raise ValueError("cannot train on an empty bag list")
    labels = {bag.label for bag in bags}
    if labels != {0, 1}:
        warnings.warn(
            "training set lacks positive or negative bags; the MIL objective "
            "is degenerate without both", stacklevel=2)

    sp_maps: Optional[list[SuperpixelMap]] = None
    if config.superpixel_k is not None:
        sp_maps = [slic(bag.image, config.superpixel_k,
                        config.superpixel_compactness,
                        config.superpixel_iterations) for bag in bags]

    states = {name: AdamState(p.dims) for name, p in network.parameters()}
    rng = np.random.default_rng(config.seed)
    log = TrainLog()
    started = time.perf_counter()
    full_batch = np.arange(len(bags))

    for iteration in range(config.iterations):
        if config.batch_size is None:
            batch_idx = full_batch
        else:
            batch_idx = rng.choice(len(bags), size=min(config.batch_size, len(bags)),
                                   replace=False)

        network.zero_grad()
        parts: list[LossBreakdown] = []
        chunk_size = _MICRO_BATCH if len({b.image.shape for b in bags}) == 1 else 1
        for start in range(0, len(batch_idx), chunk_size):
            idx = [int(i) for i in batch_idx[start:start + chunk_size]]
            chunk = [bags[i] for i in idx]
            with Tape():
                batched = forward(network, np.stack([b.image for b in chunk]))
                outs = [SideOutputs([select_batch(m, j) for m in batched.side_maps],
                                    select_batch(batched.fused, j))
                        for j in range(len(idx))]
                sp = None if sp_maps is None else [sp_maps[i] for i in idx]
                part = total_loss(chunk, outs, config.weights, r=config.r,
                                  superpixel_maps=sp)
                backward(part.loss)
            part.loss = None
            parts.append(part)
        entry = LossBreakdown.accumulate(parts)
        if not np.isfinite(entry.total):
            raise TrainingDivergedError(iteration, entry.total)
        log.entries.append(entry)

        for name, param in network.parameters():
            if param.grad is None:
                continue
            lr = config.learning_rate
            if NetworkState.is_side_param(name):
                lr *= config.side_lr_scale
            wd = config.weight_decay if _decays(name) else 0.0
            adam_step(param.data, param.grad, states[name], lr,
                      config.beta1, config.beta2, config.epsilon, wd)

        if _plateaued([e.total for e in log.entries], config.plateau_window,
                      config.plateau_tol):
            break

    log.wall_time_s = time.perf_counter() - started
    if checkpoint_path is not None:
        save_checkpoint(network, checkpoint_path)
        log.checkpoint_path = str(checkpoint_path)
    return log


def _plateaued(totals: list[float], window: int, tol: float) -> bool:
    if window <= 0 or len(totals) <= window:
        return False
    then, now = totals[-1 - window], totals[-1]
    return abs(now - then) <= tol * max(abs(then), 1e-12)
