"""Optimization loop: AdamW, cosine-annealed LR, progressive patch/batch
schedule, metric logging and checkpointing.

Deterministic given the seed: batch indices, patch windows and augmentation
draws come from per-iteration derived generators, so the loss trace is
bit-identical across same-seed runs regardless of any prefetching.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment as aug
from . import dataio
from . import metrics
from .losses import total_loss
from .model import build, forward, restore, save
from .tensor import NonFiniteError, Tensor, backward, reset_tape


class NumericAbort(ArithmeticError):
    """Training hit a non-finite loss or gradient."""


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainSchedule:
    total_iters: int = 300_000
    lr_start: float = 3e-4
    lr_end: float = 1e-6
    # (start_iter, patch_size, batch_size); first entry at 0, starts increasing
    ladder: tuple = ((0, 128, 64),)

    def __post_init__(self):
        object.__setattr__(self, "ladder", tuple(tuple(int(v) for v in e) for e in self.ladder))
        if not self.ladder or self.ladder[0][0] != 0:
            raise ValueError("ladder must start with an entry at iteration 0")
        starts = [e[0] for e in self.ladder]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError(f"ladder start iterations must strictly increase: {starts}")
        patches = [e[1] for e in self.ladder]
        if any(b < a for a, b in zip(patches, patches[1:])):
            raise ValueError(f"ladder patch sizes must be nondecreasing: {patches}")


# Progressive schedules: the published 8-GPU run, the 1-GPU reproduction, and
# the memory-leaner schedule used with the reduced architecture.
PAPER_8GPU_SCHEDULE = TrainSchedule(
    ladder=(
        (0, 128, 64),
        (92_000, 160, 40),
        (156_000, 192, 32),
        (204_000, 256, 16),
        (240_000, 320, 8),
        (276_000, 384, 8),
    ),
)

REPRO_1GPU_SCHEDULE = TrainSchedule(
    ladder=(
        (0, 128, 8),
        (92_000, 160, 4),
        (156_000, 192, 4),
        (204_000, 256, 2),
        (240_000, 320, 1),
        (276_000, 320, 1),
    ),
)

IMPROVED_SCHEDULE = TrainSchedule(
    ladder=(
        (0, 128, 8),
        (92_000, 160, 6),
        (156_000, 192, 4),
        (204_000, 256, 2),
        (240_000, 320, 2),
        (276_000, 384, 1),
    ),
)

NAMED_SCHEDULES = {
    "paper8gpu": PAPER_8GPU_SCHEDULE,
    "repro1gpu": REPRO_1GPU_SCHEDULE,
    "improved": IMPROVED_SCHEDULE,
}


def cosine_lr(iteration, schedule):
    """lr(t) = end + (start - end) * (1 + cos(pi t / T)) / 2."""
    t, total = iteration, schedule.total_iters
    if not 0 <= t <= total:
        raise ValueError(f"iteration {t} outside [0, {total}]")
    if t == 0:
        return schedule.lr_start
    if t == total:
        return schedule.lr_end
    cos = math.cos(math.pi * t / total)
    return schedule.lr_end + 0.5 * (schedule.lr_start - schedule.lr_end) * (1.0 + cos)


def ladder_lookup(iteration, schedule):
    """(patch_size, batch_size) for this iteration: rightmost rung <= it."""
    patch, batch = schedule.ladder[0][1], schedule.ladder[0][2]
    for start, p, b in schedule.ladder:
        if start <= iteration:
            patch, batch = p, b
        else:
            break
    return patch, batch


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    base_lr: float = 3e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, state, lr=None):
    """One decoupled-weight-decay Adam step over every tensor in `params`.

    Weight decay multiplies parameters by (1 - lr * wd) separately from the
    bias-corrected adaptive update. Gradients must be populated; a non-finite
    gradient aborts with the offending parameter named.
    """
    if lr is None:
        lr = state.base_lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        if not np.all(np.isfinite(g)):
            raise NumericAbort(f"non-finite gradient in parameter {name!r} at step {t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # dicts: iter, loss, lr, psnr, ssim, wall_time

    def append(self, iteration, loss, lr, psnr=math.nan, ssim=math.nan, wall_time=0.0):
        self.rows.append({
            "iter": iteration, "loss": loss, "lr": lr,
            "psnr": psnr, "ssim": ssim, "wall_time": wall_time,
        })

    def losses(self):
        return [r["loss"] for r in self.rows]

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iter,loss,lr,psnr,ssim,wall_time\n")
            for r in self.rows:
                fh.write(
                    f"{r['iter']},{r['loss']:.10e},{r['lr']:.10e},"
                    f"{r['psnr']:.6f},{r['ssim']:.6f},{r['wall_time']:.3f}\n"
                )
        return path


@dataclass
class TrainOptions:
    val_interval: int = 1000
    checkpoint_interval: int = 1000
    grad_clip: float = 0.0        # global-norm clip; 0 disables
    stop_at_psnr: float = 0.0     # early stop once val PSNR reaches this; 0 disables
    augment_cfg: aug.AugmentConfig = aug.IDENTITY_AUGMENT
    augment_enabled: bool = False
    out_dir: Path | None = None
    val_dataset: object = None    # PairedDataset; falls back to the train pairs


@dataclass
class TrainResult:
    params: object
    log: TrainLog
    last_checkpoint: Path | None = None
    best_checkpoint: Path | None = None
    best_psnr: float = -math.inf
    stopped_at: int = 0


def _assemble_batch(dataset, images, patch, batch, seed, iteration, options):
    blur_stack, sharp_stack = [], []
    for slot in range(batch):
        idx_rng = np.random.default_rng(np.random.SeedSequence((seed, iteration, slot)))
        idx = int(idx_rng.integers(0, len(dataset)))  # with replacement
        pair = images[idx]
        if options.augment_enabled:
            pair = aug.apply(pair, options.augment_cfg, idx_rng)
        b, s = dataio.sample_patch(pair, patch, idx_rng)
        blur_stack.append(b)
        sharp_stack.append(s)
    return np.stack(blur_stack), np.stack(sharp_stack)


def _global_grad_norm(params):
    total = 0.0
    for _, p in params.items():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def _validate(params, val_images):
    psnrs, ssims = [], []
    for blur_img, sharp_img in val_images:
        out = restore(params, blur_img)
        psnrs.append(metrics.psnr(sharp_img, out))
        if min(sharp_img.shape[1:]) >= metrics.SSIM_WINDOW:
            ssims.append(metrics.ssim(sharp_img, out))
    finite = [p for p in psnrs if math.isfinite(p)]
    mean_psnr = float(np.mean(finite)) if finite else math.inf
    mean_ssim = float(np.mean(ssims)) if ssims else math.nan
    return mean_psnr, mean_ssim


def train(model_cfg, loss_cfg, schedule, dataset, seed=0, options=None):
    """Run the optimization loop; returns params, the log and checkpoint paths.

    `dataset` is a dataio.PairedDataset (decoded up front; desk scale). A
    non-finite loss aborts with NumericAbort, keeping the last checkpoint.
    """
    options = options or TrainOptions()
    if len(dataset) == 0:
        raise dataio.DatasetError("training dataset is empty")
    images = [dataset.load_pair(i) for i in range(len(dataset))]
    if options.val_dataset is not None:
        val_images = [options.val_dataset.load_pair(i) for i in range(len(options.val_dataset))]
    else:
        val_images = images

    params = build(model_cfg, seed=seed)
    opt = OptimState(base_lr=schedule.lr_start)
    log = TrainLog()
    result = TrainResult(params=params, log=log)

    out_dir = Path(options.out_dir) if options.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    def _checkpoint(tag):
        if not out_dir:
            return None
        return Path(save(params, out_dir / f"checkpoint_{tag}.ckpt"))

    t0 = time.perf_counter()
    last_psnr, last_ssim = math.nan, math.nan
    iteration = 0
    try:
        for iteration in range(schedule.total_iters):
            lr = cosine_lr(iteration, schedule)
            patch, batch = ladder_lookup(iteration, schedule)
            blur_np, sharp_np = _assemble_batch(
                dataset, images, patch, batch, seed, iteration, options
            )
            reset_tape()
            params.zero_grad()
            pred = forward(params, Tensor(blur_np))
            loss = total_loss(pred, Tensor(sharp_np), loss_cfg)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise NumericAbort(f"non-finite loss at iteration {iteration}")
            backward(loss)
            if options.grad_clip > 0:
                norm = _global_grad_norm(params)
                if norm > options.grad_clip:
                    scale_f = options.grad_clip / norm
                    for _, p in params.items():
                        if p.grad is not None:
                            p.grad *= scale_f
            adamw_step(params, opt, lr)

            is_val = (iteration + 1) % options.val_interval == 0
            if is_val:
                last_psnr, last_ssim = _validate(params, val_images)
            log.append(iteration, loss_val, lr, last_psnr, last_ssim,
                       time.perf_counter() - t0)

            if (iteration + 1) % options.checkpoint_interval == 0:
                result.last_checkpoint = _checkpoint("last")
            if is_val and last_psnr > result.best_psnr:
                result.best_psnr = last_psnr
                result.best_checkpoint = _checkpoint("best")
            if options.stop_at_psnr and is_val and last_psnr >= options.stop_at_psnr:
                break
    except NonFiniteError as exc:
        raise NumericAbort(f"non-finite value at iteration {iteration}: {exc}") from exc
    finally:
        reset_tape()

    result.stopped_at = iteration + 1
    result.last_checkpoint = _checkpoint("last") or result.last_checkpoint
    if out_dir:
        log.write_csv(out_dir / "train_log.csv")
    return result
