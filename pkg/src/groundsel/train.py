"""Deterministic single-process training and evaluation.

Gradients are computed per example on a fresh tape, accumulated over the
batch, averaged, and applied with AdamW.  Everything downstream of the seeds
(parameter init, shuffling, optimiser arithmetic) is deterministic, so a
fixed seed reproduces the loss sequence exactly on the same machine.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation
from .data import GroundingExample
from .model import ModelConfig, ModelParams, extract_patches, init_params, model_forward
from .nn import AdamW
from .objectives import BBox, LossWeights, box_from_tensor, box_tensor, clip_corners_unit, grounding_loss, iou_xyxy
from .rng import Xoshiro256StarStar, derive_seed


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-4
    lr_decay_epoch: int = 20  # 1-based epoch where lr is multiplied once
    lr_decay_factor: float = 0.1
    warmup_steps: int = 0  # linear ramp from lr/warmup_steps up to lr
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    early_stop_acc: float | None = None  # stop after the epoch reaching this

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation("epochs and batch size must be positive")
        if self.lr <= 0 or self.lr_decay_factor <= 0:
            raise ContractViolation("learning rates must be positive")
        if self.warmup_steps < 0:
            raise ContractViolation("warmup_steps must be non-negative")


@dataclass
class PreparedExample:
    id: str
    patch_rows: np.ndarray
    token_ids: list[int]
    gt_tensor_data: np.ndarray  # (1, 4) center format
    bbox: BBox


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    val_acc: float
    val_mean_iou: float
    lr: float
    seconds: float


@dataclass
class EvalResult:
    acc: float
    mean_iou: float
    count: int


@dataclass
class TrainResult:
    params: ModelParams
    optimizer: AdamW
    epochs: list[EpochStats] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    stopped_early: bool = False


def prepare_examples(examples: list[GroundingExample],
                     config: ModelConfig) -> list[PreparedExample]:
    if not examples:
        raise ContractViolation("no examples to prepare")
    out = []
    for ex in examples:
        rows = extract_patches(ex.image, config.patch_size).astype(config.dtype)
        gt = np.array(
            [[ex.bbox.cx, ex.bbox.cy, ex.bbox.w, ex.bbox.h]], dtype=config.dtype
        )
        out.append(
            PreparedExample(
                id=ex.id,
                patch_rows=rows,
                token_ids=ex.token_ids,
                gt_tensor_data=gt,
                bbox=ex.bbox,
            )
        )
    return out


def example_loss(prepared: PreparedExample, params: ModelParams,
                 config: ModelConfig, weights: LossWeights) -> ad.Tensor:
    pred, _ = model_forward(prepared.patch_rows, prepared.token_ids, params, config)
    gt = ad.constant(prepared.gt_tensor_data, dtype=config.dtype)
    return grounding_loss(pred, gt, weights)


def evaluate(params: ModelParams, config: ModelConfig,
             prepared: list[PreparedExample]) -> EvalResult:
    """Accuracy at IoU > 0.5 (predictions clipped to the unit square)."""
    if not prepared:
        raise ContractViolation("evaluate on an empty list")
    ious = []
    for ex in prepared:
        pred_t, _ = model_forward(ex.patch_rows, ex.token_ids, params, config)
        pred = box_from_tensor(pred_t)
        p = clip_corners_unit(np.array(pred.corners()))
        g = np.array(ex.bbox.corners(), dtype=np.float64)
        ious.append(float(iou_xyxy(p, g)))
    ious_arr = np.array(ious)
    return EvalResult(
        acc=float((ious_arr > 0.5).mean()),
        mean_iou=float(ious_arr.mean()),
        count=len(prepared),
    )


def _accumulate_batch(batch: list[PreparedExample], params: ModelParams,
                      names: list[str], tensors: list[ad.Tensor],
                      config: ModelConfig, weights: LossWeights):
    sums = {name: None for name in names}
    total = 0.0
    for ex in batch:
        with ad.record() as rec:
            loss = example_loss(ex, params, config, weights)
        rec.backward(loss)
        total += loss.item()
        for name, t in zip(names, tensors):
            if t.grad is None:
                continue
            if sums[name] is None:
                sums[name] = t.grad.copy()
            else:
                sums[name] += t.grad
    inv = 1.0 / len(batch)
    grads = {}
    for name, t in zip(names, tensors):
        if sums[name] is None:
            grads[name] = np.zeros_like(t.data)
        else:
            grads[name] = sums[name] * t.data.dtype.type(inv)
    return grads, total / len(batch)


def step_lr(tcfg: TrainConfig, epoch: int, global_step: int) -> float:
    """Learning rate for a 1-based epoch and 1-based optimiser step.

    The constant-recipe failure mode here is early: a rate that trains fine
    later on will, applied from step one, push the head to explain the
    targets with its bias alone and zero its input weights.  A short linear
    ramp keeps updates small through that fragile phase.
    """
    lr = tcfg.lr
    if epoch >= tcfg.lr_decay_epoch:
        lr *= tcfg.lr_decay_factor
    if tcfg.warmup_steps > 0 and global_step < tcfg.warmup_steps:
        lr *= global_step / tcfg.warmup_steps
    return lr


def train_model(config: ModelConfig, tcfg: TrainConfig,
                train_examples: list[GroundingExample],
                val_examples: list[GroundingExample],
                log_fn=None) -> TrainResult:
    """Full training run; log_fn, when given, receives one dict per epoch."""
    train_prep = prepare_examples(train_examples, config)
    val_prep = prepare_examples(val_examples, config)
    params = init_params(config)
    weights = LossWeights(l1=config.lambda_l1, giou=config.lambda_giou)
    optimizer = AdamW(
        lr=tcfg.lr,
        beta1=tcfg.beta1,
        beta2=tcfg.beta2,
        eps=tcfg.eps,
        weight_decay=tcfg.weight_decay,
    )
    named = list(params.named())
    names = [n for n, _ in named]
    tensors = [t for _, t in named]
    param_dict = dict(named)
    shuffler = Xoshiro256StarStar(derive_seed(tcfg.seed, 7))
    result = TrainResult(params=params, optimizer=optimizer)
    global_step = 0
    for epoch in range(1, tcfg.epochs + 1):
        start = time.monotonic()
        order = list(range(len(train_prep)))
        shuffler.shuffle(order)
        epoch_losses = []
        for at in range(0, len(order), tcfg.batch_size):
            batch = [train_prep[i] for i in order[at : at + tcfg.batch_size]]
            grads, mean_loss = _accumulate_batch(
                batch, params, names, tensors, config, weights
            )
            global_step += 1
            optimizer.lr = step_lr(tcfg, epoch, global_step)
            optimizer.step(param_dict, grads)
            result.step_losses.append(mean_loss)
            epoch_losses.append(mean_loss)
        ev = evaluate(params, config, val_prep)
        stats = EpochStats(
            epoch=epoch,
            mean_loss=float(np.mean(epoch_losses)),
            val_acc=ev.acc,
            val_mean_iou=ev.mean_iou,
            lr=optimizer.lr,
            seconds=time.monotonic() - start,
        )
        result.epochs.append(stats)
        if log_fn is not None:
            log_fn(
                {
                    "event": "epoch",
                    "epoch": stats.epoch,
                    "mean_loss": stats.mean_loss,
                    "val_acc": stats.val_acc,
                    "val_mean_iou": stats.val_mean_iou,
                    "lr": stats.lr,
                    "seconds": round(stats.seconds, 3),
                }
            )
        if tcfg.early_stop_acc is not None and ev.acc >= tcfg.early_stop_acc:
            result.stopped_early = True
            break
    return result
