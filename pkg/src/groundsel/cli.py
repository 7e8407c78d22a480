"""Command-line interface.

Subcommands cover the whole workflow: gen-data, train, eval, flops, viz and
grad-check.  Progress and results are printed as one JSON object per line on
stdout; errors go to stderr and exit with a non-zero status.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    VOCAB,
    DatasetError,
    DatasetSpec,
    generate_dataset,
    load_dataset,
    save_dataset,
    write_ppm,
)
from .flops import ratio_table
from .model import (
    ModelConfig,
    extract_patches,
    init_params,
    model_forward,
    tiny_config,
    toy_config,
    vitb_config,
)
from .objectives import BBox, LossWeights, box_from_tensor, grounding_loss
from .rng import Xoshiro256StarStar, derive_seed, normal_field
from .train import TrainConfig, evaluate, prepare_examples, train_model


def emit(obj: dict) -> None:
    print(json.dumps(obj), flush=True)


def _parse_fs_layers(text: str) -> tuple[int, ...]:
    text = text.strip().lower()
    if text in ("", "none"):
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad block list {text!r}") from e


def _parse_rho_list(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad rho list {text!r}") from e
    if not values:
        raise argparse.ArgumentTypeError("empty rho list")
    return values


_PRESETS = {"toy": toy_config, "tiny": tiny_config, "vitb": vitb_config}


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn-mult", type=int, default=4)
    p.add_argument("--fs-layers", type=_parse_fs_layers, default=(2, 3),
                   help="comma-separated 1-based block indices, or 'none'")
    p.add_argument("--rho", type=float, default=0.7)
    p.add_argument("--max-text-len", type=int, default=4)
    p.add_argument("--head-hidden", type=int, default=256)
    p.add_argument("--lambda-l1", type=float, default=5.0)
    p.add_argument("--lambda-giou", type=float, default=2.0)
    p.add_argument("--precision", choices=("single", "double"), default="single")


def _model_config_from_args(args, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        image_size=args.image_size,
        patch_size=args.patch_size,
        embed_dim=args.embed_dim,
        depth=args.depth,
        heads=args.heads,
        ffn_mult=args.ffn_mult,
        fs_layers=args.fs_layers,
        rho=args.rho,
        vocab_size=vocab_size,
        max_text_len=args.max_text_len,
        head_hidden=args.head_hidden,
        lambda_l1=args.lambda_l1,
        lambda_giou=args.lambda_giou,
        seed=args.seed,
        precision=args.precision,
    )


def cmd_gen_data(args) -> int:
    spec = DatasetSpec(
        image_size=args.image_size,
        min_shapes=args.min_shapes,
        max_shapes=args.max_shapes,
        min_size=args.min_size,
        max_size=args.max_size,
        train_count=args.train,
        val_count=args.val,
        seed=args.seed,
    )
    started = time.monotonic()
    for split in ("train", "val"):
        if spec.count_for(split) == 0:
            continue
        examples = generate_dataset(spec, split)
        save_dataset(args.out, split, examples)
        emit(
            {
                "event": "split",
                "split": split,
                "count": len(examples),
                "out": os.path.join(args.out, f"{split}.jsonl"),
            }
        )
    emit(
        {
            "event": "done",
            "out": args.out,
            "vocab_size": len(VOCAB),
            "seconds": round(time.monotonic() - started, 3),
        }
    )
    return 0


def cmd_train(args) -> int:
    train_examples, vocab = load_dataset(args.data, "train")
    val_examples, _ = load_dataset(args.data, "val")
    config = _model_config_from_args(args, vocab_size=len(vocab))
    tcfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        lr_decay_epoch=args.lr_decay_epoch,
        lr_decay_factor=args.lr_decay_factor,
        warmup_steps=args.warmup_steps,
        weight_decay=args.weight_decay,
        seed=args.seed,
        early_stop_acc=args.early_stop_acc,
    )
    emit(
        {
            "event": "config",
            "model": dataclasses.asdict(config),
            "train": dataclasses.asdict(tcfg),
            "train_examples": len(train_examples),
            "val_examples": len(val_examples),
        }
    )
    result = train_model(config, tcfg, train_examples, val_examples, log_fn=emit)
    if args.out:
        save_checkpoint(
            args.out,
            result.params,
            config,
            optimizer=result.optimizer,
            extra={"epochs_run": len(result.epochs)},
        )
    final = result.epochs[-1]
    emit(
        {
            "event": "done",
            "epochs_run": len(result.epochs),
            "stopped_early": result.stopped_early,
            "val_acc": final.val_acc,
            "val_mean_iou": final.val_mean_iou,
            "checkpoint": args.out or None,
        }
    )
    return 0


def cmd_eval(args) -> int:
    params, config, _, _ = load_checkpoint(args.checkpoint)
    examples, _ = load_dataset(args.data, args.split)
    prepared = prepare_examples(examples, config)
    ev = evaluate(params, config, prepared)
    emit(
        {
            "event": "eval",
            "split": args.split,
            "count": ev.count,
            "acc_at_05": ev.acc,
            "mean_iou": ev.mean_iou,
        }
    )
    return 0


def cmd_flops(args) -> int:
    if args.preset:
        config = _PRESETS[args.preset]()
        if args.fs_layers is not None:
            config = dataclasses.replace(config, fs_layers=args.fs_layers)
    else:
        if args.fs_layers is None:
            args.fs_layers = (2, 3)
        config = _model_config_from_args(args, vocab_size=8)
    rows = ratio_table(
        config,
        list(args.rho_list),
        include_constant=args.include_constant,
        flops_factor=args.flops_factor,
    )
    emit(
        {
            "event": "flops-config",
            "image_size": config.image_size,
            "patch_size": config.patch_size,
            "embed_dim": config.embed_dim,
            "depth": config.depth,
            "fs_layers": list(config.fs_layers),
            "max_text_len": config.max_text_len,
            "flops_factor": args.flops_factor,
        }
    )
    for row in rows:
        emit(
            {
                "event": "flops",
                "rho": row["rho"],
                "ops": row["ops"],
                "ratio": round(row["ratio"], 6),
                "visual_tokens": row["visual_tokens"],
            }
        )
    return 0


def cmd_viz(args) -> int:
    params, config, _, _ = load_checkpoint(args.checkpoint)
    examples, _ = load_dataset(args.data, args.split)
    if not (0 <= args.index < len(examples)):
        raise DatasetError(
            f"index {args.index} outside split of {len(examples)} examples"
        )
    from .viz import render_prediction, render_stages

    ex = examples[args.index]
    rows = extract_patches(ex.image, config.patch_size).astype(config.dtype)
    pred_t, trace = model_forward(rows, ex.token_ids, params, config)
    pred = box_from_tensor(pred_t)
    os.makedirs(args.out, exist_ok=True)
    written = []
    boxes_path = os.path.join(args.out, f"{ex.id}-boxes.ppm")
    write_ppm(boxes_path, render_prediction(ex.image, pred, ex.bbox))
    written.append(boxes_path)
    for layer, img in render_stages(ex.image, trace, config.patch_size):
        path = os.path.join(args.out, f"{ex.id}-keep-block{layer}.ppm")
        write_ppm(path, img)
        written.append(path)
    emit(
        {
            "event": "viz",
            "id": ex.id,
            "text": ex.text,
            "predicted": [pred.cx, pred.cy, pred.w, pred.h],
            "reference": [ex.bbox.cx, ex.bbox.cy, ex.bbox.w, ex.bbox.h],
            "files": written,
        }
    )
    return 0


def cmd_grad_check(args) -> int:
    config = tiny_config(
        fs_layers=args.fs_layers if args.fs_layers is not None else (2,),
        rho=args.rho,
        seed=args.seed,
    )
    params = init_params(config)
    gen = Xoshiro256StarStar(derive_seed(args.seed, 99))
    # training starts the box readout at zero; the check must move it off
    # that point or every upstream gradient is identically zero and the
    # comparison there would be vacuous
    w3 = params.head3.weight
    w3.data[:] = 0.05 * normal_field(
        gen.next_u64(), w3.data.size
    ).reshape(w3.data.shape).astype(w3.data.dtype)
    side = config.image_size
    image = normal_field(gen.next_u64(), side * side * 3).reshape(side, side, 3)
    image = 0.5 + 0.2 * image
    np.clip(image, 0.0, 1.0, out=image)
    rows = extract_patches(image, config.patch_size).astype(config.dtype)
    token_ids = [1 + gen.below(config.vocab_size - 1) for _ in range(2)]
    gt = BBox(0.4, 0.55, 0.3, 0.25)
    weights = LossWeights(l1=config.lambda_l1, giou=config.lambda_giou)

    def objective(p):
        pred, _ = model_forward(rows, token_ids, params, config)
        target = ad.constant(
            [[gt.cx, gt.cy, gt.w, gt.h]], dtype=config.dtype
        )
        return grounding_loss(pred, target, weights)

    named = dict(params.named())
    started = time.monotonic()
    worst, per_param = ad.finite_diff_check(objective, named, h=args.h)
    ranked = sorted(per_param.items(), key=lambda kv: -kv[1])[:5]
    emit(
        {
            "event": "grad-check",
            "parameters": sum(t.data.size for t in named.values()),
            "max_rel_error": worst,
            "threshold": args.threshold,
            "worst_parameters": [[n, v] for n, v in ranked],
            "seconds": round(time.monotonic() - started, 3),
            "passed": bool(worst < args.threshold),
        }
    )
    return 0 if worst < args.threshold else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groundsel",
        description="Grounding with language-guided visual token selection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--val", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--min-shapes", type=int, default=2)
    p.add_argument("--max-shapes", type=int, default=4)
    p.add_argument("--min-size", type=int, default=16)
    p.add_argument("--max-size", type=int, default=20)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train on a generated dataset")
    td = TrainConfig()
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="", help="checkpoint path to write")
    p.add_argument("--epochs", type=int, default=td.epochs)
    p.add_argument("--batch-size", type=int, default=td.batch_size)
    p.add_argument("--lr", type=float, default=td.lr)
    p.add_argument("--lr-decay-epoch", type=int, default=td.lr_decay_epoch)
    p.add_argument("--lr-decay-factor", type=float, default=td.lr_decay_factor)
    p.add_argument("--warmup-steps", type=int, default=td.warmup_steps)
    p.add_argument("--weight-decay", type=float, default=td.weight_decay)
    p.add_argument("--seed", type=int, default=td.seed)
    p.add_argument("--early-stop-acc", type=float, default=None)
    _add_model_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("flops", help="analytic compute cost table")
    p.add_argument("--preset", choices=sorted(_PRESETS), default=None)
    p.add_argument("--rho-list", type=_parse_rho_list, default=(1.0, 0.7))
    p.add_argument("--flops-factor", type=int, choices=(1, 2), default=1)
    p.add_argument("--include-constant", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    _add_model_args(p)
    p.set_defaults(fn=cmd_flops, fs_layers=None)

    p = sub.add_parser("viz", help="render pruning stages and boxes")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser(
        "grad-check",
        help="finite-difference check of the whole model at double precision",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rho", type=float, default=0.7)
    p.add_argument("--fs-layers", type=_parse_fs_layers, default=None)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(fn=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ad.ContractViolation, ad.ShapeMismatch, ad.NonFiniteValue,
            DatasetError, CheckpointError, OSError) as e:
        print(json.dumps({"event": "error", "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
