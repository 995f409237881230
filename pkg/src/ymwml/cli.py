"""Command-line entry points: train, eval, gradcheck, gen-data, inspect-loss.

Config precedence is built-in default < config file < command-line flag, and
the fully resolved training config is echoed to <output_dir>/config.resolved.

Exit codes: 0 success, 1 usage/config error, 2 data or checkpoint error,
3 numeric failure, 4 gradient/curvature verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as datamod
from . import gradcheck as gradmod
from . import metrics as metmod
from .errors import ConfigError, DataError, FormatError, NonFiniteError, ShapeError
from .loss import (
    ClassWeights,
    WmeParams,
    compute_class_rates,
    loss_curve,
    wme_batch_loss,
    write_loss_curve_csv,
    write_loss_terms_csv,
)
from .model import (
    Model,
    ModelConfig,
    build_model,
    load_checkpoint,
    predict_classes,
    save_checkpoint,
)
from .optim import AdamState, PolySchedule, adam_step, poly_lr
from .tensor import Rng, Tape, Tensor, backward


@dataclass
class TrainConfig:
    dataset_root: str = None
    output_dir: str = None
    epochs: int = None  # deliberately no default; must be given
    batch_size: int = 8
    input_size: int = 256
    width: float = 1.0
    num_classes: int = 4
    lr0: float = 0.01
    power: float = 0.9
    weight_decay: float = 1e-4
    beta1: float = 2.0
    beta2: float = 1.0
    cr_scope: str = "dataset"
    reduction: str = "sum"
    seed: int = 0
    uniform_lambda: bool = False

    def validate(self) -> "TrainConfig":
        if not self.dataset_root:
            raise ConfigError("dataset_root is required")
        if not self.output_dir:
            raise ConfigError("output_dir is required")
        if self.epochs is None:
            raise ConfigError("epochs is required and has no default")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.input_size < 32 or self.input_size % 32 != 0:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if not (0.0 < self.width <= 1.0):
            raise ConfigError(f"width must lie in (0, 1], got {self.width}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.lr0 <= 0.0 or self.power <= 0.0:
            raise ConfigError(f"lr0 and power must be > 0, got {self.lr0}, {self.power}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.beta1 <= 0.0 or self.beta2 <= 0.0:
            raise ConfigError(f"beta1/beta2 must be > 0, got {self.beta1}, {self.beta2}")
        if self.cr_scope not in ("dataset", "batch"):
            raise ConfigError(f"cr_scope must be 'dataset' or 'batch', got '{self.cr_scope}'")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"reduction must be 'sum' or 'mean', got '{self.reduction}'")
        return self


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if ftype == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key '{key}': cannot parse {raw!r} as {ftype}") from None


def parse_config_file(path) -> dict:
    """'key = value' lines; '#' starts a comment; unknown keys are rejected."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file '{path}' not found")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
        out[key] = _coerce(key, val)
    return out


def resolve_train_config(args) -> TrainConfig:
    values = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    if args.config:
        values.update(parse_config_file(args.config))
    for key in _FIELD_TYPES:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            values[key] = flag_val
    return TrainConfig(**values).validate()


def write_resolved_config(cfg: TrainConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        for fld in dataclasses.fields(TrainConfig):
            v = getattr(cfg, fld.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            f.write(f"{fld.name} = {v}\n")


# --- training -----------------------------------------------------------------


def _mean_fg_dice_over(model: Model, samples, batch_size: int, num_classes: int) -> float:
    """Per-sample foreground Dice, averaged over the sample list."""
    scores = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([s.image for s in chunk])[:, None]
        preds = predict_classes(model, images)
        for s, pred in zip(chunk, preds):
            counts = metmod.confusion(pred, s.mask, num_classes)
            scores.append(metmod.mean_foreground_dice(counts, num_classes))
    return float(sum(scores) / len(scores))


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out_dir / "config.resolved")

    samples, split = datamod.load_dataset(cfg.dataset_root, cfg.num_classes)
    train = [datamod.resize_nearest(s, cfg.input_size) for s in datamod.select_samples(samples, split.train)]
    if not train:
        raise ConfigError("train split is empty")
    val = [datamod.resize_nearest(s, cfg.input_size) for s in datamod.select_samples(samples, split.val)]
    if not val:
        val = train  # no val split: validate on the training samples

    params = WmeParams(beta1=cfg.beta1, beta2=cfg.beta2).validate()
    if cfg.uniform_lambda:
        weights = ClassWeights.uniform(cfg.num_classes)
    else:
        weights = compute_class_rates([s.mask for s in train], cfg.num_classes)

    model = build_model(
        ModelConfig(
            num_classes=cfg.num_classes,
            input_size=cfg.input_size,
            width=cfg.width,
        ),
        Rng(cfg.seed),
    )
    adam = AdamState(model.params, weight_decay=cfg.weight_decay)
    batches_per_epoch = (len(train) + cfg.batch_size - 1) // cfg.batch_size
    sched = PolySchedule(max_iter=cfg.epochs * batches_per_epoch, lr0=cfg.lr0, power=cfg.power).validate()

    rows: list[str] = []
    iteration = 0
    best_dice = -1.0
    for epoch in range(cfg.epochs):
        for images, masks in datamod.batch_iter(train, cfg.batch_size, cfg.seed, epoch):
            if cfg.uniform_lambda:
                batch_weights = weights
            elif cfg.cr_scope == "batch":
                batch_weights = compute_class_rates(masks, cfg.num_classes)
            else:
                batch_weights = weights
            try:
                with Tape() as tape:
                    logits = model.forward(Tensor(images))
                    loss = wme_batch_loss(logits, masks, batch_weights, params, cfg.reduction)
                    backward(loss, tape)
                lr = poly_lr(iteration, sched)
                adam_step(model.params, adam, lr)
            except NonFiniteError as e:
                raise NonFiniteError(f"iteration {iteration}: {e}") from e
            value = loss.item()
            npix = images.shape[0] * cfg.input_size * cfg.input_size
            loss_sum = value if cfg.reduction == "sum" else value * npix
            per_pixel = value / npix if cfg.reduction == "sum" else value
            rows.append(f"{iteration},{lr:.12g},{loss_sum:.12g},{per_pixel:.12g},")
            iteration += 1
        val_dice = _mean_fg_dice_over(model, val, cfg.batch_size, cfg.num_classes)
        rows[-1] += f"{val_dice:.12g}"
        if val_dice > best_dice:
            best_dice = val_dice
            save_checkpoint(model.params, out_dir / "best.ckpt")
        print(f"epoch {epoch + 1}/{cfg.epochs}: loss/pixel {per_pixel:.6g}, val fg dice {val_dice:.6g}")
    save_checkpoint(model.params, out_dir / "last.ckpt")
    with open(out_dir / "training.csv", "w", encoding="utf-8") as f:
        f.write("iter,lr,loss_sum,loss_per_pixel,val_mean_fg_dice\n")
        f.write("\n".join(rows) + "\n")
    print(f"done: best val fg dice {best_dice:.6g} over {iteration} iterations")
    return 0


# --- evaluation ----------------------------------------------------------------


def _eval_model_config(args) -> tuple[ModelConfig, str]:
    """Model geometry for eval: config.resolved next to the checkpoint, then flags."""
    values = {"input_size": 256, "width": 1.0, "num_classes": 4, "dataset_root": None}
    resolved = Path(args.checkpoint).parent / "config.resolved"
    if resolved.is_file():
        stored = parse_config_file(resolved)
        for key in values:
            if key in stored:
                values[key] = stored[key]
    for key in ("input_size", "width", "num_classes", "dataset_root"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if not values["dataset_root"]:
        raise ConfigError("dataset_root is required (flag or config.resolved next to the checkpoint)")
    cfg = ModelConfig(
        num_classes=int(values["num_classes"]),
        input_size=int(values["input_size"]),
        width=float(values["width"]),
    )
    if not (0.0 < cfg.width <= 1.0) or cfg.input_size % 32 != 0:
        raise ConfigError(f"invalid eval geometry: width {cfg.width}, input_size {cfg.input_size}")
    return cfg, values["dataset_root"]


def cmd_eval(args) -> int:
    cfg, dataset_root = _eval_model_config(args)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = build_model(cfg, Rng(0))
    model.load_parameters(load_checkpoint(args.checkpoint))

    samples, split = datamod.load_dataset(dataset_root, cfg.num_classes)
    ids = split.ids(args.split)
    if not ids:
        raise ConfigError(f"split '{args.split}' is empty")
    chosen = [datamod.resize_nearest(s, cfg.input_size) for s in datamod.select_samples(samples, ids)]

    k = cfg.num_classes
    dice_sum = np.zeros(k)
    iou_sum = np.zeros(k)
    for start in range(0, len(chosen), args.batch_size):
        chunk = chosen[start : start + args.batch_size]
        images = np.stack([s.image for s in chunk])[:, None]
        preds = predict_classes(model, images)
        for s, pred in zip(chunk, preds):
            counts = metmod.confusion(pred, s.mask, k)
            for c in range(k):
                dice_sum[c] += metmod.dice(counts, c)
                iou_sum[c] += metmod.iou(counts, c)
            if args.dump_predictions:
                scale = 255 // (k - 1)
                datamod.write_pgm(np.rint(s.image * 255.0), out_dir / f"{s.id}_a_image.pgm")
                datamod.write_pgm(pred * scale, out_dir / f"{s.id}_b_pred.pgm")
                datamod.write_pgm(s.mask * scale, out_dir / f"{s.id}_c_gt.pgm")
    n = len(chosen)
    class_dice = list(dice_sum / n)
    class_iou = list(iou_sum / n)
    metmod.write_report_csv(class_dice, class_iou, out_dir / "report.csv")
    mean_fg = sum(class_dice[1:]) / (k - 1)
    print(f"evaluated {n} samples from '{args.split}': mean foreground dice {mean_fg:.6g}")
    return 0


# --- other subcommands ------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    results = gradmod.run_suite(args.scope)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 4 if failed else 0


def cmd_gen_data(args) -> int:
    fracs = (args.train_frac, args.val_frac, args.test_frac)
    split = datamod.generate_dataset(args.out, args.n, args.size, args.seed, fracs)
    print(
        f"wrote {args.n} phantoms of size {args.size} to {args.out} "
        f"(train {len(split.train)}, val {len(split.val)}, test {len(split.test)})"
    )
    return 0


def cmd_inspect_loss(args) -> int:
    params = WmeParams(beta1=args.beta1, beta2=args.beta2)
    if params.beta1 < 0.0 or params.beta2 < 0.0:
        raise ConfigError("beta1/beta2 must be >= 0 for inspection")
    try:
        cr = [float(tok) for tok in args.cr.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse class rates '{args.cr}'") from None
    weights = ClassWeights.from_rates(cr)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "lambda.csv", "w", encoding="utf-8") as f:
        f.write("class,cr,lambda\n")
        for c in range(weights.num_classes):
            f.write(f"{c},{weights.cr[c]:.12g},{weights.lam[c]:.12g}\n")
    for c in range(weights.num_classes):
        write_loss_curve_csv(loss_curve(weights, c, params), out_dir / f"curve_class{c}.csv")
        write_loss_terms_csv(weights, c, params, out_dir / f"terms_class{c}.csv")
    print(f"wrote weight table and {weights.num_classes} loss curves to {out_dir}")
    return 0


# --- parser and dispatch -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are exit code 1, not argparse's 2
        raise ConfigError(message)


def _add_train_flags(p: _Parser):
    p.add_argument("--config", help="config file of 'key = value' lines")
    p.add_argument("--dataset-root", dest="dataset_root")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--width", type=float)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--power", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--cr-scope", dest="cr_scope", choices=("dataset", "batch"))
    p.add_argument("--reduction", choices=("sum", "mean"))
    p.add_argument("--seed", type=int)
    p.add_argument(
        "--uniform-lambda",
        dest="uniform_lambda",
        action="store_const",
        const=True,
        help="ablation: pin every class weight to 1",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="ymwml", description="Train and evaluate the segmentation model.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a dataset directory")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset-root", dest="dataset_root")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--output-dir", dest="output_dir", required=True)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--width", type=float)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--dump-predictions", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference and curvature verification")
    p.add_argument("--scope", default="all", choices=("ops", "loss", "model", "all"))
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-frac", dest="train_frac", type=float, default=0.6)
    p.add_argument("--val-frac", dest="val_frac", type=float, default=0.1)
    p.add_argument("--test-frac", dest="test_frac", type=float, default=0.3)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("inspect-loss", help="dump weight table and per-class loss curves")
    p.add_argument("--beta1", type=float, default=2.0)
    p.add_argument("--beta2", type=float, default=1.0)
    p.add_argument("--cr", required=True, help="comma-separated class rates summing to 1")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_inspect_loss)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, FormatError, ShapeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NonFiniteError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


def entry():
    sys.exit(main(sys.argv[1:]))
