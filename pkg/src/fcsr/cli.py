"""Command-line entry point: ``fcsr <verb> [flags]``.

Exit codes: 0 success, 1 user error, 2 internal invariant failure,
3 gradient-check failure. Diagnostics go to standard error.
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, gradcheck
from .evaluation import evaluation_report, ground_truth
from .imaging import (augment, bicubic_resample, extract_patches, list_images, prepare_dataset, read_png,
                      rgb_to_ycbcr, write_png, ycbcr_to_rgb)
from .metrics import write_report
from .model import SRModel, as_scale, count_parameters, tiled_super_resolve
from .trainer import PROFILES, TrainingDivergedError, ablate, ablation_csv, finetune, parse_kv, resolve_settings, train

EXIT_USER, EXIT_INTERNAL, EXIT_GRADCHECK = 1, 2, 3
AXES = ("head", "unit_variant", "loss", "transfer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers -----------------------------------------------------------------------

def _overrides(args):
    kv = parse_kv(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    for key in ("scale", "beta", "sigma"):
        value = getattr(args, key, None)
        if value is not None:
            kv[key] = value
    return kv


def _settings(args, mode="scratch"):
    return resolve_settings(args.profile, _overrides(args), mode)


def _planes(root, dataset, scale):
    return [ground_truth(p, scale) for p in list_images(root, dataset)]


def _training_set(args, config, data):
    planes = _planes(args.root, args.dataset, config.scale)
    tags = None
    if data["augment"]:
        expanded = augment(planes)
        planes = [img for _, _, img in expanded]
        tags = [(i, t) for i, t, _ in expanded]
    ds = extract_patches(planes, config.scale, config.lr_patch, data["stride"], tags)
    if ds.skipped:
        print(f"skipped {ds.skipped} images smaller than one patch", file=sys.stderr)
    if len(ds) == 0:
        raise ValueError(f"no training patches from {args.root}/{args.dataset}")
    return ds


def _eval_set(args, config):
    if not args.eval_dataset:
        return None
    planes = _planes(args.root, args.eval_dataset, config.scale)
    return extract_patches(planes, config.scale, config.lr_patch, config.lr_patch)


def _write_training_outputs(out, model, history, loss_config):
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / "model.fcsr", model, getattr(model, "optimizer", None), loss_config)
    (out / "log.csv").write_text(history.to_csv())
    print(f"wrote {out / 'model.fcsr'} and {out / 'log.csv'}", file=sys.stderr)


# -- verbs ---------------------------------------------------------------------------

def cmd_prepare(args):
    written = prepare_dataset(args.root, args.dataset, as_scale(args.scale))
    print(f"prepared {len(written)} images under {written[0].parent}", file=sys.stderr)
    return 0


def cmd_train(args):
    config, schedule, loss, data = _settings(args)
    ds = _training_set(args, config, data)
    model = SRModel(config, seed=args.seed)
    model, history = train(model, ds, schedule, loss, _eval_set(args, config), seed=args.seed, label="train")
    _write_training_outputs(Path(args.out), model, history, loss)
    return 0


def cmd_finetune(args):
    source = checkpoint.load(args.model)
    _, schedule, loss, data = _settings(args, mode="finetune")
    config = replace(source.config, scale=as_scale(args.scale))
    ds = _training_set(args, config, data)
    model, history = finetune(source, config.scale, ds, schedule, loss, _eval_set(args, config), seed=args.seed)
    _write_training_outputs(Path(args.out), model, history, loss)
    return 0


def super_resolve_image(model, img, overlap=None):
    """Luminance through the network, chroma by bicubic upscaling; returns float pixels."""
    scale = model.config.scale
    if img.ndim == 2:
        return tiled_super_resolve(model, img.astype(np.float64), overlap, data_range=255.0)
    y, cb, cr = rgb_to_ycbcr(img)
    y_sr = tiled_super_resolve(model, y, overlap, data_range=255.0)
    cb_sr = bicubic_resample(cb, scale, antialias=False)
    cr_sr = bicubic_resample(cr, scale, antialias=False)
    return ycbcr_to_rgb(y_sr, cb_sr, cr_sr)


def cmd_sr(args):
    model = checkpoint.load(args.model)
    img = read_png(args.input)
    write_png(args.out, super_resolve_image(model, img, args.overlap))
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_eval(args):
    if args.method == "checkpoint":
        if not args.model:
            raise ValueError("--method checkpoint needs --model")
        model = checkpoint.load(args.model)
        scale = model.config.scale
        if args.scale is not None and as_scale(args.scale) != scale:
            raise ValueError(f"--scale {args.scale} does not match the checkpoint's scale {scale}")
    else:
        if args.scale is None:
            raise ValueError("--method bicubic needs --scale")
        model, scale = None, as_scale(args.scale)
    rows = evaluation_report(args.root, args.dataset, scale, model, args.overlap, args.method)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_report(rows, fh)
    else:
        write_report(rows, sys.stdout)
    return 0


def cmd_ablate(args):
    config, schedule, loss, data = _settings(args)
    ds = _training_set(args, config, data)
    eval_set = _eval_set(args, config) or ds
    axes = AXES if args.axis == "all" else (args.axis,)
    source = checkpoint.load(args.model) if args.model else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for axis in axes:
        if axis == "transfer" and source is None:
            if args.axis == "transfer":
                raise ValueError("the transfer axis needs --model, a checkpoint trained at another scale")
            print("skipping transfer axis: no --model given", file=sys.stderr)
            continue
        arms = ablate(axis, config, ds, schedule, loss, eval_set, seed=args.seed, source=source)
        path = out / f"ablation_{axis}.csv"
        path.write_text(ablation_csv(arms))
        print(f"wrote {path} ({len(arms)} arms)", file=sys.stderr)
    return 0


def cmd_gradcheck(args):
    results = gradcheck.run_suite(range(args.seeds), include_model=not args.skip_model)
    worst = {}
    for r in results:
        key = r.name.split(":")[0] if r.name.startswith("model") else r.name
        worst[key] = max(worst.get(key, 0.0), r.error)
    for name, err in worst.items():
        print(f"{'PASS' if err < gradcheck.TOLERANCE else 'FAIL'} {name} max_rel_err={err:.3e}")
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"gradcheck failure: {r.name} seed {r.seed} error {r.error:.3e}", file=sys.stderr)
    return EXIT_GRADCHECK if failed else 0


def cmd_inspect(args):
    data = Path(args.model).read_bytes()
    header, _ = checkpoint.read_header(data)
    model, optimizer, loss = checkpoint.checkpoint_load(data, with_extras=True)
    c = header["config"]
    print(f"format version: {header['version']}")
    print(f"flags: optimizer={'yes' if optimizer else 'no'} loss={'yes' if loss else 'no'}")
    for key, value in c.to_dict().items():
        print(f"{key}: {value}")
    if loss is not None:
        print(f"beta: {loss.beta}\nsigma: {loss.sigma}\neps: {loss.eps}")
    if optimizer is not None:
        print(f"optimizer: {optimizer.kind} ({len(optimizer.slots)} slots)")
    print(f"parameters: {model.parameter_count()} (closed form {count_parameters(c)})")
    for p in model.parameters():
        print(f"  {p.name} {'x'.join(map(str, p.value.shape))} {p.value.size}")
    for name, buf in model.buffers().items():
        print(f"  {name} {'x'.join(map(str, buf.shape))} {buf.size} (buffer)")
    return 0


# -- argument parsing ----------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="fcsr", description="Residual-network super-resolution with a fully connected head.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(p, data=True, training=False):
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        if data:
            p.add_argument("--root", default="data", help="dataset root holding <dataset>/HR/*.png (default data)")
            p.add_argument("--dataset", required=True, help="dataset folder name under --root")
        if training:
            p.add_argument("--profile", choices=sorted(PROFILES), default="desk",
                           help="hyperparameter profile (default desk)")
            p.add_argument("--config", help="key = value file overriding profile settings")
            p.add_argument("--beta", type=float, help="edge-difference weight (default 0.1)")
            p.add_argument("--sigma", type=float, help="edge-operator Gaussian sigma (default 1.0)")
            p.add_argument("--eval-dataset", help="dataset folder used for per-epoch evaluation")

    p = sub.add_parser("prepare", help="write LR images and bicubic bases for one scale")
    common(p)
    p.add_argument("--scale", required=True, help="upscaling factor, e.g. 3 or 5/2")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train from scratch; writes model.fcsr and log.csv")
    common(p, training=True)
    p.add_argument("--scale", help="upscaling factor (default 3)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="retrain only the reconstruction head for a new scale")
    common(p, training=True)
    p.add_argument("--model", required=True, help="source checkpoint")
    p.add_argument("--scale", required=True, help="new upscaling factor")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sr", help="super-resolve one PNG")
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--input", required=True, help="input PNG (grey or RGB)")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--overlap", type=int, help="tile overlap in LR pixels (default lr_patch / 2)")
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("eval", help="PSNR/SSIM per image on the Y channel, as CSV")
    common(p)
    p.add_argument("--method", choices=("bicubic", "checkpoint"), default="bicubic", help="default bicubic")
    p.add_argument("--model", help="checkpoint for --method checkpoint")
    p.add_argument("--scale", help="upscaling factor (taken from the checkpoint when omitted)")
    p.add_argument("--overlap", type=int, help="tile overlap in LR pixels (default lr_patch / 2)")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train one model per arm of an ablation axis")
    common(p, training=True)
    p.add_argument("--axis", choices=AXES + ("all",), default="all", help="default all")
    p.add_argument("--scale", help="upscaling factor (default 3)")
    p.add_argument("--model", help="source checkpoint at another scale, for the transfer axis")
    p.add_argument("--out", required=True, help="output directory for ablation_<axis>.csv")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seeds", type=int, default=20, help="seeds per check (default 20)")
    p.add_argument("--skip-model", action="store_true", help="skip the end-to-end model checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="print checkpoint header, config and parameter counts")
    p.add_argument("--model", required=True, help="checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDivergedError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except (UsageError, ValueError, FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except Exception as e:  # noqa: BLE001 - anything else is a bug or broken invariant
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
