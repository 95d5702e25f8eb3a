"""Command-line entry point: ``mfdsnet <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import datakit, evalkit
from .checkpoint import load_checkpoint, save_checkpoint, supervision_from_meta
from .config import load_config
from .network import forward_full, fold_model
from .training import LAST_NAME, NonFiniteLossError, build_model, iter_batches, to_tensors, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
FOLD_TOLERANCE = 1e-4
FOLD_PROBES = 10


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _common(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="dataset root")
    p.add_argument("--out", help="output path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--threshold", type=float)


def build_parser():
    parser = _Parser(prog="mfdsnet", description="MFDS-Net change detection toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("print-config", help="dump every config key with its value")
    _common(p)

    p = sub.add_parser("generate", help="write a synthetic dataset in the A/B/label layout")
    _common(p)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--split", default="train")
    p.add_argument("--size", type=int)

    p = sub.add_parser("train", help="train and keep the best checkpoint")
    _common(p)
    p.add_argument("--resume", help="checkpoint to resume from (defaults to <out>/last.safetensors)",
                   nargs="?", const="")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--overlay-dir")
    p.add_argument("--manifest", help="file listing the sample filenames to use")

    p = sub.add_parser("fold", help="fold DO-Conv kernels and verify the result")
    _common(p)
    p.add_argument("checkpoint_in")
    p.add_argument("checkpoint_out")
    p.add_argument("--probe-size", type=int, default=256)

    p = sub.add_parser("predict", help="predict a change mask for one image pair")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    return parser


def _config(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    flag_map = {"seed": ["train.seed", "synth.seed"], "epochs": ["train.epochs"],
                "lr": ["train.learning_rate"], "threshold": ["eval.threshold"],
                "data": ["paths.data"], "out": ["paths.out"]}
    for flag, keys in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            for k in keys:
                overrides[k] = value
    if getattr(args, "size", None) is not None:
        overrides["synth.size"] = args.size
    try:
        return load_config(args.config, overrides)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_print_config(args, cfg):
    sys.stdout.write(cfg.to_text())
    return EXIT_OK


def cmd_generate(args, cfg):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    samples = datakit.generate(cfg.synth, args.count)
    try:
        datakit.write_dataset(samples, cfg.paths.out, args.split)
    except OSError as exc:
        print(f"error: cannot write dataset to {cfg.paths.out}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    changed = sum(int(s.gt.sum()) for s in samples)
    total = sum(s.gt.size for s in samples)
    print(f"count={len(samples)} change_fraction={changed / total:.6f} "
          f"out={Path(cfg.paths.out) / args.split}")
    return EXIT_OK


def _split_or_none(root, split):
    d = Path(root) / split
    return datakit.load_dataset(root, split) if (d / "A").is_dir() else None


def cmd_train(args, cfg):
    train_set = datakit.load_dataset(cfg.paths.data, cfg.paths.split_train)
    val_set = _split_or_none(cfg.paths.data, cfg.paths.split_val)
    out = Path(cfg.paths.out)
    model, optimizer, start_epoch, best = None, None, 0, -1.0
    if args.resume is not None:
        path = args.resume or str(out / LAST_NAME)
        if not os.path.exists(path):
            print(f"error: checkpoint {path} not found", file=sys.stderr)
            return EXIT_RUNTIME
        model, meta, optimizer = load_checkpoint(
            path, lambda params: torch.optim.Adam(params, lr=cfg.train.learning_rate))
        start_epoch = int(meta["epoch"]) + 1
        best = meta.get("best_f1") if meta.get("best_f1") is not None else -1.0
    else:
        model = build_model(cfg.model, cfg.train.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    try:
        _, report = train(train_set, cfg.train, model, val_dataset=val_set, out_dir=out,
                          threshold=cfg.eval.threshold, start_epoch=start_epoch,
                          optimizer=optimizer, best_f1=best)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"epochs={len(report.epoch_losses)} steps={report.steps} best_f1={report.best_f1:.6f} "
          f"best_epoch={report.best_epoch}")
    return EXIT_OK


def cmd_eval(args, cfg):
    if not os.path.exists(args.checkpoint):
        print(f"error: checkpoint {args.checkpoint} not found", file=sys.stderr)
        return EXIT_RUNTIME
    model, _, _ = load_checkpoint(args.checkpoint)
    split = args.split if args.split is not None else cfg.paths.split_test
    dataset = datakit.load_dataset(cfg.paths.data, split, args.manifest)
    overlay_dir = Path(args.overlay_dir) if args.overlay_dir else None
    if overlay_dir is not None:
        overlay_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    counts = evalkit.ConfusionCounts()
    with torch.no_grad():
        for batch in iter_batches(dataset, cfg.eval.batch_size):
            a, b, _ = to_tensors(batch)
            pred = evalkit.binarize(forward_full(a, b, model).final_logits[:, 0], cfg.eval.threshold)
            for p, s in zip(pred, batch):
                counts = evalkit.accumulate(p, s.gt, counts)
                if overlay_dir is not None:
                    Image.fromarray(evalkit.render_overlay(p, s.gt)).save(overlay_dir / f"{s.id}.png")
    report = evalkit.compute_metrics(counts)
    print(evalkit.format_table(report))
    if args.out:
        record = dict(report.as_dict(), checkpoint=str(args.checkpoint), split=split, **vars(counts))
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "a") as fh:
            fh.write(json.dumps(record) + "\n")
    return EXIT_OK


def fold_deviation(model, folded, probe_size=256, probes=FOLD_PROBES, seed=0):
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    model.eval()
    folded.eval()
    with torch.no_grad():
        for _ in range(probes):
            a = torch.rand(1, 3, probe_size, probe_size, generator=gen)
            b = torch.rand(1, 3, probe_size, probe_size, generator=gen)
            ref = forward_full(a, b, model).final_logits
            got = forward_full(a, b, folded).final_logits
            worst = max(worst, float((ref - got).abs().max()))
    return worst


def cmd_fold(args, cfg):
    if not os.path.exists(args.checkpoint_in):
        print(f"error: checkpoint {args.checkpoint_in} not found", file=sys.stderr)
        return EXIT_RUNTIME
    model, meta, _ = load_checkpoint(args.checkpoint_in)
    folded, _, _ = load_checkpoint(args.checkpoint_in)
    fold_model(folded)
    dev = fold_deviation(model, folded, args.probe_size)
    print(f"max_deviation={dev:.3e}")
    if not dev <= FOLD_TOLERANCE:
        print(f"error: fold verification failed (deviation {dev:.3e} > {FOLD_TOLERANCE})", file=sys.stderr)
        return EXIT_RUNTIME
    save_checkpoint(args.checkpoint_out, folded, supervision_from_meta(meta),
                    epoch=meta.get("epoch", 0), best_f1=meta.get("best_f1"))
    return EXIT_OK


def _read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def cmd_predict(args, cfg):
    if not os.path.exists(args.checkpoint):
        print(f"error: checkpoint {args.checkpoint} not found", file=sys.stderr)
        return EXIT_RUNTIME
    a, b = _read_image(args.image_a), _read_image(args.image_b)
    if a.shape != b.shape:
        print(f"error: image sizes differ: {a.shape[:2]} vs {b.shape[:2]}", file=sys.stderr)
        return EXIT_RUNTIME
    model, _, _ = load_checkpoint(args.checkpoint)
    h, w = a.shape[:2]
    if h % model.min_divisor or w % model.min_divisor:
        print(f"error: image size {h}x{w} must be divisible by {model.min_divisor}", file=sys.stderr)
        return EXIT_RUNTIME
    sample = datakit.SamplePair(a, b, np.zeros((h, w), dtype=np.uint8), "predict")
    ta, tb, _ = to_tensors([sample])
    model.eval()
    with torch.no_grad():
        logits = forward_full(ta, tb, model).final_logits[0, 0].double().numpy()
    prob = 1.0 / (1.0 + np.exp(-logits))
    heat = np.floor(prob * 255.0 + 0.5).astype(np.uint8)
    # mask from the quantized heatmap so the two files are always consistent
    mask = (heat.astype(np.float64) / 255.0 >= cfg.eval.threshold).astype(np.uint8)
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask * 255).save(out / "mask.png")
    Image.fromarray(heat).save(out / "heatmap.png")
    print(f"changed_pixels={int(mask.sum())} out={out}")
    return EXIT_OK


COMMANDS = {
    "print-config": cmd_print_config,
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "fold": cmd_fold,
    "predict": cmd_predict,
}


def _setup_runtime():
    threads = os.environ.get("MFDS_NUM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(True)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # --help or a usage error
        return exc.code
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        cfg = _config(args)
        _setup_runtime()
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
