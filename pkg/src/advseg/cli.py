"""Command-line entry point: ``advseg <command> [flags]``.

Commands: synth, train, segment, eval, gradcheck, inspect.  Machine
output (JSON reports, summaries) goes to stdout or the named file; logs
and diagnostics go to stderr.  Settings resolve as flag, then config
file, then built-in default.

``ADVSEG_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("advseg")


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} not found")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise UsageError(f"{p}: not valid JSON ({err})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{p}: top level must be a JSON object")
    return data


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .data import DatasetConfig, make_dataset, save_dataset

    raw = _read_config(args.config)
    raw.update(_overrides(args, ("seed", "n_train", "n_test")))
    cfg = DatasetConfig.from_dict(raw)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise UsageError(f"cannot create {out}: {err.strerror}") from None
    ds = make_dataset(cfg)
    save_dataset(ds, out, {"config": {**raw, "phantom": cfg.phantom.to_dict(), "n_train": cfg.n_train,
                                      "n_test": cfg.n_test, "seed": cfg.seed}})
    log.info("wrote %d train + %d test phantoms to %s", len(ds.train), len(ds.test), out)
    return 0


TRAIN_FLAGS = ("seed", "epochs", "lr_seg", "lr_disc", "batch_baseline", "batch_adversarial_each",
               "patches_per_class_per_image", "checkpoint_every")


def cmd_train(args) -> int:
    from .data import load_dataset
    from .nets import build, summary
    from .training import Trainer, TrainingConfig, write_loss_csv
    from .checkpoint import load_checkpoint

    raw = _read_config(args.config)
    raw.update(_overrides(args, TRAIN_FLAGS))
    if args.adversarial is not None:
        raw["adversarial"] = args.adversarial
    config = TrainingConfig.from_dict(raw)
    ds = load_dataset(args.data)
    spec = build(args.net, ds.class_count)
    info = summary(spec)
    log.info("%s: %s trainable conv parameters, receptive field %d, %d->%d patches, C=%d", spec.name,
             f"{info['trainable_conv_params']:,}", info["receptive_field"], info["train_input"],
             info["train_output"], spec.class_count)
    trainer = Trainer(ds.train, spec, config)
    out = Path(args.out)
    if args.resume and (out / "manifest.json").exists():
        trainer.restore(load_checkpoint(out))
        log.info("resuming at step %d of %d", trainer.step, trainer.total_steps)
    log.info("%s training: %d steps of %d samples", "adversarial" if config.adversarial else "baseline",
             trainer.total_steps, config.samples_per_step)
    result = trainer.run(out, args.stop_after)
    csv_path = Path(args.loss_csv) if args.loss_csv else out.with_name(out.name + ".losses.csv")
    write_loss_csv(result.losses, csv_path)
    log.info("checkpoint %s, loss log %s", out, csv_path)
    return 0


def cmd_segment(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import export_label_ppm, import_pgm, normalize
    from .evaluation import segment_image

    ckpt = load_checkpoint(args.ckpt)
    image = normalize(import_pgm(args.inp).astype("float64"))
    labels = segment_image(ckpt, image)
    export_label_ppm(labels, args.out)
    log.info("segmented %s (%dx%d) -> %s", args.inp, *image.shape, args.out)
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .evaluation import build_report

    a, b = load_checkpoint(args.ckpt_a), load_checkpoint(args.ckpt_b)
    ds = load_dataset(args.data)
    for name, ck in (("--ckpt-a", a), ("--ckpt-b", b)):
        if ck.seg.spec.class_count != ds.class_count:
            raise UsageError(f"{name} was trained for {ck.seg.spec.class_count} classes, dataset has {ds.class_count}")
    report = build_report(a, b, ds.split(args.split), names=("a", "b"), connectivity=args.connectivity)
    text = report.to_json()
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    for name in ("a", "b"):
        m = report.models[name]
        log.info("%s: dice %.4f +- %.4f, components %.1f +- %.1f", name, m.dice_mean, m.dice_std,
                 m.components_mean, m.components_std)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, check_named

    worst = 0.0
    failed = []
    for seed in range(args.seed, args.seed + args.seeds):
        for r in check_named(args.net, seed):
            worst = max(worst, r.error)
            if not r.ok:
                failed.append((seed, r))
    for seed, r in failed:
        log.error("seed %d: %s relative error %.3g", seed, r.name, r.error)
    log.info("%s: %d seed(s), worst relative error %.3g (tolerance %g)", args.net, args.seeds, worst, TOLERANCE)
    return 1 if failed else 0


def cmd_inspect(args) -> int:
    from .checkpoint import load_checkpoint
    from .nets import build, summary

    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        out = {"networks": {k: {"spec": n.spec.to_dict(), **summary(n.spec)} for k, n in ckpt.networks.items()},
               "meta": {k: v for k, v in ckpt.meta.items() if k != "losses"}}
    else:
        spec = build(args.net, args.classes)
        out = {"spec": spec.to_dict(), **summary(spec)}
    sys.stdout.write(json.dumps(out, indent=1, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advseg", description="Segmentation networks with adversarial training.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic phantom dataset")
    s.add_argument("--out", required=True, help="dataset directory")
    s.add_argument("--config", help="dataset config JSON (phantom, n_train, n_test, seed)")
    s.add_argument("--seed", type=int, help="overrides config seed (default 0)")
    s.add_argument("--n-train", dest="n_train", type=int, help="overrides config (default 15)")
    s.add_argument("--n-test", dest="n_test", type=int, help="overrides config (default 10)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a segmentation network")
    t.add_argument("--data", required=True, help="dataset directory written by synth")
    t.add_argument("--net", required=True, choices=("fcn", "dilated"))
    t.add_argument("--adversarial", type=_bool, help="true/false; overrides config (default false)")
    t.add_argument("--config", help="training config JSON")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--loss-csv", help="loss log path (default <out>.losses.csv)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr-seg", dest="lr_seg", type=float)
    t.add_argument("--lr-disc", dest="lr_disc", type=float)
    t.add_argument("--batch-baseline", dest="batch_baseline", type=int)
    t.add_argument("--batch-adversarial-each", dest="batch_adversarial_each", type=int)
    t.add_argument("--patches", dest="patches_per_class_per_image", type=int,
                   help="patches per class per image and epoch")
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, help="steps between checkpoints")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out if present")
    t.add_argument("--stop-after", dest="stop_after", type=int, help="stop after this many more steps")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("segment", help="label a PGM image, write a colour PPM")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--in", dest="inp", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_segment)

    e = sub.add_parser("eval", help="compare two checkpoints on a dataset split")
    e.add_argument("--ckpt-a", dest="ckpt_a", required=True)
    e.add_argument("--ckpt-b", dest="ckpt_b", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--connectivity", type=int, default=4, choices=(4, 8))
    e.add_argument("--out", default="-", help="report JSON path, '-' for stdout")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of a tiny-width network")
    c.add_argument("--net", required=True, choices=("fcn", "dilated", "discriminator"))
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="print a checkpoint or architecture summary as JSON")
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--net", choices=("fcn", "dilated", "discriminator"))
    i.add_argument("--classes", type=int, default=7)
    i.set_defaults(func=cmd_inspect)
    return p


def _thread_limit():
    raw = os.environ.get("ADVSEG_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ADVSEG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"ADVSEG_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    # a handler of our own so logs reach the current stderr even when the
    # root logger is configured elsewhere
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    log.propagate = False
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except UsageError as err:
        sub.print_usage(sys.stderr)
        print(f"advseg {args.command}: error: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as err:
        print(f"advseg {args.command}: error: {err}", file=sys.stderr)
        return 1
    finally:
        log.removeHandler(handler)


if __name__ == "__main__":
    sys.exit(main())
