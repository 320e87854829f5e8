"""Command-line entry point: ``pcdreid <command> [flags]``.

Exit status is 0 on success, 1 when a library error is raised (its code is
printed on stderr) and 2 for usage errors. Every command accepts
``--config FILE``, a flat ``key=value`` file whose keys are flag names;
flags given on the command line take precedence.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from fractions import Fraction

import numpy as np

from . import evaluation as E
from . import gradcheck as GC
from . import model as M
from . import trainer as TR
from .data import AugmentConfig, augment, image_rng, read_ppm, scan_dataset, synth_dataset
from .data.io import atomic_write, encode_ppm
from .errors import ConfigError, ReIDError
from .losses import LossWeights

log = logging.getLogger("pcdreid")

PUBLISHED = "published setting"

_MODEL = M.PCDNetConfig()
_TRAIN = TR.TrainConfig()
_AUG = AugmentConfig()


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _Usage(f"{self.prog}: error: {message}")


class _Flags:
    """Registers options on a subparser and remembers them for config files."""

    def __init__(self, parser):
        self.parser = parser
        self.options = {}

    def add(self, flag, note=None, **kw):
        if "help" in kw and kw.get("default") is not None and kw.get("action") != "store_true":
            extra = f"default: {kw['default']}"
            if note:
                extra += f"; {note}"
            kw["help"] = f"{kw['help']} ({extra})"
        action = self.parser.add_argument(flag, **kw)
        key = flag.lstrip("-").replace("-", "_")
        self.options[key] = (flag, action.nargs == 0)
        return action


def _floats(text):
    try:
        return tuple(float(Fraction(v.strip())) for v in text.split(","))
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _clip(text):
    if text.lower() in ("none", "off", "0"):
        return None
    return float(text)


def _common(flags):
    flags.add("--seed", type=int, default=0, help="seed for every random draw")
    flags.parser.add_argument("--config", metavar="FILE",
                              help="flat key=value file; command-line flags win")
    flags.parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _model_flags(flags):
    m = _MODEL
    flags.add("--image-h", type=int, default=m.image_h, note=PUBLISHED, help="input height")
    flags.add("--image-w", type=int, default=m.image_w, note=PUBLISHED, help="input width")
    flags.add("--patch", type=int, default=m.patch, note=PUBLISHED, help="patch size")
    flags.add("--dim", type=int, default=m.embed_dim, note=PUBLISHED, help="embedding width")
    flags.add("--depth", type=int, default=m.depth, note=PUBLISHED, help="transformer blocks")
    flags.add("--heads", type=int, default=m.heads, note=PUBLISHED, help="attention heads")
    flags.add("--ta-kernel", type=int, default=m.ta_kernel, help="triplet-attention conv size")
    flags.add("--branch-weights", type=_floats, default="1/3,1/3,1/3",
              help="c,h,w branch fusion weights")
    flags.add("--mlp-ratio", type=float, default=m.mlp_ratio, help="MLP hidden / embedding width")


def _train_flags(flags):
    t = _TRAIN
    flags.add("--epochs", type=int, default=t.epochs, note=PUBLISHED, help="training epochs")
    flags.add("--lr0", type=float, default=t.lr0, note=PUBLISHED, help="initial learning rate")
    flags.add("--lr-min", type=float, default=t.lr_min, help="final learning rate of the cosine decay")
    flags.add("--optimizer", choices=("sgd", "adam"), default=t.optimizer, note=PUBLISHED,
              help="optimizer")
    flags.add("--momentum", type=float, default=t.sgd_momentum, help="SGD momentum")
    flags.add("--p", type=int, default=t.P, help="identities per batch")
    flags.add("--k", type=int, default=t.K, help="instances per identity (>= 2 for pairwise losses)")
    flags.add("--grad-clip", type=_clip, default=t.grad_clip,
              help="global gradient-norm clip, 'none' disables")
    w = LossWeights()
    flags.add("--w-ce", type=float, default=w.alpha, help="cross-entropy weight")
    flags.add("--w-triplet", type=float, default=w.beta, help="triplet weight")
    flags.add("--w-circle", type=float, default=w.gamma_w, help="circle weight")
    flags.add("--w-cosface", type=float, default=w.delta, help="cosface weight")
    flags.add("--smoothing", type=float, default=0.1, note=PUBLISHED, help="label smoothing")
    flags.add("--triplet-margin", type=float, default=0.3, help="triplet margin")
    flags.add("--circle-scale", type=float, default=64.0, help="circle scale")
    flags.add("--delta-p", type=float, default=0.75, help="circle positive optimum")
    flags.add("--delta-n", type=float, default=0.25, help="circle negative optimum")
    flags.add("--cosface-scale", type=float, default=30.0, help="cosface scale")
    flags.add("--cosface-margin", type=float, default=0.35, help="cosface margin")
    flags.add("--aug-p", type=float, default=_AUG.flip, note=PUBLISHED,
              help="probability of each augmentation op")


def _train_config(a):
    model = M.PCDNetConfig(image_h=a.image_h, image_w=a.image_w, patch=a.patch,
                           embed_dim=a.dim, depth=a.depth, heads=a.heads,
                           ta_kernel=a.ta_kernel, ta_branch_weights=a.branch_weights,
                           mlp_ratio=a.mlp_ratio)
    loss = dict(smoothing=a.smoothing, triplet_margin=a.triplet_margin,
                circle_scale=a.circle_scale, delta_p=a.delta_p, delta_n=a.delta_n,
                cosface_scale=a.cosface_scale, cosface_margin=a.cosface_margin)
    return TR.TrainConfig(
        epochs=a.epochs, lr0=a.lr0, lr_min=a.lr_min, optimizer=a.optimizer,
        sgd_momentum=a.momentum, P=a.p, K=a.k, seed=a.seed, grad_clip=a.grad_clip,
        weights=LossWeights(a.w_ce, a.w_triplet, a.w_circle, a.w_cosface),
        loss=loss, model=model, augment=AugmentConfig.uniform(a.aug_p))


# ---------------------------------------------------------------- commands

def cmd_synth(a):
    split = synth_dataset(a.seed, a.ids, a.per_id, a.cams, a.height, a.width, a.out)
    print(f"train {len(split.train)}  gallery {len(split.gallery)}  query {len(split.query)}")


def cmd_augment(a):
    cfg = AugmentConfig.uniform(a.p)
    images = [read_ppm(p) for p in a.inputs]
    counter = 0
    for path, img in zip(a.inputs, images):
        stem = os.path.splitext(os.path.basename(path))[0]
        for j in range(a.copies):
            out = augment(img, cfg, image_rng(a.seed, counter), pool=images)
            counter += 1
            atomic_write(os.path.join(a.out, f"{stem}_aug{j}.ppm"), encode_ppm(out))
    print(f"wrote {counter} images to {a.out}")


def cmd_train(a):
    config = _train_config(a)
    config.validate()
    split = scan_dataset(a.data)
    progress = (lambda row: log.info("epoch %d total %.6f", row["epoch"], row["total"]))
    ckpt, rows = TR.train(config, split, progress=progress)
    TR.save_checkpoint(ckpt, a.out)
    text = TR.format_loss_log(rows)
    if a.log:
        atomic_write(a.log, text.encode("utf-8"))
    else:
        sys.stdout.write(text)


def cmd_extract(a):
    ckpt = TR.load_checkpoint(a.ckpt)
    records = scan_dataset(a.data)[a.split]
    store = TR.extract_features(ckpt.params, ckpt.config.model, records, a.batch_size)
    E.write_features(a.out, store)
    print(f"{len(store)} x {store.features.shape[1]} features -> {a.out}")


def _protocol(a):
    return E.EvalProtocol(metric=a.metric, cross_camera_filter=not a.no_camera_filter)


def cmd_eval(a):
    query, gallery = E.read_features(a.query), E.read_features(a.gallery)
    report = E.evaluate(query, gallery, _protocol(a))
    text = report.to_text()
    if a.out:
        atomic_write(a.out, report.to_csv().encode("utf-8"))
        atomic_write(os.path.splitext(a.out)[0] + ".txt", text.encode("utf-8"))
    sys.stdout.write(text)


def cmd_retrieve(a):
    query, gallery = E.read_features(a.query), E.read_features(a.gallery)
    if not 0 <= a.index < len(query):
        raise ConfigError(f"query index {a.index} outside [0, {len(query)})")
    rows = E.retrieve_case(query.features[a.index], query.records[a.index], gallery,
                           a.top_k, _protocol(a))
    text = E.case_csv(rows)
    if a.out:
        atomic_write(a.out, text.encode("utf-8"))
    else:
        sys.stdout.write(text)


def cmd_gradcheck(a):
    results = GC.run_suite(a.seed, a.trials)
    worst = GC.summarize(results)
    lines = ["name,max_rel_error,status"]
    lines += [f"{k},{v:.3e},{'pass' if v < GC.TOLERANCE else 'FAIL'}" for k, v in worst.items()]
    text = "\n".join(lines) + "\n"
    if a.out:
        atomic_write(a.out, text.encode("utf-8"))
    sys.stdout.write(text)
    failed = [k for k, v in worst.items() if not v < GC.TOLERANCE]
    if failed:
        print(f"GRADCHECK_FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_explain(a):
    ckpt = TR.load_checkpoint(a.ckpt)
    cfg = ckpt.config.model
    img = TR.load_image(a.image, cfg.image_h, cfg.image_w)
    heat, degenerate = M.saliency_map(img, ckpt.params, cfg)
    if degenerate:
        log.warning("saliency gradients vanish everywhere; writing an all-zero map")
    csv = "\n".join(",".join(repr(float(v)) for v in row) for row in heat) + "\n"
    big = np.repeat(np.repeat(heat, cfg.patch, axis=0), cfg.patch, axis=1)
    atomic_write(a.out + ".csv", csv.encode("utf-8"))
    atomic_write(a.out + ".ppm", encode_ppm(np.stack([big] * 3)))
    print(f"{heat.shape[0]}x{heat.shape[1]} saliency -> {a.out}.csv, {a.out}.ppm")


# ---------------------------------------------------------------- parser

def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="pcdreid", description="Occlusion-aware person re-identification.",
                     formatter_class=fmt)
    subs = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    subs.required = True
    registry = {}

    def sub(name, helptext, fn):
        p = subs.add_parser(name, help=helptext, description=helptext)
        p.set_defaults(func=fn)
        flags = _Flags(p)
        _common(flags)
        registry[name] = flags
        return flags

    f = sub("synth", "write a synthetic Market1501-layout dataset", cmd_synth)
    f.add("--out", required=True, help="output root directory")
    f.add("--ids", type=int, default=8, help="identities")
    f.add("--per-id", type=int, default=6, help="images per identity")
    f.add("--cams", type=int, default=3, help="cameras")
    f.add("--height", type=int, default=32, help="image height")
    f.add("--width", type=int, default=16, help="image width")

    f = sub("augment", "write augmented copies of PPM images", cmd_augment)
    f.parser.add_argument("inputs", nargs="+", help="input .ppm files")
    f.add("--out", required=True, help="output directory")
    f.add("--p", type=float, default=_AUG.flip, note=PUBLISHED, help="probability of each op")
    f.add("--copies", type=int, default=1, help="augmented copies per input")

    f = sub("train", "train a model on a dataset root", cmd_train)
    f.add("--data", required=True, help="dataset root")
    f.add("--out", required=True, help="checkpoint path")
    f.add("--log", default=None, help="loss-log CSV path (stdout when omitted)")
    _train_flags(f)
    _model_flags(f)

    f = sub("extract", "write features for one split", cmd_extract)
    f.add("--ckpt", required=True, help="checkpoint path")
    f.add("--data", required=True, help="dataset root")
    f.add("--split", choices=("train", "gallery", "query"), default="query", help="which split")
    f.add("--out", required=True, help="feature file path")
    f.add("--batch-size", type=int, default=32, help="images per forward pass")

    for name, helptext, fn in (("eval", "score query features against a gallery", cmd_eval),
                               ("retrieve", "list the top gallery matches for one query",
                                cmd_retrieve)):
        f = sub(name, helptext, fn)
        f.add("--query", required=True, help="query feature file")
        f.add("--gallery", required=True, help="gallery feature file")
        f.add("--metric", choices=("cosine", "euclidean"), default="cosine", help="distance")
        f.add("--no-camera-filter", action="store_true",
              help="keep same-identity gallery images from the query camera")
        if name == "eval":
            f.add("--out", default=None, help="report CSV path; a .txt twin is written beside it")
        else:
            f.add("--index", type=int, default=0, help="query row")
            f.add("--top-k", type=int, default=10, help="rows to list")
            f.add("--out", default=None, help="CSV path (stdout when omitted)")

    f = sub("gradcheck", "finite-difference check of every op and loss", cmd_gradcheck)
    f.add("--trials", type=int, default=20, help="random draws per case")
    f.add("--out", default=None, help="CSV path")

    f = sub("explain", "export a gradient saliency map", cmd_explain)
    f.add("--ckpt", required=True, help="checkpoint path")
    f.add("--image", required=True, help="input .ppm")
    f.add("--out", required=True, help="output prefix for .csv and .ppm")
    return parser, registry


def read_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for n, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = val.strip()
    return out


def _config_tokens(values, flags, path):
    tokens = []
    for key, val in values.items():
        if key not in flags.options:
            raise ConfigError(f"{path}: unknown key {key!r}")
        flag, is_switch = flags.options[key]
        if is_switch:
            if val.lower() in ("1", "true", "yes", "on"):
                tokens.append(flag)
            elif val.lower() not in ("0", "false", "no", "off"):
                raise ConfigError(f"{path}: {key} expects true or false")
        else:
            tokens.append(f"{flag}={val}")
    return tokens


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, registry = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            values = read_config_file(args.config)
            head = argv.index(args.command)
            tokens = _config_tokens(values, registry[args.command], args.config)
            args = parser.parse_args(argv[:head + 1] + tokens + argv[head + 1:])
    except _Usage as exc:
        print(exc, file=sys.stderr)
        return 2
    except ReIDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except ReIDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0 if code is None else code


if __name__ == "__main__":
    sys.exit(main())
