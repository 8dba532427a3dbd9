"""Command line entry point: ``mvdecor <stage> ...``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
Failures print one line ``mvdecor: <kind> error: <message>`` to stderr.
"""
import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, describe_defaults, load_config
from .data import CACHE_ENV, DataError, Dataset
from .mesh import MeshError, load_mesh, read_labels
from .nn import CheckpointError
from .render import RenderError
from .correspond import MatchError
from .losses import LossError
from .trainer import FewShotProtocol, NumericError

log = logging.getLogger("mvdecor")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _split_arg(text):
    try:
        parts = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("split needs three counts: unlabeled,labeled,test")
    return parts


def _config(args):
    overrides = []
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides.append((k.strip(), v.strip()))
    return load_config(args.config, overrides)


def _dataset(path, cache=None):
    return Dataset(path, cache=cache)


def cmd_synth(args):
    from .synth import SynthSpec, generate_dataset

    if sum(args.split) != args.n:
        raise ConfigError(f"split {args.split} does not sum to --n {args.n}")
    spec = SynthSpec(family=args.family, min_parts=args.min_parts, max_parts=args.max_parts,
                     texture_size=args.texture_size, seed=args.seed)
    manifest = generate_dataset(spec, args.n, args.split, args.seed, args.out)
    print(f"synth\t{args.out}\t{len(manifest['shapes'])} shapes")


def cmd_render(args):
    cfg = _config(args)
    ds = _dataset(args.input, args.out)
    n = ds.render(cfg, threads=args.threads, dump_matches_min=args.dump_matches)
    total = len(ds.manifest["shapes"])
    print(f"render\t{args.input}\t{n} rendered\t{total - n} cached")


def cmd_pretrain(args):
    from .plotting import loss_figure
    from .trainer import pretrain

    cfg = _config(args)
    ds = _dataset(args.data)
    _, curve = pretrain(ds, cfg, args.out)
    png = loss_figure(Path(args.out) / "loss.csv")
    last = curve[-1][1] if curve else float("nan")
    print(f"pretrain\t{Path(args.out) / 'embed.ckpt'}\titers={len(curve)}\tfinal_loss={last:.6f}\t{png}")


def cmd_finetune(args):
    from .plotting import loss_figure
    from .trainer import finetune

    cfg = _config(args)
    try:
        proto = FewShotProtocol.parse(args.protocol)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad --protocol {args.protocol!r}: {e}") from None
    if args.init is not None and not Path(args.init).exists():
        raise DataError(f"checkpoint {args.init} not found")
    ds = _dataset(args.data)
    _, _, rows = finetune(ds, cfg, proto, args.out, init=args.init)
    png = loss_figure(Path(args.out) / "loss.csv")
    last = rows[-1][1] if rows else float("nan")
    print(f"finetune\t{Path(args.out) / 'finetune.ckpt'}\titers={len(rows)}\tfinal_loss={last:.6f}\t{png}")


def cmd_infer(args):
    from .trainer import infer

    cfg = _config(args)
    if not Path(args.ckpt).exists():
        raise DataError(f"checkpoint {args.ckpt} not found")
    ds = _dataset(args.data)
    cov = infer(ds, cfg, args.ckpt, args.out, split=args.split)
    for sid, c in sorted(cov.items()):
        print(f"infer\t{sid}\tvisible={c:.4f}")


def _locate(root, sid, flat_name, nested):
    root = Path(root)
    for p in (root / flat_name, root / "shapes" / sid / nested):
        if p.exists():
            return p
    raise DataError(f"{sid}: no {flat_name} or shapes/{sid}/{nested} under {root}")


def _pred_miou(pred_dir, gt_root, mesh_root, n_classes):
    from .evalkit import ConfusionMatrix, accumulate, part_miou

    files = sorted(Path(pred_dir).glob("*.txt"))
    if not files:
        raise DataError(f"no predictions in {pred_dir}")
    cm = ConfusionMatrix(n_classes)
    for f in files:
        sid = f.stem
        mesh, gt = load_mesh(_locate(mesh_root, sid, f"{sid}.obj", "mesh.obj"),
                             _locate(gt_root, sid, f"{sid}.txt", "labels.txt"), n_classes)
        pred = read_labels(f, n_classes)
        accumulate(cm, gt, pred, mesh)
    return part_miou(cm)


def cmd_eval(args):
    from .evalkit import report
    from .plotting import report_figure

    n_classes = args.n_classes
    if n_classes is None:
        man = Path(args.gt) / "manifest.json"
        if not man.exists():
            raise ConfigError("--n-classes is required when --gt is not a dataset root")
        import json

        n_classes = int(json.loads(man.read_text())["n_classes"])
    mesh_root = args.mesh or args.gt
    scores = [_pred_miou(p, args.gt, mesh_root, n_classes) for p in args.pred]
    runs = {args.category: scores}
    text = report(runs, args.out)
    png = report_figure(runs, Path(args.out).with_suffix(".png"))
    sys.stdout.write(text)
    print(f"eval\t{args.out}\t{png}")


def cmd_pipeline(args):
    from .evalkit import report
    from .pipeline import run_pipeline

    cfg = _config(args)
    ds = _dataset(args.data)
    runs = run_pipeline(ds, cfg, args.out, threads=args.threads, scratch=not args.no_scratch,
                        v_values=args.v)
    sys.stdout.write(report(runs))
    print(f"pipeline\t{Path(args.out) / 'report.csv'}\t{Path(args.out) / 'report.png'}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p = argparse.ArgumentParser(
        prog="mvdecor", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Multi-view dense correspondence pre-training for few-shot 3D part segmentation.",
        epilog=f"config keys and defaults:\n{describe_defaults()}\n\n"
               f"environment:\n  {CACHE_ENV}  root directory for rendered view caches\n\n"
               "exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    s.add_argument("--family", default="composite-furniture",
                   choices=["composite-furniture", "articulated-figure"])
    s.add_argument("--n", type=int, default=48)
    s.add_argument("--split", type=_split_arg, default=(32, 8, 8))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-parts", type=int, default=4)
    s.add_argument("--max-parts", type=int, default=8)
    s.add_argument("--texture-size", type=int, default=256)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("render", parents=[common], help="render view caches and overlap tables")
    s.add_argument("--in", dest="input", required=True, help="dataset root")
    s.add_argument("--out", help=f"cache root (default: ${CACHE_ENV} or inside the dataset)")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--dump-matches", type=float, metavar="MIN_OVERLAP",
                   help="also write match files for pairs with overlap >= MIN_OVERLAP")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("pretrain", parents=[common], help="self-supervised pre-training")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="output directory (embed.ckpt, loss.csv)")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="few-shot fine-tuning")
    s.add_argument("--data", required=True)
    s.add_argument("--init", help="pre-trained embed.ckpt (omit for random init)")
    s.add_argument("--protocol", default="k=2,v=all,seed=0", help="k=K,v=V|all,seed=S")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("infer", parents=[common], help="segment every shape of a split")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True, help="finetune.ckpt")
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="part mIoU report for one or more prediction directories")
    s.add_argument("--pred", action="append", required=True, help="prediction dir (repeat per seed)")
    s.add_argument("--gt", required=True, help="dataset root or dir of <sid>.txt labels")
    s.add_argument("--mesh", help="dataset root or dir of <sid>.obj (default: --gt)")
    s.add_argument("--category", default="all")
    s.add_argument("--n-classes", type=int)
    s.add_argument("--out", required=True, help="report.csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pipeline", parents=[common], help="render, pretrain, few-shot runs, report")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--v", action="append", help="labeled views setting(s); default from config")
    s.add_argument("--no-scratch", action="store_true", help="skip the from-scratch baseline")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        print(f"mvdecor: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, LossError, FloatingPointError) as e:
        print(f"mvdecor: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, MeshError, CheckpointError, RenderError, MatchError, OSError) as e:
        print(f"mvdecor: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
