"""Command-line entry point.

One binary, seven subcommands: synth-data, preprocess, pretrain, finetune,
eval, diagnose, ablate. Exit codes: 0 success, 1 usage error, 2 config
error, 3 runtime error. VAMAE_THREADS caps worker parallelism; when unset
the process pins numerical libraries to one thread for determinism, so heavy
imports happen lazily inside the handlers.
"""

import argparse
import os
import sys


def _configure_threads() -> int:
    raw = os.environ.get("VAMAE_THREADS")
    if raw is None:
        n = 1
    else:
        try:
            n = max(1, int(raw))
        except ValueError:
            n = 1
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    return n


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _add_config_args(p):
    p.add_argument("--config", help="config file (key = value lines)")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable; beats file values)",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="vamae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth-data", parents=[], help="generate a synthetic dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--no-priors", action="store_true", help="skip prior extraction")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("preprocess", help="extract priors for a directory of PNGs")
    _add_config_args(p)
    p.add_argument("--in", dest="in_dir", required=True, help="directory of input PNGs")
    p.add_argument("--out", help="output directory (default: alongside inputs)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", help="masked multi-target pretraining")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--dry-run", action="store_true", help="print the plan and exit")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="two-stage segmentation fine-tuning")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--encoder", required=True, help="pretraining checkpoint")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--labels", type=float, help="labeled fraction of the train split")
    p.add_argument("--dry-run", action="store_true", help="print the plan and exit")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="segmentation metrics on a dataset split")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="fine-tuned checkpoint")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="directory for the metrics table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="masked-patch information diagnostics")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", help="directory for the report")
    p.add_argument(
        "--alphas",
        default="0,0.4,0.6,0.8,1.0",
        help="comma-separated blend weights to compare",
    )
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("ablate", help="run an ablation suite end to end")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="suite output directory (cells cached here)")
    p.add_argument("--suite", default="alpha-sweep",
                   choices=("alpha-sweep", "target-ablation", "headline"))
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.set_defaults(func=cmd_ablate)

    return parser


def _resolve(args):
    from vamae.config import resolve_config

    return resolve_config(args.config, args.overrides)


def cmd_synth_data(args) -> int:
    from vamae.config import echo_config
    from vamae.data import write_dataset

    cfg = _resolve(args)
    split = write_dataset(
        args.out,
        cfg.synth_config(),
        split_ratios=cfg.split_ratios(),
        label_fraction=cfg.label_fraction(),
        frangi=cfg.frangi_params(),
        with_priors=not args.no_priors,
    )
    echo_config(cfg, args.out)
    print(
        f"wrote {cfg['data.n_images']} images to {args.out} "
        f"(train/val/test = {len(split.train)}/{len(split.val)}/{len(split.test)})"
    )
    return 0


def cmd_preprocess(args) -> int:
    from concurrent.futures import ThreadPoolExecutor
    from pathlib import Path

    from vamae.data import write_prior_files
    from vamae.image import read_png
    from vamae.priors import compute_triplet

    cfg = _resolve(args)
    params = cfg.frangi_params()
    in_dir = Path(args.in_dir)
    if not in_dir.is_dir():
        raise FileNotFoundError(f"input directory not found: {in_dir}")
    out_dir = Path(args.out) if args.out else in_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    skip_suffixes = ("_V", "_Vbin", "_S")
    paths = sorted(
        p for p in in_dir.glob("*.png") if not p.stem.endswith(skip_suffixes)
    )

    def work(path):
        triplet = compute_triplet(read_png(path), params)
        write_prior_files(out_dir, path.stem, triplet)
        return path.stem

    n_threads = _configure_threads()
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            done = list(pool.map(work, paths))
    else:
        done = [work(p) for p in paths]
    print(f"extracted priors for {len(done)} images into {out_dir}")
    return 0


def _print_plan(cfg, extra=None):
    pre = cfg.pretrain_config()
    model = cfg.model_config()
    stages = ", ".join(
        f"{s}-{e}:{r:.0%}" for s, e, r in pre.resolved_curriculum().stages
    )
    print(f"model: image {model.image_size}, patch {model.patch_size}, "
          f"encoder {model.encoder_depth}x{model.encoder_dim}/{model.encoder_heads}h, "
          f"decoder {model.decoder_depth}x{model.decoder_dim}/{model.decoder_heads}h")
    print(f"pretrain: {pre.epochs} epochs, batch {pre.batch_size}, "
          f"peak lr {pre.peak_lr:g}, curriculum [{stages}], alpha {pre.alpha}")
    for line in extra or []:
        print(line)


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    if args.dry_run:
        _print_plan(cfg)
        return 0

    from vamae.config import echo_config
    from vamae.data import load_dataset
    from vamae.model import VamaeModel
    from vamae.train import pretrain
    import numpy as np

    ds = load_dataset(args.data)
    ds.require_triplets()
    triplets = [ds.triplets[i] for i in ds.split.train]
    model = VamaeModel(cfg.model_config(), rng=np.random.default_rng((cfg.seed, 0)))
    echo_config(cfg, args.out)
    log = pretrain(triplets, model, cfg.pretrain_config(), out_dir=args.out)
    print(f"pretrained {len(triplets)} images for {len(log)} epochs; "
          f"final loss {log[-1]['loss']:.4f}; checkpoints in {args.out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _resolve(args)
    frac = args.labels if args.labels is not None else cfg.label_fraction()
    if not 0.0 < frac <= 1.0:
        from vamae.errors import ConfigError

        raise ConfigError(f"--labels must be in (0, 1], got {frac}")
    if args.dry_run:
        ft = cfg.finetune_config()
        _print_plan(cfg, [
            f"finetune: stage1 {ft.stage1_epochs} epochs @ {ft.stage1_lr:g} (frozen encoder), "
            f"stage2 {ft.stage2_epochs} epochs @ {ft.stage2_lr:g}, labels {frac:.0%}"
        ])
        return 0

    import numpy as np

    from vamae.autodiff import load_checkpoint
    from vamae.config import echo_config
    from vamae.data import load_dataset
    from vamae.model import ModelConfig, VamaeModel
    from vamae.seg import SegHead
    from vamae.train import finetune

    params, manifest = load_checkpoint(args.encoder)
    model = VamaeModel(
        ModelConfig.from_dict(manifest["model_config"]),
        rng=np.random.default_rng((cfg.seed, 0)),
    )
    model.load_state_dict(params)
    head = SegHead(model.config, rng=np.random.default_rng((cfg.seed, 1)))

    ds = load_dataset(args.data, need_priors=False)
    n_labeled = max(1, int(np.floor(frac * len(ds.split.train) + 0.5)))
    labeled_ids = ds.split.train[:n_labeled]
    train_pairs = [(ds.images[i], ds.labels[i]) for i in labeled_ids]
    val_pairs = [(ds.images[i], ds.labels[i]) for i in ds.split.val]
    echo_config(cfg, args.out)
    log = finetune(train_pairs, val_pairs, model, head, cfg.finetune_config(), out_dir=args.out)
    best = max((row["val_dice"] for row in log), default=float("nan"))
    print(f"fine-tuned on {len(train_pairs)} labeled images "
          f"({frac:.0%} of train); best val dice {best:.4f}; outputs in {args.out}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from vamae.autodiff import load_checkpoint
    from vamae.data import load_dataset
    from vamae.model import ModelConfig, VamaeModel
    from vamae.seg import SegHead, binarize_logits, evaluate_pair, seg_forward

    _resolve(args)  # validates config/overrides even though eval has no knobs
    params, manifest = load_checkpoint(args.checkpoint)
    model_config = ModelConfig.from_dict(manifest["model_config"])
    model = VamaeModel(model_config)
    head = SegHead(model_config)
    own = {p.name: p for p in model.parameters() + head.parameters()}
    for name, param in own.items():
        if name in params:
            param.data = np.asarray(params[name], dtype=param.data.dtype).copy()

    ds = load_dataset(args.data, need_priors=False)
    ids = getattr(ds.split, args.split)
    lines = ["id\tdice\tiou\tprecision\trecall"]
    rows = []
    from vamae.autodiff import no_grad

    with no_grad():
        for i in ids:
            if i not in ds.labels:
                continue
            logits = seg_forward(ds.images[i], model, head)
            m = evaluate_pair(binarize_logits(logits), ds.labels[i])
            rows.append(m)
            lines.append(f"{i}\t{m.dice:.4f}\t{m.iou:.4f}\t{m.precision:.4f}\t{m.recall:.4f}")
    if not rows:
        print("no labeled images in split", file=sys.stderr)
        return 3
    for metric in ("dice", "iou", "precision", "recall"):
        vals = [getattr(m, metric) for m in rows]
        lines.append(
            f"mean_{metric}\t{np.mean(vals):.4f} +- {np.std(vals):.4f}"
        )
    table = "\n".join(lines)
    print(table)
    if args.out:
        from pathlib import Path

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.split}.tsv").write_text(table + "\n")
    return 0


def cmd_diagnose(args) -> int:
    from pathlib import Path

    from vamae.data import load_dataset
    from vamae.stats import masking_diagnostic

    cfg = _resolve(args)
    alphas = tuple(float(a) for a in args.alphas.split(","))
    ds = load_dataset(args.data)
    ds.require_triplets()
    triplets = [ds.triplets[i] for i in ds.split.train]
    report = masking_diagnostic(
        triplets,
        alphas=alphas,
        patch_size=cfg["model.patch_size"],
        seed=cfg.seed,
    )
    print(report.to_table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "diagnostic.tsv").write_text(report.to_table() + "\n")
    return 0


def cmd_ablate(args) -> int:
    from vamae.config import echo_config
    from vamae.data import load_dataset
    from vamae.stats import run_ablation

    cfg = _resolve(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    ds = load_dataset(args.data)
    ds.require_triplets()
    echo_config(cfg, args.out)
    report = run_ablation(
        args.suite,
        ds,
        cfg.model_config(),
        cfg.pretrain_config(),
        cfg.finetune_config(),
        seeds,
        out_dir=args.out,
    )
    print(report.to_table())
    return 0


def main(argv=None) -> int:
    _configure_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except SystemExit:
        raise
    except Exception as err:
        from vamae.errors import ConfigError

        print(f"vamae: error: {err}", file=sys.stderr)
        return 2 if isinstance(err, ConfigError) else 3


if __name__ == "__main__":
    sys.exit(main())
