"""Command-line interface.

Subcommands cover the full workflow: synthesize phantom mammograms,
index patches over image/mask pairs, train either classifier head,
evaluate per-class error, run the full detection pipeline on an image,
and project penultimate features to 2-d. Report-producing commands write
matplotlib figures next to their delimited outputs.

Every subcommand accepts --config FILE holding key=value lines (hash
comments allowed); values supply defaults for that subcommand's options
and explicit command-line flags still win.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import analysis, dataset, figures, network, trainer
from .dataset import CLASS_ORDER
from .imaging import (
    PhantomConfig,
    generate_phantom,
    read_pgm,
    render_report_text,
    write_mask_pgm,
    write_pgm,
    write_ppm,
    write_truth_sidecar,
)
from .pipeline import (
    SKIP_FOREGROUND_FRACTION,
    render_overlay,
    run_pipeline,
)


def _bool_value(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def load_config_defaults(sub_parser: argparse.ArgumentParser, path) -> dict:
    """key=value lines converted through the matching option's type."""
    actions = {a.dest: a for a in sub_parser._actions
               if a.option_strings and a.dest not in ("help", "config")}
    overrides = {}
    with open(path, encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SystemExit(
                    f"{path}:{ln}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            dest = key.replace("-", "_")
            action = actions.get(dest)
            if action is None:
                raise SystemExit(f"{path}:{ln}: unknown option {key!r}")
            try:
                if action.nargs == 0:
                    overrides[dest] = _bool_value(value)
                elif action.type is not None:
                    overrides[dest] = action.type(value)
                else:
                    overrides[dest] = value
            except (TypeError, ValueError) as exc:
                raise SystemExit(f"{path}:{ln}: bad value for {key!r}: {exc}")
    return overrides


def _comma_ints(text: str) -> tuple:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}")


def _derived(base, suffix: str) -> str:
    base = Path(base)
    return str(base.with_name(base.stem + suffix))


# ------------------------------------------------------------- commands

def cmd_phantom(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = PhantomConfig(
        height=args.height, width=args.width, noise_sigma=args.noise_sigma,
        isolated_mcs=args.isolated_mcs, cluster_sizes=args.cluster_sizes,
        mc_margin=args.mc_margin)
    pairs = []
    preview = None
    for i in range(args.count):
        image, mask, truth = generate_phantom(config, args.seed + i)
        image_path = out / f"phantom_{i:03d}.pgm"
        mask_path = out / f"phantom_{i:03d}_mask.pgm"
        write_pgm(image, image_path)
        write_mask_pgm(mask, mask_path)
        write_truth_sidecar(truth, out / f"phantom_{i:03d}_truth.txt")
        pairs.append((str(image_path), str(mask_path)))
        if preview is None:
            preview = (image, mask)
    with open(out / "pairs.tsv", "w", encoding="utf-8", newline="") as fh:
        fh.writelines(f"{a}\t{b}\n" for a, b in pairs)
    if preview is not None:
        figures.phantom_preview_png(preview[0], preview[1],
                                    out / "preview.png")
    print(f"wrote {args.count} phantoms under {out} (pairs.tsv, preview.png)")
    return 0


def cmd_index(args) -> int:
    pairs = dataset.load_manifest(args.pairs)
    index = dataset.build_patch_index(
        pairs, args.patch_size, peripheral_cap_factor=args.peripheral_cap,
        background_cap_factor=args.background_cap, seed=args.seed)
    manifest_out = args.manifest_out or _derived(args.out, "_manifest.tsv")
    dataset.save_index(index, args.out, manifest_path=manifest_out)
    for cls in CLASS_ORDER:
        print(f"{cls.value}\t{len(index.records_by_class[cls])}")
    print(f"wrote {args.out} and {manifest_out}")
    return 0


def cmd_train(args) -> int:
    index = dataset.load_index(args.index, args.patch_size,
                               manifest_path=args.manifest)
    train_idx, val_idx = dataset.split_index_by_image(
        index, args.val_fraction, seed=args.seed)
    spec = network.NetworkSpec(
        patch_size=args.patch_size, conv_mode=args.conv_mode,
        conv_widths=args.conv_widths, dropout_keep=args.dropout_keep)
    config = trainer.TrainConfig(
        target=args.target, batch_size=args.batch_size,
        batches_per_epoch=args.batches_per_epoch, max_epochs=args.max_epochs,
        learning_rate=args.learning_rate, plateau_window=args.plateau_window,
        plateau_epsilon=args.plateau_epsilon,
        early_stop_patience=args.patience,
        val_sample_size=args.val_sample_size, seed=args.seed)
    weights, log = trainer.train(spec, train_idx, val_idx, config)
    network.save_weights(weights, args.out)
    log_path = args.log_out or _derived(args.out, "_log.tsv")
    fig_path = args.fig_out or _derived(args.out, "_curves.png")
    log.write_tsv(log_path)
    figures.training_curves_png(log, fig_path)
    best = min(log.val_losses)
    print(f"trained {args.target} for {len(log)} epochs; "
          f"best validation loss {best:.5f}")
    print(f"wrote {args.out}, {log_path}, {fig_path}")
    return 0


def cmd_eval(args) -> int:
    weights = network.load_weights(args.weights)
    index = dataset.load_index(args.index, weights.spec.patch_size)
    table = trainer.evaluate_per_class(
        weights, index, args.target, seed=args.seed,
        per_class_cap=args.per_class_cap)
    text = table.render()
    prefix = args.out_prefix or f"eval_{args.target}"
    Path(f"{prefix}.txt").write_text(text, encoding="utf-8")
    figures.class_error_png(table, args.target, f"{prefix}.png")
    print(text, end="")
    print(f"wrote {prefix}.txt and {prefix}.png")
    return 0


def cmd_infer(args) -> int:
    image = read_pgm(args.image, pixel_spacing_mm=args.pixel_spacing)
    detector = network.load_weights(args.detector)
    segmentator = network.load_weights(args.segmentator)
    result = run_pipeline(image, detector, segmentator,
                          skip_threshold=args.skip_threshold,
                          min_cluster_count=args.min_cluster_count)
    prefix = Path(args.out_prefix)
    if str(prefix.parent) not in ("", "."):
        prefix.parent.mkdir(parents=True, exist_ok=True)
    text = render_report_text(result.clusters)
    Path(f"{prefix}_report.txt").write_text(text, encoding="utf-8")
    write_mask_pgm(result.segmentation.mask, f"{prefix}_mask.pgm")
    overlay = render_overlay(image, result.segmentation.mask, result.clusters)
    write_ppm(overlay, f"{prefix}_overlay.ppm")
    figures.inference_summary_png(image, result, f"{prefix}_summary.png")
    roi = result.roi_set
    print(text, end="")
    print(f"tiles classified {roi.tiles_evaluated}/{roi.tiles_total}, "
          f"{len(roi.origins)} kept; {result.forward_evaluations} network "
          f"evaluations in {result.seconds:.1f}s")
    print(f"wrote {prefix}_report.txt, {prefix}_mask.pgm, "
          f"{prefix}_overlay.ppm, {prefix}_summary.png")
    return 0


def cmd_tsne(args) -> int:
    weights = network.load_weights(args.weights)
    index = dataset.load_index(args.index, weights.spec.patch_size)
    embeddings = analysis.collect_embeddings(
        weights, index, args.target, cap=args.cap, seed=args.seed)
    points = analysis.tsne_project(embeddings, perplexity=args.perplexity,
                                   iterations=args.iterations, seed=args.seed)
    prefix = Path(args.out_prefix)
    if str(prefix.parent) not in ("", "."):
        prefix.parent.mkdir(parents=True, exist_ok=True)
    analysis.write_projection_tsv(points, embeddings, f"{prefix}.tsv")
    figures.tsne_scatter_png(points, embeddings, f"{prefix}.png")
    report = analysis.misclassification_report(
        embeddings, top_k=args.top_k, neighbor_k=args.neighbor_k)
    Path(f"{prefix}_misclassified.txt").write_text(
        report.render_text(embeddings), encoding="utf-8")
    print(f"projected {len(embeddings)} patches; "
          f"KL {points.initial_kl:.4f} -> {points.final_kl:.4f}")
    print(f"wrote {prefix}.tsv, {prefix}.png, {prefix}_misclassified.txt")
    return 0


# --------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="mcseg",
        description="Microcalcification detection and segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {}

    def add(name, help_text, func):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, metavar="FILE",
                       help="key=value lines providing defaults for this command")
        p.set_defaults(func=func)
        parsers[name] = p
        return p

    p = add("phantom", "Synthesize phantom mammograms with ground truth.",
            cmd_phantom)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=PhantomConfig.height)
    p.add_argument("--width", type=int, default=PhantomConfig.width)
    p.add_argument("--noise-sigma", type=float,
                   default=PhantomConfig.noise_sigma)
    p.add_argument("--isolated-mcs", type=int,
                   default=PhantomConfig.isolated_mcs)
    p.add_argument("--cluster-sizes", type=_comma_ints,
                   default=PhantomConfig.cluster_sizes,
                   help="comma-separated cluster member counts")
    p.add_argument("--mc-margin", type=int, default=PhantomConfig.mc_margin)

    p = add("index", "Index patch centers over image/mask pairs.", cmd_index)
    p.add_argument("--pairs", required=True,
                   help="TSV of image-path<TAB>mask-path lines")
    p.add_argument("--out", required=True, help="index TSV to write")
    p.add_argument("--manifest-out", default=None)
    p.add_argument("--patch-size", type=int, default=49)
    p.add_argument("--peripheral-cap", type=int, default=50,
                   help="peripheral records per center record")
    p.add_argument("--background-cap", type=int, default=200,
                   help="background records per center record")
    p.add_argument("--seed", type=int, default=0)

    p = add("train", "Train the detector or segmentator head.", cmd_train)
    p.add_argument("target", choices=dataset.TARGETS)
    p.add_argument("--index", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--log-out", default=None)
    p.add_argument("--fig-out", default=None)
    p.add_argument("--patch-size", type=int, default=49)
    p.add_argument("--conv-mode", choices=network.CONV_MODES, default="same")
    p.add_argument("--conv-widths", type=_comma_ints,
                   default=network.DEFAULT_CONV_WIDTHS)
    p.add_argument("--dropout-keep", type=float, default=0.5)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--batch-size", type=int,
                   default=trainer.TrainConfig.batch_size)
    p.add_argument("--batches-per-epoch", type=int,
                   default=trainer.TrainConfig.batches_per_epoch)
    p.add_argument("--max-epochs", type=int,
                   default=trainer.TrainConfig.max_epochs)
    p.add_argument("--learning-rate", type=float,
                   default=trainer.TrainConfig.learning_rate)
    p.add_argument("--plateau-window", type=int,
                   default=trainer.TrainConfig.plateau_window)
    p.add_argument("--plateau-epsilon", type=float,
                   default=trainer.TrainConfig.plateau_epsilon)
    p.add_argument("--patience", type=int,
                   default=trainer.TrainConfig.early_stop_patience)
    p.add_argument("--val-sample-size", type=int,
                   default=trainer.TrainConfig.val_sample_size)
    p.add_argument("--seed", type=int, default=0)

    p = add("eval", "Per-class error table for a trained head.", cmd_eval)
    p.add_argument("target", choices=dataset.TARGETS)
    p.add_argument("--index", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out-prefix", default=None)
    p.add_argument("--per-class-cap", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = add("infer", "Run the full pipeline on one image.", cmd_infer)
    p.add_argument("image", help="PGM image to analyze")
    p.add_argument("--detector", required=True, help="detector weight file")
    p.add_argument("--segmentator", required=True,
                   help="segmentator weight file")
    p.add_argument("--out-prefix", default="inference")
    p.add_argument("--skip-threshold", type=float,
                   default=SKIP_FOREGROUND_FRACTION,
                   help="minimum tile foreground fraction to classify")
    p.add_argument("--min-cluster-count", type=int, default=5)
    p.add_argument("--pixel-spacing", type=float, default=0.05,
                   help="pixel spacing in mm")

    p = add("tsne", "Project penultimate features to 2-d.", cmd_tsne)
    p.add_argument("target", choices=dataset.TARGETS)
    p.add_argument("--index", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out-prefix", default="tsne")
    p.add_argument("--cap", type=int, default=600,
                   help="patches to embed, split across classes")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--top-k", type=int, default=5,
                   help="misclassified rows reported per class")
    p.add_argument("--neighbor-k", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)

    return parser, parsers


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, parsers = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub_parser = parsers[args.command]
        sub_parser.set_defaults(**load_config_defaults(sub_parser, args.config))
        args = parser.parse_args(argv)  # explicit flags still override
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
