"""Argparse front end wiring the library into batch commands.

Every command that takes --seed is deterministic: rerunning with the same
inputs and seed produces bit-identical files. Exit codes: 0 success,
2 unreadable image, 3 missing trained model block, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..eigenbasis import global_eigenbasis_sgd, reconstruction_loss
from ..errors import ImageReadError, MissingBlockError, PcakdError
from ..eval_nst import evaluate_pair
from ..feature_stats import (
    FeatureMap,
    profiles_to_table,
    select_channel_lengths,
    variance_profile,
)
from ..nets import LEVELS, Model, TrainConfig, bench_autoencoder, forward_collect, init_model, train_autoencoder, train_block_pair
from ..stylize import StylizeConfig, stylize
from .container import load_eigenbases, load_model, save_eigenbases, save_model
from .corpus import (
    DEFAULT_CORPUS_COUNT,
    DEFAULT_CORPUS_SIZE,
    RandomCropBatcher,
    load_corpus,
    make_synthetic_corpus,
)
from .images import center_crop_div8, load_image, save_png
from .svgplot import save_svg, scatter_svg, variance_profile_svg

THREADS_ENV = "PCAKD_THREADS"


def _parse_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints: {text!r}") from exc


def _write_csv(path: str, header: list[str], rows) -> None:
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def _corpus_features(corpus, teacher: Model, crop: int, seed: int,
                     limit: int | None) -> list[list[FeatureMap]]:
    """One seeded random crop per image, encoded to per-layer FeatureMaps."""
    images = corpus.images[:limit] if limit else corpus.images
    rng = np.random.default_rng(seed)
    groups = []
    for img in images:
        top = int(rng.integers(0, img.shape[0] - crop + 1))
        left = int(rng.integers(0, img.shape[1] - crop + 1))
        patch = img[top:top + crop, left:left + crop].transpose(2, 0, 1)[None]
        taps = forward_collect(teacher.encoder_spec, teacher.encoder_weights,
                               patch)
        groups.append([
            FeatureMap(taps[l][0].reshape(taps[l].shape[1], -1), layer_id=l,
                       image_id=str(len(groups)))
            for l in range(1, LEVELS + 1)
        ])
    return groups


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_make_corpus(args) -> int:
    paths = make_synthetic_corpus(args.out, args.count, args.size, args.seed)
    print(f"wrote {len(paths)} synthetic images to {args.out}")
    return 0


def cmd_make_teacher(args) -> int:
    corpus = load_corpus(args.corpus, min_size=args.crop)
    model = init_model(args.channels, seed=args.seed)
    batcher = RandomCropBatcher(corpus.images, args.crop, args.batch, args.seed)
    losses = train_autoencoder(model, batcher.iter_batches(args.steps),
                               TrainConfig(args.steps, args.step_size))
    save_model(args.out, model)
    first = losses[0] if losses else float("nan")
    last = losses[-1] if losses else float("nan")
    print(f"teacher {args.channels}: {len(losses)} steps, "
          f"reconstruction loss {first:.4f} -> {last:.4f}")
    print(f"saved {args.out} ({model.param_count()} parameters)")
    return 0


def cmd_analyze(args) -> int:
    teacher = load_model(args.teacher)
    corpus = load_corpus(args.corpus, min_size=args.crop)
    groups = _corpus_features(corpus, teacher, args.crop, args.seed, args.limit)
    profiles = [variance_profile([g[li] for g in groups], layer_id=li + 1)
                for li in range(LEVELS)]
    picks = select_channel_lengths(profiles, args.threshold,
                                   first_layer_doubling=not args.no_double_first)
    table = profiles_to_table(profiles)
    tmp = f"{args.out}.tmp-{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(table)
    os.replace(tmp, args.out)
    if args.svg:
        save_svg(args.svg, variance_profile_svg(profiles, args.threshold,
                                                list(picks)))
    print(f"wrote {args.out}" + (f" and {args.svg}" if args.svg else ""))
    print(f"channel lengths at threshold {args.threshold}: "
          f"{','.join(str(p) for p in picks)}")
    return 0


def cmd_derive_basis(args) -> int:
    if (args.dims is None) == (not args.auto):
        print("derive-basis: pass exactly one of --dims or --auto",
              file=sys.stderr)
        return 1
    teacher = load_model(args.teacher)
    corpus = load_corpus(args.corpus, min_size=args.crop)
    if corpus.skipped:
        print(f"skipped {corpus.skipped} unusable corpus images",
              file=sys.stderr)
    groups = _corpus_features(corpus, teacher, args.crop, args.seed, args.limit)

    if args.auto:
        profiles = [variance_profile([g[li] for g in groups], layer_id=li + 1)
                    for li in range(LEVELS)]
        dims = select_channel_lengths(
            profiles, args.threshold,
            first_layer_doubling=not args.no_double_first)
    else:
        dims = args.dims
        if len(dims) != LEVELS:
            print(f"--dims needs {LEVELS} values, got {len(dims)}",
                  file=sys.stderr)
            return 1

    bases = global_eigenbasis_sgd(
        groups, dims, epochs=args.epochs, batch_size=args.batch,
        step_size=args.step_size, seed=args.seed,
        validate=not args.no_validate)
    save_eigenbases(args.out, bases)
    for basis in bases:
        per_pos = np.mean([
            reconstruction_loss(basis, g[basis.layer_id - 1])
            / g[basis.layer_id - 1].positions
            for g in groups
        ])
        print(f"layer {basis.layer_id}: dim {basis.rows} of {basis.cols}, "
              f"reconstruction loss per position {per_pos:.6f}")
    print(f"saved {args.out}")
    return 0


def cmd_distill(args) -> int:
    teacher = load_model(args.teacher)
    bases = load_eigenbases(args.bases)
    if len(bases) != LEVELS:
        print(f"expected {LEVELS} eigenbases, found {len(bases)}",
              file=sys.stderr)
        return 1
    channels = tuple(b.rows for b in bases)
    student = init_model(channels, seed=args.seed)
    student.meta.update({
        "teacher_channels": list(teacher.channels),
        "basis_file": os.path.basename(os.fspath(args.bases)),
        "steps_per_block": args.steps,
        "step_size": args.step_size,
        "batch_size": args.batch,
        "crop": args.crop,
        "seed": args.seed,
    })
    corpus = load_corpus(args.corpus, min_size=args.crop)
    batcher = RandomCropBatcher(corpus.images, args.crop, args.batch, args.seed)
    config = TrainConfig(args.steps, args.step_size)
    rows = []
    try:
        for level in range(1, LEVELS + 1):
            result = train_block_pair(student, teacher, bases[level - 1],
                                      level, batcher.iter_batches(args.steps),
                                      config)
            rows += [(level,) + r for r in result.trace]
            print(f"block {level}: {result.steps_run} steps, combined loss "
                  f"{result.initial_combined:.4f} -> {result.final_combined:.4f}")
    except PcakdError as exc:
        partial = f"{args.out}.partial"
        save_model(partial, student)
        print(f"distillation aborted: {exc}", file=sys.stderr)
        print(f"partial checkpoint saved to {partial}", file=sys.stderr)
        return 1
    save_model(args.out, student)
    if args.loss_csv:
        _write_csv(args.loss_csv,
                   ["block", "step", "enc_loss", "repro_loss", "image_loss",
                    "perceptual_loss"], rows)
    print(f"saved {args.out} ({student.param_count()} parameters, "
          f"channels {','.join(str(c) for c in channels)})")
    return 0


def cmd_stylize(args) -> int:
    content = center_crop_div8(load_image(args.content))
    style = center_crop_div8(load_image(args.style))
    model = load_model(args.model)
    bases = load_eigenbases(args.bases) if args.bases else None
    config = StylizeConfig(
        alpha=args.alpha,
        levels=args.levels,
        hfr=not args.no_hfr,
        match_mean=not args.no_mean,
    )
    out = stylize(content, style, model, eigenbases=bases, config=config)
    save_png(args.out, out)
    print(f"wrote {args.out}")
    return 0


def _eval_one(pair, model, style_mode):
    idx, content_path, style_path = pair
    content = center_crop_div8(load_image(content_path))
    style = center_crop_div8(load_image(style_path))
    h = min(content.shape[0], style.shape[0])
    w = min(content.shape[1], style.shape[1])
    h, w = (h // 8) * 8, (w // 8) * 8

    def center(img):
        top = (img.shape[0] - h) // 2
        left = (img.shape[1] - w) // 2
        return img[top:top + h, left:left + w]

    metrics = evaluate_pair(center(content), center(style), model, style_mode)
    return idx, metrics


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    pairs = []
    with open(args.manifest, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if [c.strip().lower() for c in row[:2]] == ["content", "style"]:
                continue
            if len(row) < 2:
                print(f"skipping malformed manifest row: {row}", file=sys.stderr)
                continue
            pairs.append((len(pairs), row[0].strip(), row[1].strip()))

    workers = 1 if args.deterministic else max(
        1, int(os.environ.get(THREADS_ENV, "1")))
    results: dict[int, dict] = {}
    failures: list[str] = []

    def run(pair):
        try:
            idx, metrics = _eval_one(pair, model, args.style_mode)
            results[idx] = metrics
        except ImageReadError as exc:
            failures.append(f"pair {pair[0]}: {exc}")

    if workers == 1:
        for pair in pairs:
            run(pair)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, pairs))

    for line in failures:
        print(f"skipping {line}", file=sys.stderr)
    if not results:
        print("no evaluable pairs in manifest", file=sys.stderr)
        return 2

    rows = [
        (idx, results[idx]["content_loss"], results[idx]["style_loss"],
         results[idx]["ssim"])
        for idx in sorted(results)
    ]
    _write_csv(args.out, ["pair_id", "content_loss", "style_loss", "ssim"], rows)
    if args.svg:
        save_svg(args.svg, scatter_svg(
            [r[1] for r in rows], [r[2] for r in rows],
            xlabel="content loss", ylabel="style loss",
            title="content vs style loss"))
    print(f"wrote {args.out} ({len(rows)} pairs, {len(failures)} skipped)")
    return 0


def cmd_bench(args) -> int:
    model = load_model(args.model)
    baseline = load_model(args.baseline) if args.baseline else None
    print("size,median_s_per_img" + (",baseline_s_per_img" if baseline else ""))
    for size in args.sizes:
        t = bench_autoencoder(model, size, args.reps)
        if baseline is not None:
            tb = bench_autoencoder(baseline, size, args.reps)
            print(f"{size},{t:.6f},{tb:.6f}")
        else:
            print(f"{size},{t:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcakd",
        description="PCA-distilled style-transfer toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="generate the synthetic desk corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=DEFAULT_CORPUS_COUNT)
    p.add_argument("--size", type=int, default=DEFAULT_CORPUS_SIZE)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("make-teacher",
                       help="train a desk-scale autoencoder teacher")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channels", type=_parse_ints, default=(8, 16, 32, 64))
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--crop", type=int, default=32)
    p.add_argument("--step-size", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_teacher)

    p = sub.add_parser("analyze",
                       help="explained-variance table and plot for a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True, help="output table path (CSV)")
    p.add_argument("--svg", default=None)
    p.add_argument("--threshold", type=float, default=0.85)
    p.add_argument("--no-double-first", action="store_true")
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("derive-basis",
                       help="fit image-independent eigenbases on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=_parse_ints, default=None,
                   help="comma-separated channel lengths per layer")
    p.add_argument("--auto", action="store_true",
                   help="pick dims from the explained-variance threshold")
    p.add_argument("--threshold", type=float, default=0.85)
    p.add_argument("--no-double-first", action="store_true")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--step-size", type=float, default=1e-3)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--no-validate", action="store_true",
                   help="skip the held-out closed-form comparison")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_derive_basis)

    p = sub.add_parser("distill",
                       help="train a student encoder/decoder pair by pair")
    p.add_argument("--corpus", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--bases", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=200,
                   help="training steps per block pair")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--step-size", type=float, default=1e-3)
    p.add_argument("--loss-csv", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("stylize", help="transfer style statistics onto an image")
    p.add_argument("--content", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--no-hfr", action="store_true")
    p.add_argument("--no-mean", action="store_true")
    p.add_argument("--levels", type=_parse_ints, default=(4, 3, 2, 1))
    p.add_argument("--bases", default=None,
                   help="optional eigenbasis file to cross-check dims")
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("evaluate", help="content/style/SSIM metrics for pairs")
    p.add_argument("--manifest", required=True,
                   help="CSV of content,style image paths")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--svg", default=None)
    p.add_argument("--style-mode", choices=("gram", "cov"), default="cov")
    p.add_argument("--deterministic", action="store_true",
                   help=f"force sequential evaluation (else {THREADS_ENV})")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="median seconds per image")
    p.add_argument("--model", required=True)
    p.add_argument("--sizes", type=_parse_ints, default=(256,))
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--baseline", default=None,
                   help="second model to time side by side")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ImageReadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MissingBlockError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except PcakdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
