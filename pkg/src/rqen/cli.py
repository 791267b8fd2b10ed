"""Command-line entry point: gen-synth, train, eval, scores, gradcheck.

Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import functools
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint, pnm
from .autodiff import ShapeError
from .datakit import DataError, SynthConfig, load_dataset, read_manifest, read_truth, synth_generate, split_protocol
from .evalkit import (
    compare_aggregators,
    cmc_svg,
    repeated_trials,
    summary,
    write_comparison_csv,
    write_report_csv,
)
from .gradcheck import DEFAULT_STEP
from .model import BackboneConfig
from .regions import DEFAULT_LAYOUT, REGION_NAMES, fit_region_layout, read_landmarks
from .training import TrainConfig, TrainingDiverged, train, write_metrics

log = logging.getLogger("rqen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _ranks(text: str) -> tuple[int, ...]:
    try:
        ranks = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid rank list {text!r}") from None
    if not ranks or min(ranks) < 1:
        raise argparse.ArgumentTypeError(f"ranks must be positive integers, got {text!r}")
    return ranks


def _occlusion(text: str) -> tuple[str, float]:
    region, _, frac = text.partition(":")
    try:
        value = float(frac)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected REGION:FRACTION, got {text!r}") from None
    if region not in REGION_NAMES or not 0 <= value <= 1:
        raise argparse.ArgumentTypeError(f"expected REGION in u/m/l and FRACTION in [0, 1], got {text!r}")
    return region, value


def _regions(text: str) -> tuple[str, ...]:
    regions = tuple(text.replace(",", ""))
    if not regions or any(r not in REGION_NAMES for r in regions) or len(set(regions)) != len(regions):
        raise argparse.ArgumentTypeError(f"regions must be a non-empty subset of 'uml', got {text!r}")
    return regions


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().replace("_", "-")] = value.strip()
    return out


def build_parser() -> _Parser:
    p = _Parser(prog="rqen", description="Region-based quality weighted video re-identification")
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file; command-line flags win")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser = functools.partial(sub.add_parser, parents=[common])

    g = sub.add_parser("gen-synth", help="generate a synthetic occlusion dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--ids", type=int, default=10)
    g.add_argument("--cams", type=int, default=2)
    g.add_argument("--tracklets", type=int, default=1, help="tracklets per identity per camera")
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--height", type=int, default=16)
    g.add_argument("--width", type=int, default=8)
    g.add_argument("--occlude", type=_occlusion, default=None, metavar="REGION:FRACTION")
    g.add_argument("--occluder-intensity", type=float, default=0.8)
    g.add_argument("--noise", type=float, default=0.04)
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train on a dataset (training half of a seeded split)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="metrics CSV path (default: <out>.metrics.csv)")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--steps-per-epoch", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--frames-per-sample", type=int, default=8)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=0.0)
    t.add_argument("--margin", type=float, default=0.3)
    t.add_argument("--regions", type=_regions, default=REGION_NAMES)
    t.add_argument("--quality-fixed", action="store_true")
    t.add_argument("--feature-dim", type=int, default=64)
    t.add_argument("--mid-channels", type=int, default=8)
    t.add_argument("--hidden", type=int, default=32)
    t.add_argument("--no-l2", action="store_true", help="disable per-part L2 normalization")
    t.add_argument("--fit-layout", action="store_true", help="fit the region layout from landmarks.tsv")
    t.add_argument("--all-identities", action="store_true", help="train on every identity instead of the split's training half")
    t.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="CMC evaluation over repeated seeded splits")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--trials", type=int, default=10)
    e.add_argument("--ranks", type=_ranks, default=(1, 5, 10, 20))
    e.add_argument("--protocol", default="fifty-fifty-cross-camera", choices=("fifty-fifty-cross-camera", "scene-split"))
    e.add_argument("--probe-camera", default=None)
    e.add_argument("--compare-qfix", action="store_true")
    e.add_argument("--out", default=None, help="report CSV path (default: stdout summary only)")
    e.add_argument("--svg", default=None)
    e.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("scores", help="dump per-frame per-region quality scores")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True, help="scores CSV path")
    s.add_argument("--tracklet", action="append", default=None, help="restrict to these tracklet ids")
    s.add_argument("--heatmap", default=None, metavar="DIR", help="write one PPM strip per tracklet")
    s.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full training loss")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--step", type=float, default=DEFAULT_STEP)
    c.add_argument("--feature-dim", type=int, default=8)
    c.add_argument("--seed", type=int, default=3)
    return p


def _subparser(parser: _Parser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _parse(parser: _Parser, argv: list[str]) -> argparse.Namespace:
    """Parse argv, splicing ``--config`` values in before the explicit flags so the latter win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    sub = _subparser(parser, command)
    extra: list[str] = []
    for key, value in read_config_file(known.config).items():
        flag = f"--{key}"
        action = next((a for a in sub._actions if flag in a.option_strings), None)
        if action is None:
            raise UsageError(f"{known.config}: unknown key {key!r} for {command}")
        if action.nargs == 0:
            if value.lower() in ("1", "true", "yes", "on"):
                extra.append(flag)
        else:
            extra += [flag, value]
    idx = argv.index(command)
    return parser.parse_args(argv[: idx + 1] + extra + argv[idx + 1 :])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> int:
    region, frac = args.occlude if args.occlude else (None, 0.0)
    config = SynthConfig(
        identities=args.ids,
        cameras=args.cams,
        tracklets_per_camera=args.tracklets,
        frames=args.frames,
        height=args.height,
        width=args.width,
        occlude_region=region,
        occlude_fraction=frac,
        occluder_intensity=args.occluder_intensity,
        noise=args.noise,
        seed=args.seed,
    )
    manifest = synth_generate(config, args.out)
    print(f"wrote {len(manifest.tracklet_ids())} tracklets ({len(manifest.rows)} frames) to {manifest.path} [seed={args.seed}]")
    return EXIT_OK


def cmd_train(args) -> int:
    tracklets = load_dataset(args.data)
    if args.all_identities:
        train_set = tracklets
    else:
        train_set = split_protocol(tracklets, seed=args.seed).train
    h, w = tracklets[0].frames.shape[1:3]
    backbone = BackboneConfig(
        height=h,
        width=w,
        widths=(args.mid_channels, args.feature_dim),
        quality_hidden=args.hidden,
        l2_normalize=not args.no_l2,
    )
    layout = DEFAULT_LAYOUT
    if args.fit_layout:
        manifest = read_manifest(args.data)
        if manifest.landmarks is None:
            raise DataError(f"{manifest.root}: --fit-layout needs landmarks.tsv")
        layout = fit_region_layout(read_landmarks(manifest.landmarks))
    config = TrainConfig(
        margin=args.margin,
        frames_per_sample=args.frames_per_sample,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        steps_per_epoch=args.steps_per_epoch,
        seed=args.seed,
        regions=args.regions,
        quality_fixed=args.quality_fixed,
    )
    result = train(train_set, config, backbone, layout)
    checkpoint.save(result.model, args.out)
    metrics = args.metrics or f"{args.out}.metrics.csv"
    write_metrics(metrics, result.metrics)
    last = result.metrics[-1] if result.metrics else None
    tail = f", final loss {last['loss_total']:.4f}" if last else ""
    print(f"trained {len(result.metrics)} steps{tail}; checkpoint {args.out}, metrics {metrics} [seed={args.seed}]")
    return EXIT_OK


def cmd_eval(args) -> int:
    tracklets = load_dataset(args.data)
    model = checkpoint.load(args.model)
    kw = dict(protocol=args.protocol, trials=args.trials, seed=args.seed, ranks=args.ranks)
    if args.compare_qfix:
        comp = compare_aggregators(tracklets, model, **kw)
        print(f"seed={args.seed} trials={args.trials}")
        print(comp.format())
        if args.out:
            write_comparison_csv(args.out, comp)
        curves = {"quality": comp.quality, "uniform": comp.uniform}
    else:
        result = repeated_trials(tracklets, model, probe_camera=args.probe_camera, **kw)
        print(f"seed={args.seed}")
        print(summary(result))
        if args.out:
            write_report_csv(args.out, result)
        curves = {"RQEN": result}
    if args.svg:
        Path(args.svg).write_text(cmc_svg(curves), encoding="utf-8")
    return EXIT_OK


def score_color(v: float) -> np.ndarray:
    """Blue (0) to red (1) through green."""
    v = float(np.clip(v, 0.0, 1.0))
    if v < 0.5:
        return np.array([0.0, 2 * v, 1.0 - 2 * v])
    return np.array([2 * v - 1.0, 2.0 - 2 * v, 0.0])


def heatmap_strip(frames: np.ndarray, raw: np.ndarray, layout=DEFAULT_LAYOUT) -> np.ndarray:
    """Frames side by side on top, each frame's regions colored by raw score below."""
    n, h, w, _ = frames.shape
    top = np.concatenate(list(frames), axis=1)
    bottom = np.zeros_like(top)
    for i in range(n):
        for r, (lo, hi) in enumerate(layout.rows(h)):
            bottom[lo:hi, i * w : (i + 1) * w] = score_color(raw[i, r])
    return pnm.to_uint8(np.concatenate([top, bottom], axis=0))


def cmd_scores(args) -> int:
    tracklets = load_dataset(args.data)
    manifest = read_manifest(args.data)
    model = checkpoint.load(args.model)
    if args.tracklet:
        wanted = set(args.tracklet)
        tracklets = [t for t in tracklets if t.tracklet_id in wanted]
        if not tracklets:
            raise DataError(f"none of the requested tracklets found: {sorted(wanted)}")
    truth = read_truth(manifest.truth) if manifest.truth else None
    if args.heatmap:
        Path(args.heatmap).mkdir(parents=True, exist_ok=True)
    buckets: dict[str, dict[bool, list[float]]] = {r: {True: [], False: []} for r in REGION_NAMES}
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("tracklet_id", "frame_index", "frame_path", "mu_u", "mu_m", "mu_l", "raw_u", "raw_m", "raw_l"))
        for t in tracklets:
            out = model.run(t.frames)
            norm = np.stack([out.scores[r].value[0] for r in out.regions], axis=1)
            raw = model.raw_scores(t.frames)
            full = np.full((len(t), 3), np.nan)
            for j, r in enumerate(out.regions):
                full[:, REGION_NAMES.index(r)] = norm[:, j]
            for i in range(len(t)):
                path = t.frame_paths[i]
                w.writerow((t.tracklet_id, i, path, *(f"{v:.9f}" for v in full[i]), *(f"{v:.9f}" for v in raw[i])))
                if truth and path in truth:
                    for j, r in enumerate(REGION_NAMES):
                        if not np.isnan(full[i, j]):
                            buckets[r][truth[path][r]].append(full[i, j])
            if args.heatmap:
                pnm.write(Path(args.heatmap) / f"{t.tracklet_id}.ppm", heatmap_strip(t.frames, raw, model.layout))
    print(f"wrote scores for {len(tracklets)} tracklets to {args.out}")
    for r in REGION_NAMES:
        occ, clean = buckets[r][True], buckets[r][False]
        if occ and clean:
            print(f"region {r}: mean normalized score occluded {np.mean(occ):.5f} vs clean {np.mean(clean):.5f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .desk import desk_gradient_check

    report = desk_gradient_check(seed=args.seed, tolerance=args.tolerance, step=args.step, feature_dim=args.feature_dim)
    print(f"seed={args.seed}")
    print(report.format())
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "scores": cmd_scores,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError, ZeroDivisionError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, checkpoint.CheckpointError, ShapeError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
