"""Command-line entry point: ``dist-ssl <command> --config PATH [--seed N] [--out DIR]``.

The output directory resolves as ``--out``, then ``$DIST_OUT_DIR``, then
``run.out_dir`` from the config. Failures print one line of the form
``error: <CODE> <message>`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from dist_ssl.backend import load_model
from dist_ssl.clipset import (
    clipset_summary,
    decode_raw_array,
    generate_synthetic_sequence,
    load_clipset,
    oracle_from_metadata,
    save_clipset,
)
from dist_ssl.config import ExperimentConfig, load_config, resolve_out_dir
from dist_ssl.errors import ArtifactError, DistError
from dist_ssl.evaluation import (
    evaluate,
    oracle_window_labels,
    precision,
    pseudo_label_audit,
    timeline_predict,
    write_timeline,
)
from dist_ssl.fileio import atomic_write_text
from dist_ssl.pipeline import (
    VARIANTS,
    dump_report,
    load_run_data,
    load_stage,
    prepare_data,
    run_dist,
    run_stage1,
    run_stage2,
    seed_layout,
    train_teacher,
)
from dist_ssl.reliability import read_manifest

EXIT_ERROR = 1
EXIT_USAGE = 2

NEEDS_CONFIG = {"gen-data", "run", "stage1", "stage2", "supervised", "eval", "timeline"}


def _parse_phases(text: str) -> list[tuple[int, float]]:
    """``"0:3,1:3,2:3"`` -> [(0, 3.0), (1, 3.0), (2, 3.0)]."""
    phases = []
    for part in text.split(","):
        label, _, seconds = part.partition(":")
        try:
            phases.append((int(label), float(seconds)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad phase {part!r}, expected CLASS:SECONDS") from None
    return phases


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (TOML)")
    common.add_argument("--seed", type=int, help="run only this seed instead of the configured list")
    common.add_argument("--out", help="output directory (overrides $DIST_OUT_DIR and run.out_dir)")

    parser = argparse.ArgumentParser(prog="dist-ssl", description="Two-stage self-training with reliability ranking and a dual invariance filter.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("gen-data", parents=[common], help="generate and split a clip set, frames included")
    sub.add_parser("run", parents=[common], help="both stages, evaluation and report for every seed")
    sub.add_parser("stage1", parents=[common], help="teacher, scoring, selection, filter, stage-1 student")
    sub.add_parser("stage2", parents=[common], help="resume from stage-1 artifacts and train the final student")
    sub.add_parser("supervised", parents=[common], help="labeled-only baseline")

    p = sub.add_parser("eval", parents=[common], help="test metrics of a saved model")
    p.add_argument("--model", required=True, help="model file (.bin)")
    p.add_argument("--data", help="clip set directory with frames; default regenerates from the config")

    p = sub.add_parser("audit", parents=[common], help="quadrant counts of a manifest against the oracle file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--metadata", required=True, help="data/metadata.json of the same run")

    p = sub.add_parser("timeline", parents=[common], help="sliding-window inference over a long sequence")
    p.add_argument("--model", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--sequence", help="raw array file of shape (N, H, W)")
    group.add_argument("--phases", type=_parse_phases, help="render a synthetic sequence, e.g. 0:3,1:3,2:3")
    p.add_argument("--difficulty", type=float, default=0.0, help="noise level of a rendered sequence")
    return parser


def _setup_logging(level: str) -> None:
    logging.basicConfig(level=level.upper(), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _seeds(args, config: ExperimentConfig) -> list[int]:
    return [args.seed] if args.seed is not None else list(config.run.seeds)


def _print_json(obj) -> None:
    sys.stdout.write(dump_report(obj))


def cmd_gen_data(args, config: ExperimentConfig, out: Path) -> None:
    seed = _seeds(args, config)[0]
    data = prepare_data(config, seed)
    save_clipset(data, out, with_frames=True)
    print(clipset_summary(data)["text"])
    print(f"wrote {out}")


def cmd_run(args, config: ExperimentConfig, out: Path) -> None:
    report = run_dist(config.with_seeds(_seeds(args, config)), out)
    for name, m in report["mean"].items():
        print(f"{name:12s} accuracy {m['accuracy']:.4f}  macro_f1 {m['macro_f1']:.4f}")
    print(f"report: {out / 'report.json'}")


def cmd_stage1(args, config: ExperimentConfig, out: Path) -> None:
    for seed in _seeds(args, config):
        layout = seed_layout(out, seed).make()
        data = prepare_data(config, seed)
        save_clipset(data, layout.data_dir, with_frames=config.run.persist_frames)
        teacher = train_teacher(config, data, seed, layout)
        for variant in VARIANTS if config.ssl.ablation else ("dist",):
            s1 = run_stage1(config, data, seed, layout, variant, teacher)
            print(f"seed {seed} {variant} stage1: retained {s1.retained_count}, mixed set {s1.mixed_size}")


def cmd_stage2(args, config: ExperimentConfig, out: Path) -> None:
    for seed in _seeds(args, config):
        layout = seed_layout(out, seed)
        if not layout.marker("dist", 1).is_file():
            raise ArtifactError(f"stage1 artifacts missing: no {layout.marker('dist', 1)}")
        data = load_run_data(config, seed, layout)
        for variant in VARIANTS if config.ssl.ablation else ("dist",):
            s1 = load_stage(config, data, layout, variant, 1)
            s2 = run_stage2(config, data, seed, s1, layout)
            print(f"seed {seed} {variant} stage2: retained {s2.retained_count}, mixed set {s2.mixed_size}")


def cmd_supervised(args, config: ExperimentConfig, out: Path) -> None:
    report = {}
    for seed in _seeds(args, config):
        layout = seed_layout(out, seed).make()
        data = prepare_data(config, seed)
        teacher = train_teacher(config, data, seed, layout)
        report[str(seed)] = evaluate(teacher.model, data.subset("test"), config.sampling)
        print(f"seed {seed} supervised accuracy {report[str(seed)]['accuracy']:.4f}")
    atomic_write_text(out / "supervised.json", dump_report(report))


def cmd_eval(args, config: ExperimentConfig, out: Path) -> None:
    model = load_model(args.model)
    data = load_clipset(args.data) if args.data else prepare_data(config, _seeds(args, config)[0])
    _print_json(evaluate(model, data.subset("test"), config.sampling))


def cmd_audit(args, config: ExperimentConfig | None, out: Path | None) -> None:
    records = read_manifest(args.manifest)
    oracle = oracle_from_metadata(json.loads(Path(args.metadata).read_text()), purpose="audit")
    counts = pseudo_label_audit(records, oracle)
    counts["precision_retained"] = precision(counts["correct_retained"], counts["incorrect_retained"])
    _print_json(counts)


def cmd_timeline(args, config: ExperimentConfig, out: Path) -> None:
    model = load_model(args.model)
    fps = config.timeline_fps
    bands = None
    if args.phases:
        frames, bands = generate_synthetic_sequence(
            args.phases, config.data.num_classes, fps, config.data.frame_size,
            config.data.frames_per_clip, args.difficulty, seed=_seeds(args, config)[0],
        )
    else:
        frames = decode_raw_array(Path(args.sequence).read_bytes())
    timeline = timeline_predict(
        model, frames, fps, config.sampling, config.timeline.window_s,
        config.timeline.overlap_s, config.ssl.flush_last_window,
    )
    out.mkdir(parents=True, exist_ok=True)
    write_timeline(out / "timeline.tsv", timeline)
    from dist_ssl.plots import plot_timeline

    plot_timeline(out / "timeline.png", timeline, bands, config.data.num_classes)
    for w in timeline.windows:
        print(f"{w.start_s:7.3f} {w.end_s:7.3f} {w.label}")
    if bands:
        truth = oracle_window_labels(bands, timeline)
        agree = float(np.mean([p == t for p, t in zip(timeline.labels(), truth)]))
        print(f"window agreement with phase bands: {agree:.4f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "run": cmd_run,
    "stage1": cmd_stage1,
    "stage2": cmd_stage2,
    "supervised": cmd_supervised,
    "eval": cmd_eval,
    "audit": cmd_audit,
    "timeline": cmd_timeline,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in NEEDS_CONFIG and not args.config:
        parser.print_usage(sys.stderr)
        print(f"error: E_USAGE {args.command} requires --config PATH", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = load_config(args.config) if args.config else None
        out = None
        if config is not None:
            _setup_logging(config.run.log_level)
            out = Path(resolve_out_dir(args.out, config))
            config = config.with_out_dir(str(out))
        COMMANDS[args.command](args, config, out)
    except DistError as exc:
        print(f"error: {exc.code} {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: E_IO {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
