"""Command line front end.

Subcommands: gen, render, match, dataset, train, eval, sweep-robustness,
sweep-layer. Exit code 0 only when every assertion configured for the run
passes.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .classifier import evaluate, load_model
from .features import DEFAULT_RATIO, DetectorParams, match_rate_matrix
from .geometry import InfillSpec, generate_infill, write_struts
from .harness import (
    ExperimentConfig,
    build_dataset,
    default_config,
    load_dataset,
    run_classify_experiment,
    run_layer_sweep,
    run_match_experiment,
    run_robustness_sweep,
    write_run_outputs,
)
from .imgio import read_pgm, write_pgm, write_png
from .render import TransmissionImage, load_scene, render_scene


def _load_config(args, kind: str) -> ExperimentConfig:
    if args.config:
        config = ExperimentConfig.load(args.config)
        if config.kind != kind:
            raise SystemExit(f"config kind {config.kind!r} does not match subcommand ({kind})")
    else:
        config = default_config(kind)
    if args.seed is not None:
        config.master_seed = args.seed
    return config


def _cmd_gen(args) -> int:
    spec = InfillSpec.load(args.spec)
    if args.seed is not None:
        spec = spec.with_seed(args.seed)
    geom = generate_infill(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_struts(geom, out)
    print(f"wrote {geom.strut_count()} struts over {len(geom.layers)} layers to {out}")
    return 0


def _cmd_render(args) -> int:
    doc = load_scene(args.scene)
    img = render_scene(doc)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.png or out.suffix.lower() == ".png":
        write_png(img, out, bits=8 if args.bits == 8 else 16)
    else:
        write_pgm(img, out, bits=args.bits)
    print(f"rendered {img.width}x{img.height} image to {out}")
    return 0


def _cmd_match(args) -> int:
    ref_paths = sorted(Path(args.refs).glob("*.pgm"))
    if len(ref_paths) < 2:
        raise SystemExit("need at least 2 reference images (*.pgm)")
    images = [read_pgm(p) for p in ref_paths]
    labels = [p.stem for p in ref_paths]
    detector = DetectorParams(threshold=args.threshold, octaves=args.octaves)
    matrix = match_rate_matrix(images, labels, detector, args.ratio)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "match.csv").write_text(matrix.to_csv())
    (out / "match.json").write_text(matrix.to_json() + "\n")
    rates = matrix.rates()
    for i, lab in enumerate(labels):
        row = " ".join(f"{rates[i, j]:.3f}" for j in range(len(labels)))
        print(f"{lab}: {row}")
    return 0


def _cmd_dataset(args) -> int:
    config = _load_config(args, "classify")
    out = Path(args.out)
    dataset = build_dataset(config, out)
    write_run_outputs(out, config, {})
    print(f"dataset: {len(dataset.labels)} images, "
          f"{len(dataset.train_idx)} train / {len(dataset.test_idx)} test -> {out}")
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args, "classify")
    summary = run_classify_experiment(config, args.out)
    print(json.dumps(summary, indent=2))
    return 0 if summary["all_passed"] else 1


def _cmd_eval(args) -> int:
    model = load_model(args.model)
    dataset = load_dataset(args.dataset)
    acc, confusion = evaluate(
        model, dataset.images[dataset.test_idx], dataset.labels[dataset.test_idx])
    report = {"test_accuracy": acc, "confusion": confusion.tolist()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps({"test_accuracy": acc}, indent=2))
    return 0


def _cmd_sweep_robustness(args) -> int:
    config = _load_config(args, "robustness-sweep")
    summary = run_robustness_sweep(config, args.out)
    print(json.dumps({k: summary[k] for k in
                      ("min_ncc_diffused", "diffusion_helps_everywhere", "all_passed")}, indent=2))
    return 0 if summary["all_passed"] else 1


def _cmd_sweep_layer(args) -> int:
    config = _load_config(args, "layer-sweep")
    summary = run_layer_sweep(config, args.out)
    print(json.dumps({k: summary[k] for k in
                      ("strictly_decreasing", "state_effect_below_thickness_step", "all_passed")},
                     indent=2))
    return 0 if summary["all_passed"] else 1


def _cmd_match_experiment(args) -> int:
    config = _load_config(args, "match-matrix")
    summary = run_match_experiment(config, args.out)
    print(json.dumps({"means": summary["means"], "diagonal_exact": summary["diagonal_exact"],
                      "ordering_ok": summary["ordering_ok"]}, indent=2))
    return 0 if summary["all_passed"] else 1


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="printid")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate geometry and export the strut table")
    p.add_argument("--spec", required=True, help="object spec JSON")
    p.add_argument("--seed", type=int, default=None, help="error seed override")
    p.add_argument("--out", required=True, help="output strut text file")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("render", help="render a JSON scene to PGM/PNG")
    p.add_argument("--scene", required=True, help="scene JSON (spec+optics+pose+image)")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--bits", type=int, choices=(8, 16), default=16)
    p.add_argument("--png", action="store_true", help="write PNG instead of PGM")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("match", help="match-rate matrix over a directory of PGM images")
    p.add_argument("--refs", required=True, help="directory of reference images")
    p.add_argument("--ratio", type=float, default=DEFAULT_RATIO)
    p.add_argument("--threshold", type=float, default=DetectorParams().threshold)
    p.add_argument("--octaves", type=int, default=DetectorParams().octaves)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("match-experiment", help="run the four-block match experiment")
    _add_common(p)
    p.set_defaults(func=_cmd_match_experiment)

    p = sub.add_parser("dataset", help="build and persist a pose-grid dataset")
    _add_common(p)
    p.set_defaults(func=_cmd_dataset)

    p = sub.add_parser("train", help="run the classification experiment (clean + augmented)")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model on a persisted dataset")
    p.add_argument("--model", required=True, help="model .bin file")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep-robustness", help="pose/camera robustness sweep")
    _add_common(p)
    p.set_defaults(func=_cmd_sweep_robustness)

    p = sub.add_parser("sweep-layer", help="single-layer thickness sweep")
    _add_common(p)
    p.set_defaults(func=_cmd_sweep_layer)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
