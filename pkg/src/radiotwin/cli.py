"""Command-line pipeline driver.

Every subcommand except gen-scene and export-map takes `--config` (TOML or
JSON run configuration), `--out` (run directory), and an optional `--seed`
override of the config's root seed. Stage outputs land under `--out` next to
a manifest.json recording config and content hashes.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline, scenes


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="TOML or JSON run config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override root seed")


def _cfg(args) -> pipeline.RunConfig:
    return pipeline.load_run_config(args.config, seed_override=args.seed)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="radiotwin", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="write a synthetic scene JSON file")
    p.add_argument("--kind", choices=sorted(scenes.BUILDERS), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=float, nargs="*", default=None,
                   help="scene dimensions (builder-specific order)")

    p = sub.add_parser("simulate-truth", help="reference dataset from truth materials")
    _add_common(p)
    p.add_argument("--tx", type=float, nargs=3, default=None, help="override transmitter")
    p.add_argument("--tag", default="truth")

    p = sub.add_parser("sample", help="draw the sparse measurement subset")
    _add_common(p)

    p = sub.add_parser("build-bcm", help="build the probabilistic channel map")
    _add_common(p)

    p = sub.add_parser("calibrate", help="calibrate the EM property field")
    _add_common(p)

    p = sub.add_parser("predict", help="predict CSI/gain over the grid")
    _add_common(p)
    p.add_argument("--tx", type=float, nargs=3, default=None, help="override transmitter")
    p.add_argument("--tag", default="pred")
    p.add_argument("--neutral", action="store_true",
                   help="use the uncalibrated neutral field (baseline)")

    p = sub.add_parser("evaluate", help="compare a prediction against a truth dataset")
    _add_common(p)
    p.add_argument("--pred-tag", default="pred")
    p.add_argument("--truth-tag", default="truth")

    p = sub.add_parser("export-map", help="render a gain CSV to PGM")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "gen-scene":
        builder = scenes.BUILDERS[args.kind]
        scene = builder(*args.size) if args.size else builder()
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        scenes.write_scene(args.out, scene)
        print(f"wrote {args.out}")
        return 0
    if args.command == "export-map":
        sidecar = pipeline.stage_export_map(args.csv, args.out)
        print(json.dumps(sidecar))
        return 0

    cfg = _cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "simulate-truth":
        rows, _ = pipeline.stage_simulate_truth(cfg, out, tx=args.tx, tag=args.tag)
        print(f"simulated {sum(r.reachable for r in rows)} reachable cells")
    elif args.command == "sample":
        idx = pipeline.stage_sample(cfg, out)
        print(f"sampled {len(idx)} positions ({cfg.sampling.mode})")
    elif args.command == "build-bcm":
        result = pipeline.stage_build_bcm(cfg, out)
        print(f"channel map: {len(result.entries)} entries "
              f"({result.dropped_targets} targets dropped)")
    elif args.command == "calibrate":
        result = pipeline.stage_calibrate(cfg, out)
        print(f"calibrated: final loss {result.history[-1][1]:.4f}, "
              f"beta {result.bias.beta:.3f} dB")
    elif args.command == "predict":
        rows, _ = pipeline.stage_predict(
            cfg, out, tx=args.tx, tag=args.tag, neutral=args.neutral
        )
        print(f"predicted {sum(r.reachable for r in rows)} cells -> {args.tag}_*")
    elif args.command == "evaluate":
        report = pipeline.stage_evaluate(
            cfg, out, pred_tag=args.pred_tag, truth_tag=args.truth_tag
        )
        print(json.dumps(pipeline._jsonable(report), sort_keys=True))
    else:  # pragma: no cover
        raise AssertionError(args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
