"""Command line entry point: ``crossreg <subcommand> ...``.

Exit codes: 0 success, 2 input error, 3 belief propagation did not converge
(the remaining stages still run), 4 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_STAGE = 0, 2, 3, 4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")

# file names written by ``synth`` and picked up by ``--scene``
_SCENE_FILES = {
    "street": "street.ply",
    "overview_mask": "overview_mask.pgm",
    "overview_cloud": "overview.ply",
    "poses": "poses.txt",
    "observations": "observations.txt",
    "tracks": "tracks.xyz",
    "reference": "street_truth.ply",
}

log = logging.getLogger("crossreg")


def _add_inputs(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("inputs")
    g.add_argument("--scene", help="directory written by 'synth'; fills every input not given explicitly")
    g.add_argument("--street", help="street-view cloud (.ply or .xyz)")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--mask", dest="overview_mask", help="over-view building mask (.pgm with .georef)")
    src.add_argument("--polygons", dest="overview_polygons", help="over-view footprint polygons (.json)")
    g.add_argument("--overview-cloud", help="over-view surface cloud, enables height alignment")
    g.add_argument("--poses", help="camera poses of the street-view reconstruction")
    g.add_argument("--observations", help="pixel observations of track points")
    g.add_argument("--tracks", help="track points (.xyz)")
    g.add_argument("--reference", help="reference cloud for evaluation")
    p.add_argument("--config", help="key = value configuration file (see 'crossreg config')")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossreg",
        description="Register a drifted street-view point cloud to over-view building outlines.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v adds per-sweep traces")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    parser.add_argument("--threads", type=int, default=None, help="cap on worker threads (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="print the configuration template")
    p.add_argument("-o", "--output", help="write the template here instead of stdout")

    p = sub.add_parser("synth", help="write a synthetic drifted scene with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--buildings", type=int, default=30)
    p.add_argument("--no-drift", action="store_true", help="keep the street cloud undistorted")

    p = sub.add_parser("segment", help="extract street and over-view segments")
    p.add_argument("--out", required=True)
    _add_inputs(p)

    p = sub.add_parser("match", help="segment correspondences by belief propagation")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-instance", help="also write the matching instance as JSON")

    for name, text in (("register", "per-segment fine registration"),
                       ("adjust", "blend transforms, register cameras, bundle adjust")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="Chamfer distance against a reference cloud")
    p.add_argument("--out", required=True)
    p.add_argument("--reference", help="defaults to the reference given at segmentation")
    p.add_argument("--cloud", help="cloud to evaluate (default: registered.ply)")

    p = sub.add_parser("run", help="all stages in order")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-instance", help="also write the matching instance as JSON")
    _add_inputs(p)
    return parser


def _inputs(args):
    from .pipeline import InputError, PipelineInputs

    values = {k: getattr(args, k, None) for k in _SCENE_FILES}
    values["overview_polygons"] = args.overview_polygons
    if args.scene:
        scene = Path(args.scene)
        if not scene.is_dir():
            raise InputError(f"scene directory not found: {scene}")
        for key, name in _SCENE_FILES.items():
            if values[key] is None and (key != "overview_mask" or values["overview_polygons"] is None):
                values[key] = str(scene / name)
    if values["street"] is None:
        raise InputError("--street (or --scene) is required")
    return PipelineInputs(**values)


def _config(args):
    from .pipeline import load_config, parse_overrides

    return load_config(args.config, parse_overrides(args.set))


def _synth(args) -> int:
    from . import synthetic

    if args.no_drift:
        cfg = synthetic.SceneConfig(seed=args.seed, n_buildings=args.buildings)
        dist = synthetic.apply_drift(
            synthetic.generate_scene(cfg), synthetic.DriftModel(), args.seed, synthetic.random_frame(args.seed)
        )
    else:
        dist = synthetic.benchmark_scene(args.seed, n_buildings=args.buildings)
    out = synthetic.write_scene(dist, args.out)
    log.info("synthetic scene with %d buildings written to %s", len(dist.scene.buildings), out)
    return EXIT_OK


def _diverged(out) -> bool:
    p = Path(out) / "summary.json"
    if not p.is_file():
        return False
    match = json.loads(p.read_text()).get("match") or {}
    return bool(match.get("diverged"))


def _dispatch(args) -> int:
    from . import pipeline as P

    cmd = args.command
    workers = args.threads or 1
    if cmd == "config":
        text = P.config_template()
        if args.output:
            Path(args.output).write_text(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    if cmd == "synth":
        return P.run_stage("synth", _synth, args)
    if cmd == "segment":
        P.run_stage("segment", P.stage_segment, _config(args), _inputs(args), args.out)
    elif cmd == "match":
        P.run_stage("match", P.stage_match, args.out, args.dump_instance, workers)
    elif cmd == "register":
        P.run_stage("register", P.stage_register, args.out)
    elif cmd == "adjust":
        P.run_stage("adjust", P.stage_adjust, args.out)
    elif cmd == "evaluate":
        P.run_stage("evaluate", P.stage_evaluate, args.out, args.reference, args.cloud)
    elif cmd == "run":
        P.run_pipeline(_config(args), _inputs(args), args.out, args.dump_instance, workers)
    if cmd in ("match", "run") and _diverged(args.out):
        return EXIT_DIVERGED
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("crossreg: --threads must be at least 1", file=sys.stderr)
            return EXIT_INPUT
        # must happen before numpy is imported
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    from .pipeline import InputError, StageError

    try:
        return _dispatch(args)
    except InputError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
