"""Command line interface: simulate, localize, evaluate, validate.

Every run is deterministic for fixed inputs and flags; output files are
byte-identical across reruns. Input problems exit with code 2, pipeline
failures with code 3.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List

from .bundle import MANIFEST_NAME, read_bundle, write_bundle
from .errors import InputError, IoFailure, PipelineError
from .evaluate import (
    DEFAULT_THRESHOLDS,
    STAGES,
    parse_thresholds,
    pose_error,
    write_report,
)
from .geometry import RigidPose
from .pipeline import RunConfig, localize_bundle
from .simulate import CorruptionSpec, SceneSpec, simulate_bundle

ORACLE_NAME = "oracle.json"


def _load_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise IoFailure(f"{path} is not valid JSON: {exc}")


def _discover_bundles(root: Path) -> List[Path]:
    """A directory is a bundle if it holds a manifest, or a set if its
    immediate subdirectories do."""
    if (root / MANIFEST_NAME).exists():
        return [root]
    if not root.is_dir():
        raise IoFailure(f"{root} is not a directory")
    found = sorted(d for d in root.iterdir()
                   if d.is_dir() and (d / MANIFEST_NAME).exists())
    if not found:
        raise InputError(f"no {MANIFEST_NAME} under {root}")
    return found


def _result_filename(query_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", query_id) + ".json"


def cmd_simulate(args) -> int:
    spec = SceneSpec.from_dict(_load_json(Path(args.spec))) \
        if args.spec else SceneSpec()
    corruption = CorruptionSpec.from_dict(_load_json(Path(args.corruption))) \
        if args.corruption else CorruptionSpec()
    if args.seed is not None:
        spec = replace(spec, rng_seed=args.seed)
    bundle, oracle = simulate_bundle(spec, corruption)
    out = Path(args.out)
    write_bundle(bundle, out)
    oracle.save(out / ORACLE_NAME)
    print(f"wrote {out}: query {bundle.views[0].image_id}, "
          f"{bundle.num_views - 1} references, "
          f"{bundle.views[0].intrinsics.width}x"
          f"{bundle.views[0].intrinsics.height} px")
    return 0


def _run_config(args) -> RunConfig:
    return RunConfig(
        k_max=args.k_max,
        min_baseline=args.min_baseline,
        stage1_threshold=args.stage1_threshold,
        ransac_iters=args.ransac_iters,
        inlier_radius=args.inlier_radius,
        search_radius=args.search_radius,
        pnp_inlier_px=args.pnp_inlier_px,
        scale_mode=args.scale_mode,
        seed=args.seed,
    )


def cmd_localize(args) -> int:
    config = _run_config(args)
    bundle_dirs = _discover_bundles(Path(args.bundle))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = set()
    for bundle_dir in bundle_dirs:
        bundle = read_bundle(bundle_dir)
        result = localize_bundle(bundle, config)
        name = _result_filename(result.query_id)
        if name in written:
            raise InputError(
                f"duplicate query id {result.query_id!r} in {bundle_dir}")
        written.add(name)
        payload = json.dumps(result.to_json_dict(), indent=2, sort_keys=True)
        (out / name).write_text(payload + "\n", encoding="utf-8")
        print(f"{result.query_id}: stage={result.stage_used} "
              f"scale={result.scale:.6g} "
              f"inliers={result.num_inliers_final}"
              f"/{result.num_correspondences_final} -> {out / name}")
    return 0


def _gt_poses_by_query(bundle_root: Path) -> Dict[str, RigidPose]:
    poses: Dict[str, RigidPose] = {}
    for bundle_dir in _discover_bundles(bundle_root):
        manifest = _load_json(bundle_dir / MANIFEST_NAME)
        try:
            record = manifest["views"][0]
            query_id = record["image_id"]
            raw_pose = record["gt_pose"]
        except (KeyError, IndexError, TypeError) as exc:
            raise InputError(f"{bundle_dir}: malformed manifest: {exc}")
        if raw_pose is None:
            raise InputError(
                f"{bundle_dir}: query {query_id!r} has no ground-truth pose")
        if query_id in poses:
            raise InputError(f"duplicate query id {query_id!r} in bundle set")
        poses[query_id] = RigidPose.from_flat12(raw_pose, reorthonormalize=True)
    return poses


def cmd_evaluate(args) -> int:
    thresholds = parse_thresholds(args.thresholds) \
        if args.thresholds else DEFAULT_THRESHOLDS
    gt_poses = _gt_poses_by_query(Path(args.bundle))
    results_dir = Path(args.results)
    result_files = sorted(results_dir.glob("*.json"))
    if not result_files:
        raise InputError(f"no result files under {results_dir}")
    stage_errors = {stage: [] for stage in STAGES}
    for path in result_files:
        record = _load_json(path)
        try:
            query_id = record["query_id"]
            estimates = {stage: RigidPose.from_flat12(
                record[f"pose_{stage}"], reorthonormalize=True)
                for stage in STAGES}
        except (KeyError, TypeError) as exc:
            raise InputError(f"{path}: malformed result record: {exc}")
        if query_id not in gt_poses:
            raise InputError(f"{path}: no bundle provides ground truth "
                             f"for query {query_id!r}")
        for stage in STAGES:
            stage_errors[stage].append(
                pose_error(estimates[stage], gt_poses[query_id], query_id))
    paths = write_report(Path(args.out), stage_errors, thresholds)
    sys.stdout.write(paths["report"].read_text(encoding="utf-8"))
    for key in sorted(paths):
        print(f"wrote {paths[key]}")
    return 0


def cmd_validate(args) -> int:
    bundle = read_bundle(Path(args.bundle))
    total_keypoints = sum(len(f.keypoints) for f in bundle.features)
    print(f"ok: {bundle.num_views} views, query {bundle.views[0].image_id!r}, "
          f"{total_keypoints} keypoints, {len(bundle.matches)} match sets")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sceneloc",
        description="Metric visual localization from predicted point maps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scene bundle")
    p.add_argument("spec", nargs="?", default=None,
                   help="scene spec JSON (defaults apply when omitted)")
    p.add_argument("corruption", nargs="?", default=None,
                   help="corruption spec JSON (clean scene when omitted)")
    p.add_argument("--out", required=True, help="bundle output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override the scene spec's RNG seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("localize", help="solve query poses for bundles")
    p.add_argument("--bundle", required=True,
                   help="bundle directory, or a directory of bundles")
    p.add_argument("--out", required=True, help="per-query result directory")
    p.add_argument("--k-max", type=int, default=10)
    p.add_argument("--min-baseline", type=float, default=0.3)
    p.add_argument("--stage1-threshold", type=float, default=0.05)
    p.add_argument("--ransac-iters", type=int, default=500)
    p.add_argument("--inlier-radius", type=float, default=0.10)
    p.add_argument("--search-radius", type=float, default=20.0)
    p.add_argument("--pnp-inlier-px", type=float, default=5.0)
    p.add_argument("--scale-mode", default="auto",
                   choices=("auto", "tri_only", "traj_only"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="score results against ground truth")
    p.add_argument("results", help="directory of per-query result JSON files")
    p.add_argument("--bundle", required=True,
                   help="bundle directory or set providing ground truth")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--thresholds", default=None,
                   help='recall thresholds as "T_CM:R_DEG,..." '
                        '(default "5:5,1:1")')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("validate", help="check a bundle and exit")
    p.add_argument("--bundle", required=True, help="bundle directory")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
