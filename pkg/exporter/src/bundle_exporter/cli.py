"""Command-line entry point: run an export job file."""

from __future__ import annotations

import argparse
import json
import struct
import sys
from typing import Optional, Sequence

from .errors import ContractViolation, JobError, ModelError
from .export import export_bundle
from .job import load_job


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bundle-export",
        description="Run reconstruction, feature, and retrieval models over "
                    "a set of images and write a scene bundle directory.",
    )
    parser.add_argument("job", help="path to a JSON export job file")
    parser.add_argument(
        "--out", default=None,
        help="override the output directory named in the job file")
    return parser


def _summarize(out) -> str:
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    num_views = len(manifest["views"])
    total_kp = 0
    for i in range(num_views):
        blob = (out / "feat" / f"kp_{i}.f32").read_bytes()
        total_kp += struct.unpack_from("<I", blob, 8)[0]
    return f"wrote bundle: {num_views} views, {total_kp} keypoints -> {out}"


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = load_job(args.job)
        if args.out is not None:
            job = type(job)(
                images=job.images,
                camera_file=job.camera_file,
                reconstruction_model=job.reconstruction_model,
                feature_model=job.feature_model,
                retrieval_model=job.retrieval_model,
                output=args.out,
            )
        out = export_bundle(job)
    except JobError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ModelError, ContractViolation) as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 3

    print(_summarize(out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
