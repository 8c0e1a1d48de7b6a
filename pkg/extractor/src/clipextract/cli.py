"""Command line for embedding extraction and table initialization.

  clipextract extract --dataset nyu --images DIR_OR_LIST [--split train]
                      --out frames.pceb [--flip] [--backend clip|seeded]
                      [--weights PATH] [--tap final|prefinal]
  clipextract table --bins 15 --range 0:10 --out table.pctb
                    [--template "{value} meters"] [--backend ...]
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .encoders import EncoderError, make_encoder
from .jobs import ExtractJob, JobError, extract_frames, load_pairs, text_table_init


def _encoder_from_args(args):
    kwargs = {}
    if args.backend == "clip":
        if args.weights:
            kwargs["source"] = args.weights
        kwargs["tap"] = args.tap
        if args.weights_sha256:
            kwargs["weights_sha256"] = args.weights_sha256
    else:
        kwargs["seed"] = args.seed
    return make_encoder(args.backend, **kwargs)


def _add_backend_flags(p):
    p.add_argument("--backend", choices=["clip", "seeded"], default="clip")
    p.add_argument("--weights", default=None, help="local pretrained-model directory")
    p.add_argument("--weights-sha256", default=None, help="expected weights digest")
    p.add_argument("--tap", choices=["final", "prefinal"], default="final")
    p.add_argument("--seed", type=int, default=0, help="seed for the seeded backend")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clipextract", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="export patch/CLS embeddings as PCEB")
    p.add_argument("--dataset", choices=["nyu", "kitti"], required=True)
    p.add_argument("--images", required=True, help="list file or directory with rgb/ and depth/")
    p.add_argument("--split", default="", help="subdirectory under --images")
    p.add_argument("--flip", action="store_true", help="also embed the horizontal flip")
    p.add_argument("--out", required=True)
    _add_backend_flags(p)

    p = sub.add_parser("table", help="write a text-phrase depth-table init as PCTB")
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--range", default="0:10", help="range_min:range_max in meters")
    p.add_argument("--template", default="{value} meters")
    p.add_argument("--out", required=True)
    _add_backend_flags(p)

    return parser


def cmd_extract(args) -> int:
    encoder = _encoder_from_args(args)
    pairs = load_pairs(args.images, args.split)
    job = ExtractJob(pairs=pairs, kind=args.dataset, flip=args.flip, out=args.out)
    result = extract_frames(job, encoder)
    print(f"wrote {result.n_frames} frames to {result.out}")
    if result.failures:
        print(f"{len(result.failures)} inputs failed; see {result.manifest}", file=sys.stderr)
    return 0


def cmd_table(args) -> int:
    encoder = _encoder_from_args(args)
    lo, _, hi = args.range.partition(":")
    range_min, range_max = float(lo), float(hi)
    if args.bins < 2 or range_max <= range_min:
        raise JobError(f"bad bin geometry: {args.bins} bins over {args.range}")
    width = (range_max - range_min) / args.bins
    centers = range_min + (np.arange(args.bins, dtype=np.float64) + 0.5) * width
    path = text_table_init(centers, args.out, encoder, template=args.template)
    print(f"wrote {args.bins} table vectors to {path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "extract":
            return cmd_extract(args)
        return cmd_table(args)
    except (JobError, EncoderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
