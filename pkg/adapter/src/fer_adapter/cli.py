"""Command-line entry points for the expression-classifier adapter.

    adapter serve --stub
    adapter serve --model graph.pt [--resolution N] [--color] [--raw-probs]
    adapter landmarks <directory> [--overwrite]

`serve` speaks fer-oracle/1 on stdio until stdin closes.  `landmarks`
writes a 68-point CSV next to each PGM image in which it finds a face.

Exit codes: 0 success, 1 partial failure (landmarks), 2 usage error,
3 model could not be loaded.
"""

from __future__ import annotations

import argparse
import sys

from fer_adapter.backends import AdapterConfig, AdapterError
from fer_adapter.landmarks import extract_landmarks
from fer_adapter.protocol import serve

EXIT_MODEL_ERROR = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adapter",
        description="Serve an expression classifier over fer-oracle/1 "
        "and extract face landmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    serve_p = sub.add_parser("serve", help="answer fer-oracle/1 requests on stdio")
    serve_p.add_argument("--stub", action="store_true",
                         help="serve the uniform-distribution stub classifier")
    serve_p.add_argument("--model", metavar="PATH",
                         help="path to an exported TorchScript graph")
    serve_p.add_argument("--resolution", type=int, default=48, metavar="N",
                         help="square input resolution fed to the model (default 48)")
    serve_p.add_argument("--color", action="store_true",
                         help="replicate the grayscale input to three channels")
    serve_p.add_argument("--raw-probs", action="store_true",
                         help="treat model output as probabilities (skip softmax)")

    marks_p = sub.add_parser("landmarks", help="write 68-point CSVs for PGM face crops")
    marks_p.add_argument("directory", help="directory of .pgm images")
    marks_p.add_argument("--overwrite", action="store_true",
                         help="replace CSV files that already exist")
    return parser


def cmd_serve(args: argparse.Namespace) -> int:
    config = AdapterConfig(
        stub=args.stub,
        model=args.model,
        resolution=args.resolution,
        grayscale=not args.color,
        raw_probs=args.raw_probs,
    )
    if config.stub == (config.model is not None):
        print("adapter: error: exactly one of --stub and --model is required",
              file=sys.stderr)
        return 2
    try:
        backend = config.build()
    except AdapterError as exc:
        print(f"adapter: error: {exc}", file=sys.stderr)
        return EXIT_MODEL_ERROR
    return serve(backend)


def cmd_landmarks(args: argparse.Namespace) -> int:
    try:
        written, no_face, existing = extract_landmarks(
            args.directory, overwrite=args.overwrite
        )
    except (ValueError, OSError) as exc:
        print(f"adapter: error: {exc}", file=sys.stderr)
        return 2
    print(f"adapter landmarks: {written} written, {no_face} without a face, "
          f"{existing} already present", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "serve":
        return cmd_serve(args)
    return cmd_landmarks(args)


if __name__ == "__main__":
    sys.exit(main())
