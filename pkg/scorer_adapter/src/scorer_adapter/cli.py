"""Command-line entry point: ``pnstage-scorer``.

Examples:
    pnstage-scorer --stub constant:0.5
    pnstage-scorer --stub checkerboard
    pnstage-scorer --model weights.npz --batch-size 16

The process talks the scoring protocol on stdin/stdout, so it is only
useful when spawned by a pipeline (or a test harness) that speaks it.
"""

import argparse
import sys

from .protocol import ProtocolError
from .scorers import BadModel
from .server import DEFAULT_BATCH_SIZE, AdapterConfig, BadConfig, serve

EXIT_USAGE = 2
EXIT_PROTOCOL = 3


def parse_stub(text: str) -> tuple[str, float]:
    """Split ``constant:0.25`` / ``checkerboard`` into (kind, value)."""
    kind, _, rest = text.partition(":")
    if kind == "constant":
        if not rest:
            raise ValueError("constant stub needs a value, e.g. constant:0.5")
        return kind, float(rest)
    if rest:
        raise ValueError(f"stub {kind!r} takes no value")
    return kind, 0.5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pnstage-scorer",
        description="serve patch scores over the stdio scoring protocol")
    parser.add_argument("--stub",
                        help="deterministic scorer: constant:<p> or checkerboard")
    parser.add_argument("--model", help="path to an .npz linear model")
    parser.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        stub, value = parse_stub(args.stub) if args.stub else ("none", 0.5)
        config = AdapterConfig(model_path=args.model, stub=stub,
                               stub_value=value, batch_size=args.batch_size)
    except (BadConfig, ValueError) as exc:
        print(f"pnstage-scorer: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return serve(config, sys.stdin.buffer, sys.stdout.buffer)
    except (BadModel, ValueError) as exc:
        print(f"pnstage-scorer: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProtocolError as exc:
        print(f"pnstage-scorer: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except BrokenPipeError:
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
