import argparse
import logging
import sys

from .server import StubAdvisor, serve_stdio, serve_tcp
from .store import FeedbackStore


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advisor-bridge",
        description="Driving advisor over newline-delimited JSON; a "
                    "deterministic rule stub with feedback adaptation.")
    parser.add_argument("--transport", choices=("stdio", "tcp"),
                        default="stdio")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8772)
    parser.add_argument("--adapt-threshold", type=int, default=3,
                        help="concordant samples a bucket needs before its "
                             "recommendation is overridden")
    parser.add_argument("--log-level", default="WARNING")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(name)s %(levelname)s %(message)s")
    if args.adapt_threshold < 1:
        print("--adapt-threshold must be >= 1", file=sys.stderr)
        return 1
    advisor = StubAdvisor(FeedbackStore(args.adapt_threshold))
    if args.transport == "tcp":
        return serve_tcp(args.host, args.port, advisor)
    return serve_stdio(advisor)
