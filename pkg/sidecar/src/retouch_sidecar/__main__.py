"""Entry point: retouch-sidecar [--config cfg.json] (--stdio | --listen HOST:PORT).

In stdio mode the protocol owns stdout, so diagnostics go to stderr; in
socket mode they go to stdout.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ServerConfig
from .server import SidecarServer, serve_stdio


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retouch-sidecar")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--mode", choices=("echo", "real"), default=None,
                        help="override the config's mode")
    transport = parser.add_mutually_exclusive_group(required=True)
    transport.add_argument("--stdio", action="store_true",
                           help="serve one connection over stdin/stdout")
    transport.add_argument("--listen", metavar="HOST:PORT",
                           help="serve TCP connections")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = ServerConfig.from_file(args.config) if args.config else ServerConfig()
    if args.mode:
        config.mode = args.mode

    log_stream = sys.stderr if args.stdio else sys.stdout
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=log_stream, format="%(levelname)s %(name)s: %(message)s",
    )

    if args.stdio:
        serve_stdio(config, sys.stdin.buffer, sys.stdout.buffer)
        return 0
    host, _, port = args.listen.rpartition(":")
    server = SidecarServer(config, host or "127.0.0.1", int(port))
    print(f"listening on {server.endpoint}", flush=True)
    server.serve_forever()
    return 0


if __name__ == "__main__":
    sys.exit(main())
