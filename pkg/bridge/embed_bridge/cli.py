"""Command-line surface: extract, serve, fill-pseudo."""

from __future__ import annotations

import argparse
import logging
import sys

from .encoder import DEFAULT_ENCODER, EncoderError
from .extract import ExtractJob, extract
from .pseudo import StubGenerator, fill_pseudo_results
from .server import make_model, serve_scorer

log = logging.getLogger("embed_bridge")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-bridge",
        description="Embedding extraction and scoring bridge "
        "(icdstore/v1 files, saber-score/v1 TCP)",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ex = sub.add_parser("extract", help="dataset spec -> icdstore/v1 file")
    p_ex.add_argument("--dataset", required=True)
    p_ex.add_argument("--out", required=True)
    p_ex.add_argument("--encoder", default=DEFAULT_ENCODER)
    p_ex.add_argument("--tail-layers", type=int, default=0)

    p_srv = sub.add_parser("serve", help="saber-score/v1 scoring endpoint")
    p_srv.add_argument("--store", required=True)
    p_srv.add_argument("--model", default="stub")
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=7461)

    p_fp = sub.add_parser("fill-pseudo", help="add pseudo_r vectors to queries")
    p_fp.add_argument("--store", required=True)
    p_fp.add_argument("--out", required=True)
    p_fp.add_argument("--answers", help="JSON file mapping query id -> answer text")
    p_fp.add_argument(
        "--generate", action="store_true",
        help="use the stub generator for queries without a stub answer",
    )
    p_fp.add_argument("--encoder", default=DEFAULT_ENCODER)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "extract":
            job = ExtractJob(args.dataset, args.out, args.encoder, args.tail_layers)
            path = extract(job)
            print(f"extract: wrote {path}")
        elif args.command == "serve":
            server = serve_scorer(
                make_model(args.model), args.store, args.host, args.port
            )
            host, port = server.server_address
            print(f"serve: scoring on {host}:{port}", flush=True)
            try:
                server.serve_forever()
            except KeyboardInterrupt:
                server.shutdown()
        else:
            n = fill_pseudo_results(
                args.store,
                args.out,
                answers_path=args.answers,
                generator=StubGenerator() if args.generate else None,
                encoder_id=args.encoder,
            )
            print(f"fill-pseudo: filled {n} queries -> {args.out}")
    except (EncoderError, ValueError, OSError) as e:
        log.error("%s failed: %s", args.command, e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
