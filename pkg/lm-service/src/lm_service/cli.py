"""Command line entry point: load one model, serve the /v1 protocol."""

from __future__ import annotations

import argparse
from typing import Optional, Sequence

import uvicorn

from .app import DEFAULT_MAX_BATCH, DEFAULT_TOP_M, create_app
from .model import MaskedLMBackend
from .replay import TranscriptReplay


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lm-service",
        description="Serve a masked language model over the /v1 wire protocol",
    )
    parser.add_argument("--model", required=True, help="model directory or name")
    parser.add_argument("--device", default="cpu", help="torch device (default cpu)")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument(
        "--lmax", type=int, default=3, help="longest slot length served"
    )
    parser.add_argument(
        "--max-batch",
        type=int,
        default=DEFAULT_MAX_BATCH,
        help="largest accepted batch; bigger requests get 413",
    )
    parser.add_argument(
        "--top-m",
        type=int,
        default=DEFAULT_TOP_M,
        help="default M for topm mode when the request names none",
    )
    parser.add_argument(
        "--scorer-id", default=None, help="identity reported by /v1/info"
    )
    parser.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="pin seeds and deterministic kernels",
    )
    parser.add_argument(
        "--paraphrase-transcript",
        default=None,
        help="JSON transcript backing /v1/paraphrase; without it that "
        "endpoint answers 503",
    )
    parser.add_argument("--log-level", default="info")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    backend = MaskedLMBackend(
        args.model,
        device=args.device,
        lmax=args.lmax,
        scorer_id=args.scorer_id,
        deterministic=args.deterministic,
    )
    replay = (
        TranscriptReplay.load(args.paraphrase_transcript)
        if args.paraphrase_transcript
        else None
    )
    app = create_app(
        backend, replay=replay, max_batch=args.max_batch, top_m=args.top_m
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level=args.log_level)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
