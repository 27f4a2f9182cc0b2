"""FastAPI application speaking the /v1 wire protocol.

Bodies are parsed by hand so every rejection carries the protocol's status
code and a one-line ``{"error": ...}`` envelope: 400 for malformed requests,
413 for oversize batches, 422 for slot lengths beyond Lmax, 503 when the
capability (model or paraphrase backing) is not loaded.
"""

from __future__ import annotations

import json
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .model import MaskedLMBackend
from .replay import ReplayMiss, TranscriptReplay
from .wire import (
    WireError,
    parse_detokenize_body,
    parse_logprobs_body,
    parse_paraphrase_body,
    parse_tokenize_body,
)

DEFAULT_MAX_BATCH = 64
DEFAULT_TOP_M = 256


def create_app(
    backend: Optional[MaskedLMBackend] = None,
    replay: Optional[TranscriptReplay] = None,
    max_batch: int = DEFAULT_MAX_BATCH,
    top_m: int = DEFAULT_TOP_M,
) -> FastAPI:
    if max_batch < 1:
        raise ValueError(f"max_batch must be >= 1, got {max_batch}")
    if top_m < 0:
        raise ValueError(f"top_m must be >= 0, got {top_m}")
    app = FastAPI(title="lm-service", docs_url=None, redoc_url=None)

    @app.exception_handler(WireError)
    async def _wire_error(request: Request, exc: WireError) -> JSONResponse:
        return JSONResponse(status_code=exc.status, content={"error": exc.message})

    @app.exception_handler(ReplayMiss)
    async def _replay_miss(request: Request, exc: ReplayMiss) -> JSONResponse:
        return JSONResponse(status_code=503, content={"error": str(exc)})

    def _model() -> MaskedLMBackend:
        if backend is None:
            raise WireError(503, "no model loaded")
        return backend

    async def _body(request: Request):
        try:
            return json.loads(await request.body())
        except (json.JSONDecodeError, UnicodeDecodeError):
            raise WireError(400, "request body is not valid JSON") from None

    @app.get("/v1/info")
    async def info() -> dict:
        b = _model()
        return {
            "scorer_id": b.scorer_id,
            "vocab_size": b.vocab_size,
            "tokenizer_id": b.tokenizer_id,
            "lmax": b.lmax,
        }

    @app.post("/v1/tokenize")
    async def tokenize(request: Request) -> dict:
        b = _model()
        texts = parse_tokenize_body(await _body(request), max_batch)
        return {"tokens": b.tokenize_texts(texts)}

    @app.post("/v1/detokenize")
    async def detokenize(request: Request) -> dict:
        b = _model()
        rows = parse_detokenize_body(await _body(request), max_batch)
        return {"texts": b.detokenize_rows(rows)}

    @app.post("/v1/logprobs")
    async def logprobs(request: Request) -> dict:
        b = _model()
        req = parse_logprobs_body(await _body(request), b.lmax, max_batch)
        if req.mode == "full":
            rows = b.logprob_rows(req.queries)
            return {"distributions": rows.tolist()}
        m = req.m if req.m is not None else top_m
        top = b.top_rows(req.queries, m, req.requested)
        return {
            "top": [{"tokens": toks, "logprobs": lps} for toks, lps in top]
        }

    @app.post("/v1/paraphrase")
    async def paraphrase(request: Request) -> dict:
        sentence, n = parse_paraphrase_body(await _body(request))
        if n == 0:
            return {"paraphrases": []}
        if replay is None:
            raise WireError(503, "no paraphrase backing loaded")
        return {"paraphrases": replay.paraphrase(sentence, n)}

    return app
