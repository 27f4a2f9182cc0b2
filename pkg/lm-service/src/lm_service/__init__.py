"""Masked-LM scoring service speaking the /v1 wire protocol.

One process serves one model. Clients tokenize text, fetch full or top-M
log-probability rows for masked template queries, and optionally replay a
recorded paraphrase transcript, all over plain JSON HTTP.
"""

from .app import create_app
from .model import MaskedLMBackend
from .replay import TranscriptReplay
from .wire import WireError

__all__ = ["create_app", "MaskedLMBackend", "TranscriptReplay", "WireError"]
