"""Paraphrase service clients.

Prompt expansion talks to an external paraphrase service through one call:
``paraphrase(sentence, n) -> list of sentences``. Three implementations:

* :class:`HTTPParaphraser` POSTs to a ``/v1/paraphrase`` endpoint;
* :class:`TranscriptParaphraser` replays a recorded request/response log,
  making tests and reruns hermetic;
* :class:`RecordingParaphraser` wraps another paraphraser and captures a
  transcript for later replay.

Transcript files are JSON lists of
``{"request": {"sentence", "n"}, "response": {"paraphrases": [...]}}``.
"""

from __future__ import annotations

import json
import time
from typing import Optional, Protocol, runtime_checkable

import requests

from .errors import ParseError, ProtocolError, ServiceError, TranscriptMiss, ValidationError


@runtime_checkable
class Paraphraser(Protocol):
    def paraphrase(self, sentence: str, n: int) -> list[str]: ...


class HTTPParaphraser:
    def __init__(self, base_url: str, timeout: float = 60.0, retries: int = 2,
                 retry_wait: float = 0.5):
        self._url = base_url.rstrip("/") + "/v1/paraphrase"
        self._timeout = timeout
        self._retries = retries
        self._retry_wait = retry_wait
        self._session = requests.Session()

    def paraphrase(self, sentence: str, n: int) -> list[str]:
        if not sentence.strip():
            raise ValidationError("cannot paraphrase an empty sentence")
        if n < 0:
            raise ValidationError("paraphrase count must be >= 0")
        last: Optional[Exception] = None
        for attempt in range(self._retries + 1):
            try:
                resp = self._session.post(
                    self._url, json={"sentence": sentence, "n": n}, timeout=self._timeout
                )
            except requests.RequestException as exc:
                last = ServiceError(f"paraphrase service unreachable: {exc}")
            else:
                if resp.status_code >= 500:
                    last = ServiceError(
                        f"paraphrase service failed with {resp.status_code}"
                    )
                elif resp.status_code >= 400:
                    raise ProtocolError(
                        f"paraphrase request rejected with {resp.status_code}: "
                        f"{resp.text[:200]}"
                    )
                else:
                    try:
                        phrases = resp.json()["paraphrases"]
                    except (ValueError, KeyError) as exc:
                        raise ProtocolError(
                            "malformed paraphrase response body"
                        ) from exc
                    if not isinstance(phrases, list):
                        raise ProtocolError("paraphrases field is not a list")
                    return [str(p) for p in phrases]
            if attempt < self._retries and self._retry_wait > 0:
                time.sleep(self._retry_wait)
        assert last is not None
        raise last


class TranscriptParaphraser:
    """Replays a recorded transcript; requests not in the log raise.

    Repeated records for the same (sentence, n) are replayed in order; once
    exhausted, the last one repeats, so reruns stay deterministic.
    """

    def __init__(self, records: list[dict]):
        self._responses: dict[tuple[str, int], list[list[str]]] = {}
        self._cursor: dict[tuple[str, int], int] = {}
        for i, rec in enumerate(records):
            try:
                req, resp = rec["request"], rec["response"]
                key = (str(req["sentence"]), int(req["n"]))
                phrases = [str(p) for p in resp["paraphrases"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"transcript record {i} malformed: {exc!r}") from None
            self._responses.setdefault(key, []).append(phrases)

    def paraphrase(self, sentence: str, n: int) -> list[str]:
        key = (sentence, n)
        entries = self._responses.get(key)
        if entries is None:
            raise TranscriptMiss(
                f"no transcript entry for sentence {sentence!r} with n={n}"
            )
        idx = self._cursor.get(key, 0)
        self._cursor[key] = idx + 1
        return list(entries[min(idx, len(entries) - 1)])


class RecordingParaphraser:
    """Delegates to another paraphraser and logs every exchange."""

    def __init__(self, inner: Paraphraser):
        self._inner = inner
        self.records: list[dict] = []

    def paraphrase(self, sentence: str, n: int) -> list[str]:
        phrases = self._inner.paraphrase(sentence, n)
        self.records.append(
            {
                "request": {"sentence": sentence, "n": n},
                "response": {"paraphrases": list(phrases)},
            }
        )
        return phrases


def load_transcript(path) -> TranscriptParaphraser:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            records = json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read transcript {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"transcript {path} is not valid JSON: {exc}") from None
    if not isinstance(records, list):
        raise ParseError(f"transcript {path}: top level must be a list")
    return TranscriptParaphraser(records)


def save_transcript(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, ensure_ascii=False, indent=2)
        fh.write("\n")


def make_paraphraser(spec: str) -> Paraphraser:
    """Build a paraphraser from a CLI-style spec: an http(s) URL or a
    transcript file path."""
    if spec.startswith("http://") or spec.startswith("https://"):
        return HTTPParaphraser(spec)
    return load_transcript(spec)
