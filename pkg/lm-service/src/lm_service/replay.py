"""Transcript-backed paraphrase replay.

A transcript is a JSON list of ``{"request": {"sentence", "n"}, "response":
{"paraphrases": [...]}}`` records. Lookups key on (sentence, n); repeated
records for one key replay in order and the last repeats once exhausted, so
a recorded run can be replayed any number of times with identical results.
"""

from __future__ import annotations

import json
import threading


class ReplayMiss(Exception):
    """The transcript has no record for the requested (sentence, n)."""


class TranscriptReplay:
    def __init__(self, records: list):
        if not isinstance(records, list):
            raise ValueError("transcript top level must be a list")
        self._responses: dict[tuple[str, int], list[list[str]]] = {}
        self._cursor: dict[tuple[str, int], int] = {}
        self._lock = threading.Lock()
        for i, rec in enumerate(records):
            try:
                req, resp = rec["request"], rec["response"]
                key = (str(req["sentence"]), int(req["n"]))
                phrases = [str(p) for p in resp["paraphrases"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"transcript record {i} malformed: {exc!r}") from None
            self._responses.setdefault(key, []).append(phrases)

    @classmethod
    def load(cls, path) -> "TranscriptReplay":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    def paraphrase(self, sentence: str, n: int) -> list[str]:
        key = (sentence, n)
        with self._lock:
            entries = self._responses.get(key)
            if entries is None:
                raise ReplayMiss(
                    f"no transcript entry for sentence {sentence!r} with n={n}"
                )
            idx = self._cursor.get(key, 0)
            self._cursor[key] = idx + 1
        return list(entries[min(idx, len(entries) - 1)])
