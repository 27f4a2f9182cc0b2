"""Scorer backends: the table-driven mock and the remote HTTP client.

The mock backend answers every query from an explicit conditional table keyed
by (template text, context digest, focus digest), falling back to a default
distribution. Tables are plain JSON, hand-writable, and bit-deterministic, so
tests can compute expected values independently.

The remote backend speaks JSON over HTTP to a model service:

    GET  /v1/info                         -> scorer metadata
    POST /v1/tokenize   {texts}           -> {tokens}
    POST /v1/detokenize {tokens}          -> {texts}
    POST /v1/logprobs   {items, mode,...} -> {distributions} | {top}
    POST /v1/paraphrase {sentence, n}     -> {paraphrases}

Queries are sent as slot semantics (filled / partial / masked states), never
as token indices, so tokenizer details stay server-side.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import requests

from .errors import ProtocolError, ServiceError, ValidationError
from .scoring import (
    Filled,
    Masked,
    MaskedQuery,
    PartiallyFilled,
    ScorerInfo,
    SlotState,
    context_digest,
    focus_digest,
)

PROB_SUM_TOL = 1e-9
NORMALIZATION_TOL = 1e-3
DEFAULT_BATCH_SIZE = 64

_DIGEST_UNSAFE = set("|=")


def _check_vocab_token(token: str) -> str:
    if not token or token != token.strip():
        raise ValidationError(f"vocabulary token {token!r} is empty or has edge whitespace")
    if any(ch.isspace() for ch in token):
        raise ValidationError(f"vocabulary token {token!r} contains whitespace")
    if token.startswith("*") or _DIGEST_UNSAFE & set(token):
        raise ValidationError(
            f"vocabulary token {token!r} collides with digest syntax (*, |, =)"
        )
    return token


@dataclass(frozen=True)
class MockEntry:
    template_id: str
    context: str
    focus: str
    probs: Mapping[str, float]

    def key(self) -> tuple[str, str, str]:
        return (self.template_id, self.context, self.focus)


@dataclass(frozen=True)
class MockTable:
    """Immutable conditional-probability table backing the mock scorer.

    Named tokens in an entry take their stated probability; remaining mass is
    spread uniformly over the unnamed vocabulary. Entries whose named mass is
    1 leave the rest at probability zero.
    """

    scorer_id: str
    lmax: int
    vocab: tuple[str, ...]
    entries: tuple[MockEntry, ...]
    default: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.lmax < 1:
            raise ValidationError("lmax must be >= 1")
        if len(self.vocab) < 2:
            raise ValidationError("mock vocabulary needs at least 2 tokens")
        seen = set()
        for tok in self.vocab:
            _check_vocab_token(tok)
            if tok in seen:
                raise ValidationError(f"duplicate vocabulary token {tok!r}")
            seen.add(tok)
        keys = set()
        for entry in self.entries:
            if entry.key() in keys:
                raise ValidationError(f"duplicate table entry for {entry.key()}")
            keys.add(entry.key())
            self._check_probs(entry.probs, where=str(entry.key()))
        self._check_probs(self.default, where="default")

    def _check_probs(self, probs: Mapping[str, float], where: str) -> None:
        total = 0.0
        for tok, p in probs.items():
            if tok not in set(self.vocab):
                raise ValidationError(f"{where}: token {tok!r} not in vocabulary")
            if not 0.0 < p <= 1.0:
                raise ValidationError(f"{where}: probability {p} for {tok!r} out of (0,1]")
            total += p
        if total > 1.0 + PROB_SUM_TOL:
            raise ValidationError(f"{where}: named probabilities sum to {total} > 1")
        if len(probs) == len(self.vocab) and abs(total - 1.0) > PROB_SUM_TOL:
            raise ValidationError(f"{where}: fully named distribution sums to {total} != 1")


def load_mock_table(path) -> MockTable:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"mock table {path}: invalid JSON ({exc})") from exc
    try:
        entries = tuple(
            MockEntry(
                template_id=str(e["template_id"]),
                context=str(e["context_digest"]),
                focus=str(e["focus"]),
                probs={str(k): float(v) for k, v in e["probs"].items()},
            )
            for e in doc.get("entries", [])
        )
        return MockTable(
            scorer_id=str(doc["scorer_id"]),
            lmax=int(doc["lmax"]),
            vocab=tuple(str(t) for t in doc["vocab"]),
            entries=entries,
            default={str(k): float(v) for k, v in doc.get("default", {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"mock table {path}: {exc!r}") from exc


def save_mock_table(table: MockTable, path) -> None:
    doc = {
        "scorer_id": table.scorer_id,
        "lmax": table.lmax,
        "vocab": list(table.vocab),
        "default": dict(table.default),
        "entries": [
            {
                "template_id": e.template_id,
                "context_digest": e.context,
                "focus": e.focus,
                "probs": dict(e.probs),
            }
            for e in table.entries
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


class MockScorer:
    """Deterministic scorer over a :class:`MockTable`.

    All distributions are prebuilt at construction, so queries are lock-free
    dict lookups over immutable arrays. A small counter tracks how many
    queries were served (used by pruning-benefit checks).
    """

    def __init__(self, table: MockTable):
        self._table = table
        self._index = {tok: i for i, tok in enumerate(table.vocab)}
        self._vectors = {
            e.key(): self._build(e.probs) for e in table.entries
        }
        self._default = self._build(table.default)
        self._info = ScorerInfo(
            scorer_id=table.scorer_id,
            vocab_size=len(table.vocab),
            tokenizer_id="whitespace",
            lmax=table.lmax,
        )
        self._calls = 0
        self._lock = threading.Lock()

    def _build(self, probs: Mapping[str, float]) -> np.ndarray:
        v = len(self._table.vocab)
        named = sum(probs.values())
        unnamed = v - len(probs)
        arr = np.zeros(v, dtype=np.float64)
        if unnamed:
            arr[:] = max(0.0, 1.0 - named) / unnamed
        for tok, p in probs.items():
            arr[self._index[tok]] = p
        arr /= arr.sum()
        with np.errstate(divide="ignore"):
            out = np.log(arr)
        out.setflags(write=False)
        return out

    @property
    def table(self) -> MockTable:
        return self._table

    @property
    def calls(self) -> int:
        with self._lock:
            return self._calls

    def info(self) -> ScorerInfo:
        return self._info

    def vocab(self) -> tuple[str, ...]:
        return self._table.vocab

    def tokenize(self, text: str) -> tuple[str, ...]:
        if not text or not text.strip():
            raise ValidationError("cannot tokenize empty text")
        tokens = tuple(text.split())
        for tok in tokens:
            if tok not in self._index:
                raise ValidationError(f"token {tok!r} not in mock vocabulary")
        return tokens

    def detokenize(self, tokens: Sequence[str]) -> str:
        if not tokens:
            raise ValidationError("cannot detokenize empty token sequence")
        return " ".join(tokens)

    def _lookup(self, query: MaskedQuery) -> np.ndarray:
        for slot, state in query.slot_states.items():
            length = state.total if isinstance(state, PartiallyFilled) else (
                len(state.tokens) if isinstance(state, Filled) else state.length
            )
            if length > self._table.lmax:
                raise ValidationError(
                    f"slot {slot!r} length {length} exceeds lmax {self._table.lmax}"
                )
        key = (query.template.text, context_digest(query), focus_digest(query))
        return self._vectors.get(key, self._default)

    def token_logprobs(self, batch: Sequence[MaskedQuery]) -> list[np.ndarray]:
        if not batch:
            raise ValidationError("empty query batch")
        out = [self._lookup(q) for q in batch]
        with self._lock:
            self._calls += len(batch)
        return out

    def token_logprob_of(
        self, batch: Sequence[MaskedQuery], tokens: Sequence[str]
    ) -> list[float]:
        if len(batch) != len(tokens):
            raise ValidationError("batch and token lists differ in length")
        rows = self.token_logprobs(batch)
        out = []
        for row, tok in zip(rows, tokens):
            idx = self._index.get(tok)
            if idx is None:
                raise ValidationError(f"token {tok!r} not in mock vocabulary")
            out.append(float(row[idx]))
        return out

    def top_token_logprobs(
        self,
        batch: Sequence[MaskedQuery],
        m: Optional[int] = None,
        requested: Optional[Sequence[Sequence[str]]] = None,
    ) -> list[tuple[tuple[str, ...], np.ndarray]]:
        rows = self.token_logprobs(batch)
        if requested is None:
            requested = [()] * len(rows)
        out = []
        for row, req in zip(rows, requested):
            if m is None or m >= len(row):
                chosen = list(range(len(row)))
            else:
                # stable order: logprob desc, then vocab index asc
                chosen = sorted(range(len(row)), key=lambda i: (-row[i], i))[:m]
                have = set(chosen)
                for tok in req:
                    idx = self._index.get(tok)
                    if idx is None:
                        raise ValidationError(f"token {tok!r} not in mock vocabulary")
                    if idx not in have:
                        chosen.append(idx)
                        have.add(idx)
            toks = tuple(self._table.vocab[i] for i in chosen)
            out.append((toks, row[chosen]))
        return out


# ---------------------------------------------------------------------------
# wire-level encoding shared by the remote client and contract tests


def state_to_wire(state: SlotState) -> dict[str, Any]:
    if isinstance(state, Filled):
        return {"state": "filled", "tokens": list(state.tokens)}
    if isinstance(state, PartiallyFilled):
        return {"state": "partial", "prefix": list(state.prefix), "length": state.total}
    return {"state": "masked", "length": state.length}


def state_from_wire(doc: Mapping[str, Any]) -> SlotState:
    kind = doc.get("state")
    if kind == "filled":
        return Filled(tuple(doc["tokens"]))
    if kind == "partial":
        return PartiallyFilled(tuple(doc["prefix"]), int(doc["length"]))
    if kind == "masked":
        return Masked(int(doc["length"]))
    raise ValidationError(f"unknown slot state kind {kind!r}")


def query_to_wire(query: MaskedQuery) -> dict[str, Any]:
    return {
        "template": query.template.text,
        "slot_states": {
            slot: state_to_wire(state) for slot, state in query.slot_states.items()
        },
        "focus": {"slot": query.focus[0], "index": query.focus[1]},
    }


class RemoteScorer:
    """HTTP client for a model service speaking the /v1 wire protocol.

    Batches are chunked to ``batch_size`` items per request. A bounded
    semaphore caps in-flight requests; sessions are per-thread. Full
    log-distribution rows are renormalized client-side (and rejected when the
    raw row is off by more than NORMALIZATION_TOL in logsumexp).
    """

    def __init__(
        self,
        base_url: str,
        batch_size: int = DEFAULT_BATCH_SIZE,
        max_connections: int = 4,
        timeout: float = 60.0,
    ):
        if batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        self._base = base_url.rstrip("/")
        self._batch_size = batch_size
        self._timeout = timeout
        self._gate = threading.Semaphore(max_connections)
        self._local = threading.local()
        self._info: Optional[ScorerInfo] = None
        self._info_lock = threading.Lock()
        self._tok_cache: dict[str, tuple[str, ...]] = {}
        self._tok_lock = threading.Lock()

    # -- transport ----------------------------------------------------------

    def _session(self) -> requests.Session:
        sess = getattr(self._local, "session", None)
        if sess is None:
            sess = requests.Session()
            self._local.session = sess
        return sess

    def _request(self, method: str, path: str, payload: Optional[dict] = None) -> Any:
        url = f"{self._base}{path}"
        with self._gate:
            try:
                if method == "GET":
                    resp = self._session().get(url, timeout=self._timeout)
                else:
                    resp = self._session().post(url, json=payload, timeout=self._timeout)
            except requests.RequestException as exc:
                raise ServiceError(f"scorer service unreachable at {url}: {exc}") from exc
        if resp.status_code >= 500:
            raise ServiceError(
                f"{method} {path} failed with {resp.status_code}: {resp.text[:200]}"
            )
        if resp.status_code >= 400:
            raise ProtocolError(
                f"{method} {path} rejected with {resp.status_code}: {resp.text[:200]}"
            )
        try:
            return resp.json()
        except ValueError as exc:
            raise ProtocolError(f"{method} {path} returned non-JSON body") from exc

    # -- scorer interface ---------------------------------------------------

    def info(self) -> ScorerInfo:
        with self._info_lock:
            if self._info is None:
                doc = self._request("GET", "/v1/info")
                try:
                    self._info = ScorerInfo(
                        scorer_id=str(doc["scorer_id"]),
                        vocab_size=int(doc["vocab_size"]),
                        tokenizer_id=str(doc.get("tokenizer_id", "unknown")),
                        lmax=int(doc["lmax"]),
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    raise ProtocolError(f"malformed /v1/info response: {exc!r}") from exc
            return self._info

    def vocab(self) -> Optional[tuple[str, ...]]:
        return None

    def tokenize(self, text: str) -> tuple[str, ...]:
        if not text or not text.strip():
            raise ValidationError("cannot tokenize empty text")
        with self._tok_lock:
            hit = self._tok_cache.get(text)
        if hit is not None:
            return hit
        result = self.tokenize_many([text])[0]
        return result

    def tokenize_many(self, texts: Sequence[str]) -> list[tuple[str, ...]]:
        out: list[Optional[tuple[str, ...]]] = [None] * len(texts)
        missing: list[int] = []
        with self._tok_lock:
            for i, text in enumerate(texts):
                hit = self._tok_cache.get(text)
                if hit is None:
                    missing.append(i)
                else:
                    out[i] = hit
        for start in range(0, len(missing), self._batch_size):
            chunk = missing[start : start + self._batch_size]
            doc = self._request("POST", "/v1/tokenize", {"texts": [texts[i] for i in chunk]})
            rows = doc.get("tokens")
            if not isinstance(rows, list) or len(rows) != len(chunk):
                raise ProtocolError("tokenize response shape mismatch")
            with self._tok_lock:
                for i, row in zip(chunk, rows):
                    toks = tuple(str(t) for t in row)
                    self._tok_cache[texts[i]] = toks
                    out[i] = toks
        return out  # type: ignore[return-value]

    def detokenize(self, tokens: Sequence[str]) -> str:
        if not tokens:
            raise ValidationError("cannot detokenize empty token sequence")
        doc = self._request("POST", "/v1/detokenize", {"tokens": [list(tokens)]})
        texts = doc.get("texts")
        if not isinstance(texts, list) or len(texts) != 1:
            raise ProtocolError("detokenize response shape mismatch")
        return str(texts[0])

    def _logprobs_request(
        self, chunk: Sequence[MaskedQuery], mode: str, extra: dict[str, Any]
    ) -> Any:
        payload = {"items": [query_to_wire(q) for q in chunk], "mode": mode, **extra}
        return self._request("POST", "/v1/logprobs", payload)

    def token_logprobs(self, batch: Sequence[MaskedQuery]) -> list[np.ndarray]:
        if not batch:
            raise ValidationError("empty query batch")
        v = self.info().vocab_size
        out: list[np.ndarray] = []
        for start in range(0, len(batch), self._batch_size):
            chunk = batch[start : start + self._batch_size]
            doc = self._logprobs_request(chunk, "full", {})
            rows = doc.get("distributions")
            if not isinstance(rows, list) or len(rows) != len(chunk):
                raise ProtocolError("logprobs response shape mismatch")
            for row in rows:
                arr = np.asarray(row, dtype=np.float64)
                if arr.shape != (v,):
                    raise ProtocolError(
                        f"distribution length {arr.shape} does not match V={v}"
                    )
                lse = _logsumexp(arr)
                if not math.isfinite(lse) or abs(lse) > NORMALIZATION_TOL:
                    raise ProtocolError(f"distribution off-normalized by {lse}")
                arr = arr - lse
                arr.setflags(write=False)
                out.append(arr)
        return out

    def token_logprob_of(
        self, batch: Sequence[MaskedQuery], tokens: Sequence[str]
    ) -> list[float]:
        if len(batch) != len(tokens):
            raise ValidationError("batch and token lists differ in length")
        pairs = self.top_token_logprobs(batch, m=0, requested=[[t] for t in tokens])
        out = []
        for (toks, lps), want in zip(pairs, tokens):
            try:
                out.append(float(lps[toks.index(want)]))
            except ValueError:
                raise ProtocolError(
                    f"requested token {want!r} missing from topm response"
                ) from None
        return out

    def top_token_logprobs(
        self,
        batch: Sequence[MaskedQuery],
        m: Optional[int] = None,
        requested: Optional[Sequence[Sequence[str]]] = None,
    ) -> list[tuple[tuple[str, ...], np.ndarray]]:
        if not batch:
            raise ValidationError("empty query batch")
        if requested is not None and len(requested) != len(batch):
            raise ValidationError("requested token lists must align with batch")
        out: list[tuple[tuple[str, ...], np.ndarray]] = []
        for start in range(0, len(batch), self._batch_size):
            chunk = batch[start : start + self._batch_size]
            extra: dict[str, Any] = {}
            if m is not None:
                extra["m"] = m
            if requested is not None:
                extra["requested"] = [
                    list(requested[start + j]) for j in range(len(chunk))
                ]
            doc = self._logprobs_request(chunk, "topm", extra)
            rows = doc.get("top")
            if not isinstance(rows, list) or len(rows) != len(chunk):
                raise ProtocolError("topm response shape mismatch")
            for row in rows:
                try:
                    toks = tuple(str(t) for t in row["tokens"])
                    lps = np.asarray(row["logprobs"], dtype=np.float64)
                except (KeyError, TypeError) as exc:
                    raise ProtocolError(f"malformed topm row: {exc!r}") from exc
                if lps.shape != (len(toks),):
                    raise ProtocolError("topm tokens/logprobs length mismatch")
                lps.setflags(write=False)
                out.append((toks, lps))
        return out

    def paraphrase(self, sentence: str, n: int) -> list[str]:
        doc = self._request("POST", "/v1/paraphrase", {"sentence": sentence, "n": n})
        phrases = doc.get("paraphrases")
        if not isinstance(phrases, list):
            raise ProtocolError("paraphrase response shape mismatch")
        return [str(p) for p in phrases]


def _logsumexp(arr: np.ndarray) -> float:
    hi = float(np.max(arr))
    if not math.isfinite(hi):
        return hi
    return hi + math.log(float(np.sum(np.exp(arr - hi))))


def make_scorer(spec: str):
    """Build a scorer from a CLI-style spec: ``mock:<table path>`` or an
    ``http(s)://`` service URL."""
    if spec.startswith("mock:"):
        return MockScorer(load_mock_table(spec[len("mock:"):]))
    if spec.startswith("http://") or spec.startswith("https://"):
        return RemoteScorer(spec)
    raise ValidationError(
        f"unrecognized scorer spec {spec!r}; use mock:<path> or an http(s) URL"
    )
