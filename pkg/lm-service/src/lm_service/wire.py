"""Request validation for the /v1 wire protocol.

Everything here is pure: JSON-shaped input in, parsed queries or
:class:`WireError` out. No tokenizer or model is touched, so the mask layout
a query implies can be checked without loading any weights.

Status codes follow the protocol: 400 for anything malformed, 413 for
oversize batches, 422 for slot lengths beyond the model's Lmax.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Mapping, Optional, Sequence, Union

_PLACEHOLDER = re.compile(r"\{([A-Z])\}")


class WireError(Exception):
    """A request the protocol rejects, carrying the HTTP status to return."""

    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


# --- slot states ------------------------------------------------------------


@dataclass(frozen=True)
class WFilled:
    tokens: tuple[str, ...]

    @property
    def total(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class WPartial:
    prefix: tuple[str, ...]
    total: int


@dataclass(frozen=True)
class WMasked:
    length: int

    @property
    def total(self) -> int:
        return self.length


WireState = Union[WFilled, WPartial, WMasked]


@dataclass(frozen=True)
class ParsedQuery:
    """One validated query: template text split around its placeholders.

    ``segments`` alternates literal text and slot letters, starting and
    ending with text (possibly empty), exactly as ``re.split`` with a
    capturing group produces it.
    """

    segments: tuple[str, ...]
    states: Mapping[str, WireState]
    focus_slot: str
    focus_index: int


def _bad(message: str) -> WireError:
    return WireError(400, message)


def _as_int(value: Any, what: str) -> int:
    # bool is an int subclass; a true/false length is always a client bug
    if isinstance(value, bool) or not isinstance(value, int):
        raise _bad(f"{what} must be an integer, got {value!r}")
    return value


def _as_token(value: Any, what: str) -> str:
    if not isinstance(value, str) or not value or re.search(r"\s", value):
        raise _bad(f"{what} must be a non-empty token string, got {value!r}")
    return value


def _as_token_list(value: Any, what: str) -> tuple[str, ...]:
    if not isinstance(value, list):
        raise _bad(f"{what} must be a list of tokens")
    return tuple(_as_token(t, f"{what}[{i}]") for i, t in enumerate(value))


def parse_state(doc: Any, slot: str) -> WireState:
    if not isinstance(doc, Mapping):
        raise _bad(f"slot {slot!r} state must be an object")
    kind = doc.get("state")
    if kind == "filled":
        tokens = _as_token_list(doc.get("tokens"), f"slot {slot!r} tokens")
        if not tokens:
            raise _bad(f"slot {slot!r} is filled with no tokens")
        return WFilled(tokens)
    if kind == "partial":
        prefix = _as_token_list(doc.get("prefix"), f"slot {slot!r} prefix")
        total = _as_int(doc.get("length"), f"slot {slot!r} length")
        if total < 1 or len(prefix) >= total:
            raise _bad(
                f"slot {slot!r} partial state needs prefix shorter than "
                f"length, got {len(prefix)} of {total}"
            )
        return WPartial(prefix, total)
    if kind == "masked":
        length = _as_int(doc.get("length"), f"slot {slot!r} length")
        if length < 1:
            raise _bad(f"slot {slot!r} masked length must be >= 1, got {length}")
        return WMasked(length)
    raise _bad(f"slot {slot!r} has unknown state kind {kind!r}")


def parse_query(doc: Any, lmax: int) -> ParsedQuery:
    if not isinstance(doc, Mapping):
        raise _bad("query item must be an object")
    template = doc.get("template")
    if not isinstance(template, str) or not template.strip():
        raise _bad("query template must be a non-empty string")
    states_doc = doc.get("slot_states")
    if not isinstance(states_doc, Mapping) or not states_doc:
        raise _bad("slot_states must be a non-empty object")

    segments = tuple(_PLACEHOLDER.split(template))
    placeholders = [segments[i] for i in range(1, len(segments), 2)]
    if len(set(placeholders)) != len(placeholders):
        raise _bad(f"template {template!r} repeats a placeholder")
    for slot in states_doc:
        if not isinstance(slot, str) or len(slot) != 1 or not slot.isupper():
            raise _bad(f"slot name {slot!r} must be a single uppercase letter")
    if set(placeholders) != set(states_doc):
        raise _bad(
            f"template placeholders {sorted(placeholders)} do not match "
            f"slot_states keys {sorted(states_doc)}"
        )

    states = {slot: parse_state(states_doc[slot], slot) for slot in states_doc}
    for slot, state in states.items():
        if state.total > lmax:
            raise WireError(
                422, f"slot {slot!r} length {state.total} exceeds lmax {lmax}"
            )

    focus = doc.get("focus")
    if not isinstance(focus, Mapping):
        raise _bad("focus must be an object with slot and index")
    fslot = focus.get("slot")
    if fslot not in states:
        raise _bad(f"focus slot {fslot!r} is not a slot of the template")
    findex = _as_int(focus.get("index"), "focus index")
    state = states[fslot]
    if not 0 <= findex < state.total:
        raise _bad(
            f"focus index {findex} out of range for slot {fslot!r} "
            f"of length {state.total}"
        )
    if isinstance(state, WFilled):
        raise _bad(f"focus points at filled slot {fslot!r}")
    if isinstance(state, WPartial) and findex < len(state.prefix):
        raise _bad(
            f"focus index {findex} points inside the prefix of slot {fslot!r}"
        )
    return ParsedQuery(segments, states, fslot, findex)


# --- request bodies ---------------------------------------------------------


@dataclass(frozen=True)
class LogprobsRequest:
    queries: tuple[ParsedQuery, ...]
    mode: str
    m: Optional[int]
    requested: Optional[tuple[tuple[str, ...], ...]]


def parse_logprobs_body(body: Any, lmax: int, max_batch: int) -> LogprobsRequest:
    if not isinstance(body, Mapping):
        raise _bad("request body must be a JSON object")
    items = body.get("items")
    if not isinstance(items, list) or not items:
        raise _bad("items must be a non-empty list of queries")
    if len(items) > max_batch:
        raise WireError(
            413, f"batch of {len(items)} items exceeds the limit of {max_batch}"
        )
    mode = body.get("mode")
    if mode not in ("full", "topm"):
        raise _bad(f"mode must be 'full' or 'topm', got {mode!r}")

    m: Optional[int] = None
    requested: Optional[tuple[tuple[str, ...], ...]] = None
    extras = set(body) - {"items", "mode", "m", "requested"}
    if extras:
        raise _bad(f"unknown request fields {sorted(extras)}")
    if mode == "full":
        if "m" in body or "requested" in body:
            raise _bad("m and requested are only valid in topm mode")
    else:
        if "m" in body:
            m = _as_int(body["m"], "m")
            if m < 0:
                raise _bad(f"m must be >= 0, got {m}")
        if "requested" in body:
            rows = body["requested"]
            if not isinstance(rows, list) or len(rows) != len(items):
                raise _bad("requested must align one list per query item")
            requested = tuple(
                _as_token_list(row, f"requested[{i}]") for i, row in enumerate(rows)
            )

    queries = tuple(parse_query(item, lmax) for item in items)
    return LogprobsRequest(queries, mode, m, requested)


def parse_tokenize_body(body: Any, max_batch: int) -> list[str]:
    if not isinstance(body, Mapping):
        raise _bad("request body must be a JSON object")
    texts = body.get("texts")
    if not isinstance(texts, list):
        raise _bad("texts must be a list of strings")
    if len(texts) > max_batch:
        raise WireError(
            413, f"batch of {len(texts)} texts exceeds the limit of {max_batch}"
        )
    for i, text in enumerate(texts):
        if not isinstance(text, str):
            raise _bad(f"texts[{i}] must be a string")
        if not text.strip():
            raise _bad(f"texts[{i}] is empty")
    return list(texts)


def parse_detokenize_body(body: Any, max_batch: int) -> list[tuple[str, ...]]:
    if not isinstance(body, Mapping):
        raise _bad("request body must be a JSON object")
    rows = body.get("tokens")
    if not isinstance(rows, list):
        raise _bad("tokens must be a list of token lists")
    if len(rows) > max_batch:
        raise WireError(
            413, f"batch of {len(rows)} rows exceeds the limit of {max_batch}"
        )
    out = []
    for i, row in enumerate(rows):
        toks = _as_token_list(row, f"tokens[{i}]")
        if not toks:
            raise _bad(f"tokens[{i}] is empty")
        out.append(toks)
    return out


def parse_paraphrase_body(body: Any) -> tuple[str, int]:
    if not isinstance(body, Mapping):
        raise _bad("request body must be a JSON object")
    sentence = body.get("sentence")
    if not isinstance(sentence, str) or not sentence.strip():
        raise _bad("sentence must be a non-empty string")
    n = _as_int(body.get("n"), "n")
    if n < 0:
        raise _bad(f"n must be >= 0, got {n}")
    return sentence, n
