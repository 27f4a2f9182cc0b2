"""Wire-protocol conformance checks, runnable against any live scorer service.

These checks exercise the full client surface: metadata, tokenize round
trips, distribution normalization, determinism, top-M semantics, and error
mapping. They are written from the client's point of view so a service
passing them is usable by the harvesting engine as-is.

Each check returns quietly or raises; ``run_contract_checks`` collects the
outcomes into a report instead of stopping at the first failure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import requests

from .backends import RemoteScorer, state_to_wire
from .errors import ProtocolError, ServiceError
from .relations import PromptTemplate
from .scoring import Filled, Masked, MaskedQuery

SERVICE_NORMALIZATION_TOL = 1e-4


@dataclass(frozen=True)
class CheckOutcome:
    name: str
    ok: bool
    detail: str = ""


@dataclass(frozen=True)
class ContractReport:
    outcomes: tuple[CheckOutcome, ...]

    @property
    def ok(self) -> bool:
        return all(o.ok for o in self.outcomes)

    def failures(self) -> list[CheckOutcome]:
        return [o for o in self.outcomes if not o.ok]


def _sample_queries(scorer: RemoteScorer, words: list[str]) -> list[MaskedQuery]:
    template = PromptTemplate("{A} goes with {B}")
    toks = scorer.tokenize_many(words)
    lmax = scorer.info().lmax
    usable = [t for t in toks if 1 <= len(t) <= lmax]
    if not usable:
        raise ProtocolError(f"none of the probe words {words} tokenize within lmax")
    a = usable[0]
    queries = [
        MaskedQuery(template, {"A": Masked(len(a)), "B": Masked(1)}, ("A", 0)),
        MaskedQuery(template, {"A": Filled(a), "B": Masked(1)}, ("B", 0)),
    ]
    return queries


def run_contract_checks(base_url: str, probe_words: list[str] | None = None) -> ContractReport:
    """Exercise a live service and report conformance per check."""
    words = probe_words or ["sun", "water", "stone", "light"]
    outcomes: list[CheckOutcome] = []

    def check(name: str, fn) -> None:
        try:
            fn()
        except AssertionError as exc:
            outcomes.append(CheckOutcome(name, False, str(exc)))
        except Exception as exc:  # noqa: BLE001 - report, don't crash the suite
            outcomes.append(CheckOutcome(name, False, f"{type(exc).__name__}: {exc}"))
        else:
            outcomes.append(CheckOutcome(name, True))

    scorer = RemoteScorer(base_url)

    def info_shape():
        info = scorer.info()
        assert info.vocab_size >= 2, f"vocab_size {info.vocab_size} < 2"
        assert info.lmax >= 1, f"lmax {info.lmax} < 1"
        assert info.scorer_id, "empty scorer_id"

    def info_stable():
        doc1 = requests.get(f"{base_url}/v1/info", timeout=30).json()
        doc2 = requests.get(f"{base_url}/v1/info", timeout=30).json()
        assert doc1 == doc2, "two /v1/info responses differ"

    def tokenize_roundtrip():
        toks = scorer.tokenize_many(words)
        for word, t in zip(words, toks):
            assert len(t) >= 1, f"{word!r} tokenized to nothing"
            back = scorer.detokenize(t)
            assert " ".join(back.split()) == " ".join(word.split()), (
                f"round trip {word!r} -> {t} -> {back!r}"
            )

    def tokenize_empty_rejected():
        try:
            scorer._request("POST", "/v1/tokenize", {"texts": [""]})
        except ProtocolError:
            return
        raise AssertionError("empty-string tokenize was not rejected with 4xx")

    def full_rows_normalize():
        queries = _sample_queries(scorer, words)
        v = scorer.info().vocab_size
        # raw rows, before client renormalization
        payload = {
            "items": [
                {
                    "template": q.template.text,
                    "slot_states": {
                        s: state_to_wire(q.slot_states[s]) for s in q.slot_states
                    },
                    "focus": {"slot": q.focus[0], "index": q.focus[1]},
                }
                for q in queries
            ],
            "mode": "full",
        }
        doc = scorer._request("POST", "/v1/logprobs", payload)
        rows = doc["distributions"]
        assert len(rows) == len(queries)
        for row in rows:
            arr = np.asarray(row, dtype=np.float64)
            assert arr.shape == (v,), f"row length {arr.shape} != V={v}"
            hi = float(np.max(arr))
            lse = hi + math.log(float(np.sum(np.exp(arr - hi))))
            assert abs(lse) <= SERVICE_NORMALIZATION_TOL, f"logsumexp {lse}"

    def deterministic_rows():
        queries = _sample_queries(scorer, words)
        r1 = scorer.token_logprobs(queries)
        r2 = scorer.token_logprobs(queries)
        for a, b in zip(r1, r2):
            assert np.array_equal(a, b), "identical queries returned different rows"

    def topm_includes_requested():
        queries = _sample_queries(scorer, words)
        req_tok = scorer.tokenize(words[1])[0]
        tops = scorer.top_token_logprobs(queries, m=4, requested=[[req_tok]] * len(queries))
        for toks, lps in tops:
            assert req_tok in toks, f"requested token {req_tok!r} missing"
            assert len(toks) == len(lps)

    def topm_matches_full():
        queries = _sample_queries(scorer, words)
        req_tok = scorer.tokenize(words[1])[0]
        lps = scorer.token_logprob_of(queries, [req_tok] * len(queries))
        # compare against renormalized full rows within the service tolerance
        full = scorer.token_logprobs(queries)
        tops = scorer.top_token_logprobs(queries, m=1)
        for lp, row, (toks, tlps) in zip(lps, full, tops):
            top_full = float(np.max(row))
            assert abs(float(tlps[0]) - top_full) <= 2 * SERVICE_NORMALIZATION_TOL, (
                f"top-1 {tlps[0]} vs full max {top_full}"
            )
            assert lp <= top_full + 2 * SERVICE_NORMALIZATION_TOL

    def malformed_states_rejected():
        payload = {
            "items": [
                {
                    "template": "{A} goes with {B}",
                    "slot_states": {"A": {"state": "bogus"}, "B": {"state": "masked", "length": 1}},
                    "focus": {"slot": "A", "index": 0},
                }
            ],
            "mode": "full",
        }
        try:
            scorer._request("POST", "/v1/logprobs", payload)
        except ProtocolError:
            return
        raise AssertionError("malformed slot_states were not rejected with 4xx")

    def paraphrase_zero():
        try:
            phrases = scorer.paraphrase("the sun goes with light", 0)
        except ServiceError:
            return  # no paraphrase model loaded; 503 is conformant
        assert phrases == [], f"n=0 returned {phrases!r}"

    check("info shape", info_shape)
    check("info stable", info_stable)
    check("tokenize round trip", tokenize_roundtrip)
    check("empty tokenize rejected", tokenize_empty_rejected)
    check("full rows normalize", full_rows_normalize)
    check("deterministic rows", deterministic_rows)
    check("topm includes requested", topm_includes_requested)
    check("topm consistent with full", topm_matches_full)
    check("malformed states rejected", malformed_states_rejected)
    check("paraphrase n=0", paraphrase_zero)
    return ContractReport(tuple(outcomes))
