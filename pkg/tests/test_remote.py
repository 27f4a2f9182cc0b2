import math

import numpy as np
import pytest

from helpers import start_stub, words
from kgharvest.backends import MockScorer, RemoteScorer
from kgharvest.contract import run_contract_checks
from kgharvest.errors import ProtocolError, ServiceError, ValidationError
from kgharvest.paraphrase import HTTPParaphraser
from kgharvest.relations import PromptTemplate
from kgharvest.scoring import Filled, Masked, MaskedQuery
from kgharvest.search import SearchConfig, propose_candidates

TPL = PromptTemplate("the point of {A} is {B}")


def _queries(n, b_state=None):
    return [
        MaskedQuery(TPL, {"A": Masked(1), "B": b_state or Masked(1)}, ("A", 0))
        for _ in range(n)
    ]


def test_info_is_fetched_once(stub_service):
    state, url, table, _ = stub_service
    remote = RemoteScorer(url)
    info = remote.info()
    assert info.scorer_id == table.scorer_id
    assert info.vocab_size == len(table.vocab)
    assert info.lmax == table.lmax
    remote.info()
    assert remote.vocab() is None


def test_tokenize_round_trip_and_cache(stub_service):
    state, url, _, _ = stub_service
    remote = RemoteScorer(url)
    assert remote.tokenize("w00 w01") == ("w00", "w01")
    before = len(state.log)
    assert remote.tokenize("w00 w01") == ("w00", "w01")
    assert len(state.log) == before  # served from cache
    assert remote.detokenize(("w00", "w01")) == "w00 w01"
    with pytest.raises(ValidationError):
        remote.tokenize("  ")


def test_full_distributions_match_local_scorer(stub_service):
    state, url, table, _ = stub_service
    remote = RemoteScorer(url)
    local = MockScorer(table)
    q = _queries(3)
    got = remote.token_logprobs(q)
    want = local.token_logprobs(q)
    for g, w in zip(got, want):
        assert np.allclose(g, w, atol=1e-12)
        with pytest.raises(ValueError):
            g[0] = 0.0


def test_batches_are_chunked(stub_service):
    state, url, _, _ = stub_service
    remote = RemoteScorer(url)
    remote.info()
    state.log.clear()
    remote.token_logprobs(_queries(150))
    sizes = [n for (p, n) in state.log if p == "logprobs:full"]
    assert sum(sizes) == 150
    assert max(sizes) <= 64
    assert len(sizes) == 3


def test_token_logprob_of_uses_requested_lists(stub_service):
    state, url, table, _ = stub_service
    remote = RemoteScorer(url)
    local = MockScorer(table)
    qs = _queries(2)
    got = remote.token_logprob_of(qs, ["w00", "w03"])
    want = local.token_logprob_of(qs, ["w00", "w03"])
    assert got == pytest.approx(want, abs=1e-12)
    # and it rides the compact topm mode, not full rows
    assert any(p == "logprobs:topm" for (p, n) in state.log)


def test_top_token_logprobs_include_requested(stub_service):
    state, url, _, _ = stub_service
    remote = RemoteScorer(url)
    (toks, lps), = remote.top_token_logprobs(_queries(1), m=2, requested=[["w07"]])
    assert len(toks) >= 2
    assert "w07" in toks
    assert list(lps[:2]) == sorted(lps[:2], reverse=True)


def test_small_denormalization_is_renormalized(stub_service):
    state, url, table, _ = stub_service
    remote = RemoteScorer(url)
    state.behavior["denorm"] = 5e-5
    got = remote.token_logprobs(_queries(1))[0]
    state.behavior.pop("denorm")
    want = MockScorer(table).token_logprobs(_queries(1))[0]
    assert np.allclose(got, want, atol=1e-9)
    assert abs(float(np.logaddexp.reduce(got))) < 1e-9


def test_large_denormalization_is_rejected(stub_service):
    state, url, _, _ = stub_service
    remote = RemoteScorer(url)
    state.behavior["denorm"] = 0.01
    try:
        with pytest.raises(ProtocolError):
            remote.token_logprobs(_queries(1))
    finally:
        state.behavior.pop("denorm")


def test_http_errors_map_to_error_types(stub_service):
    state, url, _, _ = stub_service
    remote = RemoteScorer(url)
    remote.info()

    state.behavior["fail_next"] = 1
    with pytest.raises(ServiceError):
        remote.token_logprobs(_queries(1))

    state.behavior["garbage"] = True
    try:
        with pytest.raises(ProtocolError):
            remote.token_logprobs(_queries(1))
    finally:
        state.behavior.pop("garbage")

    state.behavior["wrong_shape"] = True
    try:
        with pytest.raises(ProtocolError):
            remote.token_logprobs(_queries(2))
    finally:
        state.behavior.pop("wrong_shape")

    with pytest.raises(ProtocolError):
        remote._request("POST", "/v1/no-such-endpoint", {})


def test_unreachable_service_is_service_error():
    remote = RemoteScorer("http://127.0.0.1:9", timeout=0.5)
    with pytest.raises(ServiceError):
        remote.info()


def test_missing_requested_token_is_protocol_error(stub_service):
    state, url, _, _ = stub_service
    remote = RemoteScorer(url)
    state.behavior["drop_requested"] = True
    try:
        with pytest.raises(ProtocolError):
            remote.token_logprob_of(_queries(1), ["w05"])
    finally:
        state.behavior.pop("drop_requested")


def test_malformed_info_is_protocol_error(stub_service):
    state, url, _, _ = stub_service
    state.behavior["bad_info"] = True
    try:
        with pytest.raises(ProtocolError):
            RemoteScorer(url).info()
    finally:
        state.behavior.pop("bad_info")


# ---------------------------------------------------------------------------
# paraphrase client


def test_http_paraphraser_happy_path(stub_service):
    _, url, _, _ = stub_service
    para = HTTPParaphraser(url)
    got = para.paraphrase("candy causes decay", 2)
    assert got == ["candy causes decay indeed", "so candy causes decay"]


def test_http_paraphraser_retries_then_recovers(stub_service):
    state, url, _, _ = stub_service
    para = HTTPParaphraser(url, retries=3, retry_wait=0.0)
    state.behavior["fail_next"] = 2
    got = para.paraphrase("candy causes decay", 1)
    assert got == ["candy causes decay indeed"]


def test_http_paraphraser_exhausts_retries(stub_service):
    state, url, _, _ = stub_service
    para = HTTPParaphraser(url, retries=1, retry_wait=0.0)
    state.behavior["fail_next"] = 5
    try:
        with pytest.raises(ServiceError):
            para.paraphrase("candy causes decay", 1)
    finally:
        state.behavior["fail_next"] = 0


def test_http_paraphraser_rejects_bad_requests(stub_service):
    _, url, _, _ = stub_service
    para = HTTPParaphraser(url)
    with pytest.raises(ValidationError):
        para.paraphrase("   ", 1)
    with pytest.raises(ValidationError):
        para.paraphrase("fine", -1)


# ---------------------------------------------------------------------------
# remote proposal search and the service contract


def test_remote_search_matches_local(stub_service):
    state, url, table, wps = stub_service
    cfg = SearchConfig(max_candidates=6, lmax=1, candidate_pool=len(table.vocab))
    local = propose_candidates(wps, MockScorer(table), cfg)
    remote = propose_candidates(wps, RemoteScorer(url), cfg)
    assert [t.entities for t, _ in remote.candidates] == [
        t.entities for t, _ in local.candidates
    ]
    for (_, g), (_, w) in zip(remote.candidates, local.candidates):
        assert g == pytest.approx(w, abs=1e-9)


def test_remote_search_with_narrow_pool_still_ranks_head(stub_service):
    state, url, table, wps = stub_service
    wide = propose_candidates(
        wps,
        RemoteScorer(url),
        SearchConfig(max_candidates=3, lmax=1, candidate_pool=len(table.vocab)),
    )
    narrow = propose_candidates(
        wps,
        RemoteScorer(url),
        SearchConfig(max_candidates=3, lmax=1, candidate_pool=4),
    )
    assert narrow.candidates[0][0].entities == wide.candidates[0][0].entities


def test_contract_checks_pass_against_stub(stub_service):
    _, url, table, _ = stub_service
    report = run_contract_checks(url, probe_words=list(table.vocab[:4]))
    assert report.ok, report.failures()
