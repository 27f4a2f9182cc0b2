"""Shared test infrastructure.

The pieces here are deliberately independent of the engine internals they
check: ``brute_force_top`` recomputes proposal rankings by full enumeration
with its own position arithmetic, and the HTTP stub speaks the wire protocol
from the server side so the client is exercised over a real socket.
"""

from __future__ import annotations

import itertools
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from kgharvest.backends import (
    MockEntry,
    MockScorer,
    MockTable,
    state_from_wire,
)
from kgharvest.errors import ValidationError
from kgharvest.paraphrase import RecordingParaphraser, save_transcript
from kgharvest.prompts import collect_prompts
from kgharvest.relations import (
    EntityTuple,
    PromptTemplate,
    RelationSchema,
    WeightedPromptSet,
    slot_letter,
)
from kgharvest.scoring import (
    Filled,
    MaskedQuery,
    Masked,
    context_digest,
    focus_digest,
    partial_state,
)


def words(n: int, prefix: str = "w") -> tuple[str, ...]:
    return tuple(f"{prefix}{i:02d}" for i in range(n))


# a few surface shapes per arity; index 0 is always the relation's own prompt
TEMPLATE_TEXTS = {
    2: (
        "the point of {A} is {B}",
        "{B} comes from {A}",
        "people link {A} with {B}",
    ),
    3: (
        "{A} can {B} at {C}",
        "at {C} one sees {A} do {B}",
        "doing {B} at {C} suits {A}",
    ),
}


def make_relation(arity: int, vocab, name: str = "rel") -> RelationSchema:
    seeds = (
        EntityTuple(tuple(vocab[i] for i in range(arity))),
        EntityTuple(tuple(vocab[i + 1] for i in range(arity))),
    )
    return RelationSchema(name, arity, PromptTemplate(TEMPLATE_TEXTS[arity][0]), seeds)


def make_wps(rng, relation: RelationSchema, n_templates: int) -> WeightedPromptSet:
    texts = TEMPLATE_TEXTS[relation.arity][:n_templates]
    raw = [rng.uniform(0.5, 2.0) for _ in texts]
    total = sum(raw)
    prompts = tuple(
        (PromptTemplate(t), w / total) for t, w in zip(texts, raw)
    )
    return WeightedPromptSet(relation=relation, prompts=prompts, tau=1.0, rng_seed=0)


def random_table(
    rng,
    vocab,
    templates,
    arity: int,
    lmax: int,
    hot_per_lv: int = 6,
    scorer_id: str = "mock-random",
) -> MockTable:
    """Mock table with skew along randomly chosen "hot" assignments.

    For each template and length vector, a handful of complete assignments
    get named probabilities along their fill paths; everything else falls
    back to the uniform default, which produces plenty of exact ties.
    """
    slots = tuple(slot_letter(i) for i in range(arity))
    probs_by_key: dict[tuple[str, str, str], dict[str, float]] = {}
    for item in templates:
        tpl = item if isinstance(item, PromptTemplate) else PromptTemplate(item)
        text = tpl.text
        for lv in itertools.product(range(1, lmax + 1), repeat=arity):
            lengths = dict(zip(slots, lv))
            for _ in range(hot_per_lv):
                chosen = {
                    s: tuple(rng.choice(vocab) for _ in range(lengths[s]))
                    for s in slots
                }
                for si, s in enumerate(slots):
                    for j in range(lengths[s]):
                        states = {}
                        for oi, o in enumerate(slots):
                            if oi < si:
                                states[o] = Filled(chosen[o])
                            elif o == s:
                                states[o] = partial_state(chosen[s][:j], lengths[s])
                            else:
                                states[o] = Masked(lengths[o])
                        q = MaskedQuery(tpl, states, (s, j))
                        key = (text, context_digest(q), focus_digest(q))
                        d = probs_by_key.setdefault(key, {})
                        tok = chosen[s][j]
                        # keep at least one vocab token unnamed so the row
                        # always has residual mass to hand out
                        if tok not in d and len(d) < len(vocab) - 1:
                            p = rng.uniform(0.05, 0.3)
                            if sum(d.values()) + p <= 0.85:
                                d[tok] = round(p, 6)
    entries = tuple(
        MockEntry(text, ctx, foc, dict(sorted(d.items())))
        for (text, ctx, foc), d in sorted(probs_by_key.items())
        if d
    )
    return MockTable(
        scorer_id=scorer_id,
        lmax=lmax,
        vocab=tuple(vocab),
        entries=entries,
        default={},
    )


def skewed_table(vocab=None) -> MockTable:
    """One dominant root token; everything below it is uniform.

    With a small candidate budget the heap threshold rises past the flat
    tail after the first branch, so pruning must cut strictly more than
    zero scorer calls.
    """
    vocab = vocab or words(6)
    text = TEMPLATE_TEXTS[2][0]
    return MockTable(
        scorer_id="mock-skewed",
        lmax=1,
        vocab=tuple(vocab),
        entries=(MockEntry(text, "A=*1|B=*1", "A:0", {vocab[0]: 0.9}),),
        default={},
    )


# ---------------------------------------------------------------------------
# brute-force proposal oracle


def brute_force_top(wps: WeightedPromptSet, scorer, lmax: int, limit: int):
    """Full-enumeration reference for the proposal stage.

    Enumerates every length vector and token assignment, computes each
    position's weighted token log-probability from scratch (earlier slots
    filled, the current one partially filled, later ones masked), takes the
    min, and keeps the top ``limit`` under the shared tie rule (score
    descending, then entity strings ascending). Position scores are memoized
    by their full context; memoization of a pure function does not borrow
    any search logic.
    """
    vocab = scorer.vocab()
    slots = wps.relation.initial_prompt.slots
    memo: dict[tuple, float] = {}

    def position_lp(lengths: tuple[int, ...], tokens, si: int, j: int) -> float:
        key = (lengths, si, j, tokens[:si], tokens[si][: j + 1])
        hit = memo.get(key)
        if hit is not None:
            return hit
        total = 0.0
        for tpl, w in wps.prompts:
            states = {}
            for oi, o in enumerate(slots):
                if oi < si:
                    states[o] = Filled(tokens[oi])
                elif oi == si:
                    states[o] = partial_state(tokens[si][:j], lengths[si])
                else:
                    states[o] = Masked(lengths[oi])
            q = MaskedQuery(tpl, states, (slots[si], j))
            total += w * scorer.token_logprob_of([q], [tokens[si][j]])[0]
        memo[key] = total
        return total

    results: list[tuple[tuple[str, ...], float]] = []
    for lv in itertools.product(range(1, lmax + 1), repeat=len(slots)):
        spaces = [itertools.product(vocab, repeat=k) for k in lv]
        for combo in itertools.product(*spaces):
            mtl = min(
                position_lp(lv, combo, si, j)
                for si in range(len(slots))
                for j in range(lv[si])
            )
            ents = tuple(" ".join(part) for part in combo)
            results.append((ents, mtl))
    results.sort(key=lambda r: (-r[1], r[0]))
    return results[:limit]


# ---------------------------------------------------------------------------
# scripted paraphrasing


class TemplateRewriter:
    """Deterministic paraphraser: recognizes which seed tuple the sentence
    was built from and renders fixed rewrite templates with its entities."""

    def __init__(self, seeds, rewrites):
        self.seeds = tuple(seeds)
        self.rewrites = tuple(rewrites)

    def paraphrase(self, sentence: str, n: int) -> list[str]:
        low = sentence.casefold()
        for seed in self.seeds:
            if all(e.casefold() in low for e in seed.entities):
                parts = {
                    slot_letter(i): e for i, e in enumerate(seed.entities)
                }
                out = [PromptTemplate(r).render(parts) for r in self.rewrites]
                return out[:n] if n < len(out) else out
        return [sentence] * n


def build_transcript(path, relation, paraphraser, **collect_kwargs) -> None:
    """Record the paraphrase traffic of one collect run for exact replay."""
    rec = RecordingParaphraser(paraphraser)
    collect_prompts(relation, rec, **collect_kwargs)
    save_transcript(rec.records, path)


# ---------------------------------------------------------------------------
# wire-protocol stub service


class StubState:
    """Shared state of one stub service: the backing scorer, fault-injection
    knobs, and a request log of (path, item_count) pairs."""

    def __init__(self, scorer: MockScorer):
        self.scorer = scorer
        self.behavior: dict = {}
        self.log: list[tuple[str, int]] = []
        self.lock = threading.Lock()

    def take_fault(self, key: str) -> bool:
        # counter-style flag: each trigger consumes one unit
        with self.lock:
            n = self.behavior.get(key, 0)
            if n > 0:
                self.behavior[key] = n - 1
                return True
            return False


class _StubHandler(BaseHTTPRequestHandler):
    state: StubState  # set on the subclass by start_stub

    def log_message(self, *args):  # keep pytest output clean
        pass

    def _send(self, code: int, doc) -> None:
        body = doc if isinstance(doc, bytes) else json.dumps(doc).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_json(self):
        length = int(self.headers.get("Content-Length", "0"))
        return json.loads(self.rfile.read(length))

    def do_GET(self):
        st = self.state
        if st.take_fault("fail_next"):
            self._send(500, {"error": "injected failure"})
            return
        if self.path == "/v1/info":
            info = st.scorer.info()
            doc = {
                "scorer_id": info.scorer_id,
                "vocab_size": info.vocab_size,
                "tokenizer_id": info.tokenizer_id,
                "lmax": info.lmax,
            }
            if st.behavior.get("bad_info"):
                doc.pop("vocab_size")
            self._send(200, doc)
        else:
            self._send(404, {"error": f"no such path {self.path}"})

    def do_POST(self):
        st = self.state
        if st.take_fault("fail_next"):
            self._send(500, {"error": "injected failure"})
            return
        if st.behavior.get("garbage"):
            self._send(200, b"not json at all")
            return
        try:
            doc = self._read_json()
        except (ValueError, KeyError):
            self._send(400, {"error": "bad json"})
            return
        try:
            if self.path == "/v1/tokenize":
                texts = doc["texts"]
                if not isinstance(texts, list) or not texts:
                    self._send(422, {"error": "texts must be a nonempty list"})
                    return
                with st.lock:
                    st.log.append(("tokenize", len(texts)))
                rows = [list(st.scorer.tokenize(t)) for t in texts]
                self._send(200, {"tokens": rows})
            elif self.path == "/v1/detokenize":
                rows = doc["tokens"]
                with st.lock:
                    st.log.append(("detokenize", len(rows)))
                self._send(200, {"texts": [st.scorer.detokenize(r) for r in rows]})
            elif self.path == "/v1/logprobs":
                self._logprobs(doc)
            elif self.path == "/v1/paraphrase":
                sentence, n = doc["sentence"], int(doc["n"])
                if n < 0:
                    self._send(422, {"error": "n must be >= 0"})
                    return
                variants = [f"{sentence} indeed", f"so {sentence}", f"{sentence} too"]
                self._send(200, {"paraphrases": variants[:n]})
            else:
                self._send(404, {"error": f"no such path {self.path}"})
        except ValidationError as exc:
            self._send(400, {"error": str(exc)})
        except Exception as exc:  # noqa: BLE001 - stub mirrors a real 500
            self._send(500, {"error": f"{type(exc).__name__}: {exc}"})

    def _logprobs(self, doc) -> None:
        st = self.state
        items = doc["items"]
        mode = doc.get("mode", "full")
        if not isinstance(items, list) or not items:
            self._send(422, {"error": "items must be a nonempty list"})
            return
        if len(items) > 64:
            self._send(413, {"error": "batch too large"})
            return
        with st.lock:
            st.log.append((f"logprobs:{mode}", len(items)))
        queries = []
        for item in items:
            states = {
                slot: state_from_wire(s)
                for slot, s in item["slot_states"].items()
            }
            focus = (item["focus"]["slot"], int(item["focus"]["index"]))
            queries.append(
                MaskedQuery(PromptTemplate(item["template"]), states, focus)
            )
        if mode == "full":
            rows = st.scorer.token_logprobs(queries)
            out = []
            for row in rows:
                arr = np.array(row)
                if st.behavior.get("denorm"):
                    arr = arr + float(st.behavior["denorm"])
                out.append([float(x) for x in arr])
            if st.behavior.get("wrong_shape"):
                out = out[:-1]
            self._send(200, {"distributions": out})
        elif mode == "topm":
            m = doc.get("m")
            requested = doc.get("requested")
            pairs = st.scorer.top_token_logprobs(queries, m=m, requested=requested)
            rows = []
            for toks, lps in pairs:
                # requested tokens sit at the row tail, so dropping the last
                # entry simulates a backend that ignored the request
                if st.behavior.get("drop_requested") and len(toks) > 0:
                    toks, lps = toks[:-1], lps[:-1]
                rows.append(
                    {"tokens": list(toks), "logprobs": [float(x) for x in lps]}
                )
            self._send(200, {"top": rows})
        else:
            self._send(422, {"error": f"unknown mode {mode!r}"})


def start_stub(scorer: MockScorer):
    """Start a wire-protocol stub on a free port; returns (state, url, server)."""
    state = StubState(scorer)
    handler = type("Handler", (_StubHandler,), {"state": state})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    url = f"http://127.0.0.1:{server.server_port}"
    return state, url, server
