"""Candidate search and selection: the harvesting core.

Proposal walks every entity-length assignment (l1..ln), filling token
positions slot by slot in canonical order. At each position the weighted
token log-probability across prompts is

    agg(v) = sum_p w_p * log P_p(v | tokens filled so far, rest masked)

and a finished tuple's objective is the minimum of agg over its token
positions (MTL). A capped min-heap holds the best N tuples seen; once full,
its weakest MTL is a threshold, and any branch whose running minimum falls
strictly below it is pruned. Because deeper positions can only lower the
running minimum, pruning never discards a tuple that belongs in the top N:
the search is exact, matching plain enumeration.

Selection rescores the proposed candidates with the full prompt-weighted
consistency, caps how often any single entity string may appear, and applies
a threshold policy. Ties are always broken lexicographically on entity
strings so results are stable across runs and platforms.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import KGHarvestError, ParseError, ServiceError, StageError, ValidationError
from .paraphrase import Paraphraser
from .prompts import collect_prompts, prompt_set_hash, weight_prompts
from .relations import (
    EntityTuple,
    KnowledgeGraph,
    Provenance,
    RelationSchema,
    ScoredTuple,
    WeightedPromptSet,
    canonical_hash,
    format_score,
    kg_sort_key,
    parse_score,
)
from .scoring import (
    Filled,
    Masked,
    MaskedQuery,
    Scorer,
    partial_state,
)

CHECKPOINT_VERSION = 1

ProgressFn = Callable[[dict], None]


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TopHalf:
    pass


@dataclass(frozen=True)
class BaseK:
    k: int
    factor: float = 0.1

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("base-k rank must be >= 1")
        if not self.factor > 0:
            raise ValidationError("base-k factor must be positive")


@dataclass(frozen=True)
class TopK:
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("top-k count must be >= 1")


ThresholdPolicy = Union[TopHalf, BaseK, TopK, None]


def threshold_to_dict(policy: ThresholdPolicy) -> dict:
    if policy is None:
        return {"kind": "none"}
    if isinstance(policy, TopHalf):
        return {"kind": "top-half"}
    if isinstance(policy, BaseK):
        return {"kind": "base-k", "k": policy.k, "factor": format_score(policy.factor)}
    if isinstance(policy, TopK):
        return {"kind": "top-k", "k": policy.k}
    raise ValidationError(f"unknown threshold policy {policy!r}")


def parse_threshold(spec: str) -> ThresholdPolicy:
    """Parse a CLI threshold spec: none | top-half | top-k:<k> | base-k:<k>[:<factor>]."""
    parts = spec.split(":")
    kind = parts[0]
    try:
        if kind == "none" and len(parts) == 1:
            return None
        if kind == "top-half" and len(parts) == 1:
            return TopHalf()
        if kind == "top-k" and len(parts) == 2:
            return TopK(int(parts[1]))
        if kind == "base-k" and len(parts) in (2, 3):
            factor = float(parts[2]) if len(parts) == 3 else 0.1
            return BaseK(int(parts[1]), factor)
    except ValueError as exc:
        raise ValidationError(f"bad threshold spec {spec!r}: {exc}") from None
    raise ValidationError(
        f"bad threshold spec {spec!r}; expected none, top-half, top-k:<k> "
        "or base-k:<k>[:<factor>]"
    )


@dataclass(frozen=True)
class SearchConfig:
    """Knobs of the search-and-rescore pipeline.

    ``max_candidates`` is the proposal budget N; ``lmax`` caps tokens per
    entity; ``entity_cap`` caps how many kept tuples may share one entity
    string; ``alpha`` balances joint against weakest-link likelihood;
    ``candidate_pool`` is the per-position token pool used only when the
    backend cannot enumerate its vocabulary. ``pruning`` exists so tests can
    compare against the unpruned search; results are identical either way.
    """

    max_candidates: int = 50_000
    lmax: int = 3
    entity_cap: int = 10
    alpha: float = 2.0 / 3.0
    threshold: ThresholdPolicy = None
    pruning: bool = True
    joint_order: str = "surface"
    candidate_pool: int = 256

    def __post_init__(self):
        if self.max_candidates < 1:
            raise ValidationError("max_candidates must be >= 1")
        if self.lmax < 1:
            raise ValidationError("lmax must be >= 1")
        if self.entity_cap < 1:
            raise ValidationError("entity_cap must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.joint_order not in ("surface", "symmetric-mean"):
            raise ValidationError(f"unknown joint_order {self.joint_order!r}")
        if self.candidate_pool < 1:
            raise ValidationError("candidate_pool must be >= 1")
        threshold_to_dict(self.threshold)

    def to_dict(self) -> dict:
        return {
            "max_candidates": self.max_candidates,
            "lmax": self.lmax,
            "entity_cap": self.entity_cap,
            "alpha": format_score(self.alpha),
            "threshold": threshold_to_dict(self.threshold),
            "pruning": self.pruning,
            "joint_order": self.joint_order,
            "candidate_pool": self.candidate_pool,
        }

    def proposal_dict(self) -> dict:
        """The subset of fields the proposal stage depends on; checkpoints
        are keyed on this, so selection knobs can change on resume."""
        return {
            "max_candidates": self.max_candidates,
            "lmax": self.lmax,
            "candidate_pool": self.candidate_pool,
        }


def config_hash(config: SearchConfig) -> str:
    return canonical_hash(config.to_dict())


def proposal_hash(config: SearchConfig) -> str:
    return canonical_hash(config.proposal_dict())


# ---------------------------------------------------------------------------
# proposal heap


class _HeapEntry:
    """Orders so the heap minimum is the entry to evict first: lowest MTL,
    ties going to the lexicographically largest entity strings."""

    __slots__ = ("mtl", "entities", "tokens")

    def __init__(self, mtl: float, entities: tuple[str, ...], tokens: tuple[tuple[str, ...], ...]):
        self.mtl = mtl
        self.entities = entities
        self.tokens = tokens

    def __lt__(self, other: "_HeapEntry") -> bool:
        if self.mtl != other.mtl:
            return self.mtl < other.mtl
        return self.entities > other.entities


class ProposalHeap:
    """Size-capped min-heap of the best candidates by MTL.

    ``threshold`` is the weakest kept MTL once the heap is full, else -inf.
    Reading it without the lock is fine: a stale (lower) value only weakens
    pruning, never correctness.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValidationError("heap capacity must be >= 1")
        self.capacity = capacity
        self._heap: list[_HeapEntry] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._heap)

    @property
    def full(self) -> bool:
        return len(self._heap) >= self.capacity

    def threshold(self) -> float:
        heap = self._heap
        if len(heap) >= self.capacity:
            return heap[0].mtl
        return -math.inf

    def offer(self, mtl: float, entities: tuple[str, ...],
              tokens: tuple[tuple[str, ...], ...]) -> bool:
        entry = _HeapEntry(mtl, entities, tokens)
        with self._lock:
            if len(self._heap) < self.capacity:
                heapq.heappush(self._heap, entry)
                return True
            if self._heap[0] < entry:
                heapq.heapreplace(self._heap, entry)
                return True
            return False

    def items(self) -> list[_HeapEntry]:
        """Entries sorted best-first: MTL descending, entities ascending."""
        return sorted(self._heap, key=lambda e: (-e.mtl, e.entities))


# ---------------------------------------------------------------------------
# proposal search


@dataclass
class ProposalResult:
    candidates: list[tuple[EntityTuple, float]]
    scorer_queries: int
    pruned_edges: int
    audit_checked: int = 0
    audit_violations: int = 0


class SearchAborted(KGHarvestError):
    """Scorer failure mid-search; carries what was found so far."""

    def __init__(self, cause: Exception, partial: list[tuple[EntityTuple, float]]):
        super().__init__(f"search aborted: {cause}")
        self.cause = cause
        self.partial = partial


class _Counter:
    __slots__ = ("value", "_lock")

    def __init__(self):
        self.value = 0
        self._lock = threading.Lock()

    def add(self, n: int) -> None:
        with self._lock:
            self.value += n


class _Search:
    def __init__(self, wps: WeightedPromptSet, scorer: Scorer, config: SearchConfig,
                 progress: Optional[ProgressFn], audit: bool):
        self.templates = wps.templates
        self.weights = np.asarray(wps.weights, dtype=np.float64)
        self.scorer = scorer
        self.config = config
        self.slots = self.templates[0].slots
        self.vocab = scorer.vocab()
        self.heap = ProposalHeap(config.max_candidates)
        self.queries = _Counter()
        self.pruned = _Counter()
        self.completed = _Counter()
        self.progress = progress
        self.audit = audit
        self.audit_log: list[tuple] = []  # (lv, filled, pruned tokens, threshold)
        self._emit_every = 2048
        self._emitted_at = 0
        info = scorer.info()
        if config.lmax > info.lmax:
            raise ValidationError(
                f"config lmax {config.lmax} exceeds scorer lmax {info.lmax}"
            )

    # -- scoring ------------------------------------------------------------

    def _queries_at(self, lv: dict[str, int], filled: dict[str, tuple[str, ...]],
                    pos_slot: str) -> list[MaskedQuery]:
        prefix = filled[pos_slot]
        out = []
        for tpl in self.templates:
            states = {}
            for slot in self.slots:
                have = filled[slot]
                if slot == pos_slot:
                    states[slot] = partial_state(prefix, lv[slot])
                elif len(have) == lv[slot]:
                    states[slot] = Filled(have)
                else:
                    states[slot] = Masked(lv[slot])
            out.append(MaskedQuery(tpl, states, (pos_slot, len(prefix))))
        return out

    def _support(self, lv, filled, pos_slot, counter: _Counter):
        """Candidate tokens and their aggregated weighted log-probs at the
        current position, sorted best-first (tie: token ascending)."""
        queries = self._queries_at(lv, filled, pos_slot)
        counter.add(len(queries))
        if self.vocab is not None:
            rows = self.scorer.token_logprobs(queries)
            agg = np.zeros(len(self.vocab), dtype=np.float64)
            for w, row in zip(self.weights, rows):
                agg = agg + w * row
            tokens = self.vocab
        else:
            pool = self.config.candidate_pool
            tops = self.scorer.top_token_logprobs(queries, m=pool)
            union = sorted(set(itertools.chain.from_iterable(t for t, _ in tops)))
            maps = [dict(zip(toks, lps)) for toks, lps in tops]
            missing_idx = []
            missing_req = []
            for i, known in enumerate(maps):
                need = [t for t in union if t not in known]
                if need:
                    missing_idx.append(i)
                    missing_req.append(need)
            if missing_idx:
                fills = self.scorer.top_token_logprobs(
                    [queries[i] for i in missing_idx], m=0, requested=missing_req
                )
                counter.add(len(missing_idx))
                for i, (toks, lps) in zip(missing_idx, fills):
                    maps[i].update(zip(toks, lps))
            agg = np.zeros(len(union), dtype=np.float64)
            for w, known in zip(self.weights, maps):
                agg = agg + w * np.asarray([known[t] for t in union], dtype=np.float64)
            tokens = tuple(union)
        order = sorted(range(len(tokens)), key=lambda i: (-agg[i], tokens[i]))
        return [tokens[i] for i in order], agg[np.asarray(order, dtype=np.intp)]

    # -- DFS ----------------------------------------------------------------

    def _positions(self, lv: dict[str, int]) -> list[str]:
        """Flat position list: the slot of each token position in fill order."""
        out = []
        for slot in self.slots:
            out.extend([slot] * lv[slot])
        return out

    def _descend(self, lv: dict[str, int], positions: list[str], depth: int,
                 filled: dict[str, tuple[str, ...]], running: float) -> None:
        pos_slot = positions[depth]
        tokens, agg = self._support(lv, filled, pos_slot, self.queries)
        last = depth == len(positions) - 1
        prune_on = self.config.pruning
        for i, tok in enumerate(tokens):
            new_running = min(running, float(agg[i]))
            if prune_on and self.heap.full and new_running < self.heap.threshold():
                # agg is sorted descending, so every remaining token is at
                # least as bad; drop them all
                remaining = len(tokens) - i
                self.pruned.add(remaining)
                if self.audit:
                    self.audit_log.append(
                        (dict(lv), {s: t for s, t in filled.items()},
                         list(tokens[i:]), self.heap.threshold(), running)
                    )
                break
            child = dict(filled)
            child[pos_slot] = filled[pos_slot] + (tok,)
            if last:
                self._finish(lv, child, new_running)
            else:
                self._descend(lv, positions, depth + 1, child, new_running)

    def _finish(self, lv, filled, mtl: float) -> None:
        token_lists = tuple(filled[s] for s in self.slots)
        entities = tuple(" ".join(toks) for toks in token_lists)
        self.heap.offer(mtl, entities, token_lists)
        self.completed.add(1)
        if self.progress is not None:
            done = self.completed.value
            if done - self._emitted_at >= self._emit_every:
                self._emitted_at = done
                self._emit("proposal")

    def _emit(self, stage: str) -> None:
        if self.progress is not None:
            self.progress(
                {
                    "stage": stage,
                    "tuples_proposed": self.completed.value,
                    "scorer_calls": self.queries.value,
                    "prune_count": self.pruned.value,
                }
            )

    def run(self, workers: int = 1) -> ProposalResult:
        length_vectors = [
            dict(zip(self.slots, combo))
            for combo in itertools.product(
                range(1, self.config.lmax + 1), repeat=len(self.slots)
            )
        ]
        try:
            for lv in length_vectors:
                positions = self._positions(lv)
                empty = {s: () for s in self.slots}
                if workers <= 1 or len(positions) == 1:
                    self._descend(lv, positions, 0, empty, math.inf)
                    continue
                # parallel mode: expand the root by hand, then fan out
                tokens, agg = self._support(lv, empty, positions[0], self.queries)
                pairs = list(zip(tokens, agg))
                chunks = [pairs[i::workers] for i in range(workers)]

                def work(chunk):
                    for tok, a in chunk:
                        new_running = float(a)
                        if (
                            self.config.pruning
                            and self.heap.full
                            and new_running < self.heap.threshold()
                        ):
                            self.pruned.add(1)
                            if self.audit:
                                self.audit_log.append(
                                    (dict(lv), dict(empty), [tok],
                                     self.heap.threshold(), math.inf)
                                )
                            continue
                        child = dict(empty)
                        child[positions[0]] = (tok,)
                        if len(positions) == 1:
                            self._finish(lv, child, new_running)
                        else:
                            self._descend(lv, positions, 1, child, new_running)

                with ThreadPoolExecutor(max_workers=workers) as pool:
                    futures = [pool.submit(work, c) for c in chunks if c]
                    for fut in futures:
                        fut.result()
        except (ServiceError, ValidationError) as exc:
            raise SearchAborted(exc, self._collect()) from exc

        result = ProposalResult(
            candidates=self._collect(),
            scorer_queries=self.queries.value,
            pruned_edges=self.pruned.value,
        )
        if self.audit:
            checked, violations = self._run_audit()
            result.audit_checked = checked
            result.audit_violations = violations
        self._emit("proposal-done")
        return result

    def _collect(self) -> list[tuple[EntityTuple, float]]:
        return [
            (EntityTuple(e.entities), e.mtl) for e in self.heap.items()
        ]

    # -- audit: force-expand pruned branches --------------------------------

    def _run_audit(self) -> tuple[int, int]:
        """Expand every pruned branch without pruning and verify that all of
        its completions score strictly below the threshold seen at prune
        time. Queries issued here are tracked separately."""
        audit_queries = _Counter()
        checked = violations = 0
        for lv, filled, tokens, thr, running in self.audit_log:
            positions = self._positions(lv)
            depth = sum(len(v) for v in filled.values())
            pos_slot = positions[depth]
            toks, agg = self._support(lv, filled, pos_slot, audit_queries)
            by_tok = dict(zip(toks, agg))
            for tok in tokens:
                child = dict(filled)
                child[pos_slot] = filled[pos_slot] + (tok,)
                new_running = min(running, float(by_tok[tok]))
                for mtl in self._enumerate_mtls(lv, positions, depth + 1, child,
                                                new_running, audit_queries):
                    checked += 1
                    if not mtl < thr:
                        violations += 1
        return checked, violations

    def _enumerate_mtls(self, lv, positions, depth, filled, running, counter):
        if depth == len(positions):
            yield running
            return
        pos_slot = positions[depth]
        toks, agg = self._support(lv, filled, pos_slot, counter)
        for tok, a in zip(toks, agg):
            child = dict(filled)
            child[pos_slot] = filled[pos_slot] + (tok,)
            yield from self._enumerate_mtls(
                lv, positions, depth + 1, child, min(running, float(a)), counter
            )


def propose_candidates(
    wps: WeightedPromptSet,
    scorer: Scorer,
    config: SearchConfig,
    progress: Optional[ProgressFn] = None,
    workers: int = 1,
    audit: bool = False,
) -> ProposalResult:
    """Exact top-N candidate tuples by minimum token log-likelihood.

    Returns candidates sorted by MTL descending (ties lexicographic on
    entities) along with query accounting. ``audit=True`` re-expands every
    pruned branch and counts threshold violations (always 0; exposed so the
    soundness claim is checkable rather than asserted).
    """
    if not wps.prompts:
        raise ValidationError("prompt set is empty")
    return _Search(wps, scorer, config, progress, audit).run(workers=workers)


# ---------------------------------------------------------------------------
# rescoring and selection


def _tokenize_entities(scorer: Scorer, entities: Sequence[str]) -> dict[str, tuple[str, ...]]:
    distinct = sorted(set(entities))
    many = getattr(scorer, "tokenize_many", None)
    if many is not None:
        rows = many(distinct)
        out = dict(zip(distinct, rows))
    else:
        out = {e: scorer.tokenize(e) for e in distinct}
    lmax = scorer.info().lmax
    for e, toks in out.items():
        if not 1 <= len(toks) <= lmax:
            raise ValidationError(
                f"entity {e!r} tokenizes to {len(toks)} tokens, allowed 1..{lmax}"
            )
    return out


def _chain_orders(template, joint_order: str):
    if joint_order == "surface":
        return [template.slot_order]
    return list(itertools.permutations(template.slots))


def rescore_many(
    tuples: Sequence[EntityTuple],
    wps: WeightedPromptSet,
    scorer: Scorer,
    alpha: float,
    joint_order: str = "surface",
    mtls: Optional[Sequence[Optional[float]]] = None,
) -> list[ScoredTuple]:
    """Full consistency for a batch of tuples, one scorer round per batch.

    Queries for every (tuple, prompt, chain position) are assembled into one
    flat list so the backend can batch them; results are folded back into
    per-prompt compatibility scores and the weighted consistency.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    if mtls is None:
        mtls = [None] * len(tuples)
    templates = wps.templates
    weights = wps.weights
    arity = wps.relation.arity
    for t in tuples:
        if t.arity != arity:
            raise ValidationError(f"tuple {list(t)} arity {t.arity} != {arity}")

    token_map = _tokenize_entities(
        scorer, [e for t in tuples for e in t.entities]
    )

    queries: list[MaskedQuery] = []
    targets: list[str] = []
    # slices[(ti, pi, order_idx, slot)] = (start, end) into the flat results
    slices: dict[tuple[int, int, int, str], tuple[int, int]] = {}
    for ti, tup in enumerate(tuples):
        for pi, tpl in enumerate(templates):
            tokens_by_slot = {
                slot: token_map[ent] for slot, ent in zip(tpl.slots, tup.entities)
            }
            for oi, order in enumerate(_chain_orders(tpl, joint_order)):
                seen: set[str] = set()
                for slot in order:
                    target = tokens_by_slot[slot]
                    start = len(queries)
                    for j in range(len(target)):
                        states = {}
                        for other in tpl.slots:
                            toks = tokens_by_slot[other]
                            if other == slot:
                                states[other] = partial_state(target[:j], len(target))
                            elif other in seen:
                                states[other] = Filled(toks)
                            else:
                                states[other] = Masked(len(toks))
                        queries.append(MaskedQuery(tpl, states, (slot, j)))
                        targets.append(target[j])
                    slices[(ti, pi, oi, slot)] = (start, len(queries))
                    seen.add(slot)

    lps = scorer.token_logprob_of(queries, targets) if queries else []

    out: list[ScoredTuple] = []
    for ti, tup in enumerate(tuples):
        per_prompt: list[tuple[int, float]] = []
        consistency = 0.0
        for pi, tpl in enumerate(templates):
            orders = _chain_orders(tpl, joint_order)
            joint_sums = []
            surface_terms: dict[str, float] = {}
            for oi, order in enumerate(orders):
                total = 0.0
                for slot in order:
                    start, end = slices[(ti, pi, oi, slot)]
                    term = float(sum(lps[start:end]))
                    total += term
                    if order == tpl.slot_order:
                        surface_terms[slot] = term
                joint_sums.append(total)
            if not surface_terms:
                # surface order not among the enumerated orders cannot happen:
                # permutations always include it
                raise KGHarvestError("internal: surface order missing")
            joint = joint_sums[0] if joint_order == "surface" else float(
                np.mean(joint_sums)
            )
            score = alpha * joint + (1.0 - alpha) * min(surface_terms.values())
            per_prompt.append((pi, score))
            consistency += weights[pi] * score
        out.append(
            ScoredTuple(
                entities=tup,
                consistency=consistency,
                per_prompt=tuple(per_prompt),
                proposal_mtl=mtls[ti],
            )
        )
    return out


def consistency(
    tup: EntityTuple,
    wps: WeightedPromptSet,
    scorer: Scorer,
    alpha: float,
    joint_order: str = "surface",
) -> ScoredTuple:
    """Prompt-weight-averaged compatibility of one tuple."""
    return rescore_many([tup], wps, scorer, alpha, joint_order)[0]


def apply_entity_cap(scored: Sequence[ScoredTuple], cap: int) -> list[ScoredTuple]:
    """Greedy pass over tuples sorted best-first: keep a tuple only if none
    of its entity strings would exceed ``cap`` occurrences among kept tuples
    (occurrences counted across all slots)."""
    if cap < 1:
        raise ValidationError("entity_cap must be >= 1")
    counts: dict[str, int] = {}
    kept = []
    for st in scored:
        mult: dict[str, int] = {}
        for e in st.entities:
            mult[e] = mult.get(e, 0) + 1
        if all(counts.get(e, 0) + m <= cap for e, m in mult.items()):
            kept.append(st)
            for e, m in mult.items():
                counts[e] = counts.get(e, 0) + m
    return kept


def apply_threshold(scored: Sequence[ScoredTuple], policy: ThresholdPolicy) -> list[ScoredTuple]:
    """Cut a best-first sorted list per the policy.

    TopHalf keeps the upper floor(n/2). TopK keeps k. BaseK keeps every tuple
    whose likelihood-scale score exp(consistency) is at least factor times
    the k-th tuple's; computed in log space as consistency >= s_k +
    ln(factor). Fewer than k tuples means no threshold is defined and all are
    kept.
    """
    scored = list(scored)
    if policy is None:
        return scored
    if isinstance(policy, TopHalf):
        return scored[: len(scored) // 2]
    if isinstance(policy, TopK):
        return scored[: policy.k]
    if isinstance(policy, BaseK):
        if len(scored) < policy.k:
            return scored
        cutoff = scored[policy.k - 1].consistency + math.log(policy.factor)
        return [st for st in scored if st.consistency >= cutoff]
    raise ValidationError(f"unknown threshold policy {policy!r}")


def rescore_and_select(
    candidates: Sequence[tuple[EntityTuple, float]],
    wps: WeightedPromptSet,
    scorer: Scorer,
    config: SearchConfig,
    progress: Optional[ProgressFn] = None,
    chunk_size: int = 1024,
) -> KnowledgeGraph:
    """Rescore proposed candidates by consistency, sort, cap, threshold."""
    if not candidates:
        raise ValidationError("no candidates to select from")
    scored: list[ScoredTuple] = []
    for start in range(0, len(candidates), chunk_size):
        chunk = candidates[start : start + chunk_size]
        scored.extend(
            rescore_many(
                [t for t, _ in chunk],
                wps,
                scorer,
                config.alpha,
                config.joint_order,
                mtls=[m for _, m in chunk],
            )
        )
        if progress is not None:
            progress(
                {
                    "stage": "rescore",
                    "tuples_scored": len(scored),
                    "tuples_total": len(candidates),
                }
            )
    scored.sort(key=kg_sort_key)
    capped = apply_entity_cap(scored, config.entity_cap)
    kept = apply_threshold(capped, config.threshold)
    prov = Provenance(
        scorer_id=scorer.info().scorer_id,
        prompt_hash=prompt_set_hash(wps),
        config_hash=config_hash(config),
    )
    return KnowledgeGraph(
        relation_name=wps.relation.name,
        arity=wps.relation.arity,
        provenance=prov,
        tuples=kept,
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path,
    relation_name: str,
    prompt_hash: str,
    search_hash: str,
    candidates: Sequence[tuple[EntityTuple, float]],
    complete: bool = True,
) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": "checkpoint",
        "relation": relation_name,
        "prompt_hash": prompt_hash,
        "config_hash": search_hash,
        "complete": complete,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, ensure_ascii=False) + "\n")
        for tup, mtl in candidates:
            fh.write(
                json.dumps(
                    {"entities": list(tup.entities), "mtl": format_score(mtl)},
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_checkpoint(path) -> tuple[dict, list[tuple[EntityTuple, float]]]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read checkpoint {path}: {exc}") from None
    if not lines:
        raise ParseError(f"checkpoint {path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint {path}: bad header: {exc}") from None
    if header.get("version") != CHECKPOINT_VERSION or header.get("kind") != "checkpoint":
        raise ParseError(f"checkpoint {path}: unrecognized header")
    candidates = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            candidates.append(
                (EntityTuple(tuple(rec["entities"])), parse_score(rec["mtl"]))
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"checkpoint {path}:{lineno}: bad record ({exc!r})") from None
    return header, candidates


# ---------------------------------------------------------------------------
# end-to-end pipeline


@dataclass
class HarvestOutput:
    kg: KnowledgeGraph
    wps: WeightedPromptSet
    proposal: ProposalResult
    warnings: tuple[str, ...] = ()


def harvest(
    relation: RelationSchema,
    scorer: Scorer,
    paraphraser: Paraphraser,
    config: SearchConfig,
    min_count: int = 10,
    max_rounds: int = 5,
    min_distance: int = 3,
    n_per_call: int = 5,
    tau: float = 1.0,
    rng_seed: Optional[int] = None,
    progress: Optional[ProgressFn] = None,
    workers: int = 1,
    checkpoint_path=None,
) -> HarvestOutput:
    """The full pipeline: expand prompts, weight them, propose candidates,
    rescore and select. Any stage failure is re-raised tagged with the stage
    name; a scorer failure during proposal leaves a partial checkpoint behind
    when a checkpoint path is given."""
    try:
        collected = collect_prompts(
            relation,
            paraphraser,
            min_count=min_count,
            max_rounds=max_rounds,
            min_distance=min_distance,
            n_per_call=n_per_call,
            rng_seed=rng_seed,
        )
    except KGHarvestError as exc:
        raise StageError("prompts", exc) from exc
    try:
        wps = weight_prompts(
            collected.prompts,
            relation,
            scorer,
            config.alpha,
            tau=tau,
            rng_seed=rng_seed,
            joint_order=config.joint_order,
        )
    except KGHarvestError as exc:
        raise StageError("weights", exc) from exc
    try:
        proposal = propose_candidates(
            wps, scorer, config, progress=progress, workers=workers
        )
    except SearchAborted as exc:
        if checkpoint_path is not None:
            save_checkpoint(
                checkpoint_path,
                relation.name,
                prompt_set_hash(wps),
                proposal_hash(config),
                exc.partial,
                complete=False,
            )
        raise StageError("proposal", exc.cause) from exc
    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path,
            relation.name,
            prompt_set_hash(wps),
            proposal_hash(config),
            proposal.candidates,
        )
    try:
        kg = rescore_and_select(
            proposal.candidates, wps, scorer, config, progress=progress
        )
    except KGHarvestError as exc:
        raise StageError("selection", exc) from exc
    return HarvestOutput(kg=kg, wps=wps, proposal=proposal, warnings=collected.warnings)
