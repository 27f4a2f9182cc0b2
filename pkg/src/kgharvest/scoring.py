"""Masked-LM scoring interface and the compatibility arithmetic built on it.

A scorer backend exposes batched log-probability queries over fill-in-the-blank
prompt states. Two backends ship with the package (see :mod:`kgharvest.backends`):
a deterministic table-driven mock and a remote HTTP client.

The compatibility score of a tuple under one prompt blends the joint
log-likelihood of the full tuple with the weakest per-entity conditional:

    score = alpha * joint_ll + (1 - alpha) * min(individual_lls)

where the joint is chain-factorized over the prompt's surface slot order and
the individual terms are exactly the chain terms (earlier slots filled, later
slots masked at the true token lengths).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import ValidationError
from .relations import EntityTuple, PromptTemplate

JOINT_ORDERS = ("surface", "symmetric-mean")


@dataclass(frozen=True)
class Filled:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if isinstance(self.tokens, list):
            object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 1:
            raise ValidationError("Filled slot needs at least one token")


@dataclass(frozen=True)
class PartiallyFilled:
    prefix: tuple[str, ...]
    total: int

    def __post_init__(self):
        if isinstance(self.prefix, list):
            object.__setattr__(self, "prefix", tuple(self.prefix))
        if self.total < 1:
            raise ValidationError("slot length must be >= 1")
        if not 0 < len(self.prefix) < self.total:
            raise ValidationError(
                f"partial prefix of {len(self.prefix)} tokens must be shorter than "
                f"total {self.total} and nonempty (use Masked/Filled otherwise)"
            )


@dataclass(frozen=True)
class Masked:
    length: int

    def __post_init__(self):
        if self.length < 1:
            raise ValidationError("slot length must be >= 1")


SlotState = Filled | PartiallyFilled | Masked


def slot_length(state: SlotState) -> int:
    if isinstance(state, Filled):
        return len(state.tokens)
    if isinstance(state, PartiallyFilled):
        return state.total
    return state.length


def partial_state(prefix: Sequence[str], total: int) -> SlotState:
    """The slot state with `prefix` known out of `total` tokens."""
    prefix = tuple(prefix)
    if len(prefix) == 0:
        return Masked(total)
    if len(prefix) == total:
        return Filled(prefix)
    return PartiallyFilled(prefix, total)


@dataclass(frozen=True)
class MaskedQuery:
    """One LM scoring request: per-slot fill state plus the focus position.

    The focus must sit at the first non-filled token of its slot; within-slot
    factorization is strictly left to right.
    """

    template: PromptTemplate
    slot_states: Mapping[str, SlotState]
    focus: tuple[str, int]

    def __post_init__(self):
        states = dict(self.slot_states)
        object.__setattr__(self, "slot_states", states)
        if set(states) != set(self.template.slots):
            raise ValidationError(
                f"slot states {sorted(states)} do not match template slots "
                f"{list(self.template.slots)}"
            )
        fslot, fidx = self.focus
        state = states.get(fslot)
        if state is None:
            raise ValidationError(f"focus slot {fslot!r} not in template")
        if isinstance(state, Filled):
            raise ValidationError(f"focus slot {fslot!r} is fully filled")
        first_open = len(state.prefix) if isinstance(state, PartiallyFilled) else 0
        if fidx != first_open:
            raise ValidationError(
                f"focus index {fidx} is not the first open position "
                f"({first_open}) of slot {fslot!r}"
            )


@dataclass(frozen=True)
class ScorerInfo:
    scorer_id: str
    vocab_size: int
    tokenizer_id: str
    lmax: int

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValidationError("vocabulary size must be >= 2")


@runtime_checkable
class Scorer(Protocol):
    """Batched log-probability interface over masked prompt states.

    ``token_logprobs`` returns one full log-distribution per query (length V,
    logsumexp 0). ``vocab`` returns the index-aligned token strings, or None
    for backends whose vocabulary is not enumerable client-side; such backends
    serve the search through ``top_token_logprobs`` instead.
    """

    def info(self) -> ScorerInfo: ...

    def tokenize(self, text: str) -> tuple[str, ...]: ...

    def detokenize(self, tokens: Sequence[str]) -> str: ...

    def vocab(self) -> Optional[tuple[str, ...]]: ...

    def token_logprobs(self, batch: Sequence[MaskedQuery]) -> list[np.ndarray]: ...

    def token_logprob_of(
        self, batch: Sequence[MaskedQuery], tokens: Sequence[str]
    ) -> list[float]: ...

    def top_token_logprobs(
        self,
        batch: Sequence[MaskedQuery],
        m: Optional[int] = None,
        requested: Optional[Sequence[Sequence[str]]] = None,
    ) -> list[tuple[tuple[str, ...], np.ndarray]]: ...


# ---------------------------------------------------------------------------
# digests (shared by the mock table format and provenance hashing)


def state_digest(state: SlotState) -> str:
    if isinstance(state, Filled):
        return " ".join(state.tokens)
    if isinstance(state, PartiallyFilled):
        return " ".join(state.prefix) + f" *{state.total}"
    return f"*{state.length}"


def context_digest(query: MaskedQuery) -> str:
    return "|".join(
        f"{slot}={state_digest(query.slot_states[slot])}" for slot in query.template.slots
    )


def focus_digest(query: MaskedQuery) -> str:
    return f"{query.focus[0]}:{query.focus[1]}"


# ---------------------------------------------------------------------------
# entity-level and tuple-level scoring


def check_entity_tokens(scorer: Scorer, entity: str) -> tuple[str, ...]:
    """Tokenize one entity, enforcing the backend's length cap."""
    tokens = scorer.tokenize(entity)
    lmax = scorer.info().lmax
    if not 1 <= len(tokens) <= lmax:
        raise ValidationError(
            f"entity {entity!r} tokenizes to {len(tokens)} tokens, "
            f"allowed range is 1..{lmax}"
        )
    return tokens


def entity_logprob(
    scorer: Scorer,
    template: PromptTemplate,
    context: Mapping[str, SlotState],
    slot: str,
    target: Sequence[str],
) -> float:
    """Log-likelihood of a multi-token target in one slot, factorized left to
    right within the slot: position i conditions on target tokens < i filled
    and the rest of the slot masked, all other slots per ``context``."""
    target = tuple(target)
    lmax = scorer.info().lmax
    if not 1 <= len(target) <= lmax:
        raise ValidationError(
            f"target length {len(target)} outside 1..{lmax} for slot {slot!r}"
        )
    queries = []
    for i in range(len(target)):
        states = dict(context)
        states[slot] = partial_state(target[:i], len(target))
        queries.append(MaskedQuery(template, states, (slot, i)))
    lps = scorer.token_logprob_of(queries, list(target))
    return float(sum(lps))


@dataclass(frozen=True)
class CompatibilityBreakdown:
    """Per-prompt compatibility of one tuple.

    ``individual_lls`` is indexed by canonical slot (A=0, B=1, ...); entry i is
    the chain term of that slot under the surface-order factorization.
    """

    joint_ll: float
    individual_lls: tuple[float, ...]
    score: float


def _chain_terms(
    scorer: Scorer,
    template: PromptTemplate,
    tokens_by_slot: Mapping[str, tuple[str, ...]],
    order: Sequence[str],
) -> dict[str, float]:
    terms: dict[str, float] = {}
    filled: set[str] = set()
    for slot in order:
        context = {}
        for other in template.slots:
            if other == slot:
                continue
            toks = tokens_by_slot[other]
            context[other] = Filled(toks) if other in filled else Masked(len(toks))
        terms[slot] = entity_logprob(scorer, template, context, slot, tokens_by_slot[slot])
        filled.add(slot)
    return terms


def pair_compatibility(
    scorer: Scorer,
    template: PromptTemplate,
    tup: EntityTuple,
    alpha: float,
    joint_order: str = "surface",
) -> CompatibilityBreakdown:
    """Compatibility of one entity tuple with one prompt.

    With ``joint_order="surface"`` the joint term is the chain factorization in
    the prompt's surface slot order; ``"symmetric-mean"`` averages the chain
    sum over all slot orderings (the min term still uses the surface chain).
    """
    if tup.arity != template.arity:
        raise ValidationError(
            f"tuple arity {tup.arity} does not match template arity {template.arity}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    if joint_order not in JOINT_ORDERS:
        raise ValidationError(f"joint_order must be one of {JOINT_ORDERS}")

    tokens_by_slot = {
        slot: check_entity_tokens(scorer, entity)
        for slot, entity in zip(template.slots, tup.entities)
    }
    surface_terms = _chain_terms(scorer, template, tokens_by_slot, template.slot_order)

    if joint_order == "surface":
        joint_ll = sum(surface_terms.values())
    else:
        sums = []
        for perm in itertools.permutations(template.slots):
            if perm == template.slot_order:
                sums.append(sum(surface_terms.values()))
            else:
                sums.append(sum(_chain_terms(scorer, template, tokens_by_slot, perm).values()))
        joint_ll = float(np.mean(sums))

    individual = tuple(surface_terms[s] for s in template.slots)
    score = alpha * joint_ll + (1.0 - alpha) * min(individual)
    return CompatibilityBreakdown(joint_ll=joint_ll, individual_lls=individual, score=score)
