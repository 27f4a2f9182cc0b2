"""Prompt expansion: paraphrase, strip, dedup, and confidence weighting.

A relation starts with one initial prompt. We fill it with a randomly chosen
seed tuple, paraphrase the full sentence, and strip the entities back out of
each paraphrase to recover new templates. Templates too close to an already
kept one (token-level Levenshtein distance below a minimum) are dropped. The
loop repeats on the newly created prompts until enough are collected.

Each collected prompt is then weighted by how well it predicts the seed
tuples: softmax over mean per-seed compatibility scores.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Optional, Sequence

import json

from .errors import ParseError, ServiceError, ValidationError
from .paraphrase import Paraphraser
from .relations import (
    EntityTuple,
    PromptTemplate,
    RelationSchema,
    WeightedPromptSet,
    canonical_hash,
    format_score,
    parse_score,
    slot_letter,
)
from .scoring import Scorer, pair_compatibility

DEFAULT_MIN_DISTANCE = 3
DEFAULT_MIN_COUNT = 10
DEFAULT_MAX_ROUNDS = 5
DEFAULT_N_PER_CALL = 5


def _find_all(haystack: str, needle: str) -> list[int]:
    """Start offsets of every (possibly overlapping) occurrence, case-folded."""
    hs, nd = haystack.casefold(), needle.casefold()
    out, start = [], 0
    while True:
        idx = hs.find(nd, start)
        if idx < 0:
            return out
        out.append(idx)
        start = idx + 1


def instantiate(template: PromptTemplate, tup: EntityTuple) -> str:
    """Fill a template with an entity tuple, producing a full sentence.

    The sentence must be unambiguously invertible: each entity has to occur
    exactly once (case-insensitive). An entity colliding with connective text
    or another entity raises, and the sentence is skipped by the paraphrase
    loop.
    """
    if tup.arity != template.arity:
        raise ValidationError(
            f"tuple arity {tup.arity} does not match template arity {template.arity}"
        )
    parts = {slot_letter(i): e for i, e in enumerate(tup.entities)}
    sentence = template.render(parts)
    for entity in tup.entities:
        hits = _find_all(sentence, entity)
        if len(hits) != 1:
            raise ValidationError(
                f"entity {entity!r} occurs {len(hits)} times in {sentence!r}; "
                "stripping would be ambiguous"
            )
    return sentence


def strip_entities(sentence: str, tup: EntityTuple) -> Optional[PromptTemplate]:
    """Recover a template from a paraphrased sentence by removing entities.

    Every entity must occur exactly once (case-insensitive) and the matched
    spans must not overlap; otherwise the sentence is rejected (None). Slot
    markers keep their tuple positions: entity i becomes {A+i} wherever it
    sits in the sentence.
    """
    spans: list[tuple[int, int, str]] = []
    for i, entity in enumerate(tup.entities):
        hits = _find_all(sentence, entity)
        if len(hits) != 1:
            return None
        start = hits[0]
        spans.append((start, start + len(entity), slot_letter(i)))
    spans.sort()
    for (_, end_a, _), (start_b, _, _) in zip(spans, spans[1:]):
        if start_b < end_a:
            return None
    out, pos = [], 0
    for start, end, letter in spans:
        out.append(sentence[pos:start])
        out.append("{" + letter + "}")
        pos = end
    out.append(sentence[pos:])
    try:
        return PromptTemplate("".join(out))
    except ValidationError:
        return None


def template_tokens(template: PromptTemplate) -> tuple[str, ...]:
    return tuple(template.text.split())


def token_levenshtein(a: Sequence[str], b: Sequence[str]) -> int:
    """Classic edit distance over token sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, tok_a in enumerate(a, start=1):
        cur = [i]
        for j, tok_b in enumerate(b, start=1):
            cost = 0 if tok_a == tok_b else 1
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost))
        prev = cur
    return prev[-1]


def dedup(
    prompts: Sequence[PromptTemplate], min_distance: int = DEFAULT_MIN_DISTANCE
) -> list[PromptTemplate]:
    """Greedy filter in input order: keep a prompt iff its token distance to
    every kept prompt is at least ``min_distance``."""
    if min_distance < 1:
        raise ValidationError("min_distance must be >= 1")
    kept: list[PromptTemplate] = []
    kept_tokens: list[tuple[str, ...]] = []
    for tpl in prompts:
        toks = template_tokens(tpl)
        if all(token_levenshtein(toks, other) >= min_distance for other in kept_tokens):
            kept.append(tpl)
            kept_tokens.append(toks)
    return kept


@dataclass(frozen=True)
class CollectResult:
    prompts: tuple[PromptTemplate, ...]
    status: str  # "ok" | "partial"
    warnings: tuple[str, ...]
    rng_seed: Optional[int]


def collect_prompts(
    relation: RelationSchema,
    paraphraser: Paraphraser,
    min_count: int = DEFAULT_MIN_COUNT,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    min_distance: int = DEFAULT_MIN_DISTANCE,
    n_per_call: int = DEFAULT_N_PER_CALL,
    rng_seed: Optional[int] = None,
) -> CollectResult:
    """Grow the relation's prompt set by iterative paraphrasing.

    Each round instantiates every frontier prompt with a randomly drawn seed
    tuple, paraphrases the sentences, strips entities, and keeps survivors
    that clear the dedup distance. The initial prompt is always first in the
    output. Deterministic given ``rng_seed`` and the paraphraser transcript.

    Paraphraser failures degrade to a partial result with warnings, unless
    the service fails before producing anything at all. If the whole run
    never yields a single strippable paraphrase and more than the initial
    prompt was asked for, that is an error: the paraphraser and the relation
    are incompatible.
    """
    if min_count < 1:
        raise ValidationError("min_count must be >= 1")
    if max_rounds < 1:
        raise ValidationError("max_rounds must be >= 1")
    rng = random.Random(rng_seed)
    kept: list[PromptTemplate] = [relation.initial_prompt]
    kept_tokens = [template_tokens(relation.initial_prompt)]
    warnings: list[str] = []
    frontier: list[PromptTemplate] = [relation.initial_prompt]
    strip_survivors = 0
    any_response = False

    for _ in range(max_rounds):
        if len(kept) >= min_count:
            break
        new_frontier: list[PromptTemplate] = []
        for tpl in frontier:
            seed = rng.choice(relation.seed_tuples)
            try:
                sentence = instantiate(tpl, seed)
            except ValidationError as exc:
                warnings.append(f"skipping prompt {tpl.text!r}: {exc}")
                continue
            try:
                phrases = paraphraser.paraphrase(sentence, n_per_call)
            except ServiceError as exc:
                if not any_response:
                    raise
                warnings.append(f"paraphraser failed on {sentence!r}: {exc}")
                continue
            any_response = True
            for phrase in phrases:
                tpl2 = strip_entities(phrase, seed)
                if tpl2 is None:
                    continue
                strip_survivors += 1
                toks = template_tokens(tpl2)
                if all(
                    token_levenshtein(toks, other) >= min_distance
                    for other in kept_tokens
                ):
                    kept.append(tpl2)
                    kept_tokens.append(toks)
                    new_frontier.append(tpl2)
        frontier = new_frontier or [relation.initial_prompt]

    if len(kept) < min_count:
        if strip_survivors == 0 and min_count > 1 and any_response:
            raise ValidationError(
                f"no paraphrase of relation {relation.name!r} survived entity "
                f"stripping after {max_rounds} rounds"
            )
        warnings.append(
            f"collected {len(kept)} prompts, short of the requested {min_count}"
        )
    status = "ok" if len(kept) >= min_count and not warnings else "partial"
    return CollectResult(
        prompts=tuple(kept),
        status=status,
        warnings=tuple(warnings),
        rng_seed=rng_seed,
    )


def weight_prompts(
    prompts: Sequence[PromptTemplate],
    relation: RelationSchema,
    scorer: Scorer,
    alpha: float,
    tau: float = 1.0,
    rng_seed: Optional[int] = None,
    joint_order: str = "surface",
) -> WeightedPromptSet:
    """Softmax confidence weights from mean seed-tuple compatibility.

    For each prompt p, s_p is the mean compatibility score over the seed
    tuples; w_p = exp(s_p / tau) normalized over all prompts.
    """
    if not prompts:
        raise ValidationError("cannot weight an empty prompt list")
    if tau <= 0:
        raise ValidationError("softmax temperature must be positive")
    means = []
    for tpl in prompts:
        scores = [
            pair_compatibility(scorer, tpl, seed, alpha, joint_order).score
            for seed in relation.seed_tuples
        ]
        means.append(sum(scores) / len(scores))
    hi = max(means)
    exps = [math.exp((s - hi) / tau) for s in means]
    total = sum(exps)
    weights = [e / total for e in exps]
    return WeightedPromptSet(
        relation=relation,
        prompts=tuple(zip(tuple(prompts), weights)),
        tau=tau,
        rng_seed=rng_seed,
    )


# ---------------------------------------------------------------------------
# prompt-set files and provenance hash


def prompt_set_hash(wps: WeightedPromptSet) -> str:
    return canonical_hash(
        {
            "relation": wps.relation.name,
            "prompts": [[t.text, format_score(w)] for t, w in wps.prompts],
            "tau": format_score(wps.tau),
        }
    )


def save_prompt_set(wps: WeightedPromptSet, path) -> None:
    doc = {
        "relation": wps.relation.name,
        "prompts": [
            {"text": t.text, "weight": format_score(w)} for t, w in wps.prompts
        ],
        "tau": format_score(wps.tau),
        "rng_seed": wps.rng_seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, ensure_ascii=False, indent=2)
        fh.write("\n")


def load_prompt_set(path, relation: RelationSchema) -> WeightedPromptSet:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read prompt set {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"prompt set {path} is not valid JSON: {exc}") from None
    try:
        name = doc["relation"]
        rows = doc["prompts"]
        tau = parse_score(doc["tau"])
        rng_seed = doc.get("rng_seed")
    except (KeyError, TypeError) as exc:
        raise ParseError(f"prompt set {path}: missing field {exc}") from None
    if name != relation.name:
        raise ParseError(
            f"prompt set {path} is for relation {name!r}, expected {relation.name!r}"
        )
    prompts = []
    for i, row in enumerate(rows):
        try:
            prompts.append((PromptTemplate(row["text"]), parse_score(row["weight"])))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"prompt set {path}: prompts[{i}] malformed ({exc})") from None
    return WeightedPromptSet(
        relation=relation,
        prompts=tuple(prompts),
        tau=tau,
        rng_seed=rng_seed if rng_seed is None else int(rng_seed),
    )
