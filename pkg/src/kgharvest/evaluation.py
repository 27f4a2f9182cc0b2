"""Automatic evaluation: corrupted negatives, ranking methods, PR curves.

Positives come from a tab-separated file (``relation<TAB>entity1<TAB>entity2
[<TAB>entity3...]``). For each positive, a negative is synthesized by
corrupting exactly one component: one entity slot, or the relation (when
another relation of the same arity exists), the component and replacement
both drawn uniformly from the dataset itself; corruptions that recreate a
known positive are rejected and resampled.

Samples are ranked by a scoring method, and precision/recall are computed at
every cutoff along the ranking. The area under the curve is evaluated with
exact rational arithmetic so that degenerate fixtures (for instance a
perfectly separable ranking) give exact values rather than float residue.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Mapping, Optional, Sequence

from .errors import ParseError, ValidationError
from .relations import EntityTuple, WeightedPromptSet, format_score
from .scoring import Scorer
from .search import rescore_many

METHODS = ("human", "top1", "multi")


@dataclass(frozen=True)
class EvalSample:
    relation: str
    entities: EntityTuple
    label: str  # "positive" | "negative"
    score: Optional[float] = None

    def __post_init__(self):
        if self.label not in ("positive", "negative"):
            raise ValidationError(f"bad label {self.label!r}")

    @property
    def is_positive(self) -> bool:
        return self.label == "positive"

    def key(self) -> tuple[str, tuple[str, ...]]:
        return (self.relation, self.entities.entities)


def tuple_id(relation: str, entities: Sequence[str]) -> str:
    """Stable single-field identifier: the JSON array [relation, entities...]."""
    return json.dumps([relation, *entities], ensure_ascii=False, separators=(",", ":"))


def load_positives_tsv(path) -> list[EvalSample]:
    """Load positives; duplicate rows collapse to one sample. Every row of a
    relation must have the same arity."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read positives file {path}: {exc}") from None
    samples: list[EvalSample] = []
    seen: set[tuple[str, tuple[str, ...]]] = set()
    arity_by_rel: dict[str, int] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise ParseError(
                f"{path}:{lineno}: need relation and at least 2 entities, "
                f"got {len(parts)} fields"
            )
        rel, entities = parts[0].strip(), [p.strip() for p in parts[1:]]
        if not rel:
            raise ParseError(f"{path}:{lineno}: empty relation name")
        if any(not e for e in entities):
            raise ParseError(f"{path}:{lineno}: empty entity")
        arity = len(entities)
        if arity_by_rel.setdefault(rel, arity) != arity:
            raise ParseError(
                f"{path}:{lineno}: relation {rel!r} has rows of arity "
                f"{arity_by_rel[rel]} and {arity}"
            )
        sample = EvalSample(rel, EntityTuple(tuple(entities)), "positive")
        if sample.key() in seen:
            continue
        seen.add(sample.key())
        samples.append(sample)
    if not samples:
        raise ParseError(f"positives file {path} contains no samples")
    return samples


def generate_negatives(
    positives: Sequence[EvalSample],
    rng_seed: Optional[int],
    max_retries: int = 100,
) -> list[EvalSample]:
    """One negative per positive by single-component corruption.

    The corrupted component is picked uniformly over the entity slots plus,
    when at least one other relation of the same arity exists, the relation;
    the replacement value is picked uniformly from the distinct values of
    that component across the dataset, excluding the current one. Draws that
    recreate a positive are rejected and redrawn from scratch.
    """
    if not positives:
        raise ValidationError("no positives to corrupt")
    positive_keys = {s.key() for s in positives}
    arity_of = {}
    for s in positives:
        arity_of[s.relation] = s.entities.arity

    # per-slot entity pools and per-arity relation pools, sorted for
    # reproducible indexing
    seen_by_slot: dict[int, set[str]] = {}
    for s in positives:
        for i, e in enumerate(s.entities):
            seen_by_slot.setdefault(i, set()).add(e)
    slot_pool = {i: sorted(vals) for i, vals in seen_by_slot.items()}
    rels_by_arity: dict[int, list[str]] = {}
    for rel, arity in arity_of.items():
        rels_by_arity.setdefault(arity, []).append(rel)
    rel_pool = {a: sorted(rels) for a, rels in rels_by_arity.items()}

    rng = random.Random(rng_seed)
    negatives: list[EvalSample] = []
    for pos in positives:
        arity = pos.entities.arity
        components: list[object] = list(range(arity))
        if len(rel_pool.get(arity, [])) >= 2:
            components.append("relation")
        made = None
        for _ in range(max_retries):
            comp = components[rng.randrange(len(components))]
            if comp == "relation":
                choices = [r for r in rel_pool[arity] if r != pos.relation]
                candidate = EvalSample(
                    choices[rng.randrange(len(choices))], pos.entities, "negative"
                )
            else:
                idx = int(comp)  # type: ignore[arg-type]
                choices = [e for e in slot_pool[idx] if e != pos.entities.entities[idx]]
                if not choices:
                    continue
                ents = list(pos.entities.entities)
                ents[idx] = choices[rng.randrange(len(choices))]
                candidate = EvalSample(pos.relation, EntityTuple(tuple(ents)), "negative")
            if candidate.key() not in positive_keys:
                made = candidate
                break
        if made is None:
            raise ValidationError(
                f"could not corrupt positive {tuple_id(pos.relation, pos.entities.entities)} "
                f"without recreating a positive after {max_retries} draws"
            )
        negatives.append(made)
    return negatives


def _method_prompt_set(wps: WeightedPromptSet, method: str) -> WeightedPromptSet:
    if method == "multi":
        return wps
    if method == "human":
        chosen = wps.relation.initial_prompt
    elif method == "top1":
        best = max(range(len(wps.prompts)), key=lambda i: (wps.weights[i], -i))
        chosen = wps.templates[best]
    else:
        raise ValidationError(f"unknown scoring method {method!r}; use one of {METHODS}")
    return WeightedPromptSet(
        relation=wps.relation,
        prompts=((chosen, 1.0),),
        tau=wps.tau,
        rng_seed=wps.rng_seed,
    )


def score_samples(
    samples: Sequence[EvalSample],
    method: str,
    prompt_sets: Mapping[str, WeightedPromptSet],
    scorer: Scorer,
    alpha: float,
    joint_order: str = "surface",
) -> list[EvalSample]:
    """Attach a score to every sample.

    ``human`` scores with the relation's initial prompt alone, ``top1`` with
    the highest-weight prompt alone, ``multi`` with the full weighted set.
    Samples are grouped per relation so each group scores in one batch.
    """
    for s in samples:
        if s.relation not in prompt_sets:
            raise ValidationError(
                f"no prompt set for relation {s.relation!r} "
                f"(sample {tuple_id(s.relation, s.entities.entities)})"
            )
    effective = {
        rel: _method_prompt_set(wps, method) for rel, wps in prompt_sets.items()
    }
    out: list[Optional[EvalSample]] = [None] * len(samples)
    by_rel: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_rel.setdefault(s.relation, []).append(i)
    for rel, idxs in by_rel.items():
        scored = rescore_many(
            [samples[i].entities for i in idxs],
            effective[rel],
            scorer,
            alpha,
            joint_order,
        )
        for i, st in zip(idxs, scored):
            out[i] = replace(samples[i], score=st.consistency)
    return out  # type: ignore[return-value]


def attach_external_scores(
    samples: Sequence[EvalSample], scores: Mapping[str, float]
) -> list[EvalSample]:
    out = []
    for s in samples:
        tid = tuple_id(s.relation, s.entities.entities)
        if tid not in scores:
            raise ValidationError(f"external score file has no entry for {tid}")
        out.append(replace(s, score=scores[tid]))
    return out


def load_external_scores(path) -> dict[str, float]:
    """TSV of tuple_id<TAB>score."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read score file {path}: {exc}") from None
    out: dict[str, float] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"{path}:{lineno}: expected tuple_id<TAB>score")
        try:
            out[parts[0]] = float(parts[1])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad score {parts[1]!r}") from None
    return out


# ---------------------------------------------------------------------------
# precision-recall


@dataclass(frozen=True)
class PRCurve:
    """Precision/recall at every ranking cutoff, plus trapezoidal AUC.

    The curve starts from an implicit (recall 0, precision of the first
    cutoff) anchor; AUC is integrated over recall with exact rational
    arithmetic before conversion to float.
    """

    points: tuple[tuple[float, float], ...]  # (recall, precision) per cutoff
    auc: float
    n_pos: int
    n_neg: int


def rank_samples(samples: Sequence[EvalSample]) -> list[EvalSample]:
    """Descending score; ties broken lexicographically on entities, then
    relation and label, so curves are reproducible."""
    for s in samples:
        if s.score is None:
            raise ValidationError(
                f"unscored sample {tuple_id(s.relation, s.entities.entities)}"
            )
    return sorted(
        samples,
        key=lambda s: (-s.score, s.entities.entities, s.relation, s.label),
    )


def pr_curve(samples: Sequence[EvalSample]) -> PRCurve:
    ranked = rank_samples(samples)
    n_pos = sum(1 for s in ranked if s.is_positive)
    n_neg = len(ranked) - n_pos
    if n_pos == 0:
        raise ValidationError("cannot compute a PR curve without positives")
    points: list[tuple[float, float]] = []
    tp = 0
    auc = Fraction(0)
    prev_r: Optional[Fraction] = None
    prev_p: Optional[Fraction] = None
    for i, s in enumerate(ranked, start=1):
        if s.is_positive:
            tp += 1
        r, p = Fraction(tp, n_pos), Fraction(tp, i)
        if prev_r is None:
            prev_r, prev_p = Fraction(0), p  # anchor: recall 0 at first precision
        auc += (r - prev_r) * (p + prev_p) / 2
        prev_r, prev_p = r, p
        points.append((float(r), float(p)))
    return PRCurve(points=tuple(points), auc=float(auc), n_pos=n_pos, n_neg=n_neg)


def write_curve_csv(samples: Sequence[EvalSample], curve: PRCurve, path) -> None:
    """CSV with one row per cutoff: cutoff, score, label, precision, recall."""
    ranked = rank_samples(samples)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("cutoff,score,label,precision,recall\n")
        for i, (s, (r, p)) in enumerate(zip(ranked, curve.points), start=1):
            fh.write(
                f"{i},{format_score(s.score)},{s.label},"
                f"{format_score(p)},{format_score(r)}\n"
            )


def curve_summary(curve: PRCurve, method: str, seed: Optional[int]) -> dict:
    return {
        "method": method,
        "auc": format_score(curve.auc),
        "n_pos": curve.n_pos,
        "n_neg": curve.n_neg,
        "seed": seed,
    }
