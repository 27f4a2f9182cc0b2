"""Domain model for relations, prompts, tuples and knowledge graphs.

All types here are immutable after construction and safe to share across
threads. On-disk formats:

* relation definition: one JSON document with ``name``, ``arity``, ``prompt``,
  ``seeds`` (list of entity lists);
* knowledge graph: line-delimited JSON, a header record followed by one
  record per tuple, scores rendered as decimal strings with 12 significant
  digits so files round-trip bit-exactly across platforms;
* stats report: one JSON document ``{tuples, diversity, novelty}``.
"""

from __future__ import annotations

import hashlib
import json
import re
import string
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .errors import ParseError, ValidationError

SLOT_LETTERS = string.ascii_uppercase
MAX_ARITY = len(SLOT_LETTERS)

KG_SCHEMA_VERSION = 1

_SLOT_MARKER_RE = re.compile(r"\{([A-Z])\}")


def format_score(x: float) -> str:
    """Render a score as a decimal string with 12 significant digits."""
    return format(float(x), ".12g")


def parse_score(s) -> float:
    try:
        return float(s)
    except (TypeError, ValueError) as e:
        raise ParseError(f"bad score value {s!r}: {e}") from None


def canonical_hash(obj) -> str:
    """sha256 hex digest of an object's canonical JSON rendering."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def slot_letter(index: int) -> str:
    return SLOT_LETTERS[index]


def slot_index(letter: str) -> int:
    idx = SLOT_LETTERS.find(letter)
    if idx < 0:
        raise ValidationError(f"unknown slot letter {letter!r}")
    return idx


@dataclass(frozen=True)
class PromptTemplate:
    """A sentence pattern with one ``{A}``-style marker per entity slot.

    ``slot_order`` is the left-to-right surface order of the slot letters in
    ``text``; it is derived from the text at construction.
    """

    text: str
    slot_order: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        markers = _SLOT_MARKER_RE.findall(self.text)
        if not markers:
            raise ValidationError(f"prompt {self.text!r} contains no slot markers")
        seen = set()
        for m in markers:
            if m in seen:
                raise ValidationError(
                    f"prompt {self.text!r}: slot {{{m}}} appears more than once"
                )
            seen.add(m)
        expected = set(SLOT_LETTERS[: len(markers)])
        if seen != expected:
            raise ValidationError(
                f"prompt {self.text!r}: slots must be consecutive letters starting "
                f"at A, got {sorted(seen)}"
            )
        object.__setattr__(self, "slot_order", tuple(markers))

    @property
    def arity(self) -> int:
        return len(self.slot_order)

    @property
    def slots(self) -> tuple[str, ...]:
        """Slot letters in canonical (A, B, C, ...) order."""
        return tuple(SLOT_LETTERS[: self.arity])

    def render(self, parts: dict[str, str]) -> str:
        """Replace each marker with ``parts[letter]``."""
        return _SLOT_MARKER_RE.sub(lambda m: parts[m.group(1)], self.text)


@dataclass(frozen=True)
class EntityTuple:
    """An ordered assignment of one entity string per slot."""

    entities: tuple[str, ...]

    def __post_init__(self):
        if isinstance(self.entities, list):
            object.__setattr__(self, "entities", tuple(self.entities))
        if not self.entities:
            raise ValidationError("entity tuple is empty")
        for e in self.entities:
            if not isinstance(e, str) or not e.strip():
                raise ValidationError(f"entity {e!r} is empty or not a string")
            if e != e.strip():
                raise ValidationError(f"entity {e!r} has surrounding whitespace")

    @property
    def arity(self) -> int:
        return len(self.entities)

    def __iter__(self):
        return iter(self.entities)


@dataclass(frozen=True)
class RelationSchema:
    """A user-defined relation: name, arity, initial prompt and seed tuples."""

    name: str
    arity: int
    initial_prompt: PromptTemplate
    seed_tuples: tuple[EntityTuple, ...]

    def __post_init__(self):
        if isinstance(self.seed_tuples, list):
            object.__setattr__(self, "seed_tuples", tuple(self.seed_tuples))
        if not self.name or not isinstance(self.name, str):
            raise ValidationError("relation name must be a nonempty string")
        if not isinstance(self.arity, int) or self.arity < 2:
            raise ValidationError(f"relation {self.name!r}: arity must be an integer >= 2")
        if self.arity > MAX_ARITY:
            raise ValidationError(f"relation {self.name!r}: arity {self.arity} > {MAX_ARITY}")
        if self.initial_prompt.arity != self.arity:
            raise ValidationError(
                f"relation {self.name!r}: prompt has {self.initial_prompt.arity} slots "
                f"but arity is {self.arity}"
            )
        if len(self.seed_tuples) < 2:
            raise ValidationError(f"relation {self.name!r}: need at least 2 seed tuples")
        seen = set()
        for t in self.seed_tuples:
            if t.arity != self.arity:
                raise ValidationError(
                    f"relation {self.name!r}: seed {list(t.entities)} has {t.arity} "
                    f"entities but arity is {self.arity}"
                )
            if t.entities in seen:
                raise ValidationError(
                    f"relation {self.name!r}: duplicate seed tuple {list(t.entities)}"
                )
            seen.add(t.entities)


@dataclass(frozen=True)
class WeightedPromptSet:
    """Prompt templates with softmax confidence weights for one relation."""

    relation: RelationSchema
    prompts: tuple[tuple[PromptTemplate, float], ...]
    tau: float = 1.0
    rng_seed: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.prompts, list):
            object.__setattr__(self, "prompts", tuple(tuple(p) for p in self.prompts))
        if not self.prompts:
            raise ValidationError("prompt set is empty")
        total = 0.0
        for tpl, w in self.prompts:
            if tpl.arity != self.relation.arity:
                raise ValidationError(
                    f"prompt {tpl.text!r} has {tpl.arity} slots, relation "
                    f"{self.relation.name!r} has arity {self.relation.arity}"
                )
            if not w > 0:
                raise ValidationError(f"prompt {tpl.text!r} has non-positive weight {w}")
            total += w
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"prompt weights sum to {total}, expected 1")

    @property
    def templates(self) -> tuple[PromptTemplate, ...]:
        return tuple(t for t, _ in self.prompts)

    @property
    def weights(self) -> tuple[float, ...]:
        return tuple(w for _, w in self.prompts)


@dataclass(frozen=True)
class ScoredTuple:
    """An entity tuple with its consistency score and per-prompt breakdown."""

    entities: EntityTuple
    consistency: float
    per_prompt: tuple[tuple[int, float], ...]
    proposal_mtl: Optional[float] = None

    def __post_init__(self):
        if isinstance(self.per_prompt, list):
            object.__setattr__(self, "per_prompt", tuple(tuple(p) for p in self.per_prompt))


@dataclass(frozen=True)
class Provenance:
    scorer_id: str
    prompt_hash: str
    config_hash: str


def kg_sort_key(st: ScoredTuple):
    return (-st.consistency, st.entities.entities)


@dataclass
class KnowledgeGraph:
    """A harvested KG: scored tuples of one relation, best first.

    Tuples are kept sorted by consistency descending with lexicographic
    tie-breaks on the entity lists, and contain no duplicate entity tuples.
    """

    relation_name: str
    arity: int
    provenance: Provenance
    tuples: list[ScoredTuple]

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.arity < 2:
            raise ValidationError(f"KG arity {self.arity} < 2")
        seen = set()
        prev_key = None
        for st in self.tuples:
            if st.entities.arity != self.arity:
                raise ValidationError(
                    f"tuple {list(st.entities)} has arity {st.entities.arity}, "
                    f"KG has arity {self.arity}"
                )
            if st.entities.entities in seen:
                raise ValidationError(f"duplicate tuple {list(st.entities)} in KG")
            seen.add(st.entities.entities)
            key = kg_sort_key(st)
            if prev_key is not None and key < prev_key:
                raise ValidationError(
                    f"KG not sorted: {list(st.entities)} out of order"
                )
            prev_key = key

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            self.relation_name == other.relation_name
            and self.arity == other.arity
            and self.provenance == other.provenance
            and len(self.tuples) == len(other.tuples)
            and all(_scored_eq(a, b) for a, b in zip(self.tuples, other.tuples))
        )


def _opt_score_eq(a: Optional[float], b: Optional[float]) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return format_score(a) == format_score(b)


def _scored_eq(a: ScoredTuple, b: ScoredTuple) -> bool:
    """Equality at serialization precision (12 significant digits)."""
    return (
        a.entities == b.entities
        and format_score(a.consistency) == format_score(b.consistency)
        and _opt_score_eq(a.proposal_mtl, b.proposal_mtl)
        and len(a.per_prompt) == len(b.per_prompt)
        and all(
            i == j and format_score(x) == format_score(y)
            for (i, x), (j, y) in zip(a.per_prompt, b.per_prompt)
        )
    )


# ---------------------------------------------------------------------------
# relation definition files


def load_relation(path: str) -> RelationSchema:
    """Load and validate a relation definition file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ParseError(f"cannot read relation file {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"relation file {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"relation file {path}: top level must be an object")
    for fld in ("name", "arity", "prompt", "seeds"):
        if fld not in doc:
            raise ParseError(f"relation file {path}: missing field '{fld}'")
    if not isinstance(doc["name"], str):
        raise ParseError(f"relation file {path}: field 'name' must be a string")
    if not isinstance(doc["arity"], int) or isinstance(doc["arity"], bool):
        raise ParseError(f"relation file {path}: field 'arity' must be an integer")
    if not isinstance(doc["prompt"], str):
        raise ParseError(f"relation file {path}: field 'prompt' must be a string")
    if not isinstance(doc["seeds"], list):
        raise ParseError(f"relation file {path}: field 'seeds' must be a list")
    seeds = []
    for i, row in enumerate(doc["seeds"]):
        if not isinstance(row, list) or not all(isinstance(e, str) for e in row):
            raise ParseError(
                f"relation file {path}: field 'seeds[{i}]' must be a list of strings"
            )
        seeds.append(EntityTuple(tuple(e.strip() for e in row)))
    return RelationSchema(
        name=doc["name"],
        arity=doc["arity"],
        initial_prompt=PromptTemplate(doc["prompt"]),
        seed_tuples=tuple(seeds),
    )


def save_relation(rel: RelationSchema, path: str) -> None:
    doc = {
        "name": rel.name,
        "arity": rel.arity,
        "prompt": rel.initial_prompt.text,
        "seeds": [list(t.entities) for t in rel.seed_tuples],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, ensure_ascii=False, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# KG files


def write_kg(kg: KnowledgeGraph, path: str) -> None:
    """Write a KG as line-delimited JSON (header record, then tuple records)."""
    kg.validate()
    header = {
        "version": KG_SCHEMA_VERSION,
        "relation": kg.relation_name,
        "arity": kg.arity,
        "scorer_id": kg.provenance.scorer_id,
        "prompt_hash": kg.provenance.prompt_hash,
        "config_hash": kg.provenance.config_hash,
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, ensure_ascii=False) + "\n")
        for st in kg.tuples:
            rec = {
                "entities": list(st.entities),
                "consistency": format_score(st.consistency),
                "mtl": None if st.proposal_mtl is None else format_score(st.proposal_mtl),
                "per_prompt": [[i, format_score(s)] for i, s in st.per_prompt],
            }
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_kg(path: str) -> KnowledgeGraph:
    """Read a KG file written by :func:`write_kg`."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise ParseError(f"cannot read KG file {path}: {e}") from None
    if not lines:
        raise ParseError(f"KG file {path} is empty (missing header)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"KG file {path}: bad header: {e}") from None
    version = header.get("version")
    if version != KG_SCHEMA_VERSION:
        raise ParseError(
            f"KG file {path}: schema version {version!r} unsupported "
            f"(expected {KG_SCHEMA_VERSION})"
        )
    for fld in ("relation", "arity", "scorer_id", "prompt_hash", "config_hash"):
        if fld not in header:
            raise ParseError(f"KG file {path}: header missing field '{fld}'")
    tuples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"KG file {path}:{lineno}: bad record: {e}") from None
        try:
            ents = EntityTuple(tuple(rec["entities"]))
            mtl = rec.get("mtl")
            st = ScoredTuple(
                entities=ents,
                consistency=parse_score(rec["consistency"]),
                per_prompt=tuple((int(i), parse_score(s)) for i, s in rec["per_prompt"]),
                proposal_mtl=None if mtl is None else parse_score(mtl),
            )
        except (KeyError, TypeError) as e:
            raise ParseError(f"KG file {path}:{lineno}: malformed record ({e})") from None
        tuples.append(st)
    return KnowledgeGraph(
        relation_name=header["relation"],
        arity=int(header["arity"]),
        provenance=Provenance(
            scorer_id=header["scorer_id"],
            prompt_hash=header["prompt_hash"],
            config_hash=header["config_hash"],
        ),
        tuples=tuples,
    )


# ---------------------------------------------------------------------------
# stats


@dataclass(frozen=True)
class StatsReport:
    tuples: int
    diversity: int
    novelty: Optional[float]

    def to_dict(self) -> dict:
        return {"tuples": self.tuples, "diversity": self.diversity, "novelty": self.novelty}


def kg_stats(kg: KnowledgeGraph, reference: Optional[Iterable[str]] = None) -> StatsReport:
    """Tuple count, unique-entity count, and novelty against a reference set.

    Novelty is the fraction of unique entities absent from the reference; it
    is None when no reference is given or the KG is empty.
    """
    entities = set()
    for st in kg.tuples:
        entities.update(st.entities)
    novelty = None
    if reference is not None and entities:
        ref = set(reference)
        novelty = sum(1 for e in entities if e not in ref) / len(entities)
    return StatsReport(tuples=len(kg.tuples), diversity=len(entities), novelty=novelty)


def load_entity_set(path: str) -> set[str]:
    """Load a reference entity set: one entity per line, blank lines ignored."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return {line.strip() for line in f if line.strip()}
    except OSError as e:
        raise ParseError(f"cannot read entity file {path}: {e}") from None
