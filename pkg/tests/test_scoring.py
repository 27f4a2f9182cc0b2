import math

import pytest

from helpers import words
from kgharvest.backends import MockEntry, MockScorer, MockTable
from kgharvest.errors import ValidationError
from kgharvest.relations import EntityTuple, PromptTemplate
from kgharvest.scoring import (
    Filled,
    Masked,
    MaskedQuery,
    PartiallyFilled,
    context_digest,
    check_entity_tokens,
    entity_logprob,
    focus_digest,
    pair_compatibility,
    partial_state,
    slot_length,
    state_digest,
)

TPL = PromptTemplate("the point of {A} is {B}")


# ---------------------------------------------------------------------------
# slot states


def test_slot_states_and_lengths():
    assert slot_length(Filled(("a", "b"))) == 2
    assert slot_length(PartiallyFilled(("a",), 3)) == 3
    assert slot_length(Masked(2)) == 2


def test_slot_state_validation():
    with pytest.raises(ValidationError):
        Filled(())
    with pytest.raises(ValidationError):
        PartiallyFilled((), 2)
    with pytest.raises(ValidationError):
        PartiallyFilled(("a", "b"), 2)  # prefix must be a strict prefix
    with pytest.raises(ValidationError):
        Masked(0)


def test_partial_state_degenerate_forms():
    assert partial_state((), 2) == Masked(2)
    assert partial_state(("a", "b"), 2) == Filled(("a", "b"))
    assert partial_state(("a",), 2) == PartiallyFilled(("a",), 2)


# ---------------------------------------------------------------------------
# queries


def test_query_requires_matching_slots():
    with pytest.raises(ValidationError):
        MaskedQuery(TPL, {"A": Masked(1)}, ("A", 0))
    with pytest.raises(ValidationError):
        MaskedQuery(
            TPL, {"A": Masked(1), "B": Masked(1), "C": Masked(1)}, ("A", 0)
        )


def test_query_focus_must_be_first_open_position():
    states = {"A": PartiallyFilled(("x",), 3), "B": Masked(1)}
    MaskedQuery(TPL, states, ("A", 1))
    with pytest.raises(ValidationError):
        MaskedQuery(TPL, states, ("A", 0))
    with pytest.raises(ValidationError):
        MaskedQuery(TPL, states, ("A", 2))
    with pytest.raises(ValidationError):
        MaskedQuery(TPL, {"A": Filled(("x",)), "B": Masked(1)}, ("A", 0))


def test_query_focus_may_target_any_open_slot():
    # cross-slot conditioning order is free; only the within-slot
    # position is constrained
    MaskedQuery(TPL, {"A": Masked(1), "B": Filled(("y",))}, ("A", 0))
    MaskedQuery(TPL, {"A": Masked(2), "B": Masked(1)}, ("B", 0))


def test_digests():
    q = MaskedQuery(
        TPL, {"A": PartiallyFilled(("x",), 3), "B": Masked(2)}, ("A", 1)
    )
    assert state_digest(q.slot_states["A"]) == "x *3"
    assert state_digest(q.slot_states["B"]) == "*2"
    assert state_digest(Filled(("x", "y"))) == "x y"
    assert context_digest(q) == "A=x *3|B=*2"
    assert focus_digest(q) == "A:1"


# ---------------------------------------------------------------------------
# a tiny fully-named table for hand arithmetic

E = math.exp(1)


def _hand_scorer(lmax=2):
    vocab = ("candy", "decay", "rain", "flood", "mud")
    entries = (
        # P(candy | both masked) = 0.5
        MockEntry(TPL.text, "A=*1|B=*1", "A:0", {"candy": 0.5}),
        # P(decay | A=candy) = 0.25
        MockEntry(TPL.text, "A=candy|B=*1", "B:0", {"decay": 0.25}),
        # two-token entity chain for slot A
        MockEntry(TPL.text, "A=*2|B=*1", "A:0", {"candy": 0.5}),
        MockEntry(TPL.text, "A=candy *2|B=*1", "A:1", {"rain": 0.4}),
    )
    return MockScorer(
        MockTable(
            scorer_id="hand", lmax=lmax, vocab=vocab, entries=entries, default={}
        )
    )


def test_check_entity_tokens_enforces_length():
    scorer = _hand_scorer(lmax=2)
    assert check_entity_tokens(scorer, "candy rain") == ("candy", "rain")
    with pytest.raises(ValidationError):
        check_entity_tokens(scorer, "candy rain mud")
    with pytest.raises(ValidationError):
        check_entity_tokens(scorer, "unknownword")


def test_entity_logprob_single_token():
    scorer = _hand_scorer()
    lp = entity_logprob(scorer, TPL, {"B": Masked(1)}, "A", ("candy",))
    assert lp == pytest.approx(math.log(0.5), abs=1e-12)


def test_entity_logprob_chains_within_slot():
    scorer = _hand_scorer()
    lp = entity_logprob(scorer, TPL, {"B": Masked(1)}, "A", ("candy", "rain"))
    assert lp == pytest.approx(math.log(0.5) + math.log(0.4), abs=1e-12)


def test_entity_logprob_uniform_residual():
    # 0.5 named mass over one token leaves 0.5 spread over four others
    scorer = _hand_scorer()
    lp = entity_logprob(scorer, TPL, {"B": Masked(1)}, "A", ("rain",))
    assert lp == pytest.approx(math.log(0.5 / 4), abs=1e-12)


# ---------------------------------------------------------------------------
# compatibility


def test_pair_compatibility_hand_case():
    scorer = _hand_scorer()
    tup = EntityTuple(("candy", "decay"))
    got = pair_compatibility(scorer, TPL, tup, alpha=2 / 3)
    term_a = math.log(0.5)
    term_b = math.log(0.25)
    joint = term_a + term_b
    assert got.individual_lls == pytest.approx((term_a, term_b), abs=1e-12)
    assert got.joint_ll == pytest.approx(joint, abs=1e-12)
    want = (2 / 3) * joint + (1 / 3) * min(term_a, term_b)
    assert got.score == pytest.approx(want, abs=1e-12)


def test_pair_compatibility_alpha_degenerate():
    scorer = _hand_scorer()
    tup = EntityTuple(("candy", "decay"))
    full = pair_compatibility(scorer, TPL, tup, alpha=1.0)
    assert full.score == full.joint_ll
    only_min = pair_compatibility(scorer, TPL, tup, alpha=0.0)
    assert only_min.score == min(only_min.individual_lls)


def test_pair_compatibility_symmetric_mean():
    scorer = _hand_scorer()
    tup = EntityTuple(("candy", "decay"))
    surface = pair_compatibility(scorer, TPL, tup, alpha=1.0)
    both = pair_compatibility(
        scorer, TPL, tup, alpha=1.0, joint_order="symmetric-mean"
    )
    # reverse order: P(decay | A masked) then P(candy | B=decay), all from
    # the uniform default rows
    rev_b = math.log(1 / 5)
    rev_a = math.log(1 / 5)
    want = (surface.joint_ll + rev_a + rev_b) / 2
    assert both.joint_ll == pytest.approx(want, abs=1e-12)
    # the min term still comes from the surface chain
    assert both.individual_lls == surface.individual_lls


def test_pair_compatibility_validation():
    scorer = _hand_scorer()
    with pytest.raises(ValidationError):
        pair_compatibility(scorer, TPL, EntityTuple(("a", "b", "c")), alpha=0.5)
    with pytest.raises(ValidationError):
        pair_compatibility(scorer, TPL, EntityTuple(("candy", "decay")), alpha=1.5)
    with pytest.raises(ValidationError):
        pair_compatibility(
            scorer, TPL, EntityTuple(("candy", "decay")), alpha=0.5, joint_order="zigzag"
        )
