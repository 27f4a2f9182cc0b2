import random

import pytest

from helpers import make_relation, make_wps, random_table, start_stub, words
from kgharvest.backends import MockScorer


@pytest.fixture
def small_fixture():
    """A 7-word binary-relation setup with a two-template weighted set."""
    rng = random.Random(11)
    vocab = words(7)
    relation = make_relation(2, vocab)
    wps = make_wps(rng, relation, 2)
    table = random_table(rng, vocab, wps.templates, 2, 1)
    return relation, wps, table


@pytest.fixture
def stub_service():
    """A live wire-protocol stub backed by the small fixture's table."""
    rng = random.Random(23)
    vocab = words(8)
    relation = make_relation(2, vocab)
    wps = make_wps(rng, relation, 2)
    table = random_table(rng, vocab, wps.templates, 2, 2)
    state, url, server = start_stub(MockScorer(table))
    yield state, url, table, wps
    server.shutdown()
    server.server_close()
