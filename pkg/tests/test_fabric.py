import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nashlearn.components.graph import CommGraph
from nashlearn.errors import LocalityViolation
from nashlearn.fabric import CommFabric, payload_size


def test_exchange_delivers_to_neighbors():
    fabric = CommFabric(CommGraph.line(3))
    inbound = fabric.exchange({0: {1: "a"}, 1: {0: "b", 2: "c"}})
    assert inbound == {0: {1: "b"}, 1: {0: "a"}, 2: {1: "c"}}
    assert fabric.round == 1


def test_exchange_empty_outbound():
    fabric = CommFabric(CommGraph.line(3))
    inbound = fabric.exchange({})
    assert inbound == {0: {}, 1: {}, 2: {}}
    assert fabric.round == 1
    assert fabric.audit.total_messages == 0


def test_strict_violation():
    fabric = CommFabric(CommGraph.line(3), strict=True)
    with pytest.raises(LocalityViolation) as excinfo:
        fabric.exchange({0: {1: 1.0, 2: 2.0}})
    assert excinfo.value.sender == 0
    assert excinfo.value.receiver == 2
    assert fabric.audit.total_messages == 0
    assert fabric.round == 0


def test_permissive_violation_is_recorded():
    fabric = CommFabric(CommGraph.line(3), strict=False)
    inbound = fabric.exchange({0: {1: 1.0, 2: 2.0}})
    assert inbound[2] == {}
    assert inbound[1] == {0: 1.0}
    assert len(fabric.audit.violations) == 1
    violation = fabric.audit.violations[0]
    assert (violation["sender"], violation["receiver"], violation["round"]) == (0, 2, 1)
    assert fabric.audit.to_json()["violations"] == [{"sender": 0, "receiver": 2, "round": 1}]


def test_rounds_increase():
    fabric = CommFabric(CommGraph.ring(4))
    rounds = []
    for _ in range(5):
        fabric.broadcast({i: i for i in range(4)})
        rounds.append(fabric.round)
    assert rounds == [1, 2, 3, 4, 5]
    for row in fabric.audit.to_table():
        assert (row["first_round"], row["last_round"], row["messages"]) == (1, 5, 5)


def test_audit_table_stays_bounded():
    fabric = CommFabric(CommGraph.line(3), strict=False)
    for _ in range(1000):
        fabric.broadcast({i: np.zeros(2) for i in range(3)})
    table = fabric.audit.to_table()
    assert len(table) == 4
    assert fabric.audit.total_messages == 4000
    assert sum(r["messages"] for r in table) == 4000
    assert fabric.audit.violations == []
    fabric.exchange({0: {2: 1.0}})
    assert len(fabric.audit.to_table()) == 4
    assert len(fabric.audit.violations) == 1


def test_broadcast_is_deterministic():
    values = {i: np.arange(3.0) * i for i in range(4)}
    first = CommFabric(CommGraph.ring(4)).broadcast(values)
    second = CommFabric(CommGraph.ring(4)).broadcast(values)
    for i in range(4):
        assert list(first[i]) == list(second[i])
        for j in first[i]:
            assert np.array_equal(first[i][j], second[i][j])


def test_workers_give_identical_results():
    serial = CommFabric(CommGraph.complete(5), workers=1).map(lambda i: i**2)
    threaded = CommFabric(CommGraph.complete(5), workers=4).map(lambda i: i**2)
    assert serial == threaded == {0: 0, 1: 1, 2: 4, 3: 9, 4: 16}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=7))
def test_max_consensus_on_line(values):
    graph = CommGraph.line(len(values))
    fabric = CommFabric(graph)
    result = fabric.max_consensus(dict(enumerate(values)))
    assert set(result.values()) == {max(values)}
    assert fabric.round == len(values) - 1


def test_audit_counts_edges():
    fabric = CommFabric(CommGraph.line(3))
    payload = np.zeros(4)
    fabric.broadcast({i: payload for i in range(3)})
    assert dict(fabric.audit.counts) == {(0, 1): 2, (1, 2): 2}
    assert fabric.audit.total_bytes == 4 * payload.nbytes
    table = fabric.audit.to_table()
    assert {(r["sender"], r["receiver"]) for r in table} == {(0, 1), (1, 0), (1, 2), (2, 1)}
    assert all(r["bytes"] == 32 and r["messages"] == 1 for r in table)


@pytest.mark.parametrize(
    "payload,expected",
    [
        (None, 0),
        (np.zeros((2, 3)), 48),
        ("abc", 3),
        ({"a": np.zeros(2), "b": [np.zeros(1), 1.0]}, 32),
    ],
)
def test_payload_size(payload, expected):
    assert payload_size(payload) == expected
