from math import comb

import numpy as np
import pytest

from conftest import lattice
from gfnlab.dag import (
    CycleError,
    DagSpec,
    TooManyTrajectories,
    count_trajectories,
    dumps,
    enumerate_trajectories,
    from_edges,
    is_complete,
    loads,
    topological_order,
    validate_dag,
)
from gfnlab.envs import HypergridConfig, build_hypergrid, chain, diamond, random_dag


def test_minimal_chain_is_valid():
    assert validate_dag(chain(2)) == []


def test_back_edge_reported_as_cycle():
    spec = DagSpec(children=((1,), (0,)), parents=((1,), (0,)), terminal=(False, False), encoding=np.eye(2))
    problems = validate_dag(spec)
    assert any("cycle" in p for p in problems)


def test_inconsistent_adjacency_reported():
    spec = DagSpec(children=((1,), ()), parents=((), ()), terminal=(False, True), encoding=np.eye(2))
    problems = validate_dag(spec)
    assert any("inconsistency" in p for p in problems)
    assert any("multiple sources" in p for p in problems)


def test_terminal_with_children_reported():
    spec = DagSpec(children=((1,), ()), parents=((), (0,)), terminal=(True, True), encoding=np.eye(2))
    assert any("terminal state 0" in p for p in validate_dag(spec))


def test_topological_orders():
    assert topological_order(chain(3)) == [0, 1, 2]
    assert topological_order(diamond()) == [0, 1, 2, 3]


def test_topological_order_names_state_on_cycle():
    # 0 -> 1 -> 2 -> 1
    spec = DagSpec(children=((1,), (2,), (1,)), parents=((), (0, 2), (1,)), terminal=(False,) * 3, encoding=np.eye(3))
    with pytest.raises(CycleError) as err:
        topological_order(spec)
    assert err.value.state in (1, 2)


def test_topological_order_respects_edges(rng):
    for _ in range(10):
        spec = random_dag(rng, 30)
        order = topological_order(spec)
        pos = {s: i for i, s in enumerate(order)}
        assert len(order) == spec.num_states
        assert all(pos[s] < pos[t] for s, t in spec.edges())


def test_count_trajectories_examples():
    assert count_trajectories(chain(3)) == {2: 1}
    assert count_trajectories(diamond()) == {3: 2}
    assert count_trajectories(lattice(3, 3)) == {8: 6}


def test_enumeration_agrees_with_counts(rng):
    for _ in range(10):
        spec = random_dag(rng, 15)
        trajs = enumerate_trajectories(spec)
        assert len(set(trajs)) == len(trajs)
        assert all(is_complete(spec, t) for t in trajs)
        per = {}
        for t in trajs:
            per[t[-1]] = per.get(t[-1], 0) + 1
        assert per == count_trajectories(spec)


def test_enumeration_cap_refuses_with_count():
    with pytest.raises(TooManyTrajectories) as err:
        enumerate_trajectories(lattice(4, 4), cap=10)
    assert err.value.count == comb(6, 3)


def test_hypergrid_paths_are_binomial():
    cfg = HypergridConfig(H=5, D=2, R0=0.1)
    env = build_hypergrid(cfg)
    counts = count_trajectories(env.spec)
    # stop state for cell (a, b) is H^D + a*H + b; exactly one stop edge per path
    for a in range(5):
        for b in range(5):
            assert counts[25 + a * 5 + b] == comb(a + b, a)


def test_text_round_trip(rng):
    for spec in (diamond(), random_dag(rng, 12), build_hypergrid(HypergridConfig(3, 2, 0.1)).spec):
        back = loads(dumps(spec))
        assert back.children == spec.children
        assert back.parents == spec.parents
        assert back.terminal == spec.terminal
        assert back.child_slots == spec.child_slots
        assert back.parent_slots == spec.parent_slots
        np.testing.assert_array_equal(back.encoding, spec.encoding)


def test_text_format_example():
    text = dumps(from_edges(3, [(0, 1), (0, 2)]))
    assert text.splitlines()[:5] == ["# gfnlab-dag v1", "states 3", "0 0 0 1:0:0 2:1:0", "1 1 1", "2 1 1"]
