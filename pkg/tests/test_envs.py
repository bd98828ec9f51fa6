import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfnlab.envs import (
    SYMBOLS,
    BitSeqConfig,
    EnumerationCapExceeded,
    HypergridConfig,
    bitseq_path,
    bitseq_reward,
    bitseq_state_index,
    bitseq_state_string,
    build_bitseq,
    build_hypergrid,
    dump_modes,
    dump_test_set,
    edit_distance,
    edit_distance_many,
    generate_modes,
    generate_test_set,
    hypergrid_reward,
    load_modes,
    load_test_set,
)

GRID8 = HypergridConfig(H=8, D=2, R0=0.1)


def test_hypergrid_reward_examples():
    assert hypergrid_reward((6, 6), GRID8) == pytest.approx(2.6)
    assert hypergrid_reward((0, 0), GRID8) == pytest.approx(0.6)
    assert hypergrid_reward((3, 3), GRID8) == pytest.approx(0.1)


def test_hypergrid_reward_rejects_out_of_bounds():
    with pytest.raises(ValueError):
        hypergrid_reward((8, 0), GRID8)
    with pytest.raises(ValueError):
        hypergrid_reward((1,), GRID8)


def test_hypergrid_interval_boundaries():
    # H=5: |s/4 - 0.5| takes 0.5, 0.25, 0; 0.25 is excluded from (0.25, 0.5]
    cfg = HypergridConfig(H=5, D=1, R0=0.0)
    assert [hypergrid_reward((s,), cfg) for s in range(5)] == [0.5, 0.0, 0.0, 0.0, 0.5]
    # H=11: |s/10 - 0.5| = 0.3 and 0.4 are excluded from the open (0.3, 0.4)
    cfg = HypergridConfig(H=11, D=1, R0=0.0)
    assert hypergrid_reward((2,), cfg) == 0.5  # deviation 0.3
    assert hypergrid_reward((1,), cfg) == 0.5  # deviation 0.4


def test_hypergrid_reward_symmetries():
    cfg = HypergridConfig(H=7, D=3, R0=0.01)
    for c in itertools.product(range(7), repeat=3):
        r = hypergrid_reward(c, cfg)
        assert hypergrid_reward(c[::-1], cfg) == r
        assert hypergrid_reward((6 - c[0], c[1], c[2]), cfg) == r


def test_hypergrid_reward_total_by_enumeration():
    cfg = HypergridConfig(H=8, D=2, R0=0.0)
    dev = lambda s: abs(s / 7 - 0.5)  # noqa: E731
    plateau = sum(1 for a, b in itertools.product(range(8), repeat=2) if all(0.25 < dev(v) <= 0.5 for v in (a, b)))
    peak = sum(1 for a, b in itertools.product(range(8), repeat=2) if all(0.3 < dev(v) < 0.4 for v in (a, b)))
    env = build_hypergrid(cfg)
    assert env.rewards.sum() == pytest.approx(0.5 * plateau + 2.0 * peak)
    assert (plateau, peak) == (16, 4)


def test_tiny_hypergrid_structure():
    env = build_hypergrid(HypergridConfig(H=2, D=1, R0=0.1))
    spec = env.spec
    assert spec.num_states == 4
    assert sorted(spec.edges()) == [(0, 1), (0, 2), (1, 3)]
    assert spec.terminal == (False, False, True, True)


def test_hypergrid_sizes():
    assert build_hypergrid(GRID8).spec.num_states == 128
    env = build_hypergrid(HypergridConfig(H=8, D=4, R0=0.1))
    assert int((~env.spec.terminal_mask).sum()) == 4096
    with pytest.raises(EnumerationCapExceeded):
        build_hypergrid(HypergridConfig(H=8, D=4), cap=1000)


def test_hypergrid_encoding_is_one_hot_per_axis():
    env = build_hypergrid(HypergridConfig(H=3, D=2))
    enc = env.spec.encoding
    assert enc.shape == (18, 6)
    assert (enc.sum(axis=1) == 2).all()
    np.testing.assert_array_equal(enc[5], [0, 1, 0, 0, 0, 1])  # cell (1, 2)


def test_edit_distance_examples():
    assert edit_distance("", "abc") == 3
    assert edit_distance("0101", "0101") == 0
    assert edit_distance("kitten", "sitting") == 3


def _brute(x: str, y: str) -> int:
    if not x or not y:
        return len(x) + len(y)
    return min(_brute(x[1:], y) + 1, _brute(x, y[1:]) + 1, _brute(x[1:], y[1:]) + (x[0] != y[0]))


short = st.text(alphabet="01", max_size=6)


@settings(max_examples=200, deadline=None)
@given(short, short, short)
def test_edit_distance_is_a_metric(x, y, z):
    d = edit_distance
    assert d(x, y) == _brute(x, y)
    assert d(x, y) == d(y, x)
    assert (d(x, y) == 0) == (x == y)
    assert d(x, z) <= d(x, y) + d(y, z)


def test_vectorized_edit_distance_matches_scalar(rng):
    xs = rng.integers(0, 2, size=(200, 10)).astype(np.int8)
    y = rng.integers(0, 2, size=10).astype(np.int8)
    got = edit_distance_many(xs, y)
    s = lambda a: "".join(map(str, a))  # noqa: E731
    assert list(got) == [edit_distance(s(x), s(y)) for x in xs]


def test_bitseq_reward_examples():
    modes = ["0101", "1111"]
    assert bitseq_reward("0101", modes) == 1.0
    assert bitseq_reward("0100", modes) == pytest.approx(math.exp(-1))
    assert bitseq_reward("11111111", ["00000000"]) == pytest.approx(math.exp(-8))
    with pytest.raises(ValueError):
        bitseq_reward("0", [])


def test_generate_modes_single_symbol(rng):
    modes = generate_modes(BitSeqConfig(n=8, b=8, num_modes=3), rng)
    assert len(set(modes)) == 3
    assert all(m in SYMBOLS for m in modes)


def test_generate_modes_splits_into_symbols():
    cfg = BitSeqConfig(n=16, b=8, num_modes=3)
    modes = generate_modes(cfg, np.random.default_rng(7))
    assert modes == generate_modes(cfg, np.random.default_rng(7))
    assert len(set(modes)) == 3
    assert all(m[:8] in SYMBOLS and m[8:] in SYMBOLS for m in modes)


def test_generate_modes_too_many():
    with pytest.raises(ValueError):
        generate_modes(BitSeqConfig(n=16, b=8, num_modes=26), np.random.default_rng(0))


def test_test_set_construction(rng):
    cfg = BitSeqConfig(n=16, b=8, num_modes=4)
    modes = generate_modes(cfg, rng)
    rows = generate_test_set(modes, cfg, rng)
    assert len(rows) == 4 * 16
    for j, mode in enumerate(modes):
        for i in range(16):
            s, r = rows[j * 16 + i]
            assert sum(a != b for a, b in zip(s, mode)) == i  # i distinct flips
            assert r == bitseq_reward(s, modes)
        assert rows[j * 16] == (mode, 1.0)


def test_mode_and_test_set_text_round_trip(rng):
    cfg = BitSeqConfig(n=16)
    modes = generate_modes(cfg, rng)
    rows = generate_test_set(modes, cfg, rng)
    assert load_modes(dump_modes(modes)) == modes
    assert load_test_set(dump_test_set(rows)) == rows
    assert dump_test_set(rows[:1]).endswith("\t1.0\n")


def test_bitseq_tree_sizes():
    assert build_bitseq(BitSeqConfig(n=2, k=1, b=2), ["00"]).spec.num_states == 7
    assert build_bitseq(BitSeqConfig(n=2, k=2, b=2), ["00"]).spec.num_states == 5
    with pytest.raises(EnumerationCapExceeded):
        build_bitseq(BitSeqConfig(n=16, k=1), ["0" * 16], cap=1000)


def test_bitseq_tree_structure():
    cfg = BitSeqConfig(n=4, k=2, b=4)
    env = build_bitseq(cfg, ["0110"])
    spec = env.spec
    assert all(len(p) == 1 for p in spec.parents[1:])
    assert [bitseq_state_string(cfg, s) for s in range(6)] == ["", "00", "01", "10", "11", "0000"]
    for s in range(spec.num_states):
        assert bitseq_state_index(cfg, bitseq_state_string(cfg, s)) == s
    path = bitseq_path(cfg, "0110")
    assert [bitseq_state_string(cfg, s) for s in path] == ["", "01", "0110"]
    x = path[-1]
    assert env.rewards[x] == 1.0
    for t in spec.terminals:
        assert env.rewards[t] == pytest.approx(bitseq_reward(bitseq_state_string(cfg, t), ["0110"]))
