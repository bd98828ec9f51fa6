"""Enumerable benchmark environments: the hypergrid and fixed-length bit sequences."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dag import DagSpec, from_edges

DEFAULT_STATE_CAP = 200_000

# symbol alphabet for building reference bit strings (b = 8)
SYMBOLS = ("00000000", "11111111", "11110000", "00001111", "00111100")


class EnumerationCapExceeded(ValueError):
    pass


@dataclass(frozen=True)
class Environment:
    """An enumerated spec with its per-state reward table (0 at nonterminals)."""

    spec: DagSpec
    rewards: np.ndarray
    name: str = ""
    info: dict = field(default_factory=dict, compare=False, repr=False)

    def log_rewards(self, beta: float = 1.0) -> np.ndarray:
        """beta * log R at terminals, NaN elsewhere."""
        out = np.full(self.spec.num_states, np.nan)
        t = self.spec.terminals
        with np.errstate(divide="ignore"):
            out[t] = beta * np.log(self.rewards[t])
        return out

    def target(self, beta: float = 1.0) -> np.ndarray:
        """Normalized R^beta over terminal states (indexed like ``spec.terminals``)."""
        lr = self.log_rewards(beta)[self.spec.terminals]
        top = lr.max()
        w = np.exp(lr - top)
        return w / w.sum()


# ---------------------------------------------------------------------------
# hypergrid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HypergridConfig:
    H: int = 8
    D: int = 2
    R0: float = 0.1

    def __post_init__(self):
        if self.H < 2 or self.D < 1 or self.R0 < 0:
            raise ValueError(f"invalid hypergrid config {self}")


def hypergrid_reward(coords: Sequence[int], cfg: HypergridConfig) -> float:
    if len(coords) != cfg.D or any(not 0 <= c < cfg.H for c in coords):
        raise ValueError(f"coordinates {tuple(coords)} outside the {cfg.H}^{cfg.D} grid")
    dev = [abs(c / (cfg.H - 1) - 0.5) for c in coords]
    plateau = all(0.25 < d <= 0.5 for d in dev)
    peak = all(0.3 < d < 0.4 for d in dev)
    return cfg.R0 + 0.5 * plateau + 2.0 * peak


def build_hypergrid(cfg: HypergridConfig, cap: int = DEFAULT_STATE_CAP) -> Environment:
    """Grid cells are states 0..H^D-1 (row-major, last axis fastest); cell i's stop state is H^D + i.

    Forward slot d increments axis d, slot D is the stop action. Backward slot d
    means "came from decrementing axis d"; a stop state's single parent uses slot D.
    Encoding is the per-axis one-hot concatenation of the cell (stop states share it).
    """
    H, D = cfg.H, cfg.D
    cells = H**D
    if 2 * cells > cap:
        raise EnumerationCapExceeded(f"hypergrid {H}^{D} has {2 * cells} states, cap {cap}")
    strides = [H ** (D - 1 - d) for d in range(D)]
    coords = list(itertools.product(range(H), repeat=D))
    children, child_slots = [], []
    parents: list[list[tuple[int, int]]] = [[] for _ in range(2 * cells)]
    for i, c in enumerate(coords):
        kids, slots = [], []
        for d in range(D):
            if c[d] + 1 < H:
                j = i + strides[d]
                kids.append(j)
                slots.append(d)
                parents[j].append((d, i))
        kids.append(cells + i)
        slots.append(D)
        parents[cells + i].append((D, i))
        children.append(tuple(kids))
        child_slots.append(tuple(slots))
    children += [()] * cells
    child_slots += [()] * cells
    for p in parents:
        p.sort()
    enc = np.zeros((cells, D * H))
    for i, c in enumerate(coords):
        enc[i, [d * H + c[d] for d in range(D)]] = 1.0
    spec = DagSpec(
        children=tuple(children),
        parents=tuple(tuple(p for _, p in ps) for ps in parents),
        terminal=tuple([False] * cells + [True] * cells),
        encoding=np.vstack([enc, enc]),
        child_slots=tuple(child_slots),
        parent_slots=tuple(tuple(k for k, _ in ps) for ps in parents),
    )
    rewards = np.zeros(2 * cells)
    rewards[cells:] = [hypergrid_reward(c, cfg) for c in coords]
    return Environment(spec, rewards, f"hypergrid-H{H}-D{D}-R0={cfg.R0:g}")


def hypergrid_coords(index: int, cfg: HypergridConfig) -> tuple[int, ...]:
    cells = cfg.H**cfg.D
    i = index - cells if index >= cells else index
    return tuple(int(v) for v in np.unravel_index(i, (cfg.H,) * cfg.D))


# ---------------------------------------------------------------------------
# edit distance
# ---------------------------------------------------------------------------


def edit_distance(x: str, y: str) -> int:
    """Levenshtein distance with unit-cost insertion, deletion and substitution."""
    if len(x) < len(y):
        x, y = y, x
    prev = list(range(len(y) + 1))
    for i, a in enumerate(x, 1):
        cur = [i]
        for j, b in enumerate(y, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a != b)))
        prev = cur
    return prev[-1]


def edit_distance_many(xs: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Edit distances from each row of ``xs`` (M, n) to ``y`` (m,), vectorized over rows."""
    xs = np.asarray(xs)
    y = np.asarray(y)
    M, n = xs.shape
    prev = np.broadcast_to(np.arange(len(y) + 1), (M, len(y) + 1)).copy()
    for i in range(1, n + 1):
        cur = np.empty_like(prev)
        cur[:, 0] = i
        sub = prev[:, :-1] + (xs[:, i - 1 : i] != y[None, :])
        dele = prev[:, 1:] + 1
        best = np.minimum(sub, dele)
        # insertions chain left to right within the row
        for j in range(1, len(y) + 1):
            cur[:, j] = np.minimum(best[:, j - 1], cur[:, j - 1] + 1)
        prev = cur
    return prev[:, -1]


# ---------------------------------------------------------------------------
# bit sequences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BitSeqConfig:
    n: int = 16
    k: int = 1
    b: int = 8
    num_modes: int = 4
    delta: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n % self.k or self.n % self.b or self.delta < 0:
            raise ValueError(f"invalid bit-sequence config {self}")

    @property
    def m(self) -> int:
        return self.n // self.b


def bitseq_reward(x: str, modes: Sequence[str]) -> float:
    if not modes:
        raise ValueError("empty mode set")
    return math.exp(-min(edit_distance(x, y) for y in modes))


def generate_modes(cfg: BitSeqConfig, rng: np.random.Generator, symbols: Sequence[str] = SYMBOLS) -> list[str]:
    """Distinct concatenations of ``m`` uniformly drawn symbols, redrawn on duplicates."""
    if any(len(s) != cfg.b for s in symbols):
        raise ValueError(f"symbols must have length b={cfg.b}")
    available = len(set(symbols)) ** cfg.m
    if cfg.num_modes > available:
        raise ValueError(f"{cfg.num_modes} modes requested but only {available} symbol combinations exist")
    modes: list[str] = []
    seen = set()
    while len(modes) < cfg.num_modes:
        picks = rng.integers(0, len(symbols), size=cfg.m)
        s = "".join(symbols[i] for i in picks)
        if s not in seen:
            seen.add(s)
            modes.append(s)
    return modes


def generate_test_set(modes: Sequence[str], cfg: BitSeqConfig, rng: np.random.Generator) -> list[tuple[str, float]]:
    """For each mode and each i < n, flip i distinct random positions; pair with the reward."""
    rows = []
    for mode in modes:
        for i in range(cfg.n):
            bits = list(mode)
            for pos in rng.choice(cfg.n, size=i, replace=False):
                bits[pos] = "1" if bits[pos] == "0" else "0"
            s = "".join(bits)
            rows.append((s, bitseq_reward(s, modes)))
    return rows


def dump_modes(modes: Sequence[str]) -> str:
    """One mode per line."""
    return "".join(f"{m}\n" for m in modes)


def load_modes(text: str) -> list[str]:
    return [ln.strip() for ln in text.splitlines() if ln.strip()]


def dump_test_set(rows: Sequence[tuple[str, float]]) -> str:
    """``string<TAB>reward`` per line; rewards use ``repr`` so they read back exactly."""
    return "".join(f"{s}\t{float(r)!r}\n" for s, r in rows)


def load_test_set(text: str) -> list[tuple[str, float]]:
    rows = []
    for ln in text.splitlines():
        if ln.strip():
            s, r = ln.split("\t")
            rows.append((s, float(r)))
    return rows


def bitseq_num_states(n: int, k: int) -> int:
    return sum(2 ** (k * t) for t in range(n // k + 1))


def build_bitseq(cfg: BitSeqConfig, modes: Sequence[str], cap: int = DEFAULT_STATE_CAP) -> Environment:
    """Prefix tree of k-bit words. States are ordered breadth-first by length then value.

    Forward slot = value of the appended word. The encoding is the one-hot expansion of
    the padded word-id vector: n/k positions, each with 2^k word symbols plus a pad symbol.
    """
    n, k = cfg.n, cfg.k
    total = bitseq_num_states(n, k)
    if total > cap:
        raise EnumerationCapExceeded(f"bit-sequence tree n={n}, k={k} has {total} states, cap {cap}")
    V = 2**k
    L = n // k
    offsets = np.cumsum([0] + [V**t for t in range(L + 1)])
    children, child_slots, parents, labels = [], [], [], []
    depth = np.zeros(total, dtype=np.int64)
    value = np.zeros(total, dtype=np.int64)
    for t in range(L + 1):
        lo, hi = offsets[t], offsets[t + 1]
        depth[lo:hi] = t
        value[lo:hi] = np.arange(hi - lo)
    for s in range(total):
        t, v = depth[s], value[s]
        if t < L:
            base = offsets[t + 1] + v * V
            children.append(tuple(range(base, base + V)))
            child_slots.append(tuple(range(V)))
        else:
            children.append(())
            child_slots.append(())
        parents.append(() if t == 0 else (int(offsets[t - 1] + v // V),))
    # word ids per position, pad symbol = V
    words = np.full((total, L), V, dtype=np.int64)
    for t in range(1, L + 1):
        lo, hi = offsets[t], offsets[t + 1]
        vals = np.arange(hi - lo)
        for pos in range(t):
            words[lo:hi, pos] = (vals // V ** (t - 1 - pos)) % V
    enc = np.zeros((total, L * (V + 1)), dtype=np.float32)
    rows = np.repeat(np.arange(total), L)
    cols = (np.arange(L) * (V + 1))[None, :] + words
    enc[rows, cols.ravel()] = 1.0
    spec = DagSpec(
        children=tuple(children),
        parents=tuple(parents),
        terminal=tuple(bool(d == L) for d in depth),
        encoding=enc,
        child_slots=tuple(child_slots),
    )
    lo = offsets[L]
    term_vals = np.arange(V**L)
    bits = ((term_vals[:, None] >> np.arange(n - 1, -1, -1)[None, :]) & 1).astype(np.int8)
    dist = np.full(len(term_vals), n + max(len(m) for m in modes), dtype=np.int64)
    for mode in modes:
        dist = np.minimum(dist, edit_distance_many(bits, np.array([int(c) for c in mode], dtype=np.int8)))
    rewards = np.zeros(total)
    rewards[lo:] = np.exp(-dist.astype(float))
    return Environment(spec, rewards, f"bitseq-n{n}-k{k}")


def bitseq_state_string(cfg: BitSeqConfig, index: int) -> str:
    """Bit string of a state (prefix) id in a tree built by :func:`build_bitseq`."""
    k = cfg.k
    V = 2**k
    t, lo = 0, 0
    while index >= lo + V**t:
        lo += V**t
        t += 1
    v = index - lo
    return format(v, f"0{k * t}b") if t else ""


def bitseq_state_index(cfg: BitSeqConfig, bits: str) -> int:
    k = cfg.k
    if len(bits) % k:
        raise ValueError("prefix length must be a multiple of k")
    t = len(bits) // k
    lo = sum((2**k) ** j for j in range(t))
    return lo + (int(bits, 2) if bits else 0)


def bitseq_path(cfg: BitSeqConfig, bits: str) -> tuple[int, ...]:
    """The unique trajectory (state ids) that generates ``bits``."""
    return tuple(bitseq_state_index(cfg, bits[: j * cfg.k]) for j in range(len(bits) // cfg.k + 1))


# ---------------------------------------------------------------------------
# small graphs and random DAGs used by tests and the acceptance suite
# ---------------------------------------------------------------------------


def chain(length: int = 3) -> DagSpec:
    return from_edges(length, [(i, i + 1) for i in range(length - 1)])


def diamond() -> DagSpec:
    return from_edges(4, [(0, 1), (0, 2), (1, 3), (2, 3)])


def y_graph() -> DagSpec:
    """s0 -> {a, b}: two terminals reached in one step each."""
    return from_edges(3, [(0, 1), (0, 2)])


def random_dag(rng: np.random.Generator, num_states: int = 20, max_parents: int = 3) -> DagSpec:
    """Random valid DAG on ``num_states`` states; state 0 is the only source."""
    edges = set()
    for j in range(1, num_states):
        k = int(rng.integers(1, min(max_parents, j) + 1))
        for p in rng.choice(j, size=k, replace=False):
            edges.add((int(p), j))
    return from_edges(num_states, sorted(edges))


def random_environment(rng: np.random.Generator, num_states: int = 20, max_parents: int = 3) -> Environment:
    spec = random_dag(rng, num_states, max_parents)
    rewards = np.zeros(num_states)
    rewards[spec.terminals] = rng.uniform(0.1, 2.0, size=len(spec.terminals))
    return Environment(spec, rewards, f"random-{num_states}")
