"""Enumerated state DAGs, trajectory bookkeeping and topological DP primitives."""

from __future__ import annotations

import heapq
import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

Trajectory = tuple[int, ...]
PartialTrajectory = tuple[int, ...]

FORMAT_HEADER = "# gfnlab-dag v1"


class CycleError(ValueError):
    """Raised when a topological order is requested for a graph with a cycle."""

    def __init__(self, state: int):
        super().__init__(f"cycle detected through state {state}")
        self.state = state


class TooManyTrajectories(ValueError):
    def __init__(self, count: int, cap: int):
        super().__init__(f"{count} trajectories exceed the enumeration cap {cap}")
        self.count = count
        self.cap = cap


@dataclass(frozen=True, eq=False)
class DagSpec:
    """An explicitly enumerated DAG with initial state 0.

    ``children[s]`` and ``parents[s]`` list neighbour ids. ``child_slots[s][j]``
    is the action index (column of the forward head) used to reach
    ``children[s][j]``; ``parent_slots[s][j]`` is the column of the backward
    head for ``parents[s][j]``. Positional slots are used when not given.
    The constructor performs no validation so that defective specs can be
    represented; see :func:`validate_dag`.
    """

    children: tuple[tuple[int, ...], ...]
    parents: tuple[tuple[int, ...], ...]
    terminal: tuple[bool, ...]
    encoding: np.ndarray
    child_slots: tuple[tuple[int, ...], ...] = None  # type: ignore[assignment]
    parent_slots: tuple[tuple[int, ...], ...] = None  # type: ignore[assignment]
    labels: tuple[str, ...] | None = field(default=None)

    def __post_init__(self):
        if self.child_slots is None:
            object.__setattr__(self, "child_slots", tuple(tuple(range(len(c))) for c in self.children))
        if self.parent_slots is None:
            object.__setattr__(self, "parent_slots", tuple(tuple(range(len(p))) for p in self.parents))

    @property
    def num_states(self) -> int:
        return len(self.children)

    @cached_property
    def num_child_slots(self) -> int:
        return max((max(s) + 1 for s in self.child_slots if s), default=0)

    @cached_property
    def num_parent_slots(self) -> int:
        return max((max(s) + 1 for s in self.parent_slots if s), default=0)

    @cached_property
    def terminal_mask(self) -> np.ndarray:
        return np.asarray(self.terminal, dtype=bool)

    @cached_property
    def terminals(self) -> np.ndarray:
        return np.flatnonzero(self.terminal_mask)

    @cached_property
    def is_tree(self) -> bool:
        return bool((self.num_parents <= 1).all())

    @cached_property
    def child_table(self) -> np.ndarray:
        """(N, child slots) array of child ids, -1 where the slot is invalid."""
        table = np.full((self.num_states, max(self.num_child_slots, 1)), -1, dtype=np.int64)
        for s, (cs, slots) in enumerate(zip(self.children, self.child_slots)):
            table[s, list(slots)] = cs
        return table

    @cached_property
    def parent_table(self) -> np.ndarray:
        table = np.full((self.num_states, max(self.num_parent_slots, 1)), -1, dtype=np.int64)
        for s, (ps, slots) in enumerate(zip(self.parents, self.parent_slots)):
            table[s, list(slots)] = ps
        return table

    @cached_property
    def child_mask(self) -> np.ndarray:
        return self.child_table >= 0

    @cached_property
    def parent_mask(self) -> np.ndarray:
        return self.parent_table >= 0

    @cached_property
    def num_parents(self) -> np.ndarray:
        return np.array([len(p) for p in self.parents], dtype=np.int64)

    @cached_property
    def edge_slots(self) -> dict[tuple[int, int], tuple[int, int]]:
        """Map edge (s, s') to (forward-head column at s, backward-head column at s')."""
        pslot = {}
        for t, (ps, slots) in enumerate(zip(self.parents, self.parent_slots)):
            for p, k in zip(ps, slots):
                pslot[p, t] = k
        out = {}
        for s, (cs, slots) in enumerate(zip(self.children, self.child_slots)):
            for c, j in zip(cs, slots):
                out[s, c] = (j, pslot.get((s, c), -1))
        return out

    def is_edge(self, s: int, t: int) -> bool:
        return (s, t) in self.edge_slots

    def edges(self) -> list[tuple[int, int]]:
        return [(s, c) for s, cs in enumerate(self.children) for c in cs]


def from_edges(
    num_states: int,
    edges: Iterable[tuple[int, int]],
    encoding: np.ndarray | None = None,
) -> DagSpec:
    """Build a spec from an edge list; adjacency is sorted by neighbour id.

    Terminal states are the sinks. The default encoding is one-hot over ids.
    """
    kids: list[list[int]] = [[] for _ in range(num_states)]
    pars: list[list[int]] = [[] for _ in range(num_states)]
    for s, t in edges:
        kids[s].append(t)
        pars[t].append(s)
    children = tuple(tuple(sorted(k)) for k in kids)
    parents = tuple(tuple(sorted(p)) for p in pars)
    if encoding is None:
        encoding = np.eye(num_states)
    return DagSpec(children, parents, tuple(not c for c in children), np.asarray(encoding, dtype=float))


def validate_dag(spec: DagSpec) -> list[str]:
    """Return every invariant violation as a message; an empty list means valid."""
    n = spec.num_states
    problems: list[str] = []
    if n == 0:
        return ["empty spec: no initial state"]
    for s in range(n):
        for c in spec.children[s]:
            if not 0 <= c < n:
                problems.append(f"state {s}: child {c} out of range")
            elif s not in spec.parents[c]:
                problems.append(f"adjacency inconsistency: {s}->{c} listed as child but {s} not a parent of {c}")
        for p in spec.parents[s]:
            if not 0 <= p < n:
                problems.append(f"state {s}: parent {p} out of range")
            elif s not in spec.children[p]:
                problems.append(f"adjacency inconsistency: {p} listed as parent of {s} but {s} not a child of {p}")
        if len(spec.child_slots[s]) != len(spec.children[s]) or len(set(spec.child_slots[s])) != len(spec.children[s]):
            problems.append(f"state {s}: child slots malformed")
        if len(spec.parent_slots[s]) != len(spec.parents[s]) or len(set(spec.parent_slots[s])) != len(spec.parents[s]):
            problems.append(f"state {s}: parent slots malformed")
        if spec.terminal[s] and spec.children[s]:
            problems.append(f"terminal state {s} has children {list(spec.children[s])}")
        if not spec.terminal[s] and not spec.children[s]:
            problems.append(f"nonterminal state {s} has no children")
    sources = [s for s in range(n) if not spec.parents[s]]
    if sources != [0]:
        if 0 not in sources:
            problems.append("initial state 0 has parents")
        extra = [s for s in sources if s != 0]
        if extra:
            problems.append(f"multiple sources: states {extra} have no parents")
    if len(spec.encoding) != n:
        problems.append(f"encoding has {len(spec.encoding)} rows for {n} states")
    try:
        topological_order(spec)
    except CycleError as err:
        problems.append(f"cycle through state {err.state}")
    return problems


def topological_order(spec: DagSpec) -> list[int]:
    """Kahn's algorithm over child edges; ties broken by ascending index."""
    n = spec.num_states
    indeg = [0] * n
    for s in range(n):
        for c in spec.children[s]:
            if 0 <= c < n:
                indeg[c] += 1
    heap = [s for s in range(n) if indeg[s] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        s = heapq.heappop(heap)
        order.append(s)
        for c in spec.children[s]:
            if 0 <= c < n:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(heap, c)
    if len(order) < n:
        raise CycleError(_state_on_cycle(spec, {s for s in range(n) if indeg[s] > 0}))
    return order


def _state_on_cycle(spec: DagSpec, remaining: set[int]) -> int:
    # every leftover state has a leftover predecessor, so walking back must revisit one
    pred = {}
    for p in sorted(remaining):
        for c in spec.children[p]:
            if c in remaining:
                pred.setdefault(c, p)
    s = min(remaining)
    seen = set()
    while s not in seen:
        seen.add(s)
        s = pred[s]
    return s


def count_trajectories(spec: DagSpec) -> dict[int, int]:
    """Number of complete trajectories ending at each terminal state (exact integers)."""
    ways = [0] * spec.num_states
    ways[0] = 1
    for s in topological_order(spec):
        if ways[s]:
            for c in spec.children[s]:
                ways[c] += ways[s]
    return {int(x): ways[x] for x in spec.terminals}


def enumerate_trajectories(spec: DagSpec, cap: int = 100_000) -> list[Trajectory]:
    """All complete trajectories, depth-first in child order."""
    total = sum(count_trajectories(spec).values())
    if total > cap:
        raise TooManyTrajectories(total, cap)
    out: list[Trajectory] = []
    stack: list[tuple[int, ...]] = [(0,)]
    while stack:
        path = stack.pop()
        s = path[-1]
        if spec.terminal[s]:
            out.append(path)
            continue
        for c in reversed(spec.children[s]):
            stack.append(path + (c,))
    return out


def is_valid_path(spec: DagSpec, states: Sequence[int]) -> bool:
    return all(spec.is_edge(a, b) for a, b in zip(states[:-1], states[1:]))


def is_complete(spec: DagSpec, states: Sequence[int]) -> bool:
    return len(states) > 0 and states[0] == 0 and bool(spec.terminal[states[-1]]) and is_valid_path(spec, states)


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------


def dumps(spec: DagSpec) -> str:
    """Serialize to the line-oriented ``.dag`` format (see README)."""
    buf = io.StringIO()
    buf.write(FORMAT_HEADER + "\n")
    buf.write(f"states {spec.num_states}\n")
    pslot_of = spec.edge_slots
    for s in range(spec.num_states):
        kids = " ".join(
            f"{c}:{j}:{pslot_of[s, c][1]}" for c, j in zip(spec.children[s], spec.child_slots[s])
        )
        line = f"{s} {int(bool(spec.terminal[s]))} {len(spec.parents[s])}"
        buf.write(line + (" " + kids if kids else "") + "\n")
    enc = np.asarray(spec.encoding, dtype=float)
    buf.write(f"encoding {enc.shape[1] if enc.ndim == 2 else 0}\n")
    for s in range(spec.num_states):
        buf.write(f"{s} " + " ".join(repr(float(v)) for v in enc[s]) + "\n")
    return buf.getvalue()


def loads(text: str) -> DagSpec:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or not lines[0].startswith("states "):
        raise ValueError("expected 'states N' header")
    n = int(lines[0].split()[1])
    kids: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    pars: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    terminal = [False] * n
    declared_parents = [0] * n
    for row in lines[1 : 1 + n]:
        parts = row.split()
        s = int(parts[0])
        terminal[s] = parts[1] == "1"
        declared_parents[s] = int(parts[2])
        for tok in parts[3:]:
            c, j, k = (int(v) for v in tok.split(":"))
            kids[s].append((j, c))
            pars[c].append((k, s))
    for s in range(n):
        if len(pars[s]) != declared_parents[s]:
            raise ValueError(f"state {s}: declared {declared_parents[s]} parents, found {len(pars[s])}")
    rest = lines[1 + n :]
    if not rest or not rest[0].startswith("encoding"):
        raise ValueError("missing encoding section")
    dim = int(rest[0].split()[1])
    enc = np.zeros((n, dim))
    for row in rest[1 : 1 + n]:
        parts = row.split()
        enc[int(parts[0])] = [float(v) for v in parts[1:]]
    # adjacency lists are stored in slot order
    kids_sorted = [sorted(k) for k in kids]
    pars_sorted = [sorted(p) for p in pars]
    return DagSpec(
        children=tuple(tuple(c for _, c in k) for k in kids_sorted),
        parents=tuple(tuple(p for _, p in ps) for ps in pars_sorted),
        terminal=tuple(terminal),
        encoding=enc,
        child_slots=tuple(tuple(j for j, _ in k) for k in kids_sorted),
        parent_slots=tuple(tuple(j for j, _ in ps) for ps in pars_sorted),
    )
