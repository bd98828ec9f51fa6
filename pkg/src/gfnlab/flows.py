"""Exact (non-learned) flow computations on an enumerated DAG.

Policies are ragged: ``forward[s]`` is aligned with ``spec.children[s]`` and
``backward[s]`` with ``spec.parents[s]``. Edge flows use the forward layout.
Per-state arrays (state flows, rewards, terminating probabilities) have one
entry per state id.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dag import DagSpec, enumerate_trajectories, topological_order

UNDERFLOW = 1e-300


class UnderflowWarning(RuntimeWarning):
    pass


@dataclass
class FlowAssignment:
    state_flow: np.ndarray
    edge_flow: list[np.ndarray]

    @property
    def Z(self) -> float:
        return float(self.state_flow[0])


@dataclass
class PolicyTable:
    forward: list[np.ndarray]
    backward: list[np.ndarray]


@dataclass
class TerminatingDistribution:
    prob: np.ndarray
    partition: float


def _flush(values: np.ndarray, where: str) -> np.ndarray:
    tiny = (values > 0) & (values < UNDERFLOW)
    if tiny.any():
        warnings.warn(f"{int(tiny.sum())} flow values below {UNDERFLOW:g} flushed to 0 at {where}", UnderflowWarning)
        values = np.where(tiny, 0.0, values)
    return values


def uniform_forward(spec: DagSpec) -> list[np.ndarray]:
    return [np.full(len(c), 1.0 / len(c)) if c else np.zeros(0) for c in spec.children]


def uniform_backward(spec: DagSpec) -> list[np.ndarray]:
    return [np.full(len(p), 1.0 / len(p)) if p else np.zeros(0) for p in spec.parents]


def random_forward(spec: DagSpec, rng: np.random.Generator, concentration: float = 1.0) -> list[np.ndarray]:
    return [rng.dirichlet(np.full(len(c), concentration)) if c else np.zeros(0) for c in spec.children]


def random_backward(spec: DagSpec, rng: np.random.Generator, concentration: float = 1.0) -> list[np.ndarray]:
    return [rng.dirichlet(np.full(len(p), concentration)) if p else np.zeros(0) for p in spec.parents]


def conservation_error(spec: DagSpec, flow: FlowAssignment) -> float:
    """Largest |inflow - F(s)| or |outflow - F(s)| over intermediate states."""
    inflow = np.zeros(spec.num_states)
    for s, cs in enumerate(spec.children):
        for c, f in zip(cs, flow.edge_flow[s]):
            inflow[c] += f
    worst = 0.0
    for s in range(spec.num_states):
        if s != 0:
            worst = max(worst, abs(inflow[s] - flow.state_flow[s]))
        if not spec.terminal[s]:
            worst = max(worst, abs(flow.edge_flow[s].sum() - flow.state_flow[s]))
    return worst


def policies_from_flow(spec: DagSpec, flow: FlowAssignment) -> PolicyTable:
    """P_F(s'|s) = F(s->s')/F(s) and P_B(s|s') = F(s->s')/F(s')."""
    edge = {}
    forward = []
    for s, cs in enumerate(spec.children):
        ef = np.asarray(flow.edge_flow[s], dtype=float)
        for c, f in zip(cs, ef):
            edge[s, c] = f
        if not cs:
            forward.append(np.zeros(0))
            continue
        if flow.state_flow[s] <= 0:
            if (ef > 0).any():
                raise ZeroDivisionError(f"state {s} has zero flow but carries edge flow")
            forward.append(np.full(len(cs), 1.0 / len(cs)))
        else:
            forward.append(ef / flow.state_flow[s])
    backward = []
    for t, ps in enumerate(spec.parents):
        if not ps:
            backward.append(np.zeros(0))
            continue
        ef = np.array([edge[p, t] for p in ps])
        if flow.state_flow[t] <= 0:
            if (ef > 0).any():
                raise ZeroDivisionError(f"state {t} has zero flow but carries edge flow")
            backward.append(np.full(len(ps), 1.0 / len(ps)))
        else:
            backward.append(ef / flow.state_flow[t])
    return PolicyTable(forward, backward)


def flow_from_forward(spec: DagSpec, Z: float, forward: Sequence[np.ndarray]) -> FlowAssignment:
    """The unique Markovian flow with F(s0) = Z and forward policy ``forward``."""
    F = np.zeros(spec.num_states)
    F[0] = Z
    edge: list[np.ndarray] = [np.zeros(0)] * spec.num_states
    for s in topological_order(spec):
        cs = spec.children[s]
        if not cs:
            continue
        e = _flush(F[s] * np.asarray(forward[s], dtype=float), f"state {s}")
        edge[s] = e
        for c, f in zip(cs, e):
            F[c] += f
    return FlowAssignment(F, edge)


def flow_from_backward(spec: DagSpec, terminal_flow: np.ndarray, backward: Sequence[np.ndarray]) -> FlowAssignment:
    """The unique Markovian flow with F(x) = terminal_flow[x] and backward policy ``backward``.

    ``terminal_flow`` is indexed by state id; entries at nonterminals are ignored.
    """
    F = np.zeros(spec.num_states)
    for x in spec.terminals:
        F[x] = terminal_flow[x]
    into: dict[tuple[int, int], float] = {}
    for t in reversed(topological_order(spec)):
        ps = spec.parents[t]
        if not ps:
            continue
        e = _flush(F[t] * np.asarray(backward[t], dtype=float), f"state {t}")
        for p, f in zip(ps, e):
            F[p] += f
            into[p, t] = f
    edge = [np.array([into[s, c] for c in cs]) for s, cs in enumerate(spec.children)]
    return FlowAssignment(F, edge)


def terminating_distribution(spec: DagSpec, Z: float, forward: Sequence[np.ndarray]) -> TerminatingDistribution:
    flow = flow_from_forward(spec, Z, forward)
    prob = np.zeros(spec.num_states)
    prob[spec.terminals] = flow.state_flow[spec.terminals] / Z
    return TerminatingDistribution(prob, Z)


def _log(x: float, eps: float) -> float:
    x = x + eps
    if x <= 0:
        raise ValueError("nonpositive operand inside log; pass a smoothing constant")
    return math.log(x)


def residual_fm(spec: DagSpec, edge_flow: Sequence[np.ndarray], rewards: np.ndarray, s: int, eps: float = 0.0) -> float:
    """log(inflow / outflow) at nonterminal s; log(inflow / R(s)) at terminal s."""
    if s == 0:
        raise ValueError("flow matching is not defined at the initial state")
    inflow = sum(edge_flow[p][spec.children[p].index(s)] for p in spec.parents[s])
    out = rewards[s] if spec.terminal[s] else float(np.sum(edge_flow[s]))
    return _log(inflow, eps) - _log(out, eps)


def residual_db(
    spec: DagSpec,
    state_flow: np.ndarray,
    forward: Sequence[np.ndarray],
    backward: Sequence[np.ndarray],
    edge: tuple[int, int],
    rewards: np.ndarray,
    eps: float = 0.0,
) -> float:
    """log(F(s) P_F(s'|s) / F(s') P_B(s|s')); F(s') is replaced by R(s') at terminals."""
    s, t = edge
    pf = forward[s][spec.children[s].index(t)]
    pb = backward[t][spec.parents[t].index(s)]
    ft = rewards[t] if spec.terminal[t] else state_flow[t]
    return _log(state_flow[s], eps) + _log(pf, eps) - _log(ft, eps) - _log(pb, eps)


def _path_logs(spec: DagSpec, forward, backward, states: Sequence[int]) -> tuple[float, float]:
    lf = lb = 0.0
    for a, b in zip(states[:-1], states[1:]):
        lf += _log(forward[a][spec.children[a].index(b)], 0.0)
        lb += _log(backward[b][spec.parents[b].index(a)], 0.0)
    return lf, lb


def residual_tb(
    spec: DagSpec,
    log_z: float,
    forward: Sequence[np.ndarray],
    backward: Sequence[np.ndarray],
    trajectory: Sequence[int],
    rewards: np.ndarray,
) -> float:
    x = trajectory[-1]
    if rewards[x] <= 0:
        raise ValueError(f"terminal {x} has zero reward")
    lf, lb = _path_logs(spec, forward, backward, trajectory)
    return log_z + lf - math.log(rewards[x]) - lb


def residual_subtb(
    spec: DagSpec,
    state_flow: np.ndarray,
    forward: Sequence[np.ndarray],
    backward: Sequence[np.ndarray],
    segment: Sequence[int],
) -> float:
    a, b = segment[0], segment[-1]
    if state_flow[a] <= 0 or state_flow[b] <= 0:
        raise ValueError("segment endpoints need positive state flow")
    lf, lb = _path_logs(spec, forward, backward, segment)
    return math.log(state_flow[a]) + lf - math.log(state_flow[b]) - lb


def residual_backforth(
    spec: DagSpec,
    forward: Sequence[np.ndarray],
    backward: Sequence[np.ndarray],
    rewards: np.ndarray,
    back_path: Sequence[int],
    forward_path: Sequence[int],
) -> float:
    """Balance of a terminal-to-terminal path that walks back to a pivot, then forward.

    ``back_path`` runs from terminal s_n down to the pivot s_1; ``forward_path``
    runs from the same pivot to terminal s'_n'. Zero for any exact flow.
    """
    if back_path[-1] != forward_path[0]:
        raise ValueError("paths must share the pivot state")
    src, dst = back_path[0], forward_path[-1]
    if rewards[src] <= 0 or rewards[dst] <= 0:
        raise ValueError("endpoint rewards must be positive")
    down = list(reversed(back_path))  # s_1 -> ... -> s_n
    lf_down, lb_down = _path_logs(spec, forward, backward, down)
    lf_up, lb_up = _path_logs(spec, forward, backward, forward_path)
    left = math.log(rewards[dst]) + lb_up + lf_down
    right = math.log(rewards[src]) + lb_down + lf_up
    return left - right


def exact_l1(dist: TerminatingDistribution | np.ndarray, rewards: np.ndarray) -> float:
    """sum_x |p(x) - R(x)/sum R|; both arrays are per state and zero off the terminals."""
    prob = dist.prob if isinstance(dist, TerminatingDistribution) else np.asarray(dist, dtype=float)
    rewards = np.asarray(rewards, dtype=float)
    total = rewards.sum()
    if total <= 0:
        raise ValueError("rewards are all zero")
    return float(np.abs(prob - rewards / total).sum())


def residual_report(
    spec: DagSpec,
    flow: FlowAssignment,
    policies: PolicyTable,
    rewards: np.ndarray,
    cap: int = 100_000,
) -> dict[str, float]:
    """Largest |residual| of each constraint family over the whole spec.

    FM is checked at every non-initial state, DB on every edge, TB on every
    complete trajectory and SubTB on every contiguous segment of those
    trajectories (at most ``cap`` trajectories).
    """
    fw, bw = policies.forward, policies.backward
    F = flow.state_flow
    out = {"conservation": conservation_error(spec, flow)}
    out["fm"] = max((abs(residual_fm(spec, flow.edge_flow, rewards, s)) for s in range(1, spec.num_states)), default=0.0)
    out["db"] = max((abs(residual_db(spec, F, fw, bw, e, rewards)) for e in spec.edges()), default=0.0)
    trajs = enumerate_trajectories(spec, cap)
    log_z = math.log(F[0])
    out["tb"] = max(abs(residual_tb(spec, log_z, fw, bw, t, rewards)) for t in trajs)
    segments = {t[i:j] for t in trajs for i in range(len(t)) for j in range(i + 2, len(t) + 1)}
    out["subtb"] = max((abs(residual_subtb(spec, F, fw, bw, seg)) for seg in segments), default=0.0)
    return out
