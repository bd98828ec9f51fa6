"""Training losses (FM, DB, TB, tree TB, SubTB) and the Reinforce-KL gradient.

Every loss takes a batch of complete trajectories, a model and per-state log
rewards (``beta * log R`` at terminals), and returns a :class:`LossBatch` whose
``total`` is the weighted mean of per-trajectory losses. ``eps`` is a smoothing
constant added inside linear-domain log operands: the terminal reward in every
objective and the in/out flow sums of flow matching.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dag import DagSpec
from .params import Grads, Model, collect_grads


@dataclass
class LossBatch:
    trajectories: list[tuple[int, ...]]
    per_trajectory: Tensor
    total: Tensor
    leaves: dict[str, Tensor] = field(repr=False)
    model: Model = field(repr=False)

    @property
    def losses(self) -> np.ndarray:
        return np.asarray(self.per_trajectory.data, dtype=float)

    @property
    def mean(self) -> float:
        return float(self.total.data)

    def backward(self) -> Grads:
        ag.backward(self.total)
        return collect_grads(self.model, self.leaves)


class _Prepared:
    """Flattened edge bookkeeping for a batch of trajectories."""

    def __init__(self, spec: DagSpec, trajectories: Sequence[Sequence[int]], extra_states: Sequence[int] = ()):
        self.B = len(trajectories)
        seen: dict[int, int] = {}
        for tr in trajectories:
            for s in tr:
                seen.setdefault(s, len(seen))
        for s in extra_states:
            seen.setdefault(s, len(seen))
        self.states = np.fromiter(seen.keys(), dtype=np.int64, count=len(seen))
        self.row = seen
        src, dst, fslot, pslot, tid = [], [], [], [], []
        slots = spec.edge_slots
        for i, tr in enumerate(trajectories):
            for a, b in zip(tr[:-1], tr[1:]):
                j, k = slots[a, b]
                src.append(seen[a])
                dst.append(seen[b])
                fslot.append(j)
                pslot.append(k)
                tid.append(i)
        self.src = np.array(src, dtype=np.int64)
        self.dst = np.array(dst, dtype=np.int64)
        self.fslot = np.array(fslot, dtype=np.int64)
        self.pslot = np.array(pslot, dtype=np.int64)
        self.tid = np.array(tid, dtype=np.int64)
        self.terminal = np.array([tr[-1] for tr in trajectories], dtype=np.int64)


def _weights(B: int, weights) -> np.ndarray:
    return np.full(B, 1.0 / B) if weights is None else np.asarray(weights, dtype=float)


def _smoothed(log_r: np.ndarray, eps: float) -> np.ndarray:
    return np.logaddexp(log_r, np.log(eps)) if eps > 0 else log_r


def _finish(model, leaves, trajectories, per_traj: Tensor, weights) -> LossBatch:
    w = _weights(len(trajectories), weights).astype(per_traj.data.dtype)
    total = ag.total(ag.mul(per_traj, w))
    return LossBatch(list(map(tuple, trajectories)), per_traj, total, leaves, model)


def _terminal_log_reward(log_rewards: np.ndarray, terminals: np.ndarray, eps: float, dtype) -> np.ndarray:
    lr = _smoothed(np.asarray(log_rewards, dtype=float)[terminals], eps)
    if np.isnan(lr).any():
        raise ValueError("trajectory ends at a state without a reward")
    if np.isneginf(lr).any():
        raise ValueError("zero reward at a sampled terminal; use a smoothing constant")
    return lr.astype(dtype)


def tb_residuals(batch, model: Model, log_rewards: np.ndarray, eps: float = 0.0, leaves=None, tree: bool = False):
    spec = model.spec
    leaves = leaves if leaves is not None else model.bind()
    prep = _Prepared(spec, batch)
    h = model.heads(prep.states, leaves)
    pf = h.pf_logp[(prep.src, prep.fslot)]
    fwd = ag.segment_sum(pf, prep.tid, prep.B)
    res = ag.add(fwd, ag.mul(leaves["log_z"], np.ones(prep.B, dtype=model.dtype)))
    if not tree:
        pb = h.pb_logp[(prep.dst, prep.pslot)]
        res = ag.add(res, ag.neg(ag.segment_sum(pb, prep.tid, prep.B)))
    res = ag.add(res, -_terminal_log_reward(log_rewards, prep.terminal, eps, model.dtype))
    return res, leaves


def loss_tb(batch, model: Model, log_rewards: np.ndarray, eps: float = 0.0, weights=None, leaves=None) -> LossBatch:
    """(log Z + sum log P_F - log R(x) - sum log P_B)^2 per trajectory."""
    res, leaves = tb_residuals(batch, model, log_rewards, eps, leaves)
    return _finish(model, leaves, batch, ag.square(res), weights)


def loss_tb_tree(batch, model: Model, log_rewards: np.ndarray, eps: float = 0.0, weights=None, leaves=None) -> LossBatch:
    """Trajectory balance on a tree, where the backward policy is identically 1."""
    if any(len(p) > 1 for p in model.spec.parents):
        raise ValueError("tree trajectory balance needs every state to have at most one parent")
    res, leaves = tb_residuals(batch, model, log_rewards, eps, leaves, tree=True)
    return _finish(model, leaves, batch, ag.square(res), weights)


def loss_db(batch, model: Model, log_rewards: np.ndarray, eps: float = 0.0, weights=None, leaves=None) -> LossBatch:
    """Sum over edges of (log F(s) + log P_F(s'|s) - log F(s') - log P_B(s|s'))^2, with R at terminals."""
    spec = model.spec
    leaves = leaves if leaves is not None else model.bind()
    prep = _Prepared(spec, batch)
    h = model.heads(prep.states, leaves)
    dst_states = prep.states[prep.dst]
    is_term = spec.terminal_mask[dst_states]
    # R stands in for the model flow at terminal children
    tail = np.zeros(len(dst_states), dtype=model.dtype)
    if is_term.any():
        tail[is_term] = _terminal_log_reward(log_rewards, dst_states[is_term], eps, model.dtype)
    flow_dst = ag.where(is_term, Tensor(tail), h.log_flow[prep.dst])
    res = h.log_flow[prep.src] + h.pf_logp[(prep.src, prep.fslot)] - flow_dst - h.pb_logp[(prep.dst, prep.pslot)]
    per = ag.segment_sum(ag.square(res), prep.tid, prep.B)
    return _finish(model, leaves, batch, per, weights)


def loss_fm(
    batch,
    model: Model,
    log_rewards: np.ndarray,
    eps: float = 0.0,
    leaf_coef: float = 1.0,
    weights=None,
    leaves=None,
) -> LossBatch:
    """Sum over visited non-initial states of (log inflow - log outflow)^2.

    Forward outputs are read as log edge flows. At a terminal the outflow is
    replaced by R(x) and the term is multiplied by ``leaf_coef``.
    """
    spec = model.spec
    leaves = leaves if leaves is not None else model.bind()
    visited: dict[int, int] = {}
    for tr in batch:
        for s in tr[1:]:
            visited.setdefault(s, len(visited))
    vis = np.fromiter(visited.keys(), dtype=np.int64, count=len(visited))
    # all parents of visited states must be evaluated to form the inflow
    par_states, par_slot, par_seg = [], [], []
    slots = spec.edge_slots
    for s, i in visited.items():
        for p in spec.parents[s]:
            par_states.append(p)
            par_slot.append(slots[p, s][0])
            par_seg.append(i)
    prep = _Prepared(spec, batch, extra_states=par_states)
    raw, _, _ = model.raw(leaves, prep.states)
    prow = np.array([prep.row[p] for p in par_states], dtype=np.int64)
    inflow = ag.segment_logsumexp(raw[(prow, np.array(par_slot, dtype=np.int64))], np.array(par_seg), len(vis))
    vrow = np.array([prep.row[s] for s in vis], dtype=np.int64)
    is_term = spec.terminal_mask[vis]
    outflow = ag.masked_logsumexp(raw[vrow], spec.child_mask[vis])
    log_eps = np.log(eps) if eps > 0 else -np.inf
    tail = np.zeros(len(vis), dtype=model.dtype)
    if is_term.any():
        tail[is_term] = _terminal_log_reward(log_rewards, vis[is_term], eps, model.dtype)
    out = ag.where(is_term, Tensor(tail), ag.log_add_const(outflow, log_eps))
    res = ag.log_add_const(inflow, log_eps) - out
    sq = ag.mul(ag.square(res), np.where(is_term, leaf_coef, 1.0).astype(model.dtype))
    occ, occ_tid = [], []
    for i, tr in enumerate(batch):
        for s in tr[1:]:
            occ.append(visited[s])
            occ_tid.append(i)
    per = ag.segment_sum(sq[np.array(occ, dtype=np.int64)], np.array(occ_tid, dtype=np.int64), len(batch))
    return _finish(model, leaves, batch, per, weights)


def default_hubs(spec: DagSpec, kind: str = "all") -> np.ndarray:
    """Hub membership: 'all' states, 'ends' (s0 and terminals) or 'even' (s0, terminals, even ids)."""
    hubs = np.zeros(spec.num_states, dtype=bool)
    hubs[0] = True
    hubs[spec.terminals] = True
    if kind == "all":
        hubs[:] = True
    elif kind == "even":
        hubs[::2] = True
    elif kind != "ends":
        raise ValueError(f"unknown hub policy {kind!r}")
    return hubs


def loss_subtb(
    batch,
    model: Model,
    log_rewards: np.ndarray,
    hubs: np.ndarray,
    eps: float = 0.0,
    weights=None,
    leaves=None,
) -> LossBatch:
    """Squared subtrajectory-balance residuals summed over segments between consecutive hubs."""
    spec = model.spec
    hubs = np.asarray(hubs, dtype=bool)
    if not hubs[0] or not hubs[spec.terminals].all():
        raise ValueError("hubs must contain s0 and every terminal state")
    leaves = leaves if leaves is not None else model.bind()
    prep = _Prepared(spec, batch)
    h = model.heads(prep.states, leaves)
    seg_of_edge, seg_start, seg_end, seg_tid = [], [], [], []
    for i, tr in enumerate(batch):
        seg_start.append(tr[0])
        seg_tid.append(i)
        for t in range(1, len(tr)):
            seg_of_edge.append(len(seg_start) - 1)
            if hubs[tr[t]]:
                seg_end.append(tr[t])
                if t < len(tr) - 1:
                    seg_start.append(tr[t])
                    seg_tid.append(i)
    nseg = len(seg_start)
    seg_of_edge = np.array(seg_of_edge, dtype=np.int64)
    start_rows = np.array([prep.row[s] for s in seg_start], dtype=np.int64)
    end_states = np.array(seg_end, dtype=np.int64)
    end_rows = np.array([prep.row[s] for s in seg_end], dtype=np.int64)
    is_term = spec.terminal_mask[end_states]
    tail = np.zeros(nseg, dtype=model.dtype)
    tail[is_term] = _terminal_log_reward(log_rewards, end_states[is_term], eps, model.dtype)
    end_flow = ag.where(is_term, Tensor(tail), h.log_flow[end_rows])
    pf = ag.segment_sum(h.pf_logp[(prep.src, prep.fslot)], seg_of_edge, nseg)
    pb = ag.segment_sum(h.pb_logp[(prep.dst, prep.pslot)], seg_of_edge, nseg)
    res = h.log_flow[start_rows] + pf - end_flow - pb
    per = ag.segment_sum(ag.square(res), np.array(seg_tid, dtype=np.int64), prep.B)
    return _finish(model, leaves, batch, per, weights)


def kl_reinforce_gradient(batch, model: Model, log_rewards: np.ndarray, weights=None, tol: float = 1e-9) -> Grads:
    """Score-function estimate of the gradient of KL(P_F(tau) || R(x) P_B(tau|x)).

    Per trajectory: (log P_F(tau) - log R(x) - log P_B(tau|x)) * grad log P_F(tau)
    plus the zero-mean score term grad log P_F(tau). Rewards must sum to one.
    The backward policy is treated as fixed.
    """
    spec = model.spec
    lr = np.asarray(log_rewards, dtype=float)[spec.terminals]
    if abs(np.logaddexp.reduce(lr)) > tol:
        raise ValueError("rewards must be normalized to sum to 1")
    leaves = model.bind()
    prep = _Prepared(spec, batch)
    h = model.heads(prep.states, leaves)
    log_pf = ag.segment_sum(h.pf_logp[(prep.src, prep.fslot)], prep.tid, prep.B)
    log_pb = np.zeros(prep.B)
    np.add.at(log_pb, prep.tid, h.pb_logp.data[prep.dst, prep.pslot])
    ratio = log_pf.data - np.asarray(log_rewards, dtype=float)[prep.terminal] - log_pb
    w = _weights(prep.B, weights)
    # surrogate whose gradient is sum_i w_i (ratio_i + 1) grad log P_F(tau_i)
    surrogate = ag.total(ag.mul(log_pf, (w * (ratio + 1.0)).astype(model.dtype)))
    ag.backward(surrogate)
    grads = collect_grads(model, leaves)
    grads["log_z"] = np.zeros_like(grads["log_z"])
    return grads


OBJECTIVES = ("tb", "db", "fm", "subtb")


def compute_loss(
    objective: str,
    batch,
    model: Model,
    log_rewards: np.ndarray,
    eps: float = 0.0,
    leaf_coef: float = 1.0,
    hubs: np.ndarray | None = None,
    weights=None,
    leaves=None,
) -> LossBatch:
    if objective == "tb":
        return loss_tb(batch, model, log_rewards, eps, weights, leaves)
    if objective == "tb_tree":
        return loss_tb_tree(batch, model, log_rewards, eps, weights, leaves)
    if objective == "db":
        return loss_db(batch, model, log_rewards, eps, weights, leaves)
    if objective == "fm":
        return loss_fm(batch, model, log_rewards, eps, leaf_coef, weights, leaves)
    if objective == "subtb":
        if hubs is None:
            hubs = default_hubs(model.spec, "even")
        return loss_subtb(batch, model, log_rewards, hubs, eps, weights, leaves)
    raise ValueError(f"unknown objective {objective!r}")
