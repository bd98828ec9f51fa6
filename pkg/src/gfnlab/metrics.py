"""Evaluation metrics: L1 errors, terminating log-likelihoods, correlations, modes and diversity."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .dag import DagSpec, topological_order
from .envs import edit_distance


def empirical_l1(visited: np.ndarray, rewards: np.ndarray) -> float:
    """L1 distance between visit frequencies of terminal ids and R / sum R.

    ``rewards`` is per state (zero off the terminals); terminals never visited
    contribute their whole target mass.
    """
    visited = np.asarray(visited, dtype=np.int64)
    if visited.size == 0:
        raise ValueError("no visited terminals")
    rewards = np.asarray(rewards, dtype=float)
    freq = np.bincount(visited, minlength=len(rewards)) / visited.size
    return float(np.abs(freq - rewards / rewards.sum()).sum())


def log_terminating_probs(spec: DagSpec, pf_logp: np.ndarray) -> np.ndarray:
    """log P(trajectory passes through s) for every state, by log-space DP in topological order.

    ``pf_logp`` is the (N, child slots) table of masked forward log-probabilities.
    At terminal states this is the log-likelihood of terminating there.
    """
    out = np.full(spec.num_states, -np.inf)
    out[0] = 0.0
    ct = spec.child_table
    for s in topological_order(spec):
        if out[s] == -np.inf or spec.terminal[s]:
            continue
        valid = ct[s] >= 0
        kids = ct[s][valid]
        out[kids] = np.logaddexp(out[kids], out[s] + pf_logp[s][valid])
    return out


def model_log_likelihood(model, spec: DagSpec, x: int | Sequence[int]) -> float | np.ndarray:
    """log-probability that a trajectory sampled from the model's P_F terminates at ``x``.

    On a tree the unique path is summed directly; otherwise a full DP is run.
    """
    xs = np.atleast_1d(np.asarray(x, dtype=np.int64))
    if not spec.terminal_mask[xs].all():
        raise ValueError("log-likelihood is defined for terminal states only")
    if spec.is_tree:
        paths = []
        for t in xs:
            path = [int(t)]
            while path[-1] != 0:
                path.append(spec.parents[path[-1]][0])
            paths.append(path[::-1])
        states = np.unique(np.concatenate([p[:-1] for p in paths]))
        logp = model.forward_log_probs(states)
        row = {s: i for i, s in enumerate(states)}
        slots = spec.edge_slots
        res = np.array([sum(logp[row[a], slots[a, b][0]] for a, b in zip(p[:-1], p[1:])) for p in paths])
    else:
        res = log_terminating_probs(spec, model.forward_log_probs())[xs]
    return float(res[0]) if np.ndim(x) == 0 else res


def model_terminating_probs(model, spec: DagSpec) -> np.ndarray:
    return np.exp(log_terminating_probs(spec, model.forward_log_probs())) * spec.terminal_mask


def correlation(pairs: Iterable[tuple[float, float]], kind: str = "pearson") -> float:
    a = np.asarray(list(pairs), dtype=float)
    if a.ndim != 2 or len(a) < 2:
        raise ValueError("need at least two pairs")
    x, y = a[:, 0], a[:, 1]
    if kind == "pearson":
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            raise ValueError("pearson correlation is undefined for a constant column")
        return float(stats.pearsonr(x, y)[0])
    if kind == "spearman":
        # average ranks for ties, then pearson on the ranks
        rx, ry = stats.rankdata(x), stats.rankdata(y)
        if np.ptp(rx) == 0 or np.ptp(ry) == 0:
            return float("nan")
        return float(stats.pearsonr(rx, ry)[0])
    raise ValueError(f"unknown correlation kind {kind!r}")


def modes_found(samples: Iterable[str], modes: Sequence[str], delta: int) -> int:
    """Number of modes with some sample within edit distance ``delta`` (inclusive)."""
    samples = set(samples)
    return sum(any(edit_distance(x, y) <= delta for x in samples) for y in modes)


def diversity(samples: Sequence[str]) -> float:
    """Mean edit distance over unordered pairs."""
    if len(samples) < 2:
        raise ValueError("diversity needs at least two samples")
    d = [edit_distance(a, b) for a, b in itertools.combinations(samples, 2)]
    return float(np.mean(d))


# ---------------------------------------------------------------------------
# metrics records and their CSV form
# ---------------------------------------------------------------------------

CSV_VERSION = "# gfnlab-metrics v1"
COLUMNS = (
    "iteration",
    "trajectories",
    "mean_loss",
    "exact_l1",
    "empirical_l1",
    "log_z",
    "modes_found",
    "spearman",
    "pearson",
    "wall_clock",
)


@dataclass
class MetricsRecord:
    """One evaluation row. Metrics that do not apply to a run are ``None`` (an empty CSV cell)."""

    iteration: int
    trajectories: int
    mean_loss: float | None = None
    exact_l1: float | None = None
    empirical_l1: float | None = None
    log_z: float | None = None
    modes_found: int | None = None
    spearman: float | None = None
    pearson: float | None = None
    wall_clock: float | None = None


def _cell(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def emit_csv(records: Sequence[MetricsRecord]) -> str:
    """CSV text with a version comment line; floats use ``repr`` so parsing is lossless."""
    lines = [CSV_VERSION, ",".join(COLUMNS)]
    for r in records:
        lines.append(",".join(_cell(getattr(r, c)) for c in COLUMNS))
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> list[MetricsRecord]:
    lines = text.splitlines()
    if not lines or lines[0] != CSV_VERSION:
        raise ValueError(f"not a metrics file (expected first line {CSV_VERSION!r})")
    if lines[1].split(",") != list(COLUMNS):
        raise ValueError("unexpected metrics columns")
    ints = {"iteration", "trajectories", "modes_found"}
    out = []
    for line in lines[2:]:
        cells = line.split(",")
        vals = {c: (None if x == "" else int(x) if c in ints else float(x)) for c, x in zip(COLUMNS, cells)}
        out.append(MetricsRecord(**vals))
    return out
