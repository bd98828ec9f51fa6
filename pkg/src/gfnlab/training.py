"""The training loop: sample trajectories, evaluate an objective, step the optimizer, monitor.

Randomness comes from two streams split off the run seed with
``SeedSequence(seed).spawn(2)``: one initializes the parameters, the other
drives sampling. Both are restored exactly on resume.
"""

from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .config import RunConfig, make_environment
from .dag import DagSpec
from .envs import Environment, bitseq_state_index, edit_distance_many
from .flows import exact_l1
from .metrics import (
    MetricsRecord,
    correlation,
    emit_csv,
    empirical_l1,
    model_log_likelihood,
    model_terminating_probs,
    parse_csv,
)
from .objectives import compute_loss, default_hubs
from .params import Adam, FDReport, MlpModel, Model, TabularModel, finite_difference_check
from .persist import atomic_write_bytes, pack_checkpoint, unpack_checkpoint


class TrainingDiverged(RuntimeError):
    """Raised when a loss is not finite. ``snapshot`` holds checkpoint bytes from before the bad step."""

    def __init__(self, message: str, snapshot: bytes, trajectories: list[tuple[int, ...]]):
        super().__init__(message)
        self.snapshot = snapshot
        self.trajectories = trajectories


@dataclass(frozen=True)
class ExplorationPolicy:
    """How the sampler departs from P_F.

    ``on_policy`` samples P_F itself. The other modes sample
    ``(1 - epsilon) * softmax(logits / temperature) + epsilon * uniform``
    over valid actions. Losses always use the untempered P_F.
    """

    mode: str = "epsilon_uniform"
    epsilon: float = 0.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.mode not in ("on_policy", "epsilon_uniform", "tempered"):
            raise ValueError(f"unknown exploration mode {self.mode!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.temperature < 1.0:
            raise ValueError("temperature must be >= 1")

    def probs(self, logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Row-wise sampling distribution over action slots; exactly 0 on masked slots."""
        eps, temp = (0.0, 1.0) if self.mode == "on_policy" else (self.epsilon, self.temperature)
        z = np.where(mask, np.asarray(logits, dtype=float) / temp, -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        if eps > 0:
            u = mask / mask.sum(axis=1, keepdims=True)
            p = (1 - eps) * p + eps * u
        return p


def sample_batch(
    model: Model, spec: DagSpec, explore: ExplorationPolicy, rng: np.random.Generator, size: int
) -> list[tuple[int, ...]]:
    """Draw ``size`` complete trajectories, stepping all unfinished ones together."""
    paths = [[0] for _ in range(size)]
    cur = np.zeros(size, dtype=np.int64)
    live = np.arange(size)
    terminal = spec.terminal_mask
    while len(live):
        states = cur[live]
        mask = spec.child_mask[states]
        p = explore.probs(model.forward_logits(states), mask)
        c = np.cumsum(p, axis=1)
        u = rng.random(len(live)) * c[:, -1]
        slot = (c <= u[:, None]).sum(axis=1)
        nxt = spec.child_table[states, slot]
        assert (nxt >= 0).all(), "sampled an invalid action"
        cur[live] = nxt
        for i, s in zip(live, nxt):
            paths[i].append(int(s))
        live = live[~terminal[nxt]]
    return [tuple(p) for p in paths]


def sample_trajectory(model: Model, spec: DagSpec, explore: ExplorationPolicy, rng: np.random.Generator) -> tuple[int, ...]:
    return sample_batch(model, spec, explore, rng, 1)[0]


class RingBuffer:
    """Fixed-capacity FIFO of integer ids."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.data = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.pos = 0

    def extend(self, values: Sequence[int]) -> None:
        values = np.asarray(values, dtype=np.int64)[-self.capacity :]
        idx = (self.pos + np.arange(len(values))) % self.capacity
        self.data[idx] = values
        self.pos = (self.pos + len(values)) % self.capacity
        self.size = min(self.capacity, self.size + len(values))

    def values(self) -> np.ndarray:
        """Contents in insertion order."""
        if self.size < self.capacity:
            return self.data[: self.size].copy()
        return np.concatenate([self.data[self.pos :], self.data[: self.pos]])

    def __len__(self) -> int:
        return self.size


@dataclass
class TrainState:
    iteration: int
    model: Model
    optimizer: Adam
    rng: np.random.Generator
    losses: deque
    visits: RingBuffer
    trajectories: int = 0
    below: int = 0  # consecutive convergence checks under threshold
    modes_hit: np.ndarray | None = None
    modes_all_at: int | None = None  # first iteration with every mode captured
    records: list[MetricsRecord] = field(default_factory=list)


class Convergence(NamedTuple):
    converged: bool
    mean: float


def running_convergence(state: TrainState, threshold: float, patience: int) -> Convergence:
    """Update the consecutive-check counter and report whether the window mean stayed below threshold."""
    if not state.losses:
        raise ValueError("loss window is empty")
    mean = float(np.mean(state.losses))
    state.below = state.below + 1 if mean < threshold else 0
    return Convergence(state.below >= patience, mean)


def make_model(cfg: RunConfig, spec: DagSpec, rng: np.random.Generator) -> Model:
    uniform_pb = cfg.objective.pb_mode == "frozen_uniform"
    dtype = np.dtype(cfg.model.dtype)
    if cfg.model.type == "tabular":
        return TabularModel(spec, rng, uniform_pb=uniform_pb, dtype=dtype)
    return MlpModel(spec, rng, hidden=cfg.model.hidden, uniform_pb=uniform_pb, dtype=dtype, slope=cfg.model.slope)


def mode_capture_table(env: Environment) -> np.ndarray | None:
    """(num_states, |M|) boolean table: terminal within edit distance delta of each mode."""
    if "modes" not in env.info:
        return None
    bc = env.info["config"]
    spec = env.spec
    terms = np.asarray(spec.terminals)
    # terminals of the prefix tree are the last 2^n states, in value order
    vals = terms - terms[0]
    bits = ((vals[:, None] >> np.arange(bc.n - 1, -1, -1)[None, :]) & 1).astype(np.int8)
    table = np.zeros((spec.num_states, len(env.info["modes"])), dtype=bool)
    for j, mode in enumerate(env.info["modes"]):
        y = np.array([int(c) for c in mode], dtype=np.int8)
        table[terms, j] = edit_distance_many(bits, y) <= bc.delta
    return table


class Trainer:
    """Owns the environment, model and bookkeeping for one run; :func:`train` is the usual entry point."""

    def __init__(self, cfg: RunConfig, env: Environment | None = None):
        self.cfg = cfg.resolved()
        c = self.cfg
        self.env = env if env is not None else make_environment(c)
        self.spec = self.env.spec
        self.beta = c.objective.beta
        self.log_rewards = self.env.log_rewards(self.beta)
        self.target_rewards = np.zeros(self.spec.num_states)
        self.target_rewards[self.spec.terminals] = self.env.target(self.beta)
        self.explore = ExplorationPolicy(c.train.explore, c.train.epsilon, c.train.temperature)
        self.hubs = default_hubs(self.spec, c.objective.hubs) if c.objective.type == "subtb" else None
        self.capture = mode_capture_table(self.env)
        self.exact = self.spec.num_states <= c.train.exact_max_states
        if "test_set" in self.env.info:
            bc = self.env.info["config"]
            self.test_ids = np.array([bitseq_state_index(bc, s) for s, _ in self.env.info["test_set"]])
            self.test_logr = np.log([r for _, r in self.env.info["test_set"]])
        else:
            self.test_ids = None
        init_seq, sample_seq = np.random.SeedSequence(c.train.seed).spawn(2)
        model = make_model(c, self.spec, np.random.default_rng(init_seq))
        opt = Adam(lr={"policy": c.train.lr_policy, "log_z": c.train.lr_log_z}, log_z_rule=c.train.log_z_rule)
        self.state = TrainState(
            iteration=0,
            model=model,
            optimizer=opt,
            rng=np.random.default_rng(sample_seq),
            losses=deque(maxlen=c.train.loss_window),
            visits=RingBuffer(c.train.l1_window),
            modes_hit=None if self.capture is None else np.zeros(self.capture.shape[1], dtype=bool),
        )
        self.started = time.perf_counter()

    # -- evaluation ---------------------------------------------------------

    def evaluate(self) -> MetricsRecord:
        st, model, spec = self.state, self.state.model, self.spec
        rec = MetricsRecord(iteration=st.iteration, trajectories=st.trajectories, log_z=model.log_z)
        if st.losses:
            rec.mean_loss = float(np.mean(st.losses))
        if len(st.visits):
            rec.empirical_l1 = empirical_l1(st.visits.values(), self.target_rewards)
        if st.modes_hit is not None:
            rec.modes_found = int(st.modes_hit.sum())
        pairs = None
        if self.exact:
            prob = model_terminating_probs(model, spec)
            rec.exact_l1 = exact_l1(prob, self.target_rewards)
            if self.test_ids is None:
                t = spec.terminals
                with np.errstate(divide="ignore"):
                    pairs = np.column_stack([self.log_rewards[t], np.log(prob[t])])
        if self.test_ids is not None:
            pairs = np.column_stack([self.test_logr, model_log_likelihood(model, spec, self.test_ids)])
        if pairs is not None and np.isfinite(pairs).all() and np.ptp(pairs[:, 0]) > 0:
            rec.spearman = correlation(pairs, "spearman")
            rec.pearson = correlation(pairs, "pearson") if np.ptp(pairs[:, 1]) > 0 else None
        if self.cfg.output.wall_clock:
            rec.wall_clock = time.perf_counter() - self.started
        return rec

    # -- one iteration ------------------------------------------------------

    def step(self) -> float:
        st, c = self.state, self.cfg
        batch = sample_batch(st.model, self.spec, self.explore, st.rng, c.train.batch_size)
        terms = np.fromiter((tr[-1] for tr in batch), dtype=np.int64, count=len(batch))
        lb = compute_loss(
            c.objective.type,
            batch,
            st.model,
            self.log_rewards,
            eps=c.objective.smoothing,
            leaf_coef=c.objective.leaf_coef,
            hubs=self.hubs,
        )
        loss = lb.mean
        if not np.isfinite(loss) or not np.isfinite(lb.losses).all():
            snapshot = self.checkpoint_bytes()
            raise TrainingDiverged(f"non-finite loss {loss} at iteration {st.iteration}", snapshot, batch)
        grads = lb.backward()
        st.optimizer.step(st.model, grads)
        st.visits.extend(terms)
        st.trajectories += len(batch)
        st.losses.append(loss)
        st.iteration += 1
        if st.modes_hit is not None:
            st.modes_hit |= self.capture[terms].any(axis=0)
            if st.modes_all_at is None and st.modes_hit.all():
                st.modes_all_at = st.iteration
        return loss

    # -- checkpoints --------------------------------------------------------

    def checkpoint_bytes(self) -> bytes:
        st = self.state
        arrays = {f"param/{k}": v for k, v in st.model.params.items()}
        arrays.update(st.optimizer.state_arrays())
        arrays["visits"] = st.visits.values()
        arrays["losses"] = np.array(st.losses, dtype=float)
        meta = {
            "iteration": st.iteration,
            "trajectories": st.trajectories,
            "adam_steps": st.optimizer.step_count,
            "rng": st.rng.bit_generator.state,
            "below": st.below,
            "modes_hit": None if st.modes_hit is None else st.modes_hit.tolist(),
            "modes_all_at": st.modes_all_at,
            "config": self.cfg.to_text(),
            "metrics": emit_csv(st.records),
        }
        return pack_checkpoint(arrays, meta)

    def restore(self, data: bytes) -> None:
        arrays, meta = unpack_checkpoint(data)
        st = self.state
        for k in st.model.params:
            st.model.params[k] = arrays[f"param/{k}"].astype(st.model.dtype)
        st.optimizer.load_arrays(arrays, meta["adam_steps"])
        st.visits = RingBuffer(self.cfg.train.l1_window)
        st.visits.extend(arrays["visits"])
        st.losses = deque(arrays["losses"].tolist(), maxlen=self.cfg.train.loss_window)
        st.rng.bit_generator.state = meta["rng"]
        st.iteration = meta["iteration"]
        st.trajectories = meta["trajectories"]
        st.below = meta["below"]
        if meta["modes_hit"] is not None:
            st.modes_hit = np.array(meta["modes_hit"], dtype=bool)
        st.modes_all_at = meta["modes_all_at"]
        st.records = parse_csv(meta["metrics"])

    # -- loop ---------------------------------------------------------------

    def run(self, out_dir: str | Path | None = None, on_record: Callable[[MetricsRecord], None] | None = None) -> TrainState:
        st, t = self.state, self.cfg.train

        def emit():
            rec = self.evaluate()
            st.records.append(rec)
            if on_record is not None:
                on_record(rec)

        if not st.records:
            emit()
        while st.iteration < t.iterations:
            self.step()
            done = False
            if t.stop_on_convergence:
                done = running_convergence(st, t.converge_threshold, t.converge_patience).converged
            if st.iteration % t.eval_interval == 0 or st.iteration == t.iterations or done:
                emit()
            if out_dir is not None and t.checkpoint_interval and st.iteration % t.checkpoint_interval == 0:
                atomic_write_bytes(Path(out_dir) / "checkpoint.bin", self.checkpoint_bytes())
            if done:
                break
        return st


def train(
    cfg: RunConfig,
    env: Environment | None = None,
    resume: bytes | None = None,
    on_record: Callable[[MetricsRecord], None] | None = None,
) -> TrainState:
    """Run the configured training loop and return the final state (records included)."""
    trainer = Trainer(cfg, env)
    if resume is not None:
        trainer.restore(resume)
    return trainer.run(on_record=on_record)


def diagnostic(exc: TrainingDiverged) -> str:
    return json.dumps({"error": str(exc), "trajectories": exc.trajectories}, indent=1)


def gradient_check(cfg: RunConfig, seeds: int = 5, batch: int = 4, step: float = 1e-4, tolerance: float = 1e-4) -> list[FDReport]:
    """Finite-difference check of the configured objective, one fresh model and batch per seed.

    The model is forced to float64; differences at step 1e-4 need double precision.
    """
    cfg = cfg.resolved()
    cfg.model.dtype = "float64"
    env = make_environment(cfg)
    spec = env.spec
    log_r = env.log_rewards(cfg.objective.beta)
    hubs = default_hubs(spec, cfg.objective.hubs)
    reports = []
    for seed in range(seeds):
        init, draw = np.random.SeedSequence([cfg.train.seed, seed]).spawn(2)
        model = make_model(cfg, spec, np.random.default_rng(init))
        rng = np.random.default_rng(draw)
        trajs = sample_batch(model, spec, ExplorationPolicy("on_policy"), rng, batch)

        def loss_fn(m, leaves):
            return compute_loss(
                cfg.objective.type, trajs, m, log_r, cfg.objective.smoothing, cfg.objective.leaf_coef, hubs, leaves=leaves
            ).total

        reports.append(finite_difference_check(model, loss_fn, step=step, tolerance=tolerance, rng=rng))
    return reports
