"""Learnable parametrizations, the Adam optimizer and finite-difference checks.

Both parametrizations expose the same raw heads for a batch of state ids:

* forward outputs, one column per child slot. Under P_F they are logits; under
  flow matching they are read directly as log edge flows log F(s -> s').
* backward logits, one column per parent slot (ignored when P_B is uniform).
* a log state flow. At the initial state this is always the ``log_z`` parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import MASKED, Tensor
from .dag import DagSpec

Grads = dict[str, np.ndarray]


class Heads(NamedTuple):
    pf_raw: Tensor
    pf_logp: Tensor
    pb_logp: Tensor
    log_flow: Tensor


class Model:
    """Common behaviour of the tabular and MLP parametrizations."""

    spec: DagSpec
    params: dict[str, np.ndarray]
    frozen: set[str]
    uniform_pb: bool
    tied_flow: bool
    dtype: np.dtype

    def group(self, name: str) -> str:
        return "log_z" if name == "log_z" else "policy"

    def bind(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad and k not in self.frozen) for k, v in self.params.items()}

    def raw(self, leaves: dict[str, Tensor], states: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        raise NotImplementedError

    def heads(self, states: np.ndarray, leaves: dict[str, Tensor] | None = None) -> Heads:
        """Masked log-probabilities and log state flows for a batch of state ids."""
        if leaves is None:
            leaves = self.bind(requires_grad=False)
        states = np.asarray(states, dtype=np.int64)
        spec = self.spec
        pf_raw, pb_raw, flow_raw = self.raw(leaves, states)
        cmask = spec.child_mask[states]
        pf_logp = ag.masked_log_softmax(pf_raw, cmask)
        pmask = spec.parent_mask[states]
        if self.uniform_pb:
            npar = np.maximum(spec.num_parents[states], 1)[:, None]
            pb_logp = Tensor(np.where(pmask, -np.log(npar), MASKED).astype(self.dtype))
        else:
            pb_logp = ag.masked_log_softmax(pb_raw, pmask)
        if self.tied_flow:
            # F(s) := sum of modelled outflows; states without children keep the head value
            tied = ag.masked_logsumexp(pf_raw, cmask)
            flow_raw = ag.where(cmask.any(axis=1), tied, flow_raw)
        log_flow = ag.where(states == 0, ag.mul(leaves["log_z"], np.ones(len(states), dtype=self.dtype)), flow_raw)
        return Heads(pf_raw, pf_logp, pb_logp, log_flow)

    def forward_heads(self, state) -> tuple[np.ndarray, np.ndarray, float]:
        """(P_F log-probs over children, P_B log-probs over parents, log state flow) for one state."""
        spec = self.spec
        if spec.terminal[state]:
            raise ValueError(f"state {state} is terminal and has no forward policy")
        h = self.heads(np.array([state]))
        pf = h.pf_logp.data[0][list(spec.child_slots[state])]
        pb = h.pb_logp.data[0][list(spec.parent_slots[state])]
        return pf, pb, float(h.log_flow.data[0])

    def forward_logits(self, states: np.ndarray) -> np.ndarray:
        """Raw forward outputs (no tape), used by the sampler."""
        pf_raw, _, _ = self.raw(self.bind(requires_grad=False), np.asarray(states, dtype=np.int64))
        return pf_raw.data

    def forward_log_probs(self, states: np.ndarray | None = None) -> np.ndarray:
        """Masked P_F log-probabilities for many states in chunks, without a tape."""
        if states is None:
            states = np.arange(self.spec.num_states)
        out = np.empty((len(states), self.spec.child_table.shape[1]))
        for lo in range(0, len(states), 8192):
            chunk = np.asarray(states[lo : lo + 8192])
            raw = Tensor(self.forward_logits(chunk))
            out[lo : lo + len(chunk)] = ag.masked_log_softmax(raw, self.spec.child_mask[chunk]).data
        return out

    @property
    def log_z(self) -> float:
        return float(self.params["log_z"])

    def copy(self):
        other = object.__new__(type(self))
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.frozen = set(self.frozen)
        return other

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


class TabularModel(Model):
    """One free logit per (state, slot), one log flow per state and a scalar log Z."""

    def __init__(
        self,
        spec: DagSpec,
        rng: np.random.Generator | None = None,
        uniform_pb: bool = False,
        tied_flow: bool = False,
        dtype=np.float64,
        init_scale: float | None = None,
    ):
        self.spec = spec
        self.uniform_pb = uniform_pb
        self.tied_flow = tied_flow
        self.dtype = np.dtype(dtype)
        N = spec.num_states
        C, P = spec.child_table.shape[1], spec.parent_table.shape[1]
        rng = rng if rng is not None else np.random.default_rng(0)

        def init(shape, fan_in):
            a = init_scale if init_scale is not None else 1.0 / np.sqrt(fan_in)
            return rng.uniform(-a, a, size=shape).astype(self.dtype)

        self.params = {
            "pf_logits": init((N, C), C),
            "pb_logits": np.zeros((N, P), dtype=self.dtype) if uniform_pb else init((N, P), P),
            "log_state_flow": np.zeros(N, dtype=self.dtype),
            "log_z": np.zeros((), dtype=self.dtype),
        }
        self.frozen = {"pb_logits"} if uniform_pb else set()

    @property
    def log_edge_flow(self) -> np.ndarray:
        """Forward logits read as log edge flows (flow matching)."""
        return self.params["pf_logits"]

    def raw(self, leaves, states):
        return leaves["pf_logits"][states], leaves["pb_logits"][states], leaves["log_state_flow"][states]

    @classmethod
    def from_policies(
        cls,
        spec: DagSpec,
        forward: list[np.ndarray],
        backward: list[np.ndarray],
        log_state_flow: np.ndarray,
        log_z: float,
        edge_scale: np.ndarray | None = None,
        uniform_pb: bool = False,
    ) -> "TabularModel":
        """Load exact values. With ``edge_scale`` = F(s) the forward logits become log edge flows."""
        model = cls(spec, uniform_pb=uniform_pb)
        pf = np.zeros_like(model.params["pf_logits"])
        pb = np.zeros_like(model.params["pb_logits"])
        with np.errstate(divide="ignore"):
            for s in range(spec.num_states):
                if spec.children[s]:
                    shift = np.log(edge_scale[s]) if edge_scale is not None else 0.0
                    pf[s, list(spec.child_slots[s])] = np.log(forward[s]) + shift
                if spec.parents[s] and not uniform_pb:
                    pb[s, list(spec.parent_slots[s])] = np.log(backward[s])
        model.params.update(
            pf_logits=pf,
            pb_logits=pb,
            log_state_flow=np.asarray(log_state_flow, dtype=float).copy(),
            log_z=np.array(float(log_z)),
        )
        return model


class MlpModel(Model):
    """Two hidden leaky-ReLU layers shared by all heads; a single output matrix holds the heads."""

    def __init__(
        self,
        spec: DagSpec,
        rng: np.random.Generator | None = None,
        hidden: int = 256,
        uniform_pb: bool = False,
        tied_flow: bool = False,
        dtype=np.float64,
        slope: float = 0.01,
    ):
        self.spec = spec
        self.uniform_pb = uniform_pb
        self.tied_flow = tied_flow
        self.dtype = np.dtype(dtype)
        self.slope = slope
        self.hidden = hidden
        rng = rng if rng is not None else np.random.default_rng(0)
        E = spec.encoding.shape[1]
        self.n_pf = spec.child_table.shape[1]
        self.n_pb = spec.parent_table.shape[1]
        out = self.n_pf + self.n_pb + 1

        def uniform(shape, fan_in):
            a = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-a, a, size=shape).astype(self.dtype)

        self.params = {
            "w1": uniform((E, hidden), E),
            "b1": uniform((hidden,), E),
            "w2": uniform((hidden, hidden), hidden),
            "b2": uniform((hidden,), hidden),
            "w3": uniform((hidden, out), hidden),
            "b3": uniform((out,), hidden),
            "log_z": np.zeros((), dtype=self.dtype),
        }
        self.frozen = set()

    def trunk(self, leaves, states) -> Tensor:
        x = Tensor(np.asarray(self.spec.encoding[states], dtype=self.dtype))
        h = ag.leaky_relu(ag.affine(x, leaves["w1"], leaves["b1"]), self.slope)
        h = ag.leaky_relu(ag.affine(h, leaves["w2"], leaves["b2"]), self.slope)
        return ag.affine(h, leaves["w3"], leaves["b3"])

    def raw(self, leaves, states):
        out = self.trunk(leaves, states)
        a, b = self.n_pf, self.n_pf + self.n_pb
        cols = np.arange(out.shape[1])
        return out[:, cols[:a]], out[:, cols[a:b]], out[:, b]

    def activation_signs(self) -> np.ndarray:
        """Sign pattern of both hidden pre-activations over every state; changes mark a kink crossing."""
        p, out = self.params, []
        for lo in range(0, self.spec.num_states, 8192):
            x = np.asarray(self.spec.encoding[lo : lo + 8192], dtype=self.dtype)
            h1 = x @ p["w1"] + p["b1"]
            h2 = np.where(h1 > 0, h1, self.slope * h1) @ p["w2"] + p["b2"]
            out.append(np.concatenate([h1 > 0, h2 > 0], axis=1))
        return np.concatenate(out)

    def forward_logits(self, states):
        # plain numpy path for sampling
        p = self.params
        x = np.asarray(self.spec.encoding[states], dtype=self.dtype)
        h = x @ p["w1"] + p["b1"]
        h = np.where(h > 0, h, self.slope * h)
        h = h @ p["w2"] + p["b2"]
        h = np.where(h > 0, h, self.slope * h)
        return h @ p["w3"][:, : self.n_pf] + p["b3"][: self.n_pf]


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def collect_grads(model: Model, leaves: dict[str, Tensor]) -> Grads:
    """Gradient buffers aligned with ``model.params``; frozen or untouched entries are zero."""
    out = {}
    for k, v in model.params.items():
        g = leaves[k].grad
        out[k] = np.zeros_like(v) if g is None or k in model.frozen else np.asarray(g, dtype=v.dtype).reshape(v.shape)
    return out


def merge_grads(*parts: Grads) -> Grads:
    out = {k: v.copy() for k, v in parts[0].items()}
    for p in parts[1:]:
        for k, v in p.items():
            out[k] += v
    return out


def grad_norm(grads: Grads) -> float:
    return float(np.sqrt(sum(float((g.astype(float) ** 2).sum()) for g in grads.values())))


def value_and_grad(model: Model, loss_fn: Callable[[Model, dict[str, Tensor]], Tensor]) -> tuple[float, Grads]:
    leaves = model.bind()
    loss = loss_fn(model, leaves)
    ag.backward(loss)
    return float(loss.data), collect_grads(model, leaves)


@dataclass
class FDReport:
    max_rel: dict[str, float]
    mean_rel: dict[str, float]
    flagged: list[tuple[str, tuple, float, float]]
    checked: int
    tolerance: float
    skipped: int = 0  # probes whose +-step straddles a leaky-ReLU kink

    @property
    def ok(self) -> bool:
        return not self.flagged

    def worst(self) -> float:
        return max(self.max_rel.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"checked {self.checked} coordinates, tolerance {self.tolerance:g}"]
        if self.skipped:
            lines[0] += f", {self.skipped} skipped at kinks"
        for g in sorted(self.max_rel):
            lines.append(f"  {g:8s} max rel {self.max_rel[g]:.3e}  mean rel {self.mean_rel[g]:.3e}")
        lines.append("  PASS" if self.ok else f"  FAIL: {len(self.flagged)} coordinates flagged")
        return "\n".join(lines)


def finite_difference_check(
    model: Model,
    loss_fn: Callable[[Model, dict[str, Tensor]], Tensor],
    step: float = 1e-4,
    tolerance: float = 1e-4,
    max_coords: int = 64,
    rng: np.random.Generator | None = None,
    grads: Grads | None = None,
    floor: float = 1e-6,
) -> FDReport:
    """Compare analytic gradients with central differences.

    Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    Tensors larger than ``max_coords`` are checked on a random subsample.
    ``grads`` may be supplied to check an externally computed gradient.
    For models with piecewise-linear activations, a probe whose +-step changes
    any activation sign has no valid central difference and is counted in
    ``skipped`` instead of being compared.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if grads is None:
        _, grads = value_and_grad(model, loss_fn)

    def f() -> float:
        return float(loss_fn(model, model.bind(requires_grad=False)).data)

    signs = getattr(model, "activation_signs", None)
    base = signs() if signs is not None else None
    per_group: dict[str, list[float]] = {}
    flagged = []
    checked = skipped = 0
    for name, value in model.params.items():
        if name in model.frozen:
            continue
        flat = value.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = f()
            kink = base is not None and not np.array_equal(signs(), base)
            flat[i] = orig - step
            down = f()
            kink = kink or (base is not None and not np.array_equal(signs(), base))
            flat[i] = orig
            if kink:
                skipped += 1
                continue
            numeric = (up - down) / (2 * step)
            analytic = float(grads[name].reshape(-1)[i])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            per_group.setdefault(model.group(name), []).append(rel)
            if rel > tolerance:
                flagged.append((name, np.unravel_index(i, value.shape), analytic, numeric))
            checked += 1
    return FDReport(
        max_rel={g: max(v) for g, v in per_group.items()},
        mean_rel={g: float(np.mean(v)) for g, v in per_group.items()},
        flagged=flagged,
        checked=checked,
        tolerance=tolerance,
        skipped=skipped,
    )


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class Adam:
    """Bias-corrected Adam with one learning rate per parameter group.

    ``log_z_rule='sgd'`` switches the log Z group to plain gradient steps.
    """

    lr: dict[str, float] = field(default_factory=lambda: {"policy": 1e-3, "log_z": 1e-1})
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    log_z_rule: str = "adam"
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, model: Model, grads: Grads) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        for name, p in model.params.items():
            if name in model.frozen:
                continue
            g = grads[name].astype(p.dtype, copy=False)
            lr = self.lr[model.group(name)]
            if name == "log_z" and self.log_z_rule == "sgd":
                p -= lr * g
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        self.step_count = step_count
        self.m = {k.split("/", 1)[1]: np.array(v) for k, v in arrays.items() if k.startswith("adam_m/")}
        self.v = {k.split("/", 1)[1]: np.array(v) for k, v in arrays.items() if k.startswith("adam_v/")}


def optimizer_step(model: Model, grads: Grads, opt: Adam) -> None:
    opt.step(model, grads)
