"""Run configuration: a sectioned ``key = value`` file with a typed schema.

Every key has a default. Keys left unset (``None`` below) are resolved per
environment by :meth:`RunConfig.resolved`:

=========  ==========  ========  ==================  =====
env        lr_policy   lr_log_z  epsilon (explore)   beta
=========  ==========  ========  ==================  =====
hypergrid  1e-3        1e-1      0.0                 1
bitseq     1e-4        1e-3      0.0005              3
random     1e-3        1e-1      0.0                 1
=========  ==========  ========  ==================  =====

Example::

    [env]
    type = hypergrid
    H = 8
    D = 2
    R0 = 0.1

    [objective]
    type = tb

    [model]
    type = mlp
    hidden = 256

    [train]
    iterations = 12500
    seed = 1
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_type_hints

import numpy as np

from .envs import (
    BitSeqConfig,
    Environment,
    HypergridConfig,
    build_bitseq,
    build_hypergrid,
    generate_modes,
    generate_test_set,
    random_environment,
)


class ConfigError(ValueError):
    """Schema violation; the message lists every problem found."""


@dataclass
class EnvSection:
    type: str = "hypergrid"  # hypergrid | bitseq | random
    H: int = 8
    D: int = 2
    R0: float = 0.1
    n: int = 16
    k: int = 1
    b: int = 8
    num_modes: int = 4
    delta: int = 3
    seed: int = 0  # mode/test-set draw (bitseq) or graph draw (random)
    num_states: int = 20  # random DAG size
    max_parents: int = 3


@dataclass
class ObjectiveSection:
    type: str = "tb"  # tb | db | fm | subtb
    beta: float | None = None  # reward exponent
    leaf_coef: float = 1.0  # flow-matching terminal weight lambda_T
    smoothing: float = 1e-8  # eps inside log(R^beta + eps); 0 disables
    hubs: str = "even"  # subtb hub policy: all | ends | even
    pb_mode: str = "learned"  # learned | frozen_uniform


@dataclass
class ModelSection:
    type: str = "mlp"  # mlp | tabular
    hidden: int = 256
    slope: float = 0.01  # leaky-ReLU negative slope
    dtype: str = "float64"  # float64 | float32


@dataclass
class TrainSection:
    iterations: int = 1000
    batch_size: int = 16
    lr_policy: float | None = None
    lr_log_z: float | None = None
    log_z_rule: str = "adam"  # adam | sgd
    explore: str = "epsilon_uniform"  # on_policy | epsilon_uniform | tempered
    epsilon: float | None = None
    temperature: float = 1.0
    seed: int = 0
    eval_interval: int = 100
    l1_window: int = 200_000
    loss_window: int = 100
    converge_threshold: float = 0.0
    converge_patience: int = 1
    stop_on_convergence: bool = False
    exact_max_states: int = 50_000  # exact metrics only on specs up to this size
    checkpoint_interval: int = 0  # 0 = only the final checkpoint


@dataclass
class OutputSection:
    dir: str = "runs/latest"
    wall_clock: bool = False  # wall-clock column breaks byte-identical reruns


SECTIONS = {
    "env": EnvSection,
    "objective": ObjectiveSection,
    "model": ModelSection,
    "train": TrainSection,
    "output": OutputSection,
}

CHOICES = {
    ("env", "type"): ("hypergrid", "bitseq", "random"),
    ("objective", "type"): ("tb", "db", "fm", "subtb"),
    ("objective", "hubs"): ("all", "ends", "even"),
    ("objective", "pb_mode"): ("learned", "frozen_uniform"),
    ("model", "type"): ("mlp", "tabular"),
    ("model", "dtype"): ("float64", "float32"),
    ("train", "log_z_rule"): ("adam", "sgd"),
    ("train", "explore"): ("on_policy", "epsilon_uniform", "tempered"),
}

DOMAIN_DEFAULTS = {
    "hypergrid": dict(lr_policy=1e-3, lr_log_z=1e-1, epsilon=0.0, beta=1.0),
    "bitseq": dict(lr_policy=1e-4, lr_log_z=1e-3, epsilon=0.0005, beta=3.0),
    "random": dict(lr_policy=1e-3, lr_log_z=1e-1, epsilon=0.0, beta=1.0),
}


@dataclass
class RunConfig:
    env: EnvSection = field(default_factory=EnvSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    output: OutputSection = field(default_factory=OutputSection)

    def resolved(self) -> "RunConfig":
        """Copy with every environment-dependent default filled in."""
        out = dataclasses.replace(
            self,
            env=dataclasses.replace(self.env),
            objective=dataclasses.replace(self.objective),
            model=dataclasses.replace(self.model),
            train=dataclasses.replace(self.train),
            output=dataclasses.replace(self.output),
        )
        d = DOMAIN_DEFAULTS[self.env.type]
        for key in ("lr_policy", "lr_log_z", "epsilon"):
            if getattr(out.train, key) is None:
                setattr(out.train, key, d[key])
        if out.objective.beta is None:
            out.objective.beta = d["beta"]
        if out.train.explore == "on_policy":
            out.train.epsilon = 0.0
        return out

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            sec = getattr(self, name)
            for f in fields(sec):
                v = getattr(sec, f.name)
                if v is not None:
                    lines.append(f"{f.name} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(raw: str, typ) -> Any:
    text = raw.strip()
    if typ is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if typ is int:
        return int(text.replace("_", ""))
    if typ is float:
        return float(text)
    return text


def _base_type(hint) -> type:
    args = getattr(hint, "__args__", None)
    if args:
        return next(a for a in args if a is not type(None))
    return hint


def parse_config(text: str) -> RunConfig:
    """Parse and validate config text; raise :class:`ConfigError` listing every problem."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive (H, D, R0)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = RunConfig()
    problems = []
    for name in parser.sections():
        if name not in SECTIONS:
            problems.append(f"unknown section [{name}]")
            continue
        sec = getattr(cfg, name)
        hints = get_type_hints(SECTIONS[name])
        for key, raw in parser.items(name):
            if key not in hints:
                problems.append(f"[{name}] unknown key {key!r}")
                continue
            try:
                value = _convert(raw, _base_type(hints[key]))
            except ValueError as exc:
                problems.append(f"[{name}] {key}: {exc}")
                continue
            setattr(sec, key, value)
    problems += validate(cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def validate(cfg: RunConfig) -> list[str]:
    problems = []
    for (sec, key), allowed in CHOICES.items():
        v = getattr(getattr(cfg, sec), key)
        if v not in allowed:
            problems.append(f"[{sec}] {key} must be one of {', '.join(allowed)}; got {v!r}")
    t = cfg.train
    if t.iterations < 0:
        problems.append("[train] iterations must be >= 0")
    for key in ("batch_size", "eval_interval", "l1_window", "loss_window", "converge_patience"):
        if getattr(t, key) < 1:
            problems.append(f"[train] {key} must be >= 1")
    if t.epsilon is not None and not 0.0 <= t.epsilon <= 1.0:
        problems.append("[train] epsilon must lie in [0, 1]")
    if t.temperature < 1.0:
        problems.append("[train] temperature must be >= 1")
    if cfg.objective.smoothing < 0:
        problems.append("[objective] smoothing must be >= 0")
    e = cfg.env
    if e.type == "hypergrid" and (e.H < 2 or e.D < 1 or e.R0 < 0):
        problems.append("[env] hypergrid needs H >= 2, D >= 1, R0 >= 0")
    if e.type == "bitseq" and (e.n % e.k or e.n % e.b or e.delta < 0):
        problems.append("[env] bitseq needs k | n, b | n and delta >= 0")
    if e.type == "random" and e.num_states < 2:
        problems.append("[env] random needs num_states >= 2")
    return problems


def make_environment(cfg: RunConfig) -> Environment:
    """Build the environment; bit sequences also carry their modes and test set in ``info``."""
    e = cfg.env
    if e.type == "hypergrid":
        return build_hypergrid(HypergridConfig(e.H, e.D, e.R0))
    if e.type == "bitseq":
        bc = BitSeqConfig(e.n, e.k, e.b, e.num_modes, e.delta, e.seed)
        rng = np.random.default_rng(e.seed)
        modes = generate_modes(bc, rng)
        test = generate_test_set(modes, bc, rng)
        env = build_bitseq(bc, modes)
        env.info.update(config=bc, modes=modes, test_set=test)
        return env
    return random_environment(np.random.default_rng(e.seed), e.num_states, e.max_parents)
