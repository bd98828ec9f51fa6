"""On-disk formats: atomic writes, checkpoints and the ``.flow`` flow/policy dump.

``checkpoint.bin`` is a NumPy ``.npz`` archive. Array entries:

* ``param/<name>``: model parameters
* ``adam_m/<name>``, ``adam_v/<name>``: optimizer moments
* ``visits``: the visited-terminal ring buffer in chronological order
* ``losses``: the running loss window
* ``meta``: a 0-d unicode array holding JSON (format tag ``gfnlab-checkpoint v1``, iteration, optimizer step count,
  bit-generator state, convergence counter, captured modes, the resolved
  config text and the metrics CSV emitted so far)

``.flow`` files are line oriented::

    # gfnlab-flow v1
    states 4
    state 0 2.0 0.0
    state 3 2.0 2.0
    edge 0 1 1.0 0.5 1.0

``state <id> <F(s)> <R(s)>`` lists every state; ``edge <s> <t> <F(s->t)> <P_F(t|s)> <P_B(s|t)>``
lists every edge. Floats are written with ``repr`` and read back exactly.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from .dag import DagSpec
from .flows import FlowAssignment, PolicyTable

FLOW_HEADER = "# gfnlab-flow v1"
CHECKPOINT_FORMAT = "gfnlab-checkpoint v1"


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def pack_checkpoint(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    """An ``.npz`` archive with fixed member timestamps, so equal states give equal bytes."""
    buf = io.BytesIO()
    meta = dict(meta, format=CHECKPOINT_FORMAT)
    members = {"meta": np.array(json.dumps(meta, sort_keys=True)), **arrays}
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, value in members.items():
            member = io.BytesIO()
            np.lib.format.write_array(member, np.asarray(value), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), member.getvalue())
    return buf.getvalue()


def unpack_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(io.BytesIO(data), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files if k != "meta"}
            meta = json.loads(str(z["meta"]))
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise ValueError(f"not a checkpoint: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
    return arrays, meta


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    atomic_write_bytes(path, pack_checkpoint(arrays, meta))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return unpack_checkpoint(Path(path).read_bytes())


def dump_flow(spec: DagSpec, flow: FlowAssignment, policies: PolicyTable, rewards: np.ndarray) -> str:
    lines = [FLOW_HEADER, f"states {spec.num_states}"]
    for s in range(spec.num_states):
        lines.append(f"state {s} {float(flow.state_flow[s])!r} {float(rewards[s])!r}")
    for s, cs in enumerate(spec.children):
        for j, c in enumerate(cs):
            pb = policies.backward[c][spec.parents[c].index(s)]
            lines.append(f"edge {s} {c} {float(flow.edge_flow[s][j])!r} {float(policies.forward[s][j])!r} {float(pb)!r}")
    return "\n".join(lines) + "\n"


def load_flow(text: str, spec: DagSpec) -> tuple[FlowAssignment, PolicyTable, np.ndarray]:
    """Parse a ``.flow`` dump against ``spec``; every state and edge must appear exactly once."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != FLOW_HEADER:
        raise ValueError(f"not a flow file (expected {FLOW_HEADER!r})")
    head = lines[1].split()
    if head[0] != "states" or int(head[1]) != spec.num_states:
        raise ValueError(f"flow file is for {head[1]} states, spec has {spec.num_states}")
    N = spec.num_states
    F = np.full(N, np.nan)
    R = np.full(N, np.nan)
    edge_flow = [np.full(len(c), np.nan) for c in spec.children]
    forward = [np.full(len(c), np.nan) for c in spec.children]
    backward = [np.full(len(p), np.nan) for p in spec.parents]
    for n, ln in enumerate(lines[2:], start=3):
        tok = ln.split()
        if tok[0] == "state" and len(tok) == 4:
            s = int(tok[1])
            F[s], R[s] = float(tok[2]), float(tok[3])
        elif tok[0] == "edge" and len(tok) == 6:
            s, t = int(tok[1]), int(tok[2])
            if not spec.is_edge(s, t):
                raise ValueError(f"line {n}: ({s}, {t}) is not an edge of the spec")
            j = spec.children[s].index(t)
            edge_flow[s][j], forward[s][j] = float(tok[3]), float(tok[4])
            backward[t][spec.parents[t].index(s)] = float(tok[5])
        else:
            raise ValueError(f"line {n}: cannot parse {ln!r}")
    missing = np.isnan(F).sum() + sum(np.isnan(e).sum() for e in edge_flow)
    if missing:
        raise ValueError(f"flow file leaves {missing} states or edges unset")
    return FlowAssignment(F, edge_flow), PolicyTable(forward, backward), R
