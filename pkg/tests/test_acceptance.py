"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The two training comparisons (criteria 3 and 10) take several minutes each.
"""

import time
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

from conftest import exact_model, trajectory_log_probs
from gfnlab.config import load_config, parse_config
from gfnlab.dag import enumerate_trajectories
from gfnlab.envs import (
    BitSeqConfig,
    Environment,
    HypergridConfig,
    build_bitseq,
    build_hypergrid,
    random_environment,
)
from gfnlab.flows import (
    flow_from_backward,
    flow_from_forward,
    policies_from_flow,
    random_backward,
    random_forward,
    residual_report,
    uniform_backward,
)
from gfnlab.metrics import emit_csv, empirical_l1
from gfnlab.objectives import default_hubs, kl_reinforce_gradient, loss_db, loss_fm, loss_subtb, loss_tb, loss_tb_tree
from gfnlab.params import TabularModel
from gfnlab.training import Trainer, gradient_check

CONFIGS = Path(__file__).parent.parent / "configs"
RESULTS: list[str] = []


def verdict(capsys, number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {title} ({detail})"
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def random_bits(rng, n: int, count: int) -> list[str]:
    out: list[str] = []
    while len(out) < count:
        s = "".join(rng.choice(["0", "1"], size=n))
        if s not in out:
            out.append(s)
    return out


def criterion1_specs(rng) -> list[Environment]:
    envs = [build_hypergrid(HypergridConfig(H, D, 0.1)) for H in (2, 3, 4) for D in (1, 2)]
    for n in (2, 4):
        for k in (1, 2):
            envs.append(build_bitseq(BitSeqConfig(n=n, k=k, b=n), random_bits(rng, n, 2)))
    while len(envs) < 20:
        envs.append(random_environment(rng, int(rng.integers(5, 51))))
    return envs


def test_criterion_01_constructed_flow_is_consistent(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for env in criterion1_specs(rng):
        flow = flow_from_backward(env.spec, env.rewards, uniform_backward(env.spec))
        report = residual_report(env.spec, flow, policies_from_flow(env.spec, flow), env.rewards)
        worst = max(worst, max(report.values()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and elapsed < 10
    verdict(capsys, 1, "F(x)=R with uniform P_B zeroes FM/DB/TB/SubTB on 20 specs", ok, f"max residual {worst:.2e}, {elapsed:.1f}s")


def test_criterion_02_tabular_tb_converges_to_exact_sampler(capsys):
    start = time.perf_counter()
    cfg = load_config(CONFIGS / "grid4x4_tabular_tb.cfg")
    cfg.train.iterations = 200_000  # stop on convergence, not on a budget
    trainer = Trainer(cfg)
    state = trainer.run()
    last = state.records[-1]
    log_total = float(np.log(trainer.env.rewards.sum()))
    running = float(np.mean(state.losses))
    z_err = abs(trainer.state.model.log_z - log_total)
    elapsed = time.perf_counter() - start
    ok = running < 1e-6 and last.exact_l1 < 1e-3 and z_err < 1e-3 and elapsed < 120
    verdict(
        capsys,
        2,
        "tabular TB on 4x4 grid reaches the reward distribution",
        ok,
        f"{state.iteration} iterations, running loss {running:.2e}, exact_l1 {last.exact_l1:.2e}, "
        f"|logZ - log sum R| {z_err:.2e}, {elapsed:.1f}s",
    )


def iterations_to_l1(cfg_name: str, seed: int, threshold: float = 0.05) -> int | None:
    cfg = load_config(CONFIGS / cfg_name)
    cfg.train.seed = seed
    cfg.train.l1_window = 100_000
    trainer = Trainer(cfg)
    st = trainer.state
    budget = 200_000 // cfg.train.batch_size
    while st.iteration < budget:
        trainer.step()
        if st.iteration % 100 == 0 and empirical_l1(st.visits.values(), trainer.target_rewards) < threshold:
            return st.iteration
    return None


@pytest.mark.slow
def test_criterion_03_mlp_tb_reaches_low_l1_on_8x8_grid(capsys):
    start = time.perf_counter()
    tb = [iterations_to_l1("grid8x8_mlp_tb.cfg", s) for s in range(3)]
    fm = [iterations_to_l1("grid8x8_mlp_fm.cfg", s) for s in range(3)]
    elapsed = time.perf_counter() - start
    all_reach = all(t is not None for t in tb)
    no_later = sum(t is not None and (f is None or t <= f) for t, f in zip(tb, fm))
    ok = all_reach and no_later >= 2 and elapsed < 1800
    verdict(
        capsys,
        3,
        "MLP+TB empirical L1 < 0.05 within 2e5 trajectories, no later than FM",
        ok,
        f"iterations TB {tb}, FM {fm}, TB no later on {no_later}/3, {elapsed:.0f}s",
    )


def test_criterion_04_tree_reductions(capsys):
    env = build_bitseq(BitSeqConfig(n=4, k=1, b=4), ["0110", "1001"])
    trajs = enumerate_trajectories(env.spec)
    log_r = env.log_rewards(1.0)
    worst_fm = worst_tb = 0.0
    for seed in range(5):
        m = TabularModel(env.spec, np.random.default_rng(seed), tied_flow=True)
        m.params["pb_logits"][:] = 0.0
        m.params["log_z"] = np.array(float(np.logaddexp.reduce(m.params["pf_logits"][0, :2])))
        worst_fm = max(worst_fm, np.abs(loss_db(trajs, m, log_r).losses - loss_fm(trajs, m, log_r).losses).max())
        worst_tb = max(worst_tb, np.abs(loss_tb(trajs, m, log_r).losses - loss_tb_tree(trajs, m, log_r).losses).max())
    ok = worst_fm < 1e-12 and worst_tb < 1e-12
    verdict(capsys, 4, "on a tree DB = FM and TB = tree TB", ok, f"|DB-FM| {worst_fm:.1e}, |TB-treeTB| {worst_tb:.1e}")


def test_criterion_05_hub_collapse(capsys):
    rng = np.random.default_rng(505)
    worst_db = worst_tb = 0.0
    for _ in range(10):
        env = random_environment(rng, int(rng.integers(5, 40)))
        m = TabularModel(env.spec, rng)
        m.params["log_state_flow"][:] = rng.normal(size=env.spec.num_states)
        m.params["log_z"] = np.array(rng.normal())
        trajs = enumerate_trajectories(env.spec)
        lr = env.log_rewards(1.0)
        all_hubs = loss_subtb(trajs, m, lr, default_hubs(env.spec, "all")).losses
        ends = loss_subtb(trajs, m, lr, default_hubs(env.spec, "ends")).losses
        worst_db = max(worst_db, np.abs(all_hubs - loss_db(trajs, m, lr).losses).max())
        worst_tb = max(worst_tb, np.abs(ends - loss_tb(trajs, m, lr).losses).max())
    ok = worst_db < 1e-12 and worst_tb < 1e-12
    verdict(capsys, 5, "SubTB with all hubs = DB, with end hubs = TB", ok, f"{worst_db:.1e}, {worst_tb:.1e}")


def test_criterion_06_backward_probabilities_sum_to_one(capsys):
    rng = np.random.default_rng(606)
    worst = 0.0
    for _ in range(10):
        spec = random_environment(rng, int(rng.integers(5, 40))).spec
        trajs = enumerate_trajectories(spec)
        for _ in range(10):
            pb = random_backward(spec, rng)
            mass: dict[int, float] = defaultdict(float)
            for t in trajs:
                mass[t[-1]] += np.prod([pb[b][spec.parents[b].index(a)] for a, b in zip(t[:-1], t[1:])])
            assert set(mass) == set(spec.terminals)
            worst = max(worst, max(abs(v - 1.0) for v in mass.values()))
    verdict(capsys, 6, "sum over trajectories into x of prod P_B is 1", worst < 1e-10, f"max error {worst:.1e}")


def test_criterion_07_uniqueness_round_trip(capsys):
    rng = np.random.default_rng(707)
    worst = 0.0
    for _ in range(20):
        spec = random_environment(rng, int(rng.integers(5, 50))).spec
        flow = flow_from_forward(spec, float(rng.uniform(0.1, 10.0)), random_forward(spec, rng))
        back = flow_from_backward(spec, flow.state_flow * spec.terminal_mask, policies_from_flow(spec, flow).backward)
        worst = max(worst, max(np.abs(a - b).max(initial=0.0) for a, b in zip(flow.edge_flow, back.edge_flow)))
    verdict(capsys, 7, "(Z, P_F) -> flow -> (F(x), P_B) -> same flow", worst < 1e-10, f"max edge error {worst:.1e}")


def test_criterion_08_gradients_match_finite_differences(capsys):
    start = time.perf_counter()
    worst, failed, skipped, checked = 0.0, [], 0, 0
    for objective in ("tb", "db", "fm", "subtb"):
        for model in ("tabular", "mlp"):
            cfg = parse_config(f"[env]\ntype = random\n[objective]\ntype = {objective}\n[model]\ntype = {model}\n")
            reports = gradient_check(cfg, seeds=5, step=1e-4, tolerance=1e-4)
            worst = max(worst, max(r.worst() for r in reports))
            skipped += sum(r.skipped for r in reports)
            checked += sum(r.checked for r in reports)
            if not all(r.ok for r in reports):
                failed.append(f"{objective}/{model}")
    elapsed = time.perf_counter() - start
    ok = not failed and elapsed < 300
    verdict(
        capsys,
        8,
        "finite differences agree for every objective and parametrization",
        ok,
        f"worst rel {worst:.1e} over {checked} coords, {skipped} kink probes skipped, failed {failed}, {elapsed:.0f}s",
    )


def expected_gradients(env, model):
    trajs = enumerate_trajectories(env.spec)
    p = np.exp(trajectory_log_probs(model, env.spec, trajs))
    lr = env.log_rewards(1.0)
    return loss_tb(trajs, model, lr, weights=p).backward(), kl_reinforce_gradient(trajs, model, lr, weights=p)


def test_criterion_09_tb_gradient_is_twice_kl_gradient(capsys):
    rng = np.random.default_rng(909)
    gap = at_opt = 0.0
    for _ in range(10):
        env = random_environment(rng, int(rng.integers(5, 30)))
        env = Environment(env.spec, env.rewards / env.rewards.sum(), env.name)
        m = TabularModel(env.spec, rng, uniform_pb=True)
        m.params["log_z"] = np.array(rng.normal())
        tb, kl = expected_gradients(env, m)
        # log Z has no KL counterpart; every other coordinate is compared
        gap = max(gap, max(np.abs(tb[k] - 2 * kl[k]).max() for k in tb if k != "log_z"))
        tb, kl = expected_gradients(env, exact_model(env))
        at_opt = max(at_opt, max(max(np.abs(g).max() for g in d.values()) for d in (tb, kl)))
    ok = gap < 1e-9 and at_opt < 1e-9
    verdict(capsys, 9, "expected TB gradient = 2 x KL gradient, both 0 at optimum", ok, f"gap {gap:.1e}, optimum {at_opt:.1e}")


BITSEQ = """
[env]
type = bitseq
n = 16
k = {k}
b = 8
num_modes = 4
delta = 3
[objective]
type = {objective}
beta = 3
[model]
type = mlp
hidden = 128
dtype = float32
[train]
iterations = 30000
eval_interval = 30000
seed = {seed}
"""


@pytest.mark.slow
def test_criterion_10_bit_sequences_tb_vs_fm(capsys):
    start = time.perf_counter()
    spearman: dict[tuple, float] = {}
    modes_at: dict[tuple, int | None] = {}
    for k in (1, 2, 4):
        env = None
        for seed in range(3):
            for objective in ("tb", "fm"):
                trainer = Trainer(parse_config(BITSEQ.format(k=k, objective=objective, seed=seed)), env)
                env = trainer.env
                st = trainer.run()
                spearman[k, seed, objective] = st.records[-1].spearman
                modes_at[k, seed, objective] = st.modes_all_at
    elapsed = time.perf_counter() - start
    wins = {k: sum(spearman[k, s, "tb"] >= spearman[k, s, "fm"] for s in range(3)) for k in (1, 2, 4)}
    inf = float("inf")
    mode_wins = sum(
        (modes_at[1, s, "tb"] or inf) <= (modes_at[1, s, "fm"] or inf) and modes_at[1, s, "tb"] is not None for s in range(3)
    )
    ok = all(w >= 2 for w in wins.values()) and mode_wins >= 2 and elapsed < 3600
    table = "; ".join(
        f"k={k}: TB {[round(spearman[k, s, 'tb'], 3) for s in range(3)]} FM {[round(spearman[k, s, 'fm'], 3) for s in range(3)]}"
        for k in (1, 2, 4)
    )
    detail = (
        f"Spearman {table}; all modes at k=1 TB {[modes_at[1, s, 'tb'] for s in range(3)]} "
        f"FM {[modes_at[1, s, 'fm'] for s in range(3)]}; {elapsed:.0f}s"
    )
    verdict(capsys, 10, "bit sequences: TB correlation >= FM and modes no later", ok, detail)


@pytest.mark.parametrize("name", ["grid4x4_tabular_tb.cfg", "grid8x8_mlp_fm.cfg", "bitseq_k1_mlp_tb.cfg", "random_subtb"])
def test_criterion_11_same_seed_same_metrics(capsys, name):
    def run() -> str:
        if name == "random_subtb":
            cfg = parse_config("[env]\ntype = random\nnum_states = 30\n[objective]\ntype = subtb\n[model]\nhidden = 32\n")
        else:
            cfg = load_config(CONFIGS / name)
        cfg.train.iterations = 200
        cfg.train.eval_interval = 50
        cfg.train.seed = 11
        return emit_csv(Trainer(cfg).run().records)

    a, b = run(), run()
    verdict(capsys, 11, f"byte-identical metrics CSV for {name}", a.encode() == b.encode(), f"{len(a)} bytes")
