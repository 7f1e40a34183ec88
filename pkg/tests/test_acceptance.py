"""Acceptance criteria, each at its stated tolerance.

Every test records a PASS/FAIL line that is printed in the pytest terminal
summary (see conftest.py). The experiment runs use the desk-scale presets and
master seed 0.
"""

import csv
import time

import numpy as np
import pytest

from conftest import VERDICTS
from mlam import bench
from mlam.autodiff import OP_KINDS
from mlam.baselines import BaselineConfig, als_solve, em_fit
from mlam.engine import MLAMConfig, fresh_nets, initial_variables, solve_problem
from mlam.problems import generate_gmm, generate_problem
from oracles import gmm_gradient_error, mc_gradient_error, meta_gradient_error, op_case, op_gradient_error

SEED = 0


def verdict(key: str, ok: bool, detail: str):
    VERDICTS[key] = (bool(ok), detail)
    assert ok, detail


def run(kind: str, tmp_path_factory, **doc):
    out = tmp_path_factory.mktemp(kind)
    spec = bench.ExperimentSpec.from_dict({"kind": kind, **doc}, seed=SEED, out=out)
    start = time.perf_counter()
    table = bench.run_experiment(spec, threads=1)
    return table, out, time.perf_counter() - start


@pytest.fixture(scope="module")
def obsrate(tmp_path_factory):
    return run("mc-obsrate", tmp_path_factory)


@pytest.fixture(scope="module")
def blind(tmp_path_factory):
    return run("mc-blind-p", tmp_path_factory)


@pytest.fixture(scope="module")
def gmm_dim(tmp_path_factory):
    return run("gmm-dim", tmp_path_factory, problem={"dims": [2, 4], "K": 4, "G": 500}, n_test=20)


@pytest.fixture(scope="module")
def flower(tmp_path_factory):
    return run("gmm-flower", tmp_path_factory, problem={"petals": 8, "G": 2000})


def test_1_gradient_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(SEED)
    worst = {}
    for kind in OP_KINDS:
        worst[kind] = max(op_gradient_error(kind, *op_case(kind, rng), rng) for _ in range(100))
    cases = []
    for i in range(100):
        z, q = rng.integers(2, 6, size=2)
        cases.append(generate_problem(int(z), int(q), 1 + i % 2 if min(z, q) > 1 else 1, 0.6, seed=i))
    worst["matrix-completion loss"] = max(mc_gradient_error(p, rng) for p in cases)
    worst["mixture nll"] = max(
        gmm_gradient_error(generate_gmm(int(rng.integers(1, 4)), int(rng.integers(1, 4)), 5, seed=i), rng)
        for i in range(100)
    )
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if v > 1e-6}
    detail = f"worst rel err {max(worst.values()):.2e} over {len(worst)} targets x 100 cases, {elapsed:.1f}s"
    verdict("1 gradient oracle", not bad and elapsed < 60, detail + (f"; failing {bad}" if bad else ""))


def test_2_meta_gradient_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(SEED)
    p = generate_problem(4, 3, 2, 0.6, seed=1)
    values = {"U": rng.normal(size=(4, 2)), "V": rng.normal(size=(3, 2))}
    err_mc = meta_gradient_error(p, values, seed=0, hidden_size=3, t_in=2, t_out=2)
    g = generate_gmm(2, 2, 8, seed=2)
    err_gmm = meta_gradient_error(g, initial_variables(g, 0), seed=1, hidden_size=3, t_in=2, t_out=2)
    elapsed = time.perf_counter() - start
    err = max(err_mc, err_gmm)
    verdict("2 meta-gradient oracle", err <= 1e-5 and elapsed < 60, f"rel err {err:.2e} (mc {err_mc:.1e}, gmm {err_gmm:.1e}), {elapsed:.1f}s")


def test_3_engine_counting():
    p = generate_problem(10, 10, 2, 0.6, seed=3)
    cfg = MLAMConfig(T=100, t_in=10, t_out=10, hidden_size=20)
    traj, nets = solve_problem(p, cfg, fresh_nets(p, cfg), "train")
    counts = {k: n.adam.t for k, n in nets.items()}
    one = MLAMConfig(T=1, t_in=10, t_out=1, hidden_size=20)
    init = initial_variables(p, 0)
    t1, _ = solve_problem(p, one, fresh_nets(p, one), "eval", init=init)
    unchanged = all(np.array_equal(t1.final[k], init[k]) for k in init)
    ok = all(c == 10 for c in counts.values()) and unchanged
    verdict("3 engine counting", ok, f"Adam steps {counts}; zero-init outer step leaves variables unchanged: {unchanged}")


def test_4_baseline_correctness():
    full = generate_problem(10, 10, 2, 1.0, lam=1e-6, seed=SEED)
    r = als_solve(full, BaselineConfig(max_iters=100))
    err = full.metric({"U": r.U, "V": r.V})
    als_rise = max(
        float(np.max(np.diff(als_solve(generate_problem(10, 10, 2, 0.5, seed=s), BaselineConfig(max_iters=100)).history)))
        for s in range(50)
    )
    em_rise = -np.inf
    for s in range(50):
        g = generate_gmm(4, 2, 300, seed=s)
        h = em_fit(g, initial_variables(g, 0)).history
        em_rise = max(em_rise, float(np.max(np.diff(h))) if len(h) > 1 else -np.inf)
    ok = err <= 1e-3 and als_rise <= 1e-9 and em_rise <= 1e-9
    verdict("4 baseline correctness", ok, f"ALS full-obs RMSE {err:.1e}; largest ALS rise {als_rise:.1e}; largest EM rise {em_rise:.1e}")


def test_5_observation_rate_direction(obsrate):
    table, _, elapsed = obsrate
    rates = table.spec.problem["rates"]
    mlam = [table.mean("MLAM", f"rate={r}") for r in rates]
    sgd = [table.mean("SGD", f"rate={r}") for r in rates]
    beats = [m < s for m, s in zip(mlam, sgd)]
    mono = all(a > b for a, b in zip(mlam, mlam[1:]))
    cells = " ".join(f"{r}:{m:.3f}/{s:.3f}" for r, m, s in zip(rates, mlam, sgd))
    verdict("5 observation-rate direction", all(beats) and mono, f"MLAM/SGD mean RMSE {cells}; MLAM monotone {mono}; {elapsed / 60:.1f} min")


def test_6_blind_rank_direction(blind):
    table, _, elapsed = blind
    ps = table.spec.problem["ps"]
    lo, hi = f"p={ps[0]}", f"p={ps[-1]}"
    ratio = {m: table.mean(m, hi) / table.mean(m, lo) for m in ("MLAM", "SGD")}
    cells = " ".join(f"{m} " + "/".join(f"{table.mean(m, f'p={p}'):.3f}" for p in ps) for m in ("MLAM", "SGD"))
    verdict(
        "6 blind-rank direction",
        ratio["MLAM"] < ratio["SGD"],
        f"degradation p={ps[0]}->{ps[-1]}: MLAM x{ratio['MLAM']:.2f}, SGD x{ratio['SGD']:.2f} ({cells}); {elapsed / 60:.1f} min",
    )


def test_7_gmm_direction(gmm_dim):
    table, _, elapsed = gmm_dim
    res = {D: (table.mean("MLAM", f"D={D}"), table.mean("EM", f"D={D}")) for D in (2, 4)}
    ok = all(m <= e for m, e in res.values())
    cells = " ".join(f"D={D}: {m:.3f}/{e:.3f}" for D, (m, e) in res.items())
    verdict("7 GMM direction", ok, f"MLAM/EM mean per-sample NLL {cells}; {elapsed / 60:.1f} min")


def test_8_determinism(gmm_dim, tmp_path_factory):
    table, out, _ = gmm_dim
    _, out2, _ = run("gmm-dim", tmp_path_factory, problem={"dims": [2, 4], "K": 4, "G": 500}, n_test=20)
    files = ["table.csv", "results.csv"] + [f"trajectories/{p.name}" for p in (out / "trajectories").glob("*.csv")]
    same = [bench.strip_wall_clock(out / f) == bench.strip_wall_clock(out2 / f) for f in files]
    verdict("8 determinism", all(same), f"{sum(same)}/{len(files)} CSVs identical after rerun (wall_ms excluded)")


def test_9_non_monotone_tolerance(flower):
    table, out, elapsed = flower
    label = table.cells[0].condition
    with open(out / "trajectories" / f"MLAM__{bench._slug(label)}.csv", newline="") as fh:
        by_seed: dict = {}
        for row in csv.DictReader(fh):
            by_seed.setdefault(row["problem_seed"], []).append(float(row["global_loss"]))
    trajs = list(by_seed.values())
    improved = [t[-1] < t[0] for t in trajs]
    bumpy = [any(b > a for a, b in zip(t, t[1:])) and t[-1] < t[0] for t in trajs]
    frac = float(np.mean(improved))
    verdict(
        "9 non-monotone tolerance",
        frac >= 0.9,
        f"final < initial NLL on {frac:.0%} of {len(trajs)} trajectories; "
        f"{sum(bumpy)} improve despite an increasing step; {elapsed / 60:.1f} min",
    )
