import json
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from mlam import bench
from mlam.cli import main

ROOT = Path(__file__).resolve().parents[1]

TINY = {
    "kind": "mc-obsrate",
    "n_train": 2,
    "n_test": 3,
    "problem": {"rates": [0.5, 0.8]},
    "mlam": {"T": 10, "t_in": 2, "t_out": 5, "hidden_size": 4},
    "baselines": {"sgd": {"lr": [0.01, 0.05], "max_iters": [20]}, "als": {"max_iters": 20}},
}


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def test_schema_file_in_docs_matches_code():
    assert json.loads((ROOT / "docs" / "experiment.schema.json").read_text()) == bench.SCHEMA


def test_desk_defaults():
    spec = bench.ExperimentSpec.from_dict({"kind": "mc-obsrate"})
    assert spec.problem["D"] == 10 and spec.problem["rank"] == 2
    assert spec.problem["rates"] == [0.2, 0.4, 0.6, 0.8]
    assert (spec.n_train, spec.n_test) == (50, 50)
    assert spec.mlam.hidden_size == 20 and spec.mlam.T == 100 and spec.mlam.t_in == spec.mlam.t_out == 10


def test_paper_scale_gmm_dims():
    spec = bench.ExperimentSpec.from_dict({"kind": "gmm-dim"}, scale="paper")
    assert spec.problem["dims"] == [4, 8, 16, 32, 64]
    assert (spec.problem["K"], spec.problem["G"]) == (4, 500)
    assert spec.mlam.hidden_size == 500 and spec.n_test == 100
    assert [c.label for c in bench.conditions(spec)] == ["D=4", "D=8", "D=16", "D=32", "D=64"]


@pytest.mark.parametrize(
    "doc",
    [
        {"kind": "nope"},
        {"kind": "mc-obsrate", "n_train": 0},
        {"kind": "mc-obsrate", "extra": 1},
        {"kind": "mc-rank", "problem": {"ranks": [20]}},
        {"kind": "mc-obsrate", "mlam": {"T": 15}},
        {"kind": "mc-obsrate", "mlam": {"bogus": 1}},
        {"kind": "mc-obsrate", "problem": {"rates": [0.001]}},
    ],
)
def test_invalid_specs_rejected(doc):
    with pytest.raises(bench.SpecError):
        bench.ExperimentSpec.from_dict(doc)


@given(st.integers(0, 2**31), st.integers(0, 20), st.integers(1, 60), st.integers(1, 60))
def test_train_and_test_seeds_disjoint(master, index, n_train, n_test):
    train, test = bench.draw_seeds(master, index, n_train, n_test)
    assert len(train) == n_train and len(test) == n_test
    assert not set(train) & set(test)
    assert len(set(train)) == n_train


def test_condition_layouts():
    kinds = {
        "mc-obsrate": ["rate=0.2", "rate=0.4", "rate=0.6", "rate=0.8"],
        "mc-blind-p": ["p=2", "p=4", "p=8"],
        "gmm-dim": ["D=2", "D=4"],
        "gmm-flower": ["petals=8"],
    }
    for kind, labels in kinds.items():
        spec = bench.ExperimentSpec.from_dict({"kind": kind})
        assert [c.label for c in bench.conditions(spec)] == labels


def test_sweep_grid_rounds_horizon_to_update_interval():
    spec = bench.ExperimentSpec.from_dict({"kind": "sweep-tin-tout", "problem": {"t_in": [1, 3], "t_out": [3, 7, 10]}})
    conds = bench.conditions(spec)
    assert len(conds) == 6
    for c in conds:
        assert c.mlam.T % c.mlam.t_out == 0 and 100 <= c.mlam.T < 100 + c.mlam.t_out
    assert {tuple(c.train_seeds) for c in conds} == {tuple(conds[0].train_seeds)}


def test_full_paper_sweep_has_400_cells():
    spec = bench.ExperimentSpec.from_dict({"kind": "sweep-tin-tout"}, scale="paper")
    assert len(bench.conditions(spec)) == 400


def test_mixed_ranks_deterministic_and_in_range():
    ranks = list(range(1, 11))
    got = [bench.mixed_rank(s, ranks) for s in range(200)]
    assert set(got) <= set(ranks) and len(set(got)) > 5
    assert got == [bench.mixed_rank(s, ranks) for s in range(200)]


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    spec = bench.ExperimentSpec.from_dict(TINY, seed=3, out=out / "a")
    table = bench.run_experiment(spec)
    return spec, table, out / "a"


def test_run_writes_complete_manifest(tiny_run):
    spec, table, out = tiny_run
    manifest = json.loads((out / "manifest.json").read_text())
    for f in manifest["files"]:
        assert (out / f).is_file(), f
    header, *rows = (out / "table.csv").read_text().splitlines()
    assert header == ",".join(bench.TABLE_COLUMNS)
    assert {tuple(r.split(",")[:2]) for r in rows} == {
        (m, c) for m in ("MLAM", "SGD", "ALS") for c in ("rate=0.5", "rate=0.8")
    }
    for cd in manifest["conditions"]:
        assert not set(cd["train_seeds"]) & set(cd["test_seeds"])
    assert set(manifest["sgd_tuned"]) == {"rate=0.5", "rate=0.8"}


def test_eval_from_manifest_reproduces_metrics(tiny_run, tmp_path):
    _, table, out = tiny_run
    cells = bench.eval_from_manifest(out / "manifest.json", out=tmp_path)
    for c in cells:
        assert c.metrics == table.cell("MLAM", c.condition).metrics


def test_rerun_is_byte_identical(tiny_run, tmp_path):
    spec, _, out = tiny_run
    bench.run_experiment(bench.ExperimentSpec.from_dict(TINY, seed=3, out=tmp_path))
    for name in ("table.csv", "results.csv"):
        assert bench.strip_wall_clock(out / name) == bench.strip_wall_clock(tmp_path / name)
    for f in (out / "trajectories").glob("*.csv"):
        assert f.read_bytes() == (tmp_path / "trajectories" / f.name).read_bytes()


def test_baselines_start_where_mlam_starts(tiny_run):
    spec, table, out = tiny_run
    rows = {}
    for method in ("MLAM", "ALS"):
        lines = (out / "trajectories" / f"{method}__rate0.5.csv").read_text().splitlines()[1:]
        rows[method] = [l.split(",") for l in lines if l.split(",")[1] == "0"]
    for a, b in zip(rows["MLAM"], rows["ALS"]):
        assert a[0] == b[0] and float(a[2]) == pytest.approx(float(b[2]), rel=1e-12)


def test_abort_threshold():
    from mlam.cli import _check_aborts

    ok = bench.Cell("MLAM", "x", [0.1, 0.2, None], [1, 2, 3], 0.0)
    assert _check_aborts([ok], 0.5) == 0
    assert _check_aborts([ok], 0.2) == 2


# ------------------------------------------------------------------- CLI


def test_cli_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["bench", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_cli_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as info:
        main(["bench", "--frobnicate"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_cli_bad_config_exit_1(tmp_path):
    assert main(["bench", "--config", str(write(tmp_path, {"kind": "mc-obsrate", "n_test": -1}))]) == 1
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 1


def test_cli_bench_writes_table_and_manifest(tmp_path):
    cfg = write(tmp_path, TINY)
    out = tmp_path / "r"
    assert main(["bench", "--config", str(cfg), "--seed", "7", "--out", str(out)]) == 0
    assert (out / "table.csv").is_file() and (out / "manifest.json").is_file()
    assert json.loads((out / "manifest.json").read_text())["spec"]["seed"] == 7


def test_cli_gen_train_eval(tmp_path):
    cfg = write(tmp_path, {**TINY, "problem": {"rates": [0.6]}})
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
    assert (tmp_path / "g" / "rate0.6" / "test.json").is_file()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    ck = tmp_path / "t" / "checkpoints" / "rate0.6.json"
    assert ck.is_file()
    assert main(["eval", "--manifest", str(tmp_path / "t" / "manifest.json"), "--out", str(tmp_path / "e1")]) == 0
    assert main(["eval", "--checkpoint", str(ck), "--config", str(cfg), "--out", str(tmp_path / "e2")]) == 0
    a = bench.strip_wall_clock(tmp_path / "e1" / "table.csv")
    b = bench.strip_wall_clock(tmp_path / "e2" / "table.csv")
    assert a == b


def test_cli_baseline_only(tmp_path):
    cfg = write(tmp_path, TINY)
    assert main(["baseline", "--config", str(cfg), "--method", "als", "--out", str(tmp_path / "b")]) == 0
    rows = (tmp_path / "b" / "table.csv").read_text().splitlines()[1:]
    assert [r.split(",")[0] for r in rows] == ["ALS", "ALS"]
    assert main(["baseline", "--config", str(cfg), "--method", "em"]) == 1


def test_cli_gmm_gen_writes_samples(tmp_path):
    cfg = write(tmp_path, {"kind": "gmm-dim", "n_train": 1, "n_test": 1, "problem": {"dims": [2], "G": 20}})
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
    assert list((tmp_path / "g" / "D2" / "test").glob("*.csv"))


def test_cli_sweep(tmp_path):
    doc = {
        "kind": "sweep-tin-tout",
        "n_train": 1,
        "n_test": 2,
        "problem": {"t_in": [1, 2], "t_out": [5]},
        "mlam": {"T": 5, "hidden_size": 3},
    }
    cfg = write(tmp_path, doc)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    grid = (tmp_path / "s" / "grid.csv").read_text().splitlines()
    assert grid[0].startswith("t_in,t_out,T") and len(grid) == 3
    assert main(["sweep", "--config", str(write(tmp_path, TINY, "other.json"))]) == 1
