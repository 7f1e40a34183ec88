"""Experiment harness: problem sets, meta-training, evaluation, baselines, result tables.

An experiment is a list of conditions (an observation rate, a rank, a factor
width, a data dimension, ...). Each condition gets its own train and test set
drawn from the master seed; MLAM is meta-trained on the train set and every
method is scored on the identical test set from the identical starting point.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import subprocess
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import numpy as np

from . import __version__
from .baselines import BaselineConfig, BaselineDiverged, als_solve, em_fit, sgd_solve
from .engine import MLAMConfig, Trajectory, evaluate, initial_variables, meta_train
from .metanet import load_checkpoint, save_checkpoint
from .problems import generate_flower, generate_gmm, generate_problem

log = logging.getLogger(__name__)

KINDS = ("mc-obsrate", "mc-rank", "mc-blind-p", "mc-mixed", "gmm-dim", "gmm-flower", "sweep-tin-tout")
SCALES = ("desk", "paper")
SEED_SPACE = 2**31 - 1

# Problem settings per kind. Keys not listed for a kind are ignored by it.
PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "desk": {
        "mc-obsrate": {"D": 10, "rank": 2, "rates": [0.2, 0.4, 0.6, 0.8]},
        "mc-rank": {"D": 10, "rate": 0.4, "ranks": [1, 2, 4, 8]},
        "mc-blind-p": {"D": 10, "rank": 2, "rate": 0.6, "ps": [2, 4, 8]},
        "mc-mixed": {"D": 10, "rate": 0.6, "ranks": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10], "ps": [1, 5, 10]},
        "gmm-dim": {"K": 4, "G": 500, "dims": [2, 4], "separation": 3.0},
        "gmm-flower": {"petals": 8, "G": 2000},
        "sweep-tin-tout": {"D": 10, "rank": 2, "rate": 0.6, "t_in": [1, 2, 5, 10, 20], "t_out": [1, 2, 5, 10, 20]},
    },
    "paper": {
        "mc-obsrate": {"D": 100, "rank": 5, "rates": [0.2, 0.4, 0.6, 0.8]},
        "mc-rank": {"D": 100, "rate": 0.2, "ranks": [5, 10, 20, 40, 80, 100]},
        "mc-blind-p": {"D": 100, "rank": 10, "rate": 0.2, "ps": [10, 20, 40, 80, 100]},
        "mc-mixed": {"D": 100, "rate": 0.2, "ranks": list(range(10, 101, 10)), "ps": [10, 50, 100]},
        "gmm-dim": {"K": 4, "G": 500, "dims": [4, 8, 16, 32, 64], "separation": 3.0},
        "gmm-flower": {"petals": 8, "G": 10000},
        "sweep-tin-tout": {"D": 100, "rank": 5, "rate": 0.2, "t_in": list(range(1, 21)), "t_out": list(range(1, 21))},
    },
}
COUNTS = {
    "desk": {"n_train": 50, "n_test": 50, "sweep": 5},
    "paper": {"n_train": 100, "n_test": 100, "sweep": 100},
}
HIDDEN = {"desk": 20, "paper": 500}
SGD_GRID = {"lr": [0.003, 0.01, 0.03, 0.1], "max_iters": [100, 1000]}

SCHEMA: dict = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "experiment",
    "type": "object",
    "required": ["kind"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": list(KINDS)},
        "scale": {"enum": list(SCALES)},
        "seed": {"type": "integer", "minimum": 0},
        "n_train": {"type": "integer", "minimum": 1},
        "n_test": {"type": "integer", "minimum": 1},
        "max_abort_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "D": {"type": "integer", "minimum": 1},
                "rank": {"type": "integer", "minimum": 1},
                "rate": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "rates": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
                "ranks": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
                "ps": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
                "lam": {"type": "number", "minimum": 0},
                "K": {"type": "integer", "minimum": 1},
                "G": {"type": "integer", "minimum": 1},
                "dims": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
                "separation": {"type": "number", "exclusiveMinimum": 0},
                "petals": {"type": "integer", "minimum": 2},
                "t_in": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
                "t_out": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
            },
        },
        "mlam": {"type": "object"},
        "baselines": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sgd": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "lr": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
                        "max_iters": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
                    },
                },
                "als": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"max_iters": {"type": "integer", "minimum": 1}},
                },
                "em": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"max_iters": {"type": "integer", "minimum": 1}},
                },
            },
        },
    },
}

TABLE_COLUMNS = ["method", "condition", "n_ok", "n_aborted", "mean", "variance", "wall_ms"]
RESULT_COLUMNS = ["method", "condition", "problem_seed", "status", "metric"]
TRAJ_COLUMNS = ["problem_seed", "outer_t", "global_loss", "metric"]


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    kind: str
    problem: dict
    n_train: int
    n_test: int
    mlam: MLAMConfig
    baselines: dict = field(default_factory=dict)
    out: str = "results"
    seed: int = 0
    scale: str = "desk"
    max_abort_fraction: float = 0.5

    @classmethod
    def from_dict(cls, d: Mapping, scale: str | None = None, seed: int | None = None, out=None) -> "ExperimentSpec":
        """Fill a config document from the scale preset; CLI values win over the document."""
        try:
            jsonschema.validate(dict(d), SCHEMA)
        except jsonschema.ValidationError as exc:
            raise SpecError(f"invalid experiment config: {exc.message}") from None
        kind = d["kind"]
        scale = scale or d.get("scale", "desk")
        counts = COUNTS[scale]
        if kind == "sweep-tin-tout":
            n_default = (counts["sweep"], counts["sweep"])
        else:
            n_default = (counts["n_train"], counts["n_test"])
        problem = {**PRESETS[scale][kind], **d.get("problem", {})}
        mlam_doc = {"hidden_size": HIDDEN[scale], **d.get("mlam", {})}
        try:
            if kind == "sweep-tin-tout":
                # T is rounded per cell, so divisibility is checked there
                mlam = replace(MLAMConfig.from_dict({**mlam_doc, "t_out": 1}), t_out=mlam_doc.get("t_out", 10))
            else:
                mlam = MLAMConfig.from_dict(mlam_doc)
        except (TypeError, ValueError) as exc:
            raise SpecError(str(exc)) from None
        baselines = {"sgd": dict(SGD_GRID), "als": {"max_iters": mlam.T}, "em": {"max_iters": 1000}}
        for k, v in d.get("baselines", {}).items():
            baselines[k] = {**baselines[k], **v}
        spec = cls(
            kind=kind,
            problem=problem,
            n_train=d.get("n_train", n_default[0]),
            n_test=d.get("n_test", n_default[1]),
            mlam=mlam,
            baselines=baselines,
            out=str(out) if out is not None else "results",
            seed=d.get("seed", 0) if seed is None else seed,
            scale=scale,
            max_abort_fraction=d.get("max_abort_fraction", 0.5),
        )
        return spec.validate()

    def validate(self) -> "ExperimentSpec":
        if self.kind not in KINDS:
            raise SpecError(f"unknown experiment kind {self.kind!r}")
        if self.scale not in SCALES:
            raise SpecError(f"unknown scale {self.scale!r}")
        if self.n_train < 1 or self.n_test < 1:
            raise SpecError("n_train and n_test must be >= 1")
        if self.seed < 0:
            raise SpecError("seed must be non-negative")
        if self.kind != "sweep-tin-tout":
            self.mlam.validate()
        pr = self.problem
        if self.kind.startswith("mc") or self.kind == "sweep-tin-tout":
            D = pr["D"]
            ranks = pr.get("ranks", [pr.get("rank", 1)])
            if max(ranks) > D:
                raise SpecError(f"rank {max(ranks)} exceeds matrix size {D}")
            if any(p > D for p in pr.get("ps", [])):
                raise SpecError(f"factor width exceeds matrix size {D}")
            for rate in pr.get("rates", [pr.get("rate", 1.0)]):
                if round(rate * D * D) == 0:
                    raise SpecError(f"observation rate {rate} leaves no entries in a {D}x{D} matrix")
        if self.kind == "gmm-dim" and pr["G"] < pr["K"]:
            raise SpecError("need G >= K")
        return self

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "scale": self.scale,
            "seed": self.seed,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "max_abort_fraction": self.max_abort_fraction,
            "problem": self.problem,
            "mlam": self.mlam.to_dict(),
            "baselines": self.baselines,
        }


def load_spec(path, **overrides) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: not valid JSON ({exc})") from None
    return ExperimentSpec.from_dict(doc, **overrides)


# ---------------------------------------------------------------- conditions


@dataclass
class Condition:
    label: str
    params: dict  # everything make_problem needs besides the seed
    mlam: MLAMConfig
    train_seeds: list[int]
    test_seeds: list[int]


def draw_seeds(master: int, index: int, n_train: int, n_test: int) -> tuple[list[int], list[int]]:
    """Distinct problem seeds for one condition; the train and test lists never overlap."""
    rng = np.random.default_rng([master, index])
    seeds = rng.choice(SEED_SPACE, size=n_train + n_test, replace=False)
    return [int(s) for s in seeds[:n_train]], [int(s) for s in seeds[n_train:]]


def mixed_rank(seed: int, ranks) -> int:
    return int(ranks[np.random.default_rng([seed, 11]).integers(len(ranks))])


def make_problem(params: Mapping, seed: int):
    family = params["family"]
    if family == "mc":
        rank = params["rank"] if "rank" in params else mixed_rank(seed, params["ranks"])
        return generate_problem(params["D"], params["D"], rank, params["rate"], params.get("p", rank), params["lam"], seed)
    if family == "gmm":
        return generate_gmm(params["K"], params["D"], params["G"], params["separation"], seed)
    if family == "flower":
        return generate_flower(params["petals"], params["G"], seed)
    raise SpecError(f"unknown problem family {family!r}")


def sweep_T(T: int, t_out: int) -> int:
    """Smallest multiple of t_out that is at least T."""
    return t_out * math.ceil(T / t_out)


def conditions(spec: ExperimentSpec) -> list[Condition]:
    pr = spec.problem
    lam = pr.get("lam", 0.1)
    mc = {"family": "mc", "D": pr.get("D"), "lam": lam}
    if spec.kind == "mc-obsrate":
        cells = [(f"rate={r}", {**mc, "rank": pr["rank"], "rate": r}) for r in pr["rates"]]
    elif spec.kind == "mc-rank":
        cells = [(f"rank={k}", {**mc, "rank": k, "rate": pr["rate"]}) for k in pr["ranks"]]
    elif spec.kind == "mc-blind-p":
        cells = [(f"p={p}", {**mc, "rank": pr["rank"], "p": p, "rate": pr["rate"]}) for p in pr["ps"]]
    elif spec.kind == "mc-mixed":
        cells = [(f"p={p}", {**mc, "ranks": list(pr["ranks"]), "p": p, "rate": pr["rate"]}) for p in pr["ps"]]
    elif spec.kind == "gmm-dim":
        gm = {"family": "gmm", "K": pr["K"], "G": pr["G"], "separation": pr["separation"]}
        cells = [(f"D={D}", {**gm, "D": D}) for D in pr["dims"]]
    elif spec.kind == "gmm-flower":
        cells = [(f"petals={pr['petals']}", {"family": "flower", "petals": pr["petals"], "G": pr["G"]})]
    else:
        base = {**mc, "rank": pr["rank"], "rate": pr["rate"]}
        train, test = draw_seeds(spec.seed, 0, spec.n_train, spec.n_test)
        out = []
        for a in pr["t_in"]:
            for b in pr["t_out"]:
                cfg = replace(spec.mlam, t_in=a, t_out=b, T=sweep_T(spec.mlam.T, b), weights=None)
                out.append(Condition(f"t_in={a}/t_out={b}", base, cfg.validate(), train, test))
        return out
    out = []
    for i, (label, params) in enumerate(cells):
        train, test = draw_seeds(spec.seed, i, spec.n_train, spec.n_test)
        out.append(Condition(label, params, spec.mlam, train, test))
    return out


def methods_for(kind: str) -> list[str]:
    if kind in ("mc-obsrate", "mc-rank", "mc-blind-p"):
        return ["MLAM", "SGD", "ALS"]
    if kind.startswith("gmm"):
        return ["MLAM", "EM"]
    return ["MLAM"]


# ------------------------------------------------------------------ results


@dataclass
class Cell:
    method: str
    condition: str
    metrics: list[float | None]  # one per test problem, None when aborted
    seeds: list[int]
    wall_ms: float
    trajectories: list[list[tuple]] = field(default_factory=list)  # rows of TRAJ_COLUMNS per problem

    @property
    def ok(self) -> list[float]:
        return [m for m in self.metrics if m is not None]

    @property
    def n_aborted(self) -> int:
        return len(self.metrics) - len(self.ok)

    def row(self) -> list:
        ok = self.ok
        mean = repr(float(np.mean(ok))) if ok else "nan"
        var = repr(float(np.var(ok))) if ok else "nan"
        return [self.method, self.condition, len(ok), self.n_aborted, mean, var, f"{self.wall_ms:.1f}"]


@dataclass
class ResultTable:
    spec: ExperimentSpec
    cells: list[Cell]
    extra: dict = field(default_factory=dict)

    def cell(self, method: str, condition: str) -> Cell:
        for c in self.cells:
            if c.method == method and c.condition == condition:
                return c
        raise KeyError((method, condition))

    def mean(self, method: str, condition: str) -> float:
        ok = self.cell(method, condition).ok
        return float(np.mean(ok)) if ok else float("nan")

    def worst_abort_fraction(self) -> float:
        return max((c.n_aborted / max(1, len(c.metrics)) for c in self.cells), default=0.0)


def _traj_rows(seed: int, traj: Trajectory) -> list[tuple]:
    rows = [(seed, 0, repr(traj.initial_loss), repr(traj.initial_metric))]
    rows += [(seed, t, repr(F), repr(m)) for t, (F, m) in enumerate(zip(traj.losses, traj.metrics), start=1)]
    return rows


def _history_rows(seed: int, history, final_metric) -> list[tuple]:
    rows = [(seed, t, repr(float(F)), "") for t, F in enumerate(history)]
    if rows:
        rows[-1] = rows[-1][:3] + (repr(final_metric),)
    return rows


def run_mlam(cond: Condition, threads: int = 1):
    """Meta-train on the condition's train set, then evaluate with frozen nets."""
    start = time.perf_counter()
    train = [make_problem(cond.params, s) for s in cond.train_seeds]
    test = [make_problem(cond.params, s) for s in cond.test_seeds]
    try:
        result = meta_train(train, cond.mlam)
    except RuntimeError as exc:
        log.error("%s: meta-training failed: %s", cond.label, exc)
        return Cell("MLAM", cond.label, [None] * len(test), cond.test_seeds, 0.0), None
    report_trajs = _evaluate_all(test, result.nets, cond.mlam, threads)
    metrics = [t.final_metric if t is not None else None for t in report_trajs]
    trajs = [_traj_rows(s, t) for s, t in zip(cond.test_seeds, report_trajs) if t is not None]
    cell = Cell("MLAM", cond.label, metrics, cond.test_seeds, (time.perf_counter() - start) * 1e3, trajs)
    return cell, result


def _evaluate_all(test, nets, config, threads):
    try:
        return evaluate(test, nets, config, threads=threads).trajectories
    except ValueError:  # every problem aborted
        return [None] * len(test)


def tune_sgd(problems, grid: Mapping, init_seed: int) -> tuple[BaselineConfig, float]:
    """Grid search over (lr, epochs) by mean RMSE on the training problems. Divergence scores inf."""
    best, best_score = None, math.inf
    for lr in grid["lr"]:
        for iters in grid["max_iters"]:
            cfg = BaselineConfig(max_iters=iters, lr=lr, seed=init_seed)
            scores = []
            for p in problems:
                try:
                    r = sgd_solve(p, cfg, init=initial_variables(p, init_seed))
                except BaselineDiverged:
                    scores.append(math.inf)
                    continue
                scores.append(p.metric({"U": r.U, "V": r.V}))
            score = float(np.mean(scores))
            log.info("SGD lr=%g epochs=%d: train RMSE %.4g", lr, iters, score)
            if score < best_score:
                best, best_score = cfg, score
    if best is None:
        raise RuntimeError("every SGD grid point diverged")
    return best, best_score


def run_baseline(method: str, cond: Condition, spec: ExperimentSpec, tuned: dict) -> Cell:
    start = time.perf_counter()
    test = [make_problem(cond.params, s) for s in cond.test_seeds]
    init_seed = cond.mlam.seed
    if method == "SGD":
        train = [make_problem(cond.params, s) for s in cond.train_seeds]
        cfg, score = tune_sgd(train, spec.baselines["sgd"], init_seed)
        tuned[cond.label] = {"lr": cfg.lr, "max_iters": cfg.max_iters, "train_rmse": score}
    elif method == "ALS":
        cfg = BaselineConfig(max_iters=spec.baselines["als"]["max_iters"], seed=init_seed)
    else:
        cfg = BaselineConfig(max_iters=spec.baselines["em"]["max_iters"], seed=init_seed)
    metrics, trajs = [], []
    for seed, p in zip(cond.test_seeds, test):
        init = initial_variables(p, init_seed)
        try:
            if method == "SGD":
                r = sgd_solve(p, cfg, init=init)
                m, hist = p.metric({"U": r.U, "V": r.V}), r.history
            elif method == "ALS":
                r = als_solve(p, cfg, init=init)
                m, hist = p.metric({"U": r.U, "V": r.V}), r.history
            else:
                r = em_fit(p, init, cfg)
                m, hist = p.metric(r.params.as_dict()), [F / p.G for F in r.history]
        except (BaselineDiverged, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("%s on problem %d aborted: %s", method, seed, exc)
            metrics.append(None)
            continue
        metrics.append(m)
        trajs.append(_history_rows(seed, hist, m))
    return Cell(method, cond.label, metrics, cond.test_seeds, (time.perf_counter() - start) * 1e3, trajs)


def _slug(label: str) -> str:
    return label.replace("=", "").replace("/", "_")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def _git_revision() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, cwd=Path(__file__).parent, timeout=5
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def run_experiment(spec: ExperimentSpec, threads: int = 1) -> ResultTable:
    """Run every (method, condition) cell and write the table, per-problem results, trajectories and manifest."""
    spec.validate()
    conds = conditions(spec)
    out = Path(spec.out)
    (out / "trajectories").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    methods = methods_for(spec.kind)
    cells: list[Cell] = []
    tuned: dict = {}
    cond_docs = []
    for cond in conds:
        log.info("condition %s", cond.label)
        ckpt = None
        for method in methods:
            if method == "MLAM":
                cell, result = run_mlam(cond, threads)
                if result is not None:
                    ckpt = f"checkpoints/{_slug(cond.label)}.json"
                    save_checkpoint(out / ckpt, result.nets, condition=cond.label, seed=spec.seed)
            else:
                cell = run_baseline(method, cond, spec, tuned)
            cells.append(cell)
            if cell.trajectories:
                rows = [r for traj in cell.trajectories for r in traj]
                write_csv(out / "trajectories" / f"{method}__{_slug(cond.label)}.csv", TRAJ_COLUMNS, rows)
        cond_docs.append(
            {
                "label": cond.label,
                "params": cond.params,
                "mlam": cond.mlam.to_dict(),
                "train_seeds": cond.train_seeds,
                "test_seeds": cond.test_seeds,
                "checkpoint": ckpt,
            }
        )
    table = ResultTable(spec, cells, {"sgd_tuned": tuned})
    if spec.kind == "mc-mixed":
        table.extra["by_rank"] = _split_by_rank(table, conds)
    write_table(table, out)
    files = ["table.csv", "results.csv"] + sorted(
        str(p.relative_to(out)) for p in (out / "trajectories").glob("*.csv")
    )
    files += [d["checkpoint"] for d in cond_docs if d["checkpoint"]]
    if "by_rank" in table.extra:
        files.append("by_rank.csv")
    manifest = {
        "spec": spec.to_dict(),
        "version": __version__,
        "git": _git_revision(),
        "methods": methods,
        "conditions": cond_docs,
        "sgd_tuned": tuned,
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return table


def _split_by_rank(table: ResultTable, conds: list[Condition]) -> list[list]:
    rows = []
    for cond in conds:
        cell = table.cell("MLAM", cond.label)
        groups: dict[int, list[float]] = {}
        for seed, m in zip(cell.seeds, cell.metrics):
            if m is not None:
                groups.setdefault(mixed_rank(seed, cond.params["ranks"]), []).append(m)
        for rank in sorted(groups):
            rows.append([cond.label, rank, len(groups[rank]), repr(float(np.mean(groups[rank])))])
    return rows


def write_table(table: ResultTable, out) -> None:
    out = Path(out)
    write_csv(out / "table.csv", TABLE_COLUMNS, [c.row() for c in table.cells])
    results = []
    for c in table.cells:
        for seed, m in zip(c.seeds, c.metrics):
            results.append([c.method, c.condition, seed, "ok" if m is not None else "aborted", "" if m is None else repr(m)])
    write_csv(out / "results.csv", RESULT_COLUMNS, results)
    if "by_rank" in table.extra:
        write_csv(out / "by_rank.csv", ["condition", "rank", "n", "mean"], table.extra["by_rank"])
    if table.spec.kind == "sweep-tin-tout":
        grid = []
        for c in table.cells:
            a, b = (int(x.split("=")[1]) for x in c.condition.split("/"))
            grid.append([a, b, sweep_T(table.spec.mlam.T, b), *c.row()[2:6]])
        write_csv(out / "grid.csv", ["t_in", "t_out", "T", "n_ok", "n_aborted", "mean", "variance"], grid)


def eval_from_manifest(manifest_path, out=None, threads: int = 1) -> list[Cell]:
    """Re-evaluate every stored MLAM checkpoint on its recorded test seeds."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    doc = json.loads(manifest_path.read_text())
    cells = []
    for cd in doc["conditions"]:
        if not cd["checkpoint"]:
            continue
        nets = load_checkpoint(root / cd["checkpoint"])
        cfg = MLAMConfig.from_dict(cd["mlam"])
        test = [make_problem(cd["params"], s) for s in cd["test_seeds"]]
        start = time.perf_counter()
        trajs = _evaluate_all(test, nets, cfg, threads)
        metrics = [t.final_metric if t is not None else None for t in trajs]
        cells.append(Cell("MLAM", cd["label"], metrics, cd["test_seeds"], (time.perf_counter() - start) * 1e3))
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "table.csv", TABLE_COLUMNS, [c.row() for c in cells])
        rows = [
            [c.method, c.condition, s, "ok" if m is not None else "aborted", "" if m is None else repr(m)]
            for c in cells
            for s, m in zip(c.seeds, c.metrics)
        ]
        write_csv(out / "results.csv", RESULT_COLUMNS, rows)
    return cells


def strip_wall_clock(path) -> list[list[str]]:
    """CSV rows without the wall_ms column, for determinism comparisons."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and "wall_ms" in rows[0]:
        k = rows[0].index("wall_ms")
        rows = [r[:k] + r[k + 1 :] for r in rows]
    return rows

