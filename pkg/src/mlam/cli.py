"""Command line entry point: ``mlam {gen,train,eval,baseline,bench,sweep}``.

Exit codes: 0 success, 1 usage or configuration error, 2 too many aborted trajectories.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench
from .engine import meta_train
from .metanet import load_checkpoint, save_checkpoint
from .problems.matrix_completion import save_problems

EXIT_OK, EXIT_USAGE, EXIT_ABORTS = 0, 1, 2

log = logging.getLogger("mlam")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment JSON (see docs/experiment.schema.json)")
    common.add_argument("--seed", type=int, default=None, help="master seed, overrides the config")
    common.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker processes for evaluation")
    common.add_argument("--scale", choices=bench.SCALES, default=None, help="problem-size preset")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mlam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="write the train/test problem sets")
    sub.add_parser("train", parents=[common], help="meta-train and write checkpoints")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or a finished run")
    src = ev.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path, help="checkpoint to score on every condition's test set")
    src.add_argument("--manifest", type=Path, help="manifest.json of a train or bench run")
    bl = sub.add_parser("baseline", parents=[common], help="run the classical solvers only")
    bl.add_argument("--method", choices=["sgd", "als", "em", "all"], default="all")
    sub.add_parser("bench", parents=[common], help="full experiment: MLAM and baselines")
    sub.add_parser("sweep", parents=[common], help="t_in x t_out grid")
    return parser


def _spec(args, kind: str | None = None) -> bench.ExperimentSpec:
    if args.config is None:
        if kind is None:
            raise UsageError("--config is required")
        doc = {"kind": kind}
    else:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        try:
            doc = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: not valid JSON ({exc})") from None
    if kind is not None and doc.get("kind", kind) != kind:
        raise UsageError(f"{args.command} needs kind={kind}, config has {doc.get('kind')}")
    try:
        return bench.ExperimentSpec.from_dict(doc, scale=args.scale, seed=args.seed, out=args.out)
    except (bench.SpecError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _check_aborts(cells, limit: float) -> int:
    worst = max((c.n_aborted / max(1, len(c.metrics)) for c in cells), default=0.0)
    if worst > limit:
        log.error("aborted fraction %.2f exceeds max_abort_fraction %.2f", worst, limit)
        return EXIT_ABORTS
    return EXIT_OK


def cmd_gen(args) -> int:
    spec = _spec(args)
    out = Path(spec.out)
    index = {}
    for cond in bench.conditions(spec):
        d = out / bench._slug(cond.label)
        d.mkdir(parents=True, exist_ok=True)
        for split, seeds in (("train", cond.train_seeds), ("test", cond.test_seeds)):
            problems = [bench.make_problem(cond.params, s) for s in seeds]
            if cond.params["family"] == "mc":
                save_problems(d / f"{split}.json", problems)
            else:
                (d / split).mkdir(exist_ok=True)
                for s, p in zip(seeds, problems):
                    p.save(d / split / str(s))
        index[cond.label] = {"params": cond.params, "train_seeds": cond.train_seeds, "test_seeds": cond.test_seeds}
    (out / "problems.json").write_text(json.dumps(index, indent=2))
    print(f"wrote {len(index)} condition(s) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = _spec(args)
    out = Path(spec.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    docs = []
    for cond in bench.conditions(spec):
        train = [bench.make_problem(cond.params, s) for s in cond.train_seeds]
        try:
            result = meta_train(train, cond.mlam)
        except RuntimeError as exc:
            log.error("%s: %s", cond.label, exc)
            return EXIT_ABORTS
        if len(result.aborted) / len(train) > spec.max_abort_fraction:
            log.error("%s: %d of %d training problems aborted", cond.label, len(result.aborted), len(train))
            return EXIT_ABORTS
        ckpt = f"checkpoints/{bench._slug(cond.label)}.json"
        save_checkpoint(out / ckpt, result.nets, condition=cond.label, seed=spec.seed)
        docs.append(
            {
                "label": cond.label,
                "params": cond.params,
                "mlam": cond.mlam.to_dict(),
                "train_seeds": cond.train_seeds,
                "test_seeds": cond.test_seeds,
                "checkpoint": ckpt,
            }
        )
        print(f"{cond.label}: trained on {len(train) - len(result.aborted)} problems -> {out / ckpt}")
    (out / "manifest.json").write_text(json.dumps({"spec": spec.to_dict(), "conditions": docs}, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.manifest is not None:
        if not args.manifest.is_file():
            raise UsageError(f"manifest not found: {args.manifest}")
        cells = bench.eval_from_manifest(args.manifest, out=args.out, threads=args.threads)
        limit = json.loads(args.manifest.read_text())["spec"].get("max_abort_fraction", 0.5)
    else:
        if not args.checkpoint.is_file():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        spec = _spec(args)
        nets = load_checkpoint(args.checkpoint)
        cells = []
        for cond in bench.conditions(spec):
            test = [bench.make_problem(cond.params, s) for s in cond.test_seeds]
            trajs = bench._evaluate_all(test, nets, cond.mlam, args.threads)
            metrics = [t.final_metric if t is not None else None for t in trajs]
            cells.append(bench.Cell("MLAM", cond.label, metrics, cond.test_seeds, sum(t.wall_ms for t in trajs if t)))
        args.out.mkdir(parents=True, exist_ok=True)
        bench.write_csv(args.out / "table.csv", bench.TABLE_COLUMNS, [c.row() for c in cells])
        limit = spec.max_abort_fraction
    _print_cells(cells)
    return _check_aborts(cells, limit)


def cmd_baseline(args) -> int:
    spec = _spec(args)
    wanted = {"sgd": "SGD", "als": "ALS", "em": "EM"}
    available = [m for m in bench.methods_for(spec.kind) if m != "MLAM"]
    methods = available if args.method == "all" else [wanted[args.method]]
    if not set(methods) <= set(available):
        raise UsageError(f"{args.method} does not apply to {spec.kind}")
    cells, tuned = [], {}
    for cond in bench.conditions(spec):
        cells += [bench.run_baseline(m, cond, spec, tuned) for m in methods]
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    bench.write_csv(out / "table.csv", bench.TABLE_COLUMNS, [c.row() for c in cells])
    if tuned:
        (out / "sgd_tuned.json").write_text(json.dumps(tuned, indent=2))
    _print_cells(cells)
    return _check_aborts(cells, spec.max_abort_fraction)


def cmd_bench(args, kind: str | None = None) -> int:
    spec = _spec(args, kind)
    table = bench.run_experiment(spec, threads=args.threads)
    _print_cells(table.cells)
    print(f"wrote {Path(spec.out) / 'table.csv'} and {Path(spec.out) / 'manifest.json'}")
    return _check_aborts(table.cells, spec.max_abort_fraction)


def _print_cells(cells) -> None:
    for c in cells:
        method, cond, n_ok, n_ab, mean, var, ms = c.row()
        print(f"{method:5s} {cond:22s} ok={n_ok:<4d} aborted={n_ab:<3d} mean={float(mean):.4g} var={float(var):.3g}")


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "bench": cmd_bench,
    "sweep": lambda a: cmd_bench(a, kind="sweep-tin-tout"),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mlam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
