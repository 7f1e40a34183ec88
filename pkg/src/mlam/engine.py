"""Meta-learned alternating minimization.

Each outer iteration runs one inner loop per variable (in the problem's
declared order). An inner loop applies the variable's LSTM ``t_in`` times to
the gradient of the global loss with the other variables held fixed. Every
``t_out`` outer iterations the weighted mean of the recorded global losses is
backpropagated into both LSTMs and each takes one Adam step; variables and
recurrent states are then cut from the graph (truncated BPTT).

Gradients fed to the LSTMs are inputs, not graph nodes, so the meta-gradient
is first order.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Protocol, Sequence

import numpy as np

from .autodiff import Tape, Var, const, leaf
from .metanet import LSTMState, MetaNet, adam_update, gradient_features, lstm_step

log = logging.getLogger(__name__)

ABORT_LOSS = 1e12
STATE_POLICIES = ("persist-across-problem", "reset-per-outer", "reset-per-inner")
MODES = ("train", "eval", "online")


class Problem(Protocol):
    seed: int
    variables: tuple[str, ...]

    def variable_shapes(self) -> dict[str, tuple[int, ...]]: ...

    def init_variables(self, rng: np.random.Generator) -> dict[str, np.ndarray]: ...

    def global_loss(self, tape: Tape, variables: Mapping[str, Var]) -> Var: ...

    def metric(self, variables: Mapping[str, np.ndarray]) -> float: ...


class TrajectoryAborted(RuntimeError):
    def __init__(self, iteration: int, variable: str, loss: float):
        self.iteration = iteration
        self.variable = variable
        self.loss = loss
        super().__init__(f"trajectory aborted at outer step {iteration} ({variable}): loss={loss!r}")


@dataclass
class MLAMConfig:
    T: int = 100
    t_in: int = 10
    t_out: int = 10
    weights: list[float] | None = None  # per outer step, length T; None means all 1
    lr: float | dict[str, float] = 1e-3
    hidden_size: int = 20
    out_scale: float = 0.1
    preprocess_p: float = 10.0
    warm_start: bool = True
    state_policy: str = "persist-across-problem"
    prior_weights: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    meta_epochs: int = 1

    def validate(self) -> "MLAMConfig":
        if self.t_in < 1 or self.t_out < 1 or self.T < 1:
            raise ValueError("T, t_in and t_out must be >= 1")
        if self.T % self.t_out:
            raise ValueError(f"T={self.T} is not a multiple of t_out={self.t_out}")
        if self.weights is not None:
            if len(self.weights) != self.T:
                raise ValueError(f"weights has length {len(self.weights)}, expected T={self.T}")
            if any(w < 0 for w in self.weights):
                raise ValueError("weights must be non-negative")
        if self.state_policy not in STATE_POLICIES:
            raise ValueError(f"unknown state_policy {self.state_policy!r}")
        if self.hidden_size < 1 or self.meta_epochs < 1:
            raise ValueError("hidden_size and meta_epochs must be >= 1")
        return self

    @property
    def n_updates(self) -> int:
        return self.T // self.t_out

    def step_weight(self, t: int) -> float:
        return 1.0 if self.weights is None else float(self.weights[t])

    def lr_for(self, name: str) -> float:
        return self.lr[name] if isinstance(self.lr, dict) else float(self.lr)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MLAMConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown MLAM config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Trajectory:
    losses: list[float]  # global loss after each outer iteration
    accumulated: list[float]  # one per meta-update window
    metrics: list[float]
    final: dict[str, np.ndarray]
    initial_loss: float
    initial_metric: float
    wall_ms: float = 0.0
    meta_updates: int = 0

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    @property
    def final_metric(self) -> float:
        return self.metrics[-1]


@dataclass
class WindowResult:
    values: dict[str, np.ndarray]
    states: dict[str, LSTMState]
    losses: list[float]
    metrics: list[float]
    accumulated: float
    grads: dict[str, dict[str, np.ndarray]] | None
    features: list[np.ndarray]


def initial_variables(problem: Problem, seed: int) -> dict[str, np.ndarray]:
    """Seeded starting point shared by MLAM and the baselines."""
    return problem.init_variables(np.random.default_rng([seed, problem.seed]))


def fresh_nets(problem_or_names, config: MLAMConfig) -> dict[str, MetaNet]:
    names = getattr(problem_or_names, "variables", problem_or_names)
    nets = {}
    for i, name in enumerate(names):
        seed = int(np.random.SeedSequence([config.seed, i]).generate_state(1)[0])
        nets[name] = MetaNet.fresh(config.hidden_size, seed)
    return nets


def loss_value(problem: Problem, values: Mapping[str, np.ndarray]) -> float:
    tape = Tape(grad_enabled=False)
    return float(problem.global_loss(tape, {k: const(tape, v) for k, v in values.items()}).value)


def local_gradient(problem: Problem, name: str, values: Mapping[str, np.ndarray]) -> tuple[np.ndarray, float]:
    """Gradient of the global loss w.r.t. one variable, others held fixed."""
    tape = Tape()
    vs = {k: leaf(tape, v, requires_grad=(k == name)) for k, v in values.items()}
    loss = problem.global_loss(tape, vs)
    grads = tape.backward(loss.id)
    return grads[vs[name].id], float(loss.value)


def _check_loss(value: float, iteration: int, name: str) -> None:
    if not np.isfinite(value) or abs(value) > ABORT_LOSS:
        raise TrajectoryAborted(iteration, name, value)


def _zero_state_on(tape: Tape, n: int, H: int) -> LSTMState:
    return LSTMState.zeros(n, H).on_tape(tape)


def inner_loop(
    problem: Problem,
    name: str,
    variables: Mapping[str, Var],
    weights: Mapping[str, Var],
    state: LSTMState,
    config: MLAMConfig,
    tape: Tape,
    iteration: int = 0,
    features: Iterator[np.ndarray] | None = None,
    record: list | None = None,
) -> tuple[Var, LSTMState]:
    """``t_in`` LSTM steps on one variable; the other variables stay fixed.

    ``features`` replays previously recorded LSTM inputs instead of computing
    fresh gradients (used by the meta-gradient oracle). ``record`` collects the
    inputs actually used.
    """
    var = variables[name]
    if config.state_policy == "reset-per-inner":
        state = _zero_state_on(tape, var.value.size, config.hidden_size)
    values = {k: v.value for k, v in variables.items()}
    for _ in range(config.t_in):
        values[name] = var.value
        g, lval = local_gradient(problem, name, values)
        _check_loss(lval, iteration, name)
        feats = next(features) if features is not None else gradient_features(g, config.preprocess_p)
        if record is not None:
            record.append(feats)
        update, state = lstm_step(weights, feats, state, config.out_scale)
        var = var + update.reshape(var.shape)
    return var, state


def accumulated_loss(
    losses: Sequence[Var],
    weights: Sequence[float] | None = None,
    prior: Sequence[tuple[float, Var, np.ndarray]] = (),
) -> Var:
    """Weighted mean of a window of global losses, plus optional prior terms.

    ``prior`` entries are ``(weight, variable, reference)`` and each adds
    ``weight * ||variable - reference||_F^2``.
    """
    n = len(losses)
    if n == 0:
        raise ValueError("empty loss window")
    if weights is None:
        weights = [1.0] * n
    if len(weights) != n:
        raise ValueError(f"{n} losses but {len(weights)} weights")
    total = losses[0] * float(weights[0])
    for F, w in zip(losses[1:], weights[1:]):
        total = total + F * float(w)
    total = total * (1.0 / n)
    for w, var, ref in prior:
        if w:
            total = total + (var - const(var.tape, ref)).square().sum() * float(w)
    return total


def run_window(
    problem: Problem,
    config: MLAMConfig,
    nets: Mapping[str, MetaNet],
    values: Mapping[str, np.ndarray],
    states: Mapping[str, LSTMState],
    t0: int,
    train: bool,
    rng: np.random.Generator | None = None,
    references: Mapping[str, np.ndarray] | None = None,
    features: Sequence[np.ndarray] | None = None,
) -> WindowResult:
    """Record ``t_out`` outer iterations on a fresh tape.

    Variables and states enter as constants, so nothing before ``t0`` receives
    gradient. With ``train`` the result carries meta-gradients per net.
    """
    tape = Tape(grad_enabled=train)
    H = config.hidden_size
    w = {n: nets[n].params.on_tape(tape, requires_grad=train) for n in problem.variables}
    vs = {n: const(tape, values[n]) for n in problem.variables}
    st = {n: states[n].on_tape(tape) for n in problem.variables}
    feat_iter = iter(features) if features is not None else None
    used: list[np.ndarray] = []
    window, losses, metrics = [], [], []
    for t in range(t0, t0 + config.t_out):
        if config.state_policy == "reset-per-outer":
            st = {n: _zero_state_on(tape, vs[n].value.size, H) for n in problem.variables}
        for n in problem.variables:
            if not config.warm_start:
                vs[n] = const(tape, problem.init_variables(rng)[n])
            vs[n], st[n] = inner_loop(problem, n, vs, w[n], st[n], config, tape, t, feat_iter, used)
        F = problem.global_loss(tape, vs)
        fval = float(F.value)
        _check_loss(fval, t, "global")
        window.append(F)
        losses.append(fval)
        metrics.append(problem.metric({n: v.value for n, v in vs.items()}))
    prior = []
    if references:
        for n, ref in references.items():
            prior.append((config.prior_weights.get(n, 0.0), vs[n], ref))
    L = accumulated_loss(window, [config.step_weight(t) for t in range(t0, t0 + config.t_out)], prior)
    grads = None
    if train:
        gmap = tape.backward(L.id)
        grads = {
            n: {k: gmap.get(node.id, np.zeros_like(node.value)) for k, node in w[n].items()}
            for n in problem.variables
        }
    return WindowResult(
        values={n: v.value.copy() for n, v in vs.items()},
        states={n: s.values() for n, s in st.items()},
        losses=losses,
        metrics=metrics,
        accumulated=float(L.value),
        grads=grads,
        features=used,
    )


def solve_problem(
    problem: Problem,
    config: MLAMConfig,
    nets: Mapping[str, MetaNet],
    mode: str = "train",
    init: Mapping[str, np.ndarray] | None = None,
    references: Mapping[str, np.ndarray] | None = None,
) -> tuple[Trajectory, dict[str, MetaNet]]:
    """Run ``T`` outer iterations on one problem.

    ``train`` and ``online`` update copies of the nets every ``t_out`` steps
    and return them; ``eval`` never touches the nets.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    config.validate()
    train = mode != "eval"
    start = time.perf_counter()
    nets = {n: nets[n].copy() for n in problem.variables} if train else dict(nets)
    rng = np.random.default_rng([config.seed, problem.seed, 1])
    values = {k: np.array(v, dtype=np.float64) for k, v in (init or initial_variables(problem, config.seed)).items()}
    states = {n: LSTMState.zeros(values[n].size, config.hidden_size) for n in problem.variables}
    initial_loss = loss_value(problem, values)
    _check_loss(initial_loss, 0, "global")
    initial_metric = problem.metric(values)
    losses, metrics, acc = [], [], []
    updates = 0
    for s in range(config.n_updates):
        res = run_window(problem, config, nets, values, states, s * config.t_out, train, rng, references)
        losses += res.losses
        metrics += res.metrics
        acc.append(res.accumulated)
        if train:
            for n in problem.variables:
                net = nets[n]
                params, adam = adam_update(net.params, res.grads[n], net.adam, config.lr_for(n))
                nets[n] = MetaNet(params, adam)
            updates += 1
        values, states = res.values, res.states
    traj = Trajectory(
        losses=losses,
        accumulated=acc,
        metrics=metrics,
        final=values,
        initial_loss=initial_loss,
        initial_metric=initial_metric,
        wall_ms=(time.perf_counter() - start) * 1e3,
        meta_updates=updates,
    )
    return traj, nets


@dataclass
class MetaTrainResult:
    nets: dict[str, MetaNet]
    trajectories: list[Trajectory]
    aborted: list[tuple[int, str]]  # (problem seed, reason)


def meta_train(
    train_problems: Sequence[Problem],
    config: MLAMConfig,
    nets: Mapping[str, MetaNet] | None = None,
) -> MetaTrainResult:
    """Carry LSTM parameters across a set of problems, visiting them in seeded random order."""
    if not train_problems:
        raise ValueError("need at least one training problem")
    config.validate()
    roles = train_problems[0].variables
    if any(p.variables != roles for p in train_problems):
        raise ValueError("all training problems must expose the same variables")
    nets = dict(nets) if nets is not None else fresh_nets(roles, config)
    trajectories, aborted = [], []
    attempts = 0
    for epoch in range(config.meta_epochs):
        order = np.random.default_rng([config.seed, epoch, 7]).permutation(len(train_problems))
        for idx in order:
            problem = train_problems[idx]
            attempts += 1
            try:
                traj, nets = solve_problem(problem, config, nets, mode="train")
            except TrajectoryAborted as exc:
                # updates made before the divergence are discarded with the problem
                log.warning("skipping problem %s: %s", problem.seed, exc)
                aborted.append((problem.seed, str(exc)))
                continue
            trajectories.append(traj)
    if len(aborted) == attempts:
        raise RuntimeError("every training problem aborted")
    return MetaTrainResult(nets, trajectories, aborted)


@dataclass
class EvalReport:
    metrics: list[float]
    mean: float
    variance: float
    n_aborted: int
    trajectories: list[Trajectory | None]

    @classmethod
    def from_metrics(cls, metrics: Sequence[float | None], trajectories=None) -> "EvalReport":
        ok = [m for m in metrics if m is not None]
        if not ok:
            raise ValueError("no successful trajectories")
        return cls(
            metrics=ok,
            mean=float(np.mean(ok)),
            variance=float(np.var(ok)),
            n_aborted=len(metrics) - len(ok),
            trajectories=list(trajectories) if trajectories is not None else [],
        )


def _eval_one(args):
    problem, nets, config, init = args
    try:
        traj, _ = solve_problem(problem, config, nets, mode="eval", init=init)
    except TrajectoryAborted as exc:
        log.warning("evaluation aborted on problem %s: %s", problem.seed, exc)
        return None
    return traj


def evaluate(
    test_problems: Sequence[Problem],
    nets: Mapping[str, MetaNet],
    config: MLAMConfig,
    threads: int = 1,
    inits: Sequence[Mapping[str, np.ndarray]] | None = None,
) -> EvalReport:
    """Eval-mode runs over a problem set; aborted problems are counted, not averaged."""
    config.validate()
    if inits is None:
        inits = [initial_variables(p, config.seed) for p in test_problems]
    jobs = [(p, nets, config, init) for p, init in zip(test_problems, inits)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            trajs = list(pool.map(_eval_one, jobs))
    else:
        trajs = [_eval_one(j) for j in jobs]
    metrics = [t.final_metric if t is not None else None for t in trajs]
    return EvalReport.from_metrics(metrics, trajs)


def export_trajectory(traj: Trajectory, path, config: MLAMConfig | None = None, seed: int | None = None) -> None:
    """CSV of ``outer_t, global_loss, metric`` plus a JSON sidecar with config and seed."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["outer_t", "global_loss", "metric"])
        w.writerow([0, repr(traj.initial_loss), repr(traj.initial_metric)])
        for t, (F, m) in enumerate(zip(traj.losses, traj.metrics), start=1):
            w.writerow([t, repr(F), repr(m)])
    side = {
        "config": config.to_dict() if config is not None else None,
        "seed": seed,
        "meta_updates": traj.meta_updates,
        "accumulated": traj.accumulated,
        "wall_ms": traj.wall_ms,
    }
    path.with_suffix(".json").write_text(json.dumps(side, indent=2))
