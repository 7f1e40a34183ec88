"""Coordinate-wise two-layer LSTM update network and its Adam trainer.

One set of weights is shared by every scalar coordinate of the variable being
optimized; each coordinate carries its own hidden/cell state. Input features
are the log/sign preprocessed gradient coordinate, output is an additive step.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tape, Var, const, leaf

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "mlam-params-v1"
INPUT_DIM = 2
N_LAYERS = 2


def param_shapes(hidden_size: int, input_dim: int = INPUT_DIM) -> dict[str, tuple[int, int]]:
    H = hidden_size
    shapes = {}
    for layer in range(1, N_LAYERS + 1):
        fan_in = input_dim if layer == 1 else H
        shapes[f"l{layer}.Wx"] = (fan_in, 4 * H)
        shapes[f"l{layer}.Wh"] = (H, 4 * H)
        shapes[f"l{layer}.b"] = (1, 4 * H)
    shapes["out.w"] = (H, 1)
    shapes["out.b"] = (1, 1)
    return shapes


@dataclass
class MetaNetParams:
    """Weights of one LSTM meta-network.

    Gate blocks along the last axis of every ``Wx``/``Wh``/``b`` are ordered
    input, forget, cell-candidate, output.
    """

    hidden_size: int
    arrays: dict[str, np.ndarray]
    seed: int = 0
    input_dim: int = INPUT_DIM

    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "MetaNetParams":
        return MetaNetParams(
            self.hidden_size, {k: v.copy() for k, v in self.arrays.items()}, self.seed, self.input_dim
        )

    def on_tape(self, tape: Tape, requires_grad: bool = True) -> dict[str, Var]:
        return {k: leaf(tape, v, requires_grad) for k, v in self.arrays.items()}

    def equals(self, other: "MetaNetParams") -> bool:
        return self.arrays.keys() == other.arrays.keys() and all(
            np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items()
        )


def init_params(hidden_size: int, seed: int) -> MetaNetParams:
    if hidden_size < 1:
        raise ValueError("hidden_size must be >= 1")
    H = hidden_size
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(H)
    arrays = {}
    for name, shape in param_shapes(H).items():
        if name.startswith("out."):
            arrays[name] = np.zeros(shape)
        elif name.endswith(".b"):
            b = np.zeros(shape)
            b[0, H : 2 * H] = 1.0  # forget gate
            arrays[name] = b
        else:
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return MetaNetParams(H, arrays, seed)


@dataclass
class LSTMState:
    """Per-coordinate hidden and cell state for each layer.

    Entries are ``(n_coords, hidden_size)`` arrays, or tape ``Var`` handles
    while a window is being recorded.
    """

    h: list
    c: list

    @classmethod
    def zeros(cls, n_coords: int, hidden_size: int) -> "LSTMState":
        z = lambda: np.zeros((n_coords, hidden_size))  # noqa: E731
        return cls([z() for _ in range(N_LAYERS)], [z() for _ in range(N_LAYERS)])

    @property
    def n_coords(self) -> int:
        h0 = self.h[0]
        return (h0.value if isinstance(h0, Var) else h0).shape[0]

    def on_tape(self, tape: Tape) -> "LSTMState":
        # state entering a window is a constant: the truncation boundary
        return LSTMState([const(tape, x) for x in self.h], [const(tape, x) for x in self.c])

    def values(self) -> "LSTMState":
        get = lambda x: (x.value if isinstance(x, Var) else x).copy()  # noqa: E731
        return LSTMState([get(x) for x in self.h], [get(x) for x in self.c])


def preprocess_gradient(g, p: float = 10.0):
    """Map gradient values to ``(f1, f2)`` features.

    ``|g| >= exp(-p)``: ``(log|g| / p, sign g)``; otherwise ``(-1, exp(p) * g)``.
    Works elementwise on arrays; scalars give a pair of floats.
    """
    if not p > 0:
        raise ValueError("p must be positive")
    ga = np.asarray(g, dtype=np.float64)
    big = np.abs(ga) >= math.exp(-p)
    with np.errstate(divide="ignore"):
        f1 = np.where(big, np.log(np.abs(ga)) / p, -1.0)
    f2 = np.where(big, np.sign(ga), math.exp(p) * ga)
    if ga.ndim == 0:
        return float(f1), float(f2)
    return f1, f2


def gradient_features(g: np.ndarray, p: float = 10.0) -> np.ndarray:
    """Flatten a gradient array into an ``(n_coords, 2)`` feature matrix."""
    f1, f2 = preprocess_gradient(np.asarray(g, dtype=np.float64).reshape(-1), p)
    return np.stack([f1, f2], axis=1)


def _layer(x: Var, h: Var, c: Var, Wx: Var, Wh: Var, b: Var, H: int):
    n = x.shape[0]
    z = x @ Wx + h @ Wh + b.broadcast_row(n)
    i = z.slice_cols(0, H).sigmoid()
    f = z.slice_cols(H, 2 * H).sigmoid()
    g = z.slice_cols(2 * H, 3 * H).tanh()
    o = z.slice_cols(3 * H, 4 * H).sigmoid()
    c_new = f * c + i * g
    h_new = o * c_new.tanh()
    return h_new, c_new


def lstm_step(
    weights: Mapping[str, Var],
    features: np.ndarray,
    state: LSTMState,
    out_scale: float = 0.1,
) -> tuple[Var, LSTMState]:
    """One recurrent step for every coordinate at once.

    ``weights`` are tape handles (see :meth:`MetaNetParams.on_tape`), ``state``
    holds tape handles on the same tape. Returns the ``(n_coords, 1)`` update
    and the new state.
    """
    features = np.asarray(features, dtype=np.float64)
    bad = ~np.isfinite(features)
    if bad.any():
        idx = int(np.argwhere(bad)[0][0])
        raise ValueError(f"non-finite feature at coordinate {idx}")
    if features.shape[0] != state.n_coords:
        raise ValueError(
            f"state tracks {state.n_coords} coordinates, features have {features.shape[0]}"
        )
    tape = weights["out.w"].tape
    H = weights["out.w"].shape[0]
    x = const(tape, features)
    hs, cs = [], []
    for layer in range(N_LAYERS):
        p = f"l{layer + 1}."
        h, c = _layer(
            x, state.h[layer], state.c[layer], weights[p + "Wx"], weights[p + "Wh"], weights[p + "b"], H
        )
        hs.append(h)
        cs.append(c)
        x = h
    n = features.shape[0]
    out = x @ weights["out.w"] + weights["out.b"].broadcast_row(n)
    return out * float(out_scale), LSTMState(hs, cs)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_params(cls, params: MetaNetParams, **kw) -> "AdamState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.arrays.items()},
            {k: np.zeros_like(a) for k, a in params.arrays.items()},
            **kw,
        )

    def copy(self) -> "AdamState":
        return copy.deepcopy(self)


def adam_update(
    params: MetaNetParams, grads: Mapping[str, np.ndarray], adam: AdamState, lr: float
) -> tuple[MetaNetParams, AdamState]:
    """Bias-corrected Adam step. Non-finite gradients skip the whole step."""
    for k, a in params.arrays.items():
        g = grads.get(k)
        if g is not None and np.shape(g) != a.shape:
            raise ValueError(f"gradient shape {np.shape(g)} != param shape {a.shape} for {k}")
        if g is not None and not np.all(np.isfinite(g)):
            log.warning("non-finite meta-gradient in %s; Adam step skipped", k)
            out = adam.copy()
            out.skipped += 1
            return params, out
    t = adam.t + 1
    b1, b2 = adam.beta1, adam.beta2
    new_arrays, m_new, v_new = {}, {}, {}
    for k, a in params.arrays.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(a)
        m = b1 * adam.m[k] + (1.0 - b1) * g
        v = b2 * adam.v[k] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_arrays[k] = a - lr * m_hat / (np.sqrt(v_hat) + adam.eps)
        m_new[k], v_new[k] = m, v
    new_params = MetaNetParams(params.hidden_size, new_arrays, params.seed, params.input_dim)
    return new_params, AdamState(m_new, v_new, t, b1, b2, adam.eps, adam.skipped)


@dataclass
class MetaNet:
    """Parameters plus optimizer state for one variable's LSTM."""

    params: MetaNetParams
    adam: AdamState = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.adam is None:
            self.adam = AdamState.for_params(self.params)

    @classmethod
    def fresh(cls, hidden_size: int, seed: int) -> "MetaNet":
        return cls(init_params(hidden_size, seed))

    def copy(self) -> "MetaNet":
        return MetaNet(self.params.copy(), self.adam.copy())


def save_checkpoint(path, nets: Mapping[str, MetaNet], **meta) -> None:
    """Write nets as JSON. Floats round-trip exactly through ``repr``."""
    doc = {"version": CHECKPOINT_VERSION, "meta": meta, "nets": {}}
    for name, net in nets.items():
        p = net.params
        doc["nets"][name] = {
            "hidden_size": p.hidden_size,
            "input_dim": p.input_dim,
            "seed": p.seed,
            "adam_t": net.adam.t,
            "arrays": {
                k: {"shape": list(a.shape), "data": a.reshape(-1).tolist()} for k, a in p.arrays.items()
            },
        }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> dict[str, MetaNet]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    nets = {}
    for name, d in doc["nets"].items():
        arrays = {
            k: np.array(a["data"], dtype=np.float64).reshape(a["shape"]) for k, a in d["arrays"].items()
        }
        params = MetaNetParams(d["hidden_size"], arrays, d["seed"], d.get("input_dim", INPUT_DIM))
        adam = AdamState.for_params(params)
        adam.t = d.get("adam_t", 0)
        nets[name] = MetaNet(params, adam)
    return nets
