"""ADMM training toward micro-structured constraint sets.

Each constrained layer keeps a trainable copy W, a projected copy Q that is
always feasible, and a scaled dual U.  One outer iteration runs gradient
epochs on task loss + rho/2 ||W - Q + U||_F^2, then sets Q = proj(W + U)
and U = U + W - Q, then grows rho.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .nn import make_optimizer, run_epoch
from .projection import ConstraintReport, ConstraintSpec, LayerConstraint, project, verify_layer
from .tensor import frobenius_norm

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Task loss became non-finite during ADMM training."""


@dataclass
class AdmmConfig:
    K: int = 30
    inner_epochs: int = 1
    rho_init: float = 1e-3
    rho_growth: float = 1.5
    rho_max: float = 1e-1
    rho_overrides: dict[int, float] = field(default_factory=dict)
    rescale_dual: bool = True
    optimizer: str = "sgd"
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int | None = 32
    tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.K < 0 or self.inner_epochs < 1 or self.rho_growth < 1 or self.rho_init <= 0:
            raise ValueError("need K >= 0, inner_epochs >= 1, rho_growth >= 1, rho_init > 0")


@dataclass
class AdmmState:
    W: dict[int, np.ndarray]
    Q: dict[int, np.ndarray]
    U: dict[int, np.ndarray]
    rho: dict[int, float]
    k: int = 0


@dataclass
class HistoryRow:
    iteration: int
    layer: int
    task_loss: float
    penalty: float
    residual: float
    rho: float


def _check_shapes(*arrays):
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise ValueError(f"shape mismatch {shape} vs {np.shape(a)}")


def penalty_loss(W, Q, U, rho: float) -> float:
    _check_shapes(W, Q, U)
    d = np.asarray(W, np.float64) - np.asarray(Q, np.float64) + np.asarray(U, np.float64)
    return 0.5 * rho * float(np.sum(d * d))


def penalty_grad(W, Q, U, rho: float) -> np.ndarray:
    _check_shapes(W, Q, U)
    d = np.asarray(W, np.float64) - np.asarray(Q, np.float64) + np.asarray(U, np.float64)
    return rho * d


def q_step(W, U, constraint: LayerConstraint, layer: int = 0) -> np.ndarray:
    return project(np.asarray(W, np.float64) + U, constraint, layer)[0]


def u_step(U, W, Q) -> np.ndarray:
    _check_shapes(U, W, Q)
    return np.asarray(U, np.float64) + np.asarray(W, np.float64) - np.asarray(Q, np.float64)


def residual(state: AdmmState) -> dict[int, float]:
    return {i: frobenius_norm(np.asarray(state.W[i], np.float64) - state.Q[i]) for i in state.Q}


def init_state(model, spec: ConstraintSpec, cfg: AdmmConfig) -> AdmmState:
    weights = model.weights()
    layers = [i for i in spec.active_layers()]
    Q = {i: q_step(weights[i], 0.0, spec.get(i), i) for i in layers}
    U = {i: np.zeros(weights[i].shape) for i in layers}
    rho = {i: cfg.rho_overrides.get(i, cfg.rho_init) for i in layers}
    return AdmmState({i: weights[i] for i in layers}, Q, U, rho)


def admm_train(model, dataset: Dataset, spec: ConstraintSpec, cfg: AdmmConfig):
    """Run ADMM on a copy of `model`; returns (trained model, history rows).

    `model` needs ``weights()``, ``params()``, ``loss_and_grads(x, y)``,
    ``touch()`` and ``copy()``.  Layers without an active constraint train
    as plain gradient descent.
    """
    model = model.copy()
    history: list[HistoryRow] = []
    if cfg.K == 0:
        return model, history
    spec.validate({i: w.shape for i, w in model.weights().items()})
    state = init_state(model, spec, cfg)
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay)

    def add_penalty(grads):
        for i in state.Q:
            key = (i, "w")
            g = np.asarray(grads[key], np.float64) + penalty_grad(state.W[i], state.Q[i], state.U[i], state.rho[i])
            grads[key] = g.astype(grads[key].dtype)

    for k in range(1, cfg.K + 1):
        losses = []
        for _ in range(cfg.inner_epochs):
            try:
                losses.append(run_epoch(model, dataset, opt, cfg.batch_size, rng, add_penalty))
            except FloatingPointError as exc:
                raise DivergenceError(f"ADMM iteration {k}: {exc}; rho={state.rho}") from exc
        task_loss = float(np.mean(losses))
        if not math.isfinite(task_loss):
            raise DivergenceError(f"ADMM iteration {k}: task loss {task_loss}")
        for i in state.Q:
            state.Q[i] = q_step(state.W[i], state.U[i], spec.get(i), i)
            state.U[i] = u_step(state.U[i], state.W[i], state.Q[i])
        res = residual(state)
        for i in state.Q:
            history.append(HistoryRow(k, i, task_loss,
                                      penalty_loss(state.W[i], state.Q[i], state.U[i], state.rho[i]),
                                      res[i], state.rho[i]))
            new_rho = min(state.rho[i] * cfg.rho_growth, max(cfg.rho_max, state.rho[i]))
            if cfg.rescale_dual:
                state.U[i] *= state.rho[i] / new_rho
            state.rho[i] = new_rho
        state.k = k
        log.debug("admm iter %d loss %.5g residual %s", k, task_loss, res)
        if res and all(r <= cfg.tol * max(frobenius_norm(state.W[i]), 1e-12) for i, r in res.items()):
            break
    return model, history


def finalize(model, spec: ConstraintSpec):
    """Hard-project the trained weights; returns (new model, verified report)."""
    model = model.copy()
    report = ConstraintReport()
    weights = model.weights()
    projected = {}
    for i in spec.active_layers():
        projected[i], expected = project(weights[i], spec.get(i), i)
        report.layers[i] = verify_layer(projected[i], spec.get(i), i, expected)
        # keep the selection the projection made, not every block that happens to pass
        report.layers[i].blocks = expected.blocks
        report.layers[i].magnitudes = expected.magnitudes
        report.layers[i].signs = expected.signs
        report.layers[i].keep = expected.keep
    model.set_weights(projected)
    return model, report


def history_to_csv(history: list[HistoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "layer", "task_loss", "penalty", "residual", "rho"])
    for r in history:
        w.writerow([r.iteration, r.layer, repr(r.task_loss), repr(r.penalty), repr(r.residual), repr(r.rho)])
    return buf.getvalue()


def write_history_csv(path, history: list[HistoryRow]) -> None:
    with open(path, "w") as f:
        f.write(history_to_csv(history))


class QuadraticObjective:
    """f(W) = ||W - a||^2 on a single (1, n) weight; a convex test problem.

    Exposes the same training surface as `nn.Model`, with layer id 0.
    """

    def __init__(self, target, start=None):
        self.target = np.asarray(target, np.float64).reshape(1, -1)
        self.w = np.array(self.target if start is None else start, np.float64).reshape(1, -1)
        self.version = 0

    def weights(self):
        return {0: self.w}

    def params(self):
        return {(0, "w"): self.w}

    def loss_and_grads(self, x=None, y=None):
        d = self.w - self.target
        return float(np.sum(d * d)), {(0, "w"): 2 * d}

    def touch(self):
        self.version += 1

    def set_weights(self, weights):
        self.w[...] = weights[0]

    def copy(self):
        other = QuadraticObjective(self.target, self.w.copy())
        return other

    @staticmethod
    def dataset() -> Dataset:
        """A one-sample dataset; full-batch steps ignore its contents."""
        return Dataset(np.zeros((1, 1)), np.zeros(1))
