"""Quadratic anchor penalties and the expansion-convergence procedure.

Implements the EWC-style Fisher-weighted penalty, its generic
importance-weighted variants (MAS, SI, RWALK), and the active-forgetting
extension: a temporary network is trained penalty-free on the new task
(expansion), snapshotted as a second anchor, and a second quadratic penalty
pulls the main parameters toward it (convergence). The expanded anchor is
discarded after the task, so persisted state stays constant-size in the
number of tasks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import Batch, Network, make_optimizer
from .posterior import DiagGaussian, snapshot_anchor

_EXPAND_INIT_KEY = 810001
_EXPAND_SHUFFLE_KEY = 810002

SI_DAMP_DEFAULT = 0.1
RWALK_EMA_DECAY_DEFAULT = 0.9


@dataclass
class AfecConfig:
    lam: float = 0.0
    lam_e: float = 0.0
    expansion_epochs: int = 1
    expansion_init: str = "copy_main"  # copy_main | fresh_random

    def __post_init__(self):
        if self.lam < 0 or self.lam_e < 0:
            raise ConfigError("penalty strengths must be >= 0")
        if not (np.isfinite(self.lam) and np.isfinite(self.lam_e)):
            raise ConfigError("penalty strengths must be finite")
        if self.expansion_init not in ("copy_main", "fresh_random"):
            raise ConfigError(f"unknown expansion_init {self.expansion_init!r}")


@dataclass
class RegState:
    """Persisted continual-learning state; size is constant in the number of
    tasks learned."""

    anchor: DiagGaussian
    importance: np.ndarray
    path_accum: np.ndarray
    prev_params: np.ndarray
    fisher_ema: np.ndarray
    score_accum: np.ndarray
    task_count: int = 0

    @classmethod
    def zeros(cls, param_count: int) -> "RegState":
        z = lambda: np.zeros(param_count)
        return cls(anchor=DiagGaussian(z(), z()), importance=z(),
                   path_accum=z(), prev_params=z(), fisher_ema=z(),
                   score_accum=z(), task_count=0)

    def to_json(self) -> dict:
        return {
            "anchor": self.anchor.to_json(),
            "importance": self.importance.tolist(),
            "path_accum": self.path_accum.tolist(),
            "prev_params": self.prev_params.tolist(),
            "fisher_ema": self.fisher_ema.tolist(),
            "score_accum": self.score_accum.tolist(),
            "task_count": self.task_count,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RegState":
        return cls(anchor=DiagGaussian.from_json(obj["anchor"]),
                   importance=np.asarray(obj["importance"]),
                   path_accum=np.asarray(obj["path_accum"]),
                   prev_params=np.asarray(obj["prev_params"]),
                   fisher_ema=np.asarray(obj["fisher_ema"]),
                   score_accum=np.asarray(obj["score_accum"]),
                   task_count=int(obj["task_count"]))


def quadratic_penalty(params: np.ndarray, anchor: DiagGaussian, lam: float):
    """(lam/2) * sum_i w_i (theta_i - anchor_i)^2 and its gradient; anchor
    precision plays the role of the per-parameter weight."""
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    if params.shape != anchor.mean.shape:
        raise ShapeError("params and anchor length mismatch")
    diff = params - anchor.mean
    weighted = anchor.precision * diff
    value = 0.5 * lam * float(diff @ weighted)
    return value, lam * weighted


def afec_total_loss(net: Network, batch: Batch, state: RegState,
                    expanded: DiagGaussian | None, cfg: AfecConfig,
                    loss_kind: str):
    """Task loss plus the old-anchor penalty (lam) and the expanded-anchor
    penalty (lam_e). Penalties with zero strength (or before the first task)
    are skipped entirely so an EWC run is reproduced bit for bit when
    lam_e = 0."""
    loss, grad = net.loss_and_grad(batch, loss_kind)
    params = net.get_params()
    if cfg.lam != 0.0 and state.task_count > 0:
        value, pgrad = quadratic_penalty(params, state.anchor, cfg.lam)
        loss += value
        grad += pgrad
    if cfg.lam_e != 0.0 and expanded is not None:
        value, pgrad = quadratic_penalty(params, expanded, cfg.lam_e)
        loss += value
        grad += pgrad
    return loss, grad


def reg_with_afec_loss(net: Network, batch: Batch, state: RegState,
                       expanded: DiagGaussian | None, lam: float,
                       lam_e: float, method: str, loss_kind: str):
    """Importance-weighted variant: the old-task penalty uses the
    method-specific importance instead of the averaged Fisher."""
    if method not in ("mas", "si", "rwalk"):
        raise ConfigError(f"unknown importance method {method!r}")
    loss, grad = net.loss_and_grad(batch, loss_kind)
    params = net.get_params()
    if lam != 0.0 and state.task_count > 0:
        old = DiagGaussian(state.anchor.mean, state.importance)
        value, pgrad = quadratic_penalty(params, old, lam)
        loss += value
        grad += pgrad
    if lam_e != 0.0 and expanded is not None:
        value, pgrad = quadratic_penalty(params, expanded, lam_e)
        loss += value
        grad += pgrad
    return loss, grad


def epoch_batches(task, batch_size: int, key):
    """Seeded shuffle of the training split, yielded in minibatches."""
    order = np.random.default_rng(key).permutation(task.n_train)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(task.inputs_train[idx], task.targets_train[idx], task.head)


def train_expanded(net: Network, task, cfg: AfecConfig, opt_spec: dict, *,
                   batch_size: int, loss_kind: str, seed: int,
                   task_index: int = 0) -> DiagGaussian:
    """Synaptic expansion: train a temporary network on the task loss alone
    and return its anchor (parameter snapshot + Fisher). The main network is
    never touched and the temporary one is discarded by the caller."""
    if task.n_train == 0:
        raise ShapeError("expansion needs a non-empty task")
    tmp = net.clone()
    if cfg.expansion_init == "fresh_random":
        fresh_seed = (_EXPAND_INIT_KEY + 1000003 * seed + 997 * task_index) % (2 ** 31)
        fresh = Network.create(task.input_dim,
                               [l.out_dim for l in net.body],
                               net.body[0].activation if net.body else "identity",
                               {k: h.out_dim for k, h in net.heads.items()},
                               seed=fresh_seed)
        tmp.set_params(fresh.get_params())
    opt = make_optimizer(opt_spec)
    for epoch in range(cfg.expansion_epochs):
        for batch in epoch_batches(task, batch_size,
                                   [_EXPAND_SHUFFLE_KEY, seed, task_index, epoch]):
            _, grad = tmp.loss_and_grad(batch, loss_kind)
            tmp.set_params(opt.step(tmp.get_params(), grad))
    return snapshot_anchor(tmp, task, loss_kind)


# -- baseline importance estimators ------------------------------------------

@dataclass
class StepInfo:
    """Event payload for importance_update.

    event "task_start": marks the pre-task parameters.
    event "step": one optimizer step; carries the unpenalized loss gradient
    and the resulting parameter change.
    event "task_end": consolidates per-task accumulators into the importance;
    MAS additionally needs the trained network and the task data.
    """

    event: str
    grad: np.ndarray | None = None
    delta: np.ndarray | None = None
    net: Network | None = None
    task: object = None


def importance_update(method: str, state: RegState, info: StepInfo, *,
                      si_damp: float = SI_DAMP_DEFAULT,
                      rwalk_decay: float = RWALK_EMA_DECAY_DEFAULT) -> RegState:
    """Advance the method-specific importance. Mutates and returns `state`."""
    if method not in ("mas", "si", "rwalk"):
        raise ConfigError(f"unknown importance method {method!r}")
    if info.event == "task_start":
        state.prev_params = info.net.get_params()
        state.path_accum = np.zeros_like(state.path_accum)
        return state
    if info.event == "step":
        if method in ("si", "rwalk"):
            state.path_accum = state.path_accum - info.grad * info.delta
        if method == "rwalk":
            state.fisher_ema = (rwalk_decay * state.fisher_ema
                                + (1.0 - rwalk_decay) * info.grad ** 2)
        return state
    if info.event == "task_end":
        params = info.net.get_params()
        if method == "mas":
            state.importance = state.importance + _mas_increment(info.net, info.task)
        else:
            task_delta = params - state.prev_params
            score = np.maximum(state.path_accum, 0.0) / (task_delta ** 2 + si_damp)
            if method == "si":
                state.importance = state.importance + score
            else:  # rwalk
                state.score_accum = state.score_accum + score
                state.importance = state.fisher_ema + state.score_accum
            state.path_accum = np.zeros_like(state.path_accum)
        state.prev_params = params
        return state
    raise ConfigError(f"unknown importance event {info.event!r}")


def _mas_increment(net: Network, task) -> np.ndarray:
    """Mean absolute per-sample gradient of the squared output norm."""
    batch = Batch(task.inputs_train, task.targets_train, task.head)
    outputs = net.forward(batch)
    return net.per_sample_grad_moment(batch, 2.0 * outputs, power=1)
