"""End-to-end continual-learning driver.

Runs a method over a task sequence: optional synaptic expansion, penalized
training of the main network, anchor/importance updates, and evaluation of
every task seen so far through its own head. Also hosts the linear transfer
probe, the random-init baseline, and run-state persistence.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, FormatError
from .metrics import AccMatrix
from .nn import Batch, Network, SGD, make_optimizer
from .posterior import DiagGaussian, estimate_diag_fisher, fisher_running_average
from .regularizers import (AfecConfig, RegState, StepInfo, epoch_batches,
                           importance_update, quadratic_penalty, train_expanded)

log = logging.getLogger("afec_lab")

METHODS = ("finetune", "ewc", "afec", "mas", "si", "rwalk",
           "mas_afec", "si_afec", "rwalk_afec")

_MAIN_SHUFFLE_KEY = 910001
_PROBE_HEAD_KEY = 910002
_PROBE_SHUFFLE_KEY = 910003

STATE_VERSION = 1


@dataclass
class ArchSpec:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    activation: str = "relu"


@dataclass
class SequenceConfig:
    method: str
    lam: float = 0.0
    lam_e: float = 0.0
    epochs: int = 10
    batch_size: int = 32
    optimizer: dict = field(default_factory=lambda: {"kind": "adam", "lr": 0.001})
    seed: int = 0
    eval_every_task: bool = True
    arch: ArchSpec = field(default_factory=ArchSpec)
    expansion_epochs: int | None = None  # None: same budget as main training
    expansion_init: str = "copy_main"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if isinstance(self.arch, dict):
            self.arch = ArchSpec(**self.arch)

    @property
    def base_method(self) -> str:
        if self.method in ("finetune", "ewc", "afec"):
            return "fisher"
        return self.method.removesuffix("_afec")

    @property
    def uses_expansion(self) -> bool:
        return self.method.endswith("afec") and self.lam_e != 0.0

    @property
    def effective_lam(self) -> float:
        return 0.0 if self.method == "finetune" else self.lam


@dataclass
class RunResult:
    acc_matrix: AccMatrix
    per_task_new_accuracy: list[float]
    wall_time: float
    config: dict
    state_digest: str
    start_task: int = 0

    @property
    def checksum(self) -> str:
        doc = {"acc": self.acc_matrix.a,
               "pre": _json_floats(self.acc_matrix.pre_train),
               "abar": self.acc_matrix.abar.tolist(),
               "state_digest": self.state_digest}
        return hashlib.sha256(_canonical(doc).encode()).hexdigest()


def _json_floats(vec) -> list:
    if vec is None:
        return []
    return [None if not np.isfinite(v) else float(v) for v in vec]


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _loss_kind(task) -> str:
    return "angular_mse" if task.kind == "regression_angle" else "cross_entropy"


def _collect_heads(tasks) -> dict[str, int]:
    heads: dict[str, int] = {}
    for task in tasks:
        if task.head in heads:
            if heads[task.head] != task.head_dim:
                raise ConfigError(f"head {task.head!r} declared with two dims")
        else:
            heads[task.head] = task.head_dim
    return heads


def evaluate(net: Network, task) -> float:
    """Test accuracy through the task's own head.

    Classification scores argmax matches; angular regression maps the output
    2-vector to its angle and scores nearest-class-angle matches.
    """
    batch = Batch(task.inputs_test, task.targets_test, task.head)
    out = net.forward(batch)
    if task.kind == "classification":
        return float(np.mean(np.argmax(out, axis=1) == task.labels_test))
    pred_angle = np.arctan2(out[:, 1], out[:, 0])
    diff = pred_angle[:, None] - task.class_angles[None, :]
    dist = np.abs((diff + np.pi) % (2.0 * np.pi) - np.pi)
    pred_class = np.argmin(dist, axis=1)
    return float(np.mean(pred_class == task.labels_test))


def random_init_baseline(tasks, arch: ArchSpec, seeds) -> np.ndarray:
    """Mean accuracy of each task on freshly initialized networks."""
    if len(seeds) < 1:
        raise ConfigError("need at least one seed")
    heads = _collect_heads(tasks)
    input_dim = tasks[0].input_dim
    abar = np.zeros(len(tasks))
    for seed in seeds:
        net = Network.create(input_dim, arch.hidden, arch.activation, heads, seed)
        abar += [evaluate(net, task) for task in tasks]
    return abar / len(seeds)


def _state_digest(net: Network, state: RegState) -> str:
    doc = {"params": net.get_params().tolist(), "reg_state": state.to_json()}
    return hashlib.sha256(_canonical(doc).encode()).hexdigest()


def run_sequence(cfg: SequenceConfig, tasks, *, resume: tuple | None = None,
                 save_state_to=None) -> RunResult:
    """Continually learn the task sequence with the configured method.

    `resume` is a (net, state, seed) triple from load_state; training then
    continues from state.task_count and the result only contains rows for the
    newly trained tasks. All randomness is keyed by (seed, task, epoch), so a
    resumed run reproduces the uninterrupted one exactly.
    """
    if not tasks:
        raise ConfigError("need at least one task")
    input_dim = tasks[0].input_dim
    if any(t.input_dim != input_dim for t in tasks):
        raise ConfigError("all tasks must share one input dimension")
    started = time.monotonic()

    heads = _collect_heads(tasks)
    if resume is not None:
        net, state, seed = resume
        if seed != cfg.seed:
            raise ConfigError("resume state was written with a different seed")
        if net.param_count != Network.create(
                input_dim, cfg.arch.hidden, cfg.arch.activation,
                heads, cfg.seed).param_count:
            raise ConfigError("resume state does not match the configured arch")
    else:
        net = Network.create(input_dim, cfg.arch.hidden, cfg.arch.activation,
                             heads, cfg.seed)
        state = RegState.zeros(net.param_count)

    abar = random_init_baseline(tasks, cfg.arch, [cfg.seed])
    pre_train = np.full(len(tasks), np.nan)
    rows: list[list[float]] = []
    start_task = state.task_count
    importance_based = cfg.base_method in ("mas", "si", "rwalk")

    for t in range(start_task, len(tasks)):
        task = tasks[t]
        loss_kind = _loss_kind(task)
        if t > 0:
            pre_train[t] = evaluate(net, task)

        expanded = None
        if cfg.uses_expansion:
            afec_cfg = AfecConfig(
                lam=cfg.effective_lam, lam_e=cfg.lam_e,
                expansion_epochs=(cfg.expansion_epochs
                                  if cfg.expansion_epochs is not None
                                  else cfg.epochs),
                expansion_init=cfg.expansion_init)
            expanded = train_expanded(net, task, afec_cfg, cfg.optimizer,
                                      batch_size=cfg.batch_size,
                                      loss_kind=loss_kind, seed=cfg.seed,
                                      task_index=t)

        if importance_based:
            importance_update(cfg.base_method, state,
                              StepInfo("task_start", net=net))
        old_weights = (state.anchor.precision if cfg.base_method == "fisher"
                       else state.importance)
        old_anchor = DiagGaussian(state.anchor.mean, old_weights)
        lam = cfg.effective_lam
        penalize_old = lam != 0.0 and state.task_count > 0
        penalize_new = expanded is not None and cfg.lam_e != 0.0

        opt = make_optimizer(cfg.optimizer)
        for epoch in range(cfg.epochs):
            for batch in epoch_batches(task, cfg.batch_size,
                                       [_MAIN_SHUFFLE_KEY, cfg.seed, t, epoch]):
                _, grad = net.loss_and_grad(batch, loss_kind)
                total = grad
                params = net.get_params()
                if penalize_old:
                    _, pgrad = quadratic_penalty(params, old_anchor, lam)
                    total = total + pgrad
                if penalize_new:
                    _, pgrad = quadratic_penalty(params, expanded, cfg.lam_e)
                    total = total + pgrad
                new_params = opt.step(params, total)
                net.set_params(new_params)
                if cfg.base_method in ("si", "rwalk"):
                    importance_update(cfg.base_method, state,
                                      StepInfo("step", grad=grad,
                                               delta=new_params - params))

        rows.append([evaluate(net, tasks[k]) for k in range(t + 1)])
        if importance_based:
            importance_update(cfg.base_method, state,
                              StepInfo("task_end", net=net, task=task))
            state.anchor = DiagGaussian(net.get_params(),
                                        state.anchor.precision)
        else:
            fisher = estimate_diag_fisher(net, task, loss_kind)
            state.anchor = DiagGaussian(
                net.get_params(),
                fisher_running_average(state.anchor.precision, fisher, t + 1))
        state.task_count = t + 1
        if save_state_to is not None:
            save_state(save_state_to, net, state, cfg.seed)
        running = float(np.mean(rows[-1]))
        log.info("method=%s seed=%d task=%d new_acc=%.4f running_acc=%.4f",
                 cfg.method, cfg.seed, t + 1, rows[-1][-1], running)

    # Resumed runs only report rows for the tasks they actually trained;
    # skipped leading rows are zero-padded to keep the matrix triangular.
    matrix = AccMatrix(
        a=[[float(v) for v in row] for row in _pad_rows(rows, start_task)],
        abar=abar, pre_train=pre_train)
    per_task_new = [rows[i][start_task + i] for i in range(len(rows))]
    return RunResult(acc_matrix=matrix,
                     per_task_new_accuracy=per_task_new,
                     wall_time=time.monotonic() - started,
                     config=asdict(cfg),
                     state_digest=_state_digest(net, state),
                     start_task=start_task)


def _pad_rows(rows: list[list[float]], start_task: int) -> list[list[float]]:
    """Fill skipped leading rows (resumed runs) with zeros so the matrix
    stays lower triangular."""
    padded = [[0.0] * (j + 1) for j in range(start_task)]
    return padded + rows


def transfer_probe(net: Network, probe_task, epochs: int, lr: float) -> float:
    """Freeze the feature extractor, train a fresh linear head on the probe
    task, and return its test accuracy. The given network is not modified."""
    body = net.clone().body
    if not body:
        raise ConfigError("transfer probe needs a network with a body")
    probe_net = _probe_network(body, probe_task)
    before = probe_net.get_params()[probe_net.body_slice()].copy()
    head_slice = probe_net.head_slice(probe_task.head)
    opt = SGD(lr=lr)
    loss_kind = _loss_kind(probe_task)
    for epoch in range(epochs):
        for batch in epoch_batches(probe_task, 32,
                                   [_PROBE_SHUFFLE_KEY, probe_task.seed, epoch]):
            _, grad = probe_net.loss_and_grad(batch, loss_kind)
            masked = np.zeros_like(grad)
            masked[head_slice] = grad[head_slice]
            probe_net.set_params(opt.step(probe_net.get_params(), masked))
    after = probe_net.get_params()[probe_net.body_slice()]
    assert np.array_equal(before, after)
    return evaluate(probe_net, probe_task)


def _probe_network(body, probe_task) -> Network:
    from .nn import _init_layer  # fresh head, keyed by the probe task seed
    feat = body[-1].out_dim
    head = _init_layer(feat, probe_task.head_dim, "identity",
                       [_PROBE_HEAD_KEY, probe_task.seed])
    return Network(body, {probe_task.head: head})


# -- run-state persistence ----------------------------------------------------

def save_state(path, net: Network, state: RegState, seed: int) -> None:
    """Write the full run state as one canonical JSON document."""
    doc = {
        "version": STATE_VERSION,
        "net": {
            "input_dim": net.body[0].in_dim if net.body else 0,
            "hidden": [l.out_dim for l in net.body],
            "activation": net.body[0].activation if net.body else "identity",
            "heads": [[name, layer.out_dim] for name, layer in net.heads.items()],
            "params": net.get_params().tolist(),
        },
        "reg_state": state.to_json(),
        "rng": {"scheme": "counter", "seed": seed},
        "task_count": state.task_count,
    }
    with open(path, "w") as fh:
        fh.write(_canonical(doc))
        fh.write("\n")


def load_state(path):
    """Read a run-state file; returns (net, reg_state, seed)."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    for key in ("version", "net", "reg_state", "rng", "task_count"):
        if key not in doc:
            raise FormatError(f"{path}: missing field {key!r}")
    if doc["version"] != STATE_VERSION:
        raise FormatError(f"{path}: unsupported version {doc['version']!r} "
                          f"in field 'version'")
    netdoc = doc["net"]
    for key in ("input_dim", "hidden", "activation", "heads", "params"):
        if key not in netdoc:
            raise FormatError(f"{path}: missing field 'net.{key}'")
    net = Network.create(netdoc["input_dim"], netdoc["hidden"],
                         netdoc["activation"],
                         {name: dim for name, dim in netdoc["heads"]},
                         seed=doc["rng"]["seed"])
    params = np.asarray(netdoc["params"], dtype=np.float64)
    if params.shape != (net.param_count,):
        raise FormatError(f"{path}: field 'net.params' has wrong length")
    net.set_params(params)
    state = RegState.from_json(doc["reg_state"])
    if state.task_count != doc["task_count"]:
        raise FormatError(f"{path}: field 'task_count' disagrees with reg_state")
    return net, state, doc["rng"]["seed"]
