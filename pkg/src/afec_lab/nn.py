"""Dense feed-forward networks with exact reverse-mode gradients.

Networks are small multi-head MLPs stored in float64. All parameters flatten
into a single vector (body layers first, then heads in insertion order), and
every training operation works on that flat view. Heads are plain linear
layers; several tasks may share one head or each own their own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh", "identity")
LOSS_KINDS = ("mse", "cross_entropy", "angular_mse")


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    raise ConfigError(f"unknown activation {name!r}")


def _activate_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    if name == "identity":
        return np.ones_like(z)
    raise ConfigError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    w: np.ndarray  # [in_dim, out_dim]
    b: np.ndarray  # [out_dim]
    activation: str = "identity"

    @property
    def in_dim(self) -> int:
        return self.w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w.shape[1]

    @property
    def size(self) -> int:
        return self.w.size + self.b.size


@dataclass
class Batch:
    """One minibatch: inputs [n, d_in], targets (class ids or real vectors), head id."""

    inputs: np.ndarray
    targets: np.ndarray
    head: str

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ShapeError("batch inputs must be a non-empty [n, d_in] matrix")
        if np.issubdtype(np.asarray(self.targets).dtype, np.floating):
            self.targets = np.asarray(self.targets, dtype=np.float64)
        else:
            self.targets = np.asarray(self.targets, dtype=np.int64)
        if len(self.targets) != self.inputs.shape[0]:
            raise ShapeError("batch targets and inputs disagree on sample count")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def _init_layer(in_dim: int, out_dim: int, activation: str, key) -> DenseLayer:
    # Glorot-uniform weights from a counter-based generator keyed per layer;
    # biases start at zero.
    rng = np.random.default_rng(key)
    lim = math.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-lim, lim, size=(in_dim, out_dim))
    return DenseLayer(w=w, b=np.zeros(out_dim), activation=activation)


class Network:
    """MLP body plus named linear output heads.

    The flat parameter layout is fixed at construction: body layer 0 (w then
    b), body layer 1, ..., then each head in insertion order.
    """

    def __init__(self, body: list[DenseLayer], heads: dict[str, DenseLayer]):
        if not heads:
            raise ConfigError("network needs at least one head")
        dims = [l.in_dim for l in body] + [body[-1].out_dim if body else None]
        for i in range(1, len(body)):
            if body[i].in_dim != body[i - 1].out_dim:
                raise ShapeError(f"body layers {i - 1} and {i} do not chain")
        feat = body[-1].out_dim if body else None
        for name, h in heads.items():
            if feat is not None and h.in_dim != feat:
                raise ShapeError(f"head {name!r} does not match body output dim")
        self.body = body
        self.heads = heads
        self._offsets: dict[object, tuple[slice, slice]] = {}
        pos = 0
        for i, layer in enumerate(body):
            self._offsets[i] = (slice(pos, pos + layer.w.size),
                                slice(pos + layer.w.size, pos + layer.size))
            pos += layer.size
        for name, layer in heads.items():
            self._offsets[name] = (slice(pos, pos + layer.w.size),
                                   slice(pos + layer.w.size, pos + layer.size))
            pos += layer.size
        self.param_count = pos

    # -- construction -------------------------------------------------------

    @classmethod
    def create(cls, input_dim: int, hidden: list[int], activation: str,
               heads: dict[str, int], seed: int) -> "Network":
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        body = []
        prev = input_dim
        for i, width in enumerate(hidden):
            body.append(_init_layer(prev, width, activation, [seed, i]))
            prev = width
        head_layers = {}
        for j, (name, dim) in enumerate(heads.items()):
            head_layers[name] = _init_layer(prev, dim, "identity",
                                            [seed, len(hidden) + j])
        return cls(body, head_layers)

    def clone(self) -> "Network":
        body = [DenseLayer(l.w.copy(), l.b.copy(), l.activation) for l in self.body]
        heads = {k: DenseLayer(l.w.copy(), l.b.copy(), l.activation)
                 for k, l in self.heads.items()}
        return Network(body, heads)

    def reinit_head(self, name: str, key) -> None:
        head = self.heads[name]
        self.heads[name] = _init_layer(head.in_dim, head.out_dim, "identity", key)

    # -- flat parameter view ------------------------------------------------

    def get_params(self) -> np.ndarray:
        out = np.empty(self.param_count)
        for key, layer in self._layers():
            ws, bs = self._offsets[key]
            out[ws] = layer.w.ravel()
            out[bs] = layer.b
        return out

    def set_params(self, params: np.ndarray) -> None:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.param_count,):
            raise ShapeError(f"expected {self.param_count} parameters, "
                             f"got shape {params.shape}")
        for key, layer in self._layers():
            ws, bs = self._offsets[key]
            layer.w = params[ws].reshape(layer.w.shape).copy()
            layer.b = params[bs].copy()

    def head_slice(self, name: str) -> slice:
        ws, bs = self._offsets[name]
        return slice(ws.start, bs.stop)

    def body_slice(self) -> slice:
        if not self.body:
            return slice(0, 0)
        return slice(0, self._offsets[len(self.body) - 1][1].stop)

    def _layers(self):
        for i, layer in enumerate(self.body):
            yield i, layer
        for name, layer in self.heads.items():
            yield name, layer

    # -- forward / backward -------------------------------------------------

    def _forward_cached(self, inputs: np.ndarray, head: str):
        if head not in self.heads:
            raise ConfigError(f"unknown head {head!r}")
        if inputs.shape[1] != (self.body[0].in_dim if self.body
                               else self.heads[head].in_dim):
            raise ShapeError("input dimension does not match the network")
        acts = [inputs]  # activations entering each layer
        x = inputs
        for i, layer in enumerate(self.body):
            z = x @ layer.w + layer.b
            x = _activate(layer.activation, z)
            if not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite activations in body layer {i}")
            acts.append(x)
        out = x @ self.heads[head].w + self.heads[head].b
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite activations in head {head!r}")
        return out, acts

    def forward(self, batch: Batch) -> np.ndarray:
        out, _ = self._forward_cached(batch.inputs, batch.head)
        return out

    def _loss_delta(self, outputs: np.ndarray, batch: Batch, loss_kind: str):
        """Return (loss, dloss/doutputs) for the whole batch."""
        n = batch.n
        if loss_kind in ("mse", "angular_mse"):
            targets = batch.targets
            if targets.ndim != 2 or targets.shape != outputs.shape:
                raise ShapeError("regression targets must match output shape")
            if loss_kind == "angular_mse":
                norms = np.linalg.norm(targets, axis=1)
                if targets.shape[1] != 2 or not np.allclose(norms, 1.0, atol=1e-9):
                    raise ShapeError("angular_mse targets must be unit 2-vectors")
            resid = outputs - targets
            loss = float(np.sum(resid * resid) / n)
            return loss, 2.0 * resid / n
        if loss_kind == "cross_entropy":
            labels = batch.targets
            if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
                raise ShapeError("cross_entropy targets must be class indices")
            if labels.min() < 0 or labels.max() >= outputs.shape[1]:
                raise ShapeError("class index out of range for head")
            shifted = outputs - outputs.max(axis=1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            loss = float(-logp[np.arange(n), labels].mean())
            delta = np.exp(logp)
            delta[np.arange(n), labels] -= 1.0
            return loss, delta / n
        raise ConfigError(f"unknown loss kind {loss_kind!r}")

    def _backward(self, batch: Batch, acts: list[np.ndarray],
                  delta: np.ndarray) -> np.ndarray:
        """Backprop an output-space gradient into a flat parameter gradient."""
        grad = np.zeros(self.param_count)
        head = self.heads[batch.head]
        ws, bs = self._offsets[batch.head]
        grad[ws] = (acts[-1].T @ delta).ravel()
        grad[bs] = delta.sum(axis=0)
        d = delta @ head.w.T
        for i in range(len(self.body) - 1, -1, -1):
            layer = self.body[i]
            z_grad = d * _activate_grad(layer.activation,
                                        acts[i] @ layer.w + layer.b, acts[i + 1])
            ws, bs = self._offsets[i]
            grad[ws] = (acts[i].T @ z_grad).ravel()
            grad[bs] = z_grad.sum(axis=0)
            d = z_grad @ layer.w.T
        return grad

    def loss_and_grad(self, batch: Batch, loss_kind: str):
        """Exact reverse-mode gradient of the batch loss; grad is flat."""
        out, acts = self._forward_cached(batch.inputs, batch.head)
        loss, delta = self._loss_delta(out, batch, loss_kind)
        return loss, self._backward(batch, acts, delta)

    def loss_only(self, batch: Batch, loss_kind: str) -> float:
        out, _ = self._forward_cached(batch.inputs, batch.head)
        loss, _ = self._loss_delta(out, batch, loss_kind)
        return loss

    def per_sample_grad_moment(self, batch: Batch, delta: np.ndarray,
                               power: int) -> np.ndarray:
        """Mean over samples of |per-sample parameter gradient|**power.

        `delta` is the per-sample output-space gradient [n, d_out] (no batch
        averaging). For a dense layer the per-sample weight gradient is the
        outer product of its input activation and delta, so elementwise powers
        factorize and the whole moment reduces to one matrix product per
        layer. Used for diagonal Fisher estimates (power=2) and gradient-
        magnitude importances (power=1).
        """
        if power not in (1, 2):
            raise ConfigError("power must be 1 or 2")
        out_moment = np.zeros(self.param_count)
        _, acts = self._forward_cached(batch.inputs, batch.head)
        n = batch.n

        def pw(x):
            return x * x if power == 2 else np.abs(x)

        head = self.heads[batch.head]
        ws, bs = self._offsets[batch.head]
        out_moment[ws] = (pw(acts[-1]).T @ pw(delta)).ravel() / n
        out_moment[bs] = pw(delta).mean(axis=0)
        d = delta @ head.w.T
        for i in range(len(self.body) - 1, -1, -1):
            layer = self.body[i]
            z_grad = d * _activate_grad(layer.activation,
                                        acts[i] @ layer.w + layer.b, acts[i + 1])
            ws, bs = self._offsets[i]
            out_moment[ws] = (pw(acts[i]).T @ pw(z_grad)).ravel() / n
            out_moment[bs] = pw(z_grad).mean(axis=0)
            d = z_grad @ layer.w.T
        return out_moment


def finite_diff_check(net: Network, batch: Batch, loss_kind: str,
                      eps: float = 1e-5, max_coords: int = 64,
                      seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients
    over a sampled coordinate subset."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    _, grad = net.loss_and_grad(batch, loss_kind)
    params = net.get_params()
    rng = np.random.default_rng([seed, net.param_count])
    count = min(max_coords, net.param_count)
    coords = rng.choice(net.param_count, size=count, replace=False)
    worst = 0.0
    for i in coords:
        bumped = params.copy()
        bumped[i] = params[i] + eps
        net.set_params(bumped)
        hi = net.loss_only(batch, loss_kind)
        bumped[i] = params[i] - eps
        net.set_params(bumped)
        lo = net.loss_only(batch, loss_kind)
        numeric = (hi - lo) / (2.0 * eps)
        rel = abs(grad[i] - numeric) / max(1e-12, abs(grad[i]) + abs(numeric))
        worst = max(worst, rel)
    net.set_params(params)
    return worst


class SGD:
    """Plain SGD with optional momentum."""

    def __init__(self, lr: float = 0.01, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity: np.ndarray | None = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if params.shape != grad.shape:
            raise ShapeError("params and grad length mismatch")
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient in optimizer step")
        if self._velocity is None:
            self._velocity = np.zeros_like(params)
        self._velocity = self.momentum * self._velocity + grad
        return params - self.lr * self._velocity


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: np.ndarray | None = None
        self._v: np.ndarray | None = None
        self._t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if params.shape != grad.shape:
            raise ShapeError("params and grad length mismatch")
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient in optimizer step")
        if self._m is None:
            self._m = np.zeros_like(params)
            self._v = np.zeros_like(params)
        self._t += 1
        self._m = self.beta1 * self._m + (1.0 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1.0 - self.beta2) * grad * grad
        m_hat = self._m / (1.0 - self.beta1 ** self._t)
        v_hat = self._v / (1.0 - self.beta2 ** self._t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(spec: dict):
    kind = spec.get("kind", "adam")
    if kind == "sgd":
        return SGD(lr=spec.get("lr", 0.01), momentum=spec.get("momentum", 0.0))
    if kind == "adam":
        return Adam(lr=spec.get("lr", 0.001))
    raise ConfigError(f"unknown optimizer kind {kind!r}")
