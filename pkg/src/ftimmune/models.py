"""Small full-batch message-passing networks trained by plain gradient descent.

Three layer types share one interface: GCN (``L Z W``), GAT (masked softmax
attention, heads averaged) and GraphSAGE with a mean aggregator
(``Z W_self + mean_nbr(Z) W_neigh``). Backpropagation is written out by hand
so that every quantity the trajectory monitor needs (pre-activations, the
layer input, attention coefficients) is available without a framework.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .graph import GraphData, LaplacianKind, build_laplacian

log = logging.getLogger(__name__)

KINDS = ("GCN", "GAT", "SAGE")


class ConfigError(ValueError):
    pass


class TrainingDivergence(FloatingPointError):
    pass


class RollbackError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelArch:
    kind: str = "GCN"
    layer_dims: tuple = (16, 16, 2)
    num_heads: int = 1
    activation: str | tuple = "sigmoid"
    laplacian: LaplacianKind = LaplacianKind.SYM
    gat_self_loops: bool = True
    negative_slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "kind", str(self.kind).upper())
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        object.__setattr__(self, "laplacian", LaplacianKind(self.laplacian))
        if self.kind not in KINDS:
            raise ConfigError(f"unknown architecture {self.kind!r}; expected one of {KINDS}")
        if len(self.layer_dims) < 3:
            raise ConfigError("need at least two layers (layer_dims = [d0, d1, ..., dL])")
        if self.num_heads < 1:
            raise ConfigError("num_heads must be >= 1")
        for a in self.activations:
            if a not in ("sigmoid", "relu"):
                raise ConfigError(f"unknown activation {a!r}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def penultimate(self) -> int:
        return self.num_layers - 1

    @property
    def activations(self) -> tuple:
        if isinstance(self.activation, str):
            return (self.activation,) * (self.num_layers - 1)
        acts = tuple(self.activation)
        if len(acts) != self.num_layers - 1:
            raise ConfigError("one activation per hidden layer required")
        return acts

    def check_interface(self, layer: int) -> None:
        if not 1 <= layer <= self.num_layers - 1:
            raise ConfigError(f"interface layer must be in [1, {self.num_layers - 1}], got {layer}")


@dataclass
class TrainConfig:
    learning_rate: float = 1.0
    max_epochs: int = 200
    seed: int = 0
    snapshot_capacity: int = 64

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.snapshot_capacity < 1:
            raise ConfigError("snapshot_capacity must be >= 1")


class SnapshotRing:
    """Bounded, epoch-ordered history of parameter copies."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("snapshot capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def push(self, epoch: int, params: dict) -> None:
        if self._items and epoch <= self._items[-1][0]:
            raise RollbackError(f"snapshot epochs must increase ({epoch} after {self._items[-1][0]})")
        self._items.append((epoch, copy_params(params)))

    def epochs(self) -> list[int]:
        return [e for e, _ in self._items]

    def get(self, epoch: int) -> dict | None:
        for e, p in self._items:
            if e == epoch:
                return p
        return None

    def oldest(self):
        return self._items[0] if self._items else None

    def truncate_after(self, epoch: int) -> None:
        while self._items and self._items[-1][0] > epoch:
            self._items.pop()

    def __len__(self):
        return len(self._items)

    def copy(self) -> "SnapshotRing":
        ring = SnapshotRing(self.capacity)
        ring._items = deque(((e, copy_params(p)) for e, p in self._items), maxlen=self.capacity)
        return ring


def copy_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


@dataclass
class ModelState:
    params: dict
    epoch: int = 0
    ring: SnapshotRing = field(default_factory=lambda: SnapshotRing(64))
    last_rewind: int = 0

    @classmethod
    def initialize(cls, arch: ModelArch, seed: int = 0, capacity: int = 64) -> "ModelState":
        rng = np.random.default_rng(seed)
        params = {}
        for layer in range(1, arch.num_layers + 1):
            d_in, d_out = arch.layer_dims[layer - 1], arch.layer_dims[layer]
            if arch.kind == "GCN":
                params[f"W{layer}"] = _glorot(rng, d_in, d_out)
            elif arch.kind == "SAGE":
                params[f"Ws{layer}"] = _glorot(rng, d_in, d_out)
                params[f"Wn{layer}"] = _glorot(rng, d_in, d_out)
            else:
                k = arch.num_heads
                params[f"W{layer}"] = np.stack([_glorot(rng, d_in, d_out) for _ in range(k)])
                params[f"a_dst{layer}"] = np.stack([_glorot(rng, d_out, 1)[:, 0] for _ in range(k)])
                params[f"a_src{layer}"] = np.stack([_glorot(rng, d_out, 1)[:, 0] for _ in range(k)])
        state = cls(params=params, epoch=0, ring=SnapshotRing(capacity))
        state.ring.push(0, params)
        return state

    def copy(self) -> "ModelState":
        return ModelState(copy_params(self.params), self.epoch, self.ring.copy(), self.last_rewind)

    def layer_weight(self, layer: int) -> np.ndarray:
        """The weight that maps the layer input to the message space."""
        if f"W{layer}" in self.params:
            return self.params[f"W{layer}"]
        return self.params[f"Wn{layer}"]


def _glorot(rng, d_in, d_out):
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class GraphOps:
    """Graph-dependent operators, built once per (graph, architecture)."""

    def __init__(self, g: GraphData, arch: ModelArch):
        self.num_nodes = g.num_nodes
        self.kind = arch.kind
        if arch.kind == "GCN":
            self.L = build_laplacian(g, arch.laplacian)
        elif arch.kind == "SAGE":
            a = g.adjacency()
            deg = np.asarray(a.sum(axis=1)).ravel()
            inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
            self.M = sp.csr_matrix(sp.diags(inv) @ a)
            self.MT = self.M.T.tocsr()
        else:
            mask = g.adjacency().toarray() > 0
            if arch.gat_self_loops:
                np.fill_diagonal(mask, True)
            self.mask = mask


@dataclass
class ForwardResult:
    inputs: list       # Z_{l-1} for l = 1..L
    pre: list          # H_l
    post: list         # Z_l (softmax rows for the last layer)
    cache: list
    params: dict = None

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


def _check_dims(g: GraphData, state: ModelState, arch: ModelArch):
    if g.features.shape[1] != arch.layer_dims[0]:
        raise ConfigError(f"feature dim {g.features.shape[1]} != layer_dims[0] = {arch.layer_dims[0]}")
    if g.num_classes != arch.layer_dims[-1]:
        raise ConfigError(f"{g.num_classes} classes != layer_dims[-1] = {arch.layer_dims[-1]}")
    for layer in range(1, arch.num_layers + 1):
        w = state.layer_weight(layer)
        want = (arch.layer_dims[layer - 1], arch.layer_dims[layer])
        if w.shape[-2:] != want:
            raise ConfigError(f"layer {layer} weight has shape {w.shape}, expected {want}")


def gat_coefficients(P: np.ndarray, a_dst: np.ndarray, a_src: np.ndarray,
                     mask: np.ndarray, slope: float):
    """Attention of one head: returns (alpha, raw logits before LeakyReLU)."""
    raw = (P @ a_dst)[:, None] + (P @ a_src)[None, :]
    e = np.where(raw > 0, raw, slope * raw)
    e = np.where(mask, e, -np.inf)
    rowmax = e.max(axis=1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    w = np.where(mask, np.exp(e - rowmax), 0.0)
    s = w.sum(axis=1, keepdims=True)
    alpha = np.divide(w, s, out=np.zeros_like(w), where=s > 0)
    return alpha, raw


def _layer_forward(arch: ModelArch, ops: GraphOps, params: dict, layer: int, Z: np.ndarray):
    if arch.kind == "GCN":
        LZ = ops.L @ Z
        return LZ @ params[f"W{layer}"], {"LZ": LZ}
    if arch.kind == "SAGE":
        MZ = ops.M @ Z
        return Z @ params[f"Ws{layer}"] + MZ @ params[f"Wn{layer}"], {"MZ": MZ}
    W, ad, asrc = params[f"W{layer}"], params[f"a_dst{layer}"], params[f"a_src{layer}"]
    K = W.shape[0]
    heads = []
    H = 0.0
    for k in range(K):
        P = Z @ W[k]
        alpha, raw = gat_coefficients(P, ad[k], asrc[k], ops.mask, arch.negative_slope)
        H = H + alpha @ P
        heads.append((P, alpha, raw))
    return H / K, {"heads": heads}


def forward(g: GraphData, state: ModelState, arch: ModelArch, ops: GraphOps | None = None,
            params: dict | None = None) -> ForwardResult:
    """Run every layer; hidden layers apply the activation, the last applies softmax."""
    ops = ops or GraphOps(g, arch)
    params = state.params if params is None else params
    _check_dims(g, state, arch)
    acts = arch.activations
    Z = g.features
    inputs, pre, post, cache = [], [], [], []
    for layer in range(1, arch.num_layers + 1):
        H, c = _layer_forward(arch, ops, params, layer, Z)
        inputs.append(Z)
        pre.append(H)
        cache.append(c)
        if layer < arch.num_layers:
            Z = sigmoid(H) if acts[layer - 1] == "sigmoid" else np.maximum(H, 0.0)
        else:
            Z = softmax(H)
        post.append(Z)
    return ForwardResult(inputs, pre, post, cache, dict(params))


def masked_cross_entropy(O: np.ndarray, Y: np.ndarray, mask: np.ndarray) -> float:
    n = int(mask.sum())
    if n == 0:
        return 0.0
    p = np.clip((O[mask] * Y[mask]).sum(axis=1), 1e-300, None)
    return float(-np.log(p).sum() / n)


def loss_and_grads(g: GraphData, state: ModelState, arch: ModelArch, ops: GraphOps | None = None,
                   params: dict | None = None, mask: np.ndarray | None = None):
    """Mean cross-entropy over ``mask`` (train nodes by default) and its gradient."""
    ops = ops or GraphOps(g, arch)
    params = state.params if params is None else params
    mask = g.train_mask if mask is None else mask
    fr = forward(g, state, arch, ops, params)
    O, Y = fr.output, g.labels
    n = max(int(mask.sum()), 1)
    loss = masked_cross_entropy(O, Y, mask)
    dH = (O - Y) * mask[:, None] / n
    grads = {}
    acts = arch.activations
    for layer in range(arch.num_layers, 0, -1):
        Z = fr.inputs[layer - 1]
        c = fr.cache[layer - 1]
        if arch.kind == "GCN":
            W = params[f"W{layer}"]
            grads[f"W{layer}"] = c["LZ"].T @ dH
            dZ = ops.L.T @ (dH @ W.T) if layer > 1 else None
        elif arch.kind == "SAGE":
            Ws, Wn = params[f"Ws{layer}"], params[f"Wn{layer}"]
            grads[f"Ws{layer}"] = Z.T @ dH
            grads[f"Wn{layer}"] = c["MZ"].T @ dH
            dZ = dH @ Ws.T + ops.MT @ (dH @ Wn.T) if layer > 1 else None
        else:
            dZ = _gat_backward(arch, params, layer, Z, c, dH, grads)
        if layer > 1:
            Hp = fr.pre[layer - 2]
            if acts[layer - 2] == "sigmoid":
                s = fr.post[layer - 2]
                dH = dZ * s * (1.0 - s)
            else:
                dH = dZ * (Hp > 0)
    return loss, grads, fr


def _gat_backward(arch, params, layer, Z, c, dH, grads):
    W, ad, asrc = params[f"W{layer}"], params[f"a_dst{layer}"], params[f"a_src{layer}"]
    K = W.shape[0]
    gW, gad, gas = np.zeros_like(W), np.zeros_like(ad), np.zeros_like(asrc)
    dZ = np.zeros_like(Z)
    slope = arch.negative_slope
    for k, (P, alpha, raw) in enumerate(c["heads"]):
        dHk = dH / K
        dP = alpha.T @ dHk
        dalpha = dHk @ P.T
        de = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        draw = de * np.where(raw > 0, 1.0, slope)
        ds = draw.sum(axis=1)
        dt = draw.sum(axis=0)
        gad[k] = P.T @ ds
        gas[k] = P.T @ dt
        dP += np.outer(ds, ad[k]) + np.outer(dt, asrc[k])
        gW[k] = Z.T @ dP
        dZ += dP @ W[k].T
    grads[f"W{layer}"] = gW
    grads[f"a_dst{layer}"] = gad
    grads[f"a_src{layer}"] = gas
    return dZ


def output_weight_step(L, Z_prev: np.ndarray, O: np.ndarray, Y: np.ndarray, eta: float) -> np.ndarray:
    """Closed-form last-layer weight change ``eta (L Z)^T (O - Y)``.

    This is the gradient step of the summed softmax cross-entropy with respect
    to the output weight of a GCN layer.
    """
    LZ = L @ Z_prev
    return eta * np.asarray(LZ).T @ (O - Y)


def train_epoch(g: GraphData, state: ModelState, arch: ModelArch, cfg: TrainConfig,
                ops: GraphOps | None = None):
    """One full-batch gradient step; returns (state, outputs before the step, loss).

    The state is updated in place: parameters move by ``-lr * grad``, the
    epoch counter advances and a snapshot of the new parameters is pushed.
    """
    if state.epoch >= cfg.max_epochs:
        raise ConfigError(f"epoch {state.epoch} already at max_epochs={cfg.max_epochs}")
    loss, grads, fr = loss_and_grads(g, state, arch, ops)
    for name, gr in grads.items():
        if not np.all(np.isfinite(gr)):
            raise TrainingDivergence(
                f"non-finite gradient for {name} at epoch {state.epoch} (seed {cfg.seed}, lr {cfg.learning_rate})")
    lr = cfg.learning_rate
    if lr != 0:
        for name, gr in grads.items():
            state.params[name] = state.params[name] - lr * gr
    state.epoch += 1
    state.ring.push(state.epoch, state.params)
    if not np.isfinite(loss):
        raise TrainingDivergence(f"loss became {loss} at epoch {state.epoch}")
    return state, fr, loss


def rollback(state: ModelState, delta: int) -> ModelState:
    """Restore the parameters recorded ``delta`` epochs ago.

    If the ring no longer reaches that far the oldest snapshot is restored;
    ``state.last_rewind`` reports how many epochs were actually rewound.
    """
    if delta < 0:
        raise RollbackError("delta must be >= 0")
    if len(state.ring) == 0:
        raise RollbackError("no snapshots to roll back to")
    if delta == 0:
        state.last_rewind = 0
        return state
    target = state.epoch - delta
    params = state.ring.get(target)
    if params is None:
        oldest_epoch, params = state.ring.oldest()
        if oldest_epoch > target:
            log.info("rollback of %d epochs exceeds history; restoring epoch %d", delta, oldest_epoch)
            target = oldest_epoch
        else:
            raise RollbackError(f"no snapshot at epoch {target}")
    state.last_rewind = state.epoch - target
    state.params = {k: v.copy() for k, v in params.items()}
    state.epoch = target
    state.ring.truncate_after(target)
    return state


def gat_attention(g: GraphData, state: ModelState, arch: ModelArch, layer: int,
                  inputs: np.ndarray | None = None, ops: GraphOps | None = None) -> np.ndarray:
    """Attention coefficients of ``layer`` as a (K, N, N) array (zero off-neighbourhood)."""
    if arch.kind != "GAT":
        raise ConfigError("gat_attention needs a GAT architecture")
    ops = ops or GraphOps(g, arch)
    if inputs is None:
        inputs = forward(g, state, arch, ops).inputs[layer - 1]
    W = state.params[f"W{layer}"]
    out = []
    for k in range(W.shape[0]):
        P = inputs @ W[k]
        alpha, _ = gat_coefficients(P, state.params[f"a_dst{layer}"][k],
                                    state.params[f"a_src{layer}"][k], ops.mask, arch.negative_slope)
        out.append(alpha)
    return np.stack(out)


def accuracy(O: np.ndarray, g: GraphData, mask: np.ndarray) -> float:
    if not mask.any():
        return float("nan")
    return float((O[mask].argmax(axis=1) == g.label_ids[mask]).mean())


def evaluate(g: GraphData, state: ModelState, arch: ModelArch, ops: GraphOps | None = None) -> dict:
    O = forward(g, state, arch, ops).output
    return {
        "train_acc": accuracy(O, g, g.train_mask),
        "val_acc": accuracy(O, g, g.val_mask),
        "test_acc": accuracy(O, g, g.test_mask),
    }


def train(g: GraphData, arch: ModelArch, cfg: TrainConfig, epochs: int | None = None,
          state: ModelState | None = None, observers: Sequence = ()) -> ModelState:
    """Plain training loop; each observer is called as ``obs(state, outputs, loss)``."""
    ops = GraphOps(g, arch)
    state = state or ModelState.initialize(arch, cfg.seed, cfg.snapshot_capacity)
    n = cfg.max_epochs - state.epoch if epochs is None else epochs
    for _ in range(n):
        state, fr, loss = train_epoch(g, state, arch, cfg, ops)
        for obs in observers:
            obs(state, fr, loss)
    return state
