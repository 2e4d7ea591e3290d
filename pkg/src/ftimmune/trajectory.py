"""Feature trajectories of nodes and edges at one interface layer.

A node trajectory is the sequence of a node's pre-activation vectors at the
interface layer, one point per epoch. An edge trajectory is directed: the
trajectory of ``(src, dst)`` integrates the part of ``dst``'s per-epoch change
that arrives through the edge from ``src``, starting from the origin. For
GCN that part comes from the edge's share of the propagation operator, so
the directions of a node's incident edges plus its self-loop share add up to
the node's own direction.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import EdgeContribution, GraphData, build_laplacian
from .models import ConfigError, ForwardResult, GraphOps, ModelArch, ModelState, gat_coefficients


class TrajectoryError(ValueError):
    pass


@dataclass
class TrajectoryBuffer:
    entity: tuple          # ("node", i) or ("edge", (src, dst))
    layer: int
    points: np.ndarray     # (T, d)
    epochs: np.ndarray     # (T,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.epochs = np.asarray(self.epochs, dtype=int)
        if self.points.ndim != 2 or len(self.points) != len(self.epochs):
            raise TrajectoryError("points must be (T, d) with one epoch per point")
        if len(self.epochs) > 1 and np.any(np.diff(self.epochs) <= 0):
            raise TrajectoryError("epochs must be strictly increasing")

    def __len__(self):
        return len(self.epochs)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def directions(self) -> np.ndarray:
        return np.diff(self.points, axis=0)

    def tail(self, length: int) -> "TrajectoryBuffer":
        return TrajectoryBuffer(self.entity, self.layer, self.points[-length:], self.epochs[-length:])


@dataclass
class DirectionVector:
    from_epoch: int
    to_epoch: int
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float)
        if not np.all(np.isfinite(self.vector)):
            raise TrajectoryError("direction vector has non-finite entries")


@dataclass
class NormalizedTrajectory:
    points: np.ndarray
    scale_meta: dict = field(default_factory=dict)
    degenerate: bool = False

    @property
    def length(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


# ------------------------------------------------------------ edge directions

def edge_direction_gcn(Z_prev: np.ndarray, dW: np.ndarray, contribution: EdgeContribution,
                       target: int, epoch: int = 0) -> DirectionVector:
    """Row ``target`` of ``R Z_prev dW`` for one edge share ``R``."""
    Z_prev = np.asarray(Z_prev)
    dW = np.asarray(dW)
    if Z_prev.shape[1] != dW.shape[0] or contribution.matrix.shape[1] != Z_prev.shape[0]:
        raise TrajectoryError(
            f"shape mismatch: R {contribution.matrix.shape}, Z {Z_prev.shape}, dW {dW.shape}")
    row = contribution.matrix.getrow(target)
    vec = np.asarray(row @ Z_prev @ dW).ravel()
    return DirectionVector(epoch, epoch + 1, vec)


def node_direction(edge_dirs, dim: int | None = None, epoch: int = 0) -> DirectionVector:
    """Sum of a node's incident edge directions (include the self-loop share for GCN)."""
    edge_dirs = list(edge_dirs)
    if not edge_dirs:
        if dim is None:
            raise TrajectoryError("need dim for an empty direction list")
        return DirectionVector(epoch, epoch + 1, np.zeros(dim))
    vec = np.sum([d.vector for d in edge_dirs], axis=0)
    return DirectionVector(edge_dirs[0].from_epoch, edge_dirs[0].to_epoch, vec)


def edge_direction_gat(coefficients, head_weights, z) -> np.ndarray:
    """``sum_k a_k (z W_k)`` over attention heads."""
    coefficients = np.atleast_1d(np.asarray(coefficients, dtype=float))
    z = np.asarray(z, dtype=float)
    out = 0.0
    for a, W in zip(coefficients, head_weights):
        out = out + a * (z @ np.asarray(W))
    return np.asarray(out, dtype=float)


def edge_direction_sage(g: GraphData, state: ModelState, arch: ModelArch, i: int, j: int,
                        layer: int, inputs: np.ndarray) -> np.ndarray:
    """Mean-aggregator message of neighbour ``j`` into ``i`` with every other neighbour blocked.

    Returns ``(z_j / |N(i)|) W_neigh``, the aggregation term of the layer's
    pre-activation (the self term and any other neighbour are masked out).
    """
    if arch.kind != "SAGE":
        raise ConfigError("edge_direction_sage needs a SAGE architecture")
    if not g.has_edge(i, j):
        raise TrajectoryError(f"{j} is not a neighbour of {i}")
    deg = sum(1 for e in g.edges if i in e)
    return (inputs[j] / deg) @ state.params[f"Wn{layer}"]


# ------------------------------------------------------------------ monitor

@dataclass
class _EpochRecord:
    epoch: int
    H: np.ndarray            # node pre-activations (N, d)
    parts: dict              # architecture-specific per-node arrays


class TrajectoryMonitor:
    """Per-epoch observer of the interface layer.

    ``record_epoch`` is called once per epoch after the gradient step with the
    forward result computed before it. Only per-node arrays are stored; node,
    edge and single-edge probe trajectories are assembled on demand over the
    retained window.
    """

    def __init__(self, g: GraphData, arch: ModelArch, layer: int | None = None,
                 window: int | None = None):
        self.arch = arch
        self.layer = arch.penultimate if layer is None else layer
        arch.check_interface(self.layer)
        self.window = window
        self.records: deque = deque(maxlen=window)
        self.valid_from = np.zeros(g.num_nodes, dtype=int)
        self.set_graph(g)

    # graph bookkeeping
    def set_graph(self, g: GraphData, ops: GraphOps | None = None) -> None:
        self.g = g
        self.ops = ops or GraphOps(g, self.arch)
        e = g.edge_array()
        self.dir_src = np.concatenate([e[:, 0], e[:, 1]]).astype(int)
        self.dir_dst = np.concatenate([e[:, 1], e[:, 0]]).astype(int)
        self.degree = np.bincount(self.dir_dst, minlength=g.num_nodes)
        if self.arch.kind == "GCN":
            L = sp.csr_matrix(self.ops.L)
            self.diag = L.diagonal()
            self.weight_L = L

    def directed_edges(self) -> list[tuple[int, int]]:
        return list(zip(self.dir_src.tolist(), self.dir_dst.tolist()))

    def __call__(self, state: ModelState, fr: ForwardResult, loss: float) -> None:
        self.record_epoch(state.epoch - 1, fr, state.params)

    def record_epoch(self, epoch: int, fr: ForwardResult, params_after: dict) -> None:
        if self.records and epoch != self.records[-1].epoch + 1:
            raise TrajectoryError(
                f"epochs must be contiguous: got {epoch} after {self.records[-1].epoch}")
        lay = self.layer
        Z = fr.inputs[lay - 1]
        H = fr.pre[lay - 1]
        p_before = fr.params
        kind = self.arch.kind
        if kind == "GCN":
            W0, W1 = p_before[f"W{lay}"], params_after[f"W{lay}"]
            parts = {"ZW": Z @ W0, "M": Z @ (W1 - W0)}
        elif kind == "SAGE":
            parts = {"S": Z @ p_before[f"Ws{lay}"], "U": Z @ p_before[f"Wn{lay}"]}
        else:
            heads = fr.cache[lay - 1]["heads"]
            P = np.stack([h[0] for h in heads])
            alpha = np.stack([h[1][self.dir_dst, self.dir_src] for h in heads])
            alpha_self = np.stack([np.diagonal(h[1]).copy() for h in heads])
            parts = {
                "P": P, "alpha": alpha, "alpha_self": alpha_self,
                "s": np.einsum("knd,kd->kn", P, p_before[f"a_dst{lay}"]),
                "t": np.einsum("knd,kd->kn", P, p_before[f"a_src{lay}"]),
            }
        parts["out"] = np.array(fr.pre[-1], copy=True)
        self.records.append(_EpochRecord(epoch, np.array(H, copy=True), parts))

    # history management
    @property
    def epochs(self) -> np.ndarray:
        return np.array([r.epoch for r in self.records], dtype=int)

    def __len__(self):
        return len(self.records)

    def truncate_from(self, epoch: int) -> None:
        """Drop records at or after ``epoch`` (used after a weight rollback)."""
        while self.records and self.records[-1].epoch >= epoch:
            self.records.pop()

    def reset_nodes(self, nodes, epoch: int) -> None:
        """History of ``nodes`` before ``epoch`` no longer describes the current graph."""
        nodes = np.asarray(list(nodes), dtype=int)
        if len(nodes):
            self.valid_from[nodes] = np.maximum(self.valid_from[nodes], epoch)

    def clear(self) -> None:
        self.records.clear()

    def fork(self, g: GraphData | None = None) -> "TrajectoryMonitor":
        """Independent monitor sharing the recorded history (records are never mutated)."""
        twin = TrajectoryMonitor.__new__(TrajectoryMonitor)
        twin.arch, twin.layer, twin.window = self.arch, self.layer, self.window
        twin.records = deque(self.records, maxlen=self.window)
        twin.valid_from = self.valid_from.copy()
        twin.set_graph(g if g is not None else self.g)
        return twin

    def output_positions(self, length: int | None = None) -> np.ndarray:
        """(n_nodes, T, C) output-layer pre-activations over the window."""
        return np.stack([r.parts["out"] for r in self._window(length)], axis=1)

    # trajectory assembly
    def _window(self, length: int | None):
        recs = list(self.records)
        if length is not None:
            recs = recs[-length:]
        return recs

    def node_positions(self, length: int | None = None) -> np.ndarray:
        """(n_nodes, T, d) node trajectories over the trailing window."""
        recs = self._window(length)
        return np.stack([r.H for r in recs], axis=1)

    def self_directions(self, length: int | None = None) -> np.ndarray:
        """(n_nodes, T-1, d) per-epoch change carried by each node's self-loop share."""
        recs = self._window(length)
        kind = self.arch.kind
        out = []
        for a, b in zip(recs[:-1], recs[1:]):
            if kind == "GCN":
                out.append(self.diag[:, None] * a.parts["M"])
            elif kind == "SAGE":
                out.append(b.parts["S"] - a.parts["S"])
            else:
                out.append(self._gat_self(b) - self._gat_self(a))
        return np.stack(out, axis=1)

    def _gat_self(self, r):
        K = r.parts["P"].shape[0]
        return np.einsum("kn,knd->nd", r.parts["alpha_self"], r.parts["P"]) / K

    def edge_directions(self, length: int | None = None, idx=None) -> np.ndarray:
        """(n_directed_edges, T-1, d) directions of the directed edge trajectories."""
        recs = self._window(length)
        src, dst = self.dir_src, self.dir_dst
        if idx is not None:
            src, dst = src[idx], dst[idx]
        kind = self.arch.kind
        out = []
        if kind == "GCN":
            w = np.asarray(self.weight_L[dst, src]).ravel()
            for a in recs[:-1]:
                out.append(w[:, None] * a.parts["M"][src])
        elif kind == "SAGE":
            deg = self.degree[dst][:, None]
            for a, b in zip(recs[:-1], recs[1:]):
                out.append((b.parts["U"][src] - a.parts["U"][src]) / deg)
        else:
            sel = slice(None) if idx is None else idx
            for a, b in zip(recs[:-1], recs[1:]):
                out.append(self._gat_msg(b, src, sel) - self._gat_msg(a, src, sel))
        if not out:
            return np.zeros((len(src), 0, self.H_dim))
        return np.stack(out, axis=1)

    def _gat_msg(self, r, src, sel):
        K = r.parts["P"].shape[0]
        alpha = r.parts["alpha"][:, sel]
        return np.einsum("ke,ked->ed", alpha, r.parts["P"][:, src]) / K

    @property
    def H_dim(self) -> int:
        return self.arch.layer_dims[self.layer]

    def edge_positions(self, length: int | None = None, idx=None) -> np.ndarray:
        """(n_directed_edges, T, d) cumulative edge positions from a zero origin."""
        d = self.edge_directions(length, idx)
        zero = np.zeros((d.shape[0], 1, d.shape[2]))
        return np.concatenate([zero, np.cumsum(d, axis=1)], axis=1)

    def node_buffer(self, i: int, length: int | None = None) -> TrajectoryBuffer:
        recs = self._window(length)
        return TrajectoryBuffer(("node", int(i)), self.layer, np.stack([r.H[i] for r in recs]),
                                [r.epoch for r in recs])

    def edge_buffer(self, src: int, dst: int, length: int | None = None) -> TrajectoryBuffer:
        hits = np.flatnonzero((self.dir_src == src) & (self.dir_dst == dst))
        if len(hits) == 0:
            raise TrajectoryError(f"({src}, {dst}) is not an edge of the monitored graph")
        recs = self._window(length)
        pos = self.edge_positions(length, idx=hits)[0]
        return TrajectoryBuffer(("edge", (int(src), int(dst))), self.layer, pos, [r.epoch for r in recs])

    def pair_positions(self, src: np.ndarray, dst: np.ndarray, length: int | None = None) -> np.ndarray:
        """(n_pairs, T, d) trajectory of ``dst`` in the graph holding only the edge (dst, src).

        For GCN this is ``(z_dst + z_src) W / 2`` (the symmetric operator of a
        single edge with self-loops); SAGE uses ``z_dst W_self + z_src W_neigh``;
        GAT re-normalises attention over the pair. Pairs need not be edges of
        the monitored graph, which lets candidate edges be probed too.
        """
        recs = self._window(length)
        src = np.asarray(src, dtype=int)
        dst = np.asarray(dst, dtype=int)
        kind = self.arch.kind
        out = []
        for r in recs:
            if kind == "GCN":
                V = r.parts["ZW"]
                out.append(0.5 * (V[dst] + V[src]))
            elif kind == "SAGE":
                out.append(r.parts["S"][dst] + r.parts["U"][src])
            else:
                P, s, t = r.parts["P"], r.parts["s"], r.parts["t"]
                slope = self.arch.negative_slope
                e_self = s[:, dst] + t[:, dst]
                e_pair = s[:, dst] + t[:, src]
                e_self = np.where(e_self > 0, e_self, slope * e_self)
                e_pair = np.where(e_pair > 0, e_pair, slope * e_pair)
                m = np.maximum(e_self, e_pair)
                ws, wp = np.exp(e_self - m), np.exp(e_pair - m)
                a_self, a_pair = ws / (ws + wp), wp / (ws + wp)
                msg = a_self[..., None] * P[:, dst] + a_pair[..., None] * P[:, src]
                out.append(msg.mean(axis=0))
        return np.stack(out, axis=1)

    def window_valid(self, nodes: np.ndarray, length: int) -> np.ndarray:
        """Whether each node has ``length`` contiguous valid points at the end of the window."""
        if len(self.records) < length:
            return np.zeros(len(nodes), dtype=bool)
        start = self.records[-length].epoch
        return self.valid_from[np.asarray(nodes, dtype=int)] <= start


# ------------------------------------------------------------- normalization

def _as_array(trajectories) -> np.ndarray:
    if isinstance(trajectories, np.ndarray):
        arr = trajectories
    else:
        items = list(trajectories)
        if not items:
            return np.zeros((0, 0, 0))
        arr = np.stack([t.points if hasattr(t, "points") else np.asarray(t, dtype=float) for t in items])
    if arr.ndim != 3:
        raise TrajectoryError("trajectories must share length and dimension")
    return arr.astype(float, copy=False)


def householder_to_axis(v: np.ndarray) -> np.ndarray:
    """Orthogonal matrix H (symmetric) with ``H v = |v| e1``; identity if already aligned."""
    d = len(v)
    n = np.linalg.norm(v)
    u = v / n
    u[0] -= 1.0
    un = np.linalg.norm(u)
    if un < 1e-15:
        return np.eye(d)
    u /= un
    return np.eye(d) - 2.0 * np.outer(u, u)


def normalize_array(P: np.ndarray, scale: float | None = None, tol: float = 1e-12):
    """Vectorised normalization of an (n, T, d) array.

    Returns ``(Q, degenerate, scale)``. Each trajectory is translated to start
    at the origin and reflected so its endpoint lies on the positive first
    axis. Coordinates are then folded to magnitudes and divided by the set's
    largest magnitude (min-max over the set; the minimum is the shared
    origin). Zero-displacement trajectories are flagged and mapped to the
    origin.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 3:
        raise TrajectoryError("expected an (n, T, d) array")
    n, T, d = P.shape
    if T < 2:
        raise TrajectoryError("normalization needs at least two points per trajectory")
    X = P - P[:, :1, :]
    zeta = X[:, -1, :]
    zn = np.linalg.norm(zeta, axis=1)
    extent = np.abs(X).max(axis=(1, 2)) if n else np.zeros(0)
    degenerate = zn <= tol * np.maximum(extent, 1.0)
    Q = np.zeros_like(X)
    ok = ~degenerate
    if ok.any():
        u = zeta[ok] / zn[ok, None]
        u[:, 0] -= 1.0
        un = np.linalg.norm(u, axis=1)
        aligned = un < 1e-15
        u = np.where(aligned[:, None], 0.0, u / np.where(aligned, 1.0, un)[:, None])
        Xo = X[ok]
        proj = np.einsum("ntd,nd->nt", Xo, u)
        R = Xo - 2.0 * proj[..., None] * u[:, None, :]
        # the endpoint is exact by construction
        R[:, -1, :] = 0.0
        R[:, -1, 0] = zn[ok]
        Q[ok] = np.abs(R)
    if scale is None:
        scale = float(Q.max()) if Q.size else 1.0
        if scale <= 0:
            scale = 1.0
    Q = Q / scale
    return Q, degenerate, scale


def normalize(trajectories, scale: float | None = None) -> list[NormalizedTrajectory]:
    """Normalize a set of equal-length trajectories (see :func:`normalize_array`)."""
    P = _as_array(trajectories)
    if P.size == 0 and P.shape[0] == 0:
        return []
    if P.shape[1] < 2:
        raise TrajectoryError("normalization needs at least two points per trajectory")
    Q, deg, s = normalize_array(P, scale)
    starts = P[:, 0, :]
    return [NormalizedTrajectory(Q[k], {"translation": starts[k].copy(), "scale": s,
                                        "main_length": float(np.linalg.norm(P[k, -1] - P[k, 0]))},
                                 bool(deg[k]))
            for k in range(len(Q))]


def trajectory_mse(a, b) -> float:
    """Mean over points of the squared Euclidean distance between paired points."""
    pa = a.points if hasattr(a, "points") else np.asarray(a, dtype=float)
    pb = b.points if hasattr(b, "points") else np.asarray(b, dtype=float)
    if pa.shape != pb.shape:
        raise TrajectoryError(f"trajectory shapes differ: {pa.shape} vs {pb.shape}")
    return float(np.mean(np.sum((pa - pb) ** 2, axis=1)))


def mse_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise trajectory MSE between (n, T, d) and (m, T, d) sets (Gram expansion)."""
    n, T = A.shape[0], A.shape[1]
    a = A.reshape(n, -1)
    b = B.reshape(B.shape[0], -1)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(sq, 0.0) / T


def exact_mse_rows(A: np.ndarray, B: np.ndarray, pairs_a: np.ndarray, pairs_b: np.ndarray) -> np.ndarray:
    diff = A[pairs_a] - B[pairs_b]
    return (diff * diff).sum(axis=2).mean(axis=1)


# -------------------------------------------------------------- dump format

DUMP_VERSION = 1


def dump_trajectories(path, buffers) -> None:
    """Line-delimited text: a header naming dim/length, then one record per entity."""
    buffers = list(buffers)
    if not buffers:
        raise TrajectoryError("nothing to dump")
    dim, length = buffers[0].dim, len(buffers[0])
    with open(path, "w") as fh:
        fh.write(f"#trajectories version={DUMP_VERSION} dim={dim} length={length}\n")
        for b in buffers:
            if b.dim != dim or len(b) != length:
                raise TrajectoryError("all dumped trajectories must share dim and length")
            kind, ident = b.entity
            ident_s = f"{ident[0]}>{ident[1]}" if kind == "edge" else str(ident)
            eps = ",".join(str(int(e)) for e in b.epochs)
            vals = " ".join(repr(float(x)) for x in b.points.ravel())
            fh.write(f"{kind} {ident_s} {b.layer} {eps} {vals}\n")


def load_trajectories(path) -> list[TrajectoryBuffer]:
    with open(path) as fh:
        header = fh.readline().split()
        if not header or header[0] != "#trajectories":
            raise TrajectoryError("missing trajectory header")
        meta = dict(tok.split("=", 1) for tok in header[1:])
        if int(meta["version"]) != DUMP_VERSION:
            raise TrajectoryError(f"unsupported version {meta['version']}")
        dim, length = int(meta["dim"]), int(meta["length"])
        out = []
        for lineno, line in enumerate(fh, start=2):
            toks = line.split()
            if not toks:
                continue
            if len(toks) != 4 + dim * length:
                raise TrajectoryError(f"line {lineno}: expected {dim * length} values")
            kind, ident_s, layer, eps = toks[:4]
            ident = tuple(int(x) for x in ident_s.split(">")) if kind == "edge" else int(ident_s)
            pts = np.array([float(x) for x in toks[4:]]).reshape(length, dim)
            out.append(TrajectoryBuffer((kind, ident), int(layer), pts, [int(e) for e in eps.split(",")]))
        return out
