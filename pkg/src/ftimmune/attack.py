"""Structure-poisoning attacks used to produce ground-truth perturbations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Edge, GraphData, canonical
from .models import ConfigError, ModelArch, ModelState, TrainConfig, forward, sigmoid, softmax, train


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationSet:
    inserted: frozenset = field(default_factory=frozenset)
    deleted: frozenset = field(default_factory=frozenset)
    rate: float = 0.0
    seed: int = 0
    order: tuple = ()

    def __len__(self):
        return len(self.inserted) + len(self.deleted)

    def apply(self, g: GraphData) -> GraphData:
        if self.inserted & g.edges:
            raise AttackError("inserted edges already present")
        if not self.deleted <= g.edges:
            raise AttackError("deleted edges missing from graph")
        return g.with_edges((g.edges - self.deleted) | self.inserted)

    def revert(self, g: GraphData) -> GraphData:
        return g.with_edges((g.edges - self.inserted) | self.deleted)

    def to_text(self) -> str:
        lines = [f"# rate {self.rate!r} seed {self.seed}"]
        flips = self.order or tuple(
            [("+", e) for e in sorted(self.inserted)] + [("-", e) for e in sorted(self.deleted)])
        lines += [f"{op} {u} {v}" for op, (u, v) in flips]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PerturbationSet":
        ins, dele, order = set(), set(), []
        rate, seed = 0.0, 0
        for lineno, line in enumerate(text.splitlines(), start=1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                toks = s[1:].split()
                if len(toks) == 4 and toks[0] == "rate" and toks[2] == "seed":
                    rate, seed = float(toks[1]), int(toks[3])
                continue
            toks = s.split()
            if len(toks) != 3 or toks[0] not in ("+", "-", "−"):
                raise AttackError(f"line {lineno}: expected '+|- u v'")
            try:
                e = canonical(int(toks[1]), int(toks[2]))
            except ValueError:
                raise AttackError(f"line {lineno}: node ids must be integers") from None
            op = "+" if toks[0] == "+" else "-"
            (ins if op == "+" else dele).add(e)
            order.append((op, e))
        return cls(frozenset(ins), frozenset(dele), rate, seed, tuple(order))


def _budget(g: GraphData, rate: float) -> int:
    if not 0 <= rate <= 1:
        raise AttackError("perturbation rate must lie in [0, 1]")
    return int(round(rate * len(g.edges)))


def random_perturb(g: GraphData, rate: float, insert_fraction: float = 0.8, seed: int = 0):
    """Uniformly random insertions and deletions outside the reliable region."""
    budget = _budget(g, rate)
    n_ins = int(round(insert_fraction * budget))
    n_del = budget - n_ins
    rng = np.random.default_rng(seed)
    r = g.reliable_mask
    deletable = [e for e in g.sorted_edges() if not (r[e[0]] and r[e[1]])]
    if n_del > len(deletable):
        raise AttackError(f"cannot delete {n_del} edges; only {len(deletable)} eligible")
    n = g.num_nodes
    n_free = n * (n - 1) // 2 - len(g.edges) - _reliable_nonedges(g)
    if n_ins > n_free:
        raise AttackError(f"cannot insert {n_ins} edges; only {n_free} eligible pairs")
    deleted = set()
    if n_del:
        idx = rng.choice(len(deletable), size=n_del, replace=False)
        deleted = {deletable[i] for i in idx}
    inserted = set()
    while len(inserted) < n_ins:
        u, v = rng.integers(0, n, size=2)
        if u == v:
            continue
        e = canonical(u, v)
        if e in g.edges or e in inserted or (r[u] and r[v]):
            continue
        inserted.add(e)
    ps = PerturbationSet(frozenset(inserted), frozenset(deleted), rate, seed)
    return ps.apply(g), ps


def _reliable_nonedges(g):
    k = int(g.reliable_mask.sum())
    return k * (k - 1) // 2 - len(g.reliable_edges())


class _DenseGCN:
    """Fixed-weight GCN on a dense adjacency, with cheap single-flip re-evaluation."""

    def __init__(self, g: GraphData, arch: ModelArch, params: dict, targets: np.ndarray, mask: np.ndarray):
        if arch.kind != "GCN" or arch.laplacian.value != "sym_normalized_with_self_loops":
            raise ConfigError("greedy_poison needs a GCN surrogate with the symmetric normalized operator")
        self.arch = arch
        self.W = [params[f"W{layer}"] for layer in range(1, arch.num_layers + 1)]
        self.acts = arch.activations
        self.X = g.features
        self.Y = targets
        self.mask = mask
        self.n_mask = max(int(mask.sum()), 1)
        n = g.num_nodes
        self.A = g.adjacency().toarray() + np.eye(n)
        self.refresh()

    def refresh(self):
        self.d = self.A.sum(axis=1)
        s = 1.0 / np.sqrt(self.d)
        self.L = self.A * s[:, None] * s[None, :]
        self.inputs, self.pre, self.post = [], [], []
        Z = self.X
        for layer, W in enumerate(self.W, start=1):
            ZW = Z @ W
            H = self.L @ ZW
            self.inputs.append(ZW)
            self.pre.append(H)
            Z = self._act(layer, H)
            self.post.append(Z)
        self.row_loss = -np.log(np.clip((self.post[-1] * self.Y).sum(axis=1), 1e-300, None)) * self.mask
        self.loss = float(self.row_loss.sum() / self.n_mask)

    def _act(self, layer, H):
        if layer == len(self.W):
            return softmax(H)
        return sigmoid(H) if self.acts[layer - 1] == "sigmoid" else np.maximum(H, 0.0)

    def flip_gradient(self) -> np.ndarray:
        """d loss / d A~ symmetrised: the first-order score of flipping each pair."""
        n_layers = len(self.W)
        G = np.zeros_like(self.L)
        dH = (self.post[-1] - self.Y) * self.mask[:, None] / self.n_mask
        for layer in range(n_layers, 0, -1):
            G += dH @ self.inputs[layer - 1].T
            if layer > 1:
                dZ = self.L.T @ dH @ self.W[layer - 1].T
                if self.acts[layer - 2] == "sigmoid":
                    s = self.post[layer - 2]
                    dH = dZ * s * (1 - s)
                else:
                    dH = dZ * (self.pre[layer - 2] > 0)
        GL = G * self.L
        s = -(GL.sum(axis=1) + GL.sum(axis=0)) / (2 * self.d)
        sq = 1.0 / np.sqrt(self.d)
        gA = G * sq[:, None] * sq[None, :] + s[:, None]
        return gA + gA.T

    def loss_after_flip(self, i: int, j: int) -> float:
        """Exact loss after toggling (i, j); only rows whose inputs change are recomputed."""
        A = self.A
        new = 1.0 - A[i, j]
        d = self.d.copy()
        d[i] += new - A[i, j]
        d[j] += new - A[i, j]
        sq = 1.0 / np.sqrt(d)
        # rows of the operator that change: i, j and their (self-looped) neighbours
        base_rows = np.union1d(np.flatnonzero(A[i]), np.flatnonzero(A[j]))
        changed = np.zeros(0, dtype=int)
        Z = None
        for layer, W in enumerate(self.W, start=1):
            ZW = self.inputs[layer - 1]
            target = base_rows
            if len(changed):
                ZW = ZW.copy()
                ZW[changed] = Z[changed] @ W
                target = np.union1d(base_rows, np.flatnonzero(A[changed].any(axis=0)))
            Arows = A[target].copy()
            Arows[target == i, j] = new
            Arows[target == j, i] = new
            H = (Arows * sq[target][:, None] * sq[None, :]) @ ZW
            Z = self.post[layer - 1].copy()
            Z[target] = self._act(layer, H)
            changed = target
        p = np.clip((Z[changed] * self.Y[changed]).sum(axis=1), 1e-300, None)
        new_rows = -np.log(p) * self.mask[changed]
        total = self.row_loss.sum() - self.row_loss[changed].sum() + new_rows.sum()
        return float(total / self.n_mask)

    def apply_flip(self, i, j):
        v = 1.0 - self.A[i, j]
        self.A[i, j] = self.A[j, i] = v
        self.refresh()


def greedy_poison(g: GraphData, surrogate_arch: ModelArch, budget: int, seed: int = 0,
                  train_cfg: TrainConfig | None = None, shortlist: int = 16,
                  loss_nodes: str = "train", state: ModelState | None = None,
                  retrain_every: int | None = None):
    """Greedy edge flips that maximise a trained surrogate's loss.

    Each step scores every admissible flip by the gradient of the loss with
    respect to the adjacency, re-evaluates the ``shortlist`` best candidates
    exactly, and applies the one with the largest true loss. Pairs inside the
    reliable region, pairs already flipped and deletions that would isolate a
    node are never chosen. ``loss_nodes="all"`` attacks the loss over every
    node, with the surrogate's predictions standing in for unknown labels;
    ``"train"`` restricts it to the labelled nodes. With ``retrain_every=k``
    the surrogate is retrained from scratch on the current poisoned graph
    after every k flips, so later flips target the model the victim will
    actually learn rather than the clean-graph one.
    """
    if budget < 0:
        raise AttackError("budget must be >= 0")
    if retrain_every is not None and retrain_every < 1:
        raise AttackError("retrain_every must be >= 1")
    n = g.num_nodes
    if budget == 0:
        return g, PerturbationSet(rate=0.0, seed=seed)
    cfg = train_cfg or TrainConfig(learning_rate=1.0, max_epochs=200, seed=seed)
    state = state or train(g, surrogate_arch, cfg)
    O = forward(g, state, surrogate_arch).output
    if loss_nodes == "all":
        targets = np.eye(g.num_classes)[O.argmax(axis=1)]
        targets[g.train_mask] = g.labels[g.train_mask]
        mask = np.ones(n, dtype=bool)
    elif loss_nodes == "train":
        targets, mask = g.labels.copy(), g.train_mask.copy()
    else:
        raise ConfigError("loss_nodes must be 'all' or 'train'")
    model = _DenseGCN(g, surrogate_arch, state.params, targets, mask)
    r = g.reliable_mask
    frozen = np.eye(n, dtype=bool) | (r[:, None] & r[None, :])
    iu = np.triu_indices(n, k=1)
    order = []
    for step in range(budget):
        if retrain_every and step and step % retrain_every == 0:
            gcur = g.with_edges(_flipped(g.edges, order))
            model = _DenseGCN(g, surrogate_arch, train(gcur, surrogate_arch, cfg).params, targets, mask)
            model.A = gcur.adjacency().toarray() + np.eye(n)
            model.refresh()
        grad = model.flip_gradient()
        present = model.A > 0
        score = np.where(present, -grad, grad)
        blocked = frozen.copy()
        deg = model.d - 1
        lonely = (deg <= 1)
        blocked |= present & (lonely[:, None] | lonely[None, :])
        for _, (u, v) in order:
            blocked[u, v] = blocked[v, u] = True
        score = np.where(blocked, -np.inf, score)
        flat = score[iu]
        k = min(shortlist, int(np.isfinite(flat).sum()))
        if k == 0:
            raise AttackError("no admissible flips left")
        cand = np.argpartition(-flat, k - 1)[:k]
        cand = cand[np.argsort(-flat[cand], kind="stable")]
        best, best_loss = None, -np.inf
        for c in cand:
            u, v = int(iu[0][c]), int(iu[1][c])
            val = model.loss_after_flip(u, v)
            if val > best_loss:
                best, best_loss = (u, v), val
        u, v = best
        op = "-" if model.A[u, v] > 0 else "+"
        model.apply_flip(u, v)
        order.append((op, (u, v)))
    ins = frozenset(e for op, e in order if op == "+")
    dele = frozenset(e for op, e in order if op == "-")
    rate = budget / max(len(g.edges), 1)
    ps = PerturbationSet(ins, dele, rate, seed, tuple(order))
    return ps.apply(g), ps


def _flipped(edges, order) -> set:
    out = set(edges)
    for _, e in order:
        out ^= {e}
    return out


def exhaustive_best_flip(g: GraphData, arch: ModelArch, params: dict, targets, mask) -> tuple[Edge, float]:
    """Brute-force reference: the single admissible flip with the largest loss."""
    model = _DenseGCN(g, arch, params, targets, mask)
    n = g.num_nodes
    r = g.reliable_mask
    best, best_loss = None, -np.inf
    for u in range(n):
        for v in range(u + 1, n):
            if r[u] and r[v]:
                continue
            present = model.A[u, v] > 0
            if present and (model.d[u] - 1 <= 1 or model.d[v] - 1 <= 1):
                continue
            A = model.A.copy()
            A[u, v] = A[v, u] = 1.0 - A[u, v]
            trial = _DenseGCN.__new__(_DenseGCN)
            trial.__dict__.update(model.__dict__)
            trial.A = A
            trial.refresh()
            if trial.loss > best_loss:
                best, best_loss = (u, v), trial.loss
    return best, best_loss
