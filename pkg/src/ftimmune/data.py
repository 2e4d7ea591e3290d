"""Synthetic SBM graphs, plain-text graph files and reliable-region selection.

File formats
------------
edges     one ``u v`` pair per line; ``#`` starts a comment; duplicates and
          reversed pairs collapse to one undirected edge.
features  header ``N d`` then N rows of d reals.
labels    N integers, one per line.
split     optional; one ``node tag [reliable]`` line per node where tag is
          ``train``, ``val``, ``test`` or ``none``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .graph import GraphData, canonical


class ParseError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


@dataclass
class SbmSpec:
    blocks: list = field(default_factory=lambda: [250, 250])
    p_in: float = 0.03
    p_out: float = 0.003
    feature_dim: int = 16
    feature_noise: float = 1.0
    seed: int = 0
    train_fraction: float = 0.1
    val_fraction: float = 0.1

    def __post_init__(self):
        if not 0 <= self.p_out <= self.p_in <= 1:
            raise ValueError("need 0 <= p_out <= p_in <= 1")
        if self.feature_dim < len(self.blocks):
            raise ValueError("feature_dim must be at least the number of blocks")
        if any(b <= 0 for b in self.blocks):
            raise ValueError("block sizes must be positive")


@dataclass
class SplitSpec:
    train_fraction: float = 0.1
    val_fraction: float = 0.1
    seed: int = 0


def random_split(n: int, train_fraction: float, val_fraction: float, rng) -> tuple:
    perm = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    n_val = int(round(val_fraction * n))
    masks = [np.zeros(n, dtype=bool) for _ in range(3)]
    masks[0][perm[:n_train]] = True
    masks[1][perm[n_train:n_train + n_val]] = True
    masks[2][perm[n_train + n_val:]] = True
    return tuple(masks)


def sbm_generate(spec: SbmSpec) -> GraphData:
    rng = np.random.default_rng(spec.seed)
    blocks = np.repeat(np.arange(len(spec.blocks)), spec.blocks)
    n = len(blocks)
    iu, ju = np.triu_indices(n, k=1)
    same = blocks[iu] == blocks[ju]
    prob = np.where(same, spec.p_in, spec.p_out)
    keep = rng.random(len(iu)) < prob
    edges = frozenset(zip(iu[keep].tolist(), ju[keep].tolist()))
    labels = np.eye(len(spec.blocks))[blocks]
    feats = np.zeros((n, spec.feature_dim))
    feats[np.arange(n), blocks] = 1.0
    feats += spec.feature_noise * rng.standard_normal(feats.shape)
    train, val, test = random_split(n, spec.train_fraction, spec.val_fraction, rng)
    return GraphData(n, edges, feats, labels, train, val, test)


def split_reliable(g: GraphData, fraction: float = 0.1, seed: int = 0,
                   balanced: bool = True) -> GraphData:
    """Mark a connected region of about ``fraction * N`` nodes as reliable.

    The region is grown breadth-first from a seeded root inside a component
    large enough to hold it. With ``balanced`` the next node is taken from
    the whole frontier, preferring the label least represented so far (ties
    go to the shallowest, then earliest discovered node); plain BFS on a
    community graph otherwise tends to fill the region with one class.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    target = int(round(fraction * g.num_nodes))
    if target < 2:
        raise ValueError(f"reliable fraction {fraction} gives {target} node(s); need at least 2")
    rng = np.random.default_rng(seed)
    nbrs = g.neighbors()
    comp = _components(g.num_nodes, nbrs)
    sizes = np.bincount(comp)
    roots = np.flatnonzero(sizes[comp] >= target)
    if len(roots) == 0:
        raise ValueError(f"no connected component holds {target} nodes")
    root = int(rng.choice(roots))
    labels = g.label_ids
    counts = np.zeros(g.num_classes, dtype=int)
    counts[labels[root]] += 1
    depth = {root: 0}
    order = [root]
    frontier: dict = {}          # node -> (depth, discovery index)
    tick = 0

    def expand(u):
        nonlocal tick
        nb = list(nbrs[u])
        rng.shuffle(nb)
        for v in nb:
            if v not in depth and v not in frontier:
                frontier[v] = (depth[u] + 1, tick)
                tick += 1

    expand(root)
    while frontier and len(order) < target:
        if balanced:
            v = min(frontier, key=lambda n: (counts[labels[n]], frontier[n]))
        else:
            v = min(frontier, key=lambda n: frontier[n])
        depth[v] = frontier.pop(v)[0]
        counts[labels[v]] += 1
        order.append(v)
        expand(v)
    mask = np.zeros(g.num_nodes, dtype=bool)
    mask[order] = True
    return g.with_reliable(mask)


def _components(n, nbrs) -> np.ndarray:
    comp = -np.ones(n, dtype=int)
    c = 0
    for s in range(n):
        if comp[s] >= 0:
            continue
        comp[s] = c
        stack = [s]
        while stack:
            u = stack.pop()
            for v in nbrs[u]:
                if comp[v] < 0:
                    comp[v] = c
                    stack.append(v)
        c += 1
    return comp


def is_connected_region(g: GraphData, mask: np.ndarray) -> bool:
    nodes = np.flatnonzero(mask)
    if len(nodes) == 0:
        return False
    nbrs = g.neighbors()
    seen = {int(nodes[0])}
    stack = [int(nodes[0])]
    while stack:
        u = stack.pop()
        for v in nbrs[u]:
            if mask[v] and v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == len(nodes)


# ---------------------------------------------------------------- text files

def _lines(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ParseError(path, None, f"cannot read file ({exc.strerror})") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(path, None, f"not valid UTF-8 text (byte {exc.start})") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if body:
            yield lineno, body


def _int(tok, path, lineno, what):
    try:
        return int(tok)
    except ValueError:
        raise ParseError(path, lineno, f"{what} {tok!r} is not an integer") from None


def read_features(path) -> np.ndarray:
    it = _lines(path)
    try:
        lineno, header = next(it)
    except StopIteration:
        raise ParseError(path, None, "empty feature file") from None
    parts = header.split()
    if len(parts) != 2:
        raise ParseError(path, lineno, "header must be 'N d'")
    n = _int(parts[0], path, lineno, "N")
    d = _int(parts[1], path, lineno, "d")
    if n <= 0 or d <= 0:
        raise ParseError(path, lineno, "N and d must be positive")
    rows = []
    for lineno, body in it:
        toks = body.split()
        if len(toks) != d:
            raise ParseError(path, lineno, f"expected {d} values, found {len(toks)}")
        try:
            row = [float(t) for t in toks]
        except ValueError:
            raise ParseError(path, lineno, "non-numeric feature value") from None
        if not all(np.isfinite(row)):
            raise ParseError(path, lineno, "non-finite feature value")
        rows.append(row)
        if len(rows) > n:
            raise ParseError(path, lineno, f"more than {n} feature rows")
    if len(rows) != n:
        raise ParseError(path, None, f"expected {n} feature rows, found {len(rows)}")
    return np.array(rows, dtype=float).reshape(n, d)


def read_labels(path, n: int, num_classes: int | None = None) -> np.ndarray:
    ids = []
    for lineno, body in _lines(path):
        toks = body.split()
        if len(toks) != 1:
            raise ParseError(path, lineno, "expected one label per line")
        v = _int(toks[0], path, lineno, "label")
        if v < 0 or (num_classes is not None and v >= num_classes):
            bound = f"[0, {num_classes})" if num_classes is not None else ">= 0"
            raise ParseError(path, lineno, f"label {v} outside class range {bound}")
        ids.append(v)
    if len(ids) != n:
        raise ParseError(path, None, f"expected {n} labels, found {len(ids)}")
    k = num_classes if num_classes is not None else max(ids) + 1
    return np.eye(k)[np.array(ids, dtype=int)]


def read_edges(path, n: int) -> frozenset:
    edges = set()
    for lineno, body in _lines(path):
        toks = body.split()
        if len(toks) != 2:
            raise ParseError(path, lineno, "expected 'u v'")
        u = _int(toks[0], path, lineno, "node id")
        v = _int(toks[1], path, lineno, "node id")
        for x in (u, v):
            if not 0 <= x < n:
                raise ParseError(path, lineno, f"node id {x} out of range [0, {n})")
        if u == v:
            raise ParseError(path, lineno, f"self-loop on node {u}")
        edges.add(canonical(u, v))
    return frozenset(edges)


def read_split(path, n: int):
    tags = {"train": 0, "val": 1, "test": 2, "none": 3}
    masks = np.zeros((4, n), dtype=bool)
    reliable = np.zeros(n, dtype=bool)
    seen = np.zeros(n, dtype=bool)
    for lineno, body in _lines(path):
        toks = body.split()
        if len(toks) not in (2, 3):
            raise ParseError(path, lineno, "expected 'node tag [reliable]'")
        u = _int(toks[0], path, lineno, "node id")
        if not 0 <= u < n:
            raise ParseError(path, lineno, f"node id {u} out of range [0, {n})")
        if toks[1] not in tags:
            raise ParseError(path, lineno, f"unknown split tag {toks[1]!r}")
        if len(toks) == 3:
            if toks[2] != "reliable":
                raise ParseError(path, lineno, f"unexpected token {toks[2]!r}")
            reliable[u] = True
        if seen[u]:
            raise ParseError(path, lineno, f"node {u} listed twice")
        seen[u] = True
        masks[tags[toks[1]], u] = True
    return masks[0], masks[1], masks[2], reliable


def load_graph(edge_path, feature_path, label_path, split_spec=None,
               num_classes: int | None = None) -> GraphData:
    """Read the three text files; ``split_spec`` is a :class:`SplitSpec` or a split-file path."""
    feats = read_features(feature_path)
    n = feats.shape[0]
    labels = read_labels(label_path, n, num_classes)
    edges = read_edges(edge_path, n)
    if isinstance(split_spec, (str, os.PathLike)):
        train, val, test, reliable = read_split(split_spec, n)
    else:
        spec = split_spec or SplitSpec()
        rng = np.random.default_rng(spec.seed)
        train, val, test = random_split(n, spec.train_fraction, spec.val_fraction, rng)
        reliable = None
    return GraphData(n, edges, feats, labels, train, val, test, reliable)


def save_graph(g: GraphData, prefix) -> dict:
    """Write ``<prefix>.edges/.features/.labels/.split``; returns the paths."""
    prefix = str(prefix)
    paths = {k: f"{prefix}.{k}" for k in ("edges", "features", "labels", "split")}
    write_edges(paths["edges"], g.sorted_edges())
    with open(paths["features"], "w") as fh:
        n, d = g.features.shape
        fh.write(f"{n} {d}\n")
        for row in g.features:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")
    with open(paths["labels"], "w") as fh:
        fh.writelines(f"{int(c)}\n" for c in g.label_ids)
    with open(paths["split"], "w") as fh:
        for u in range(g.num_nodes):
            tag = "train" if g.train_mask[u] else "val" if g.val_mask[u] else "test" if g.test_mask[u] else "none"
            fh.write(f"{u} {tag}{' reliable' if g.reliable_mask[u] else ''}\n")
    return paths


def write_edges(path, edges) -> None:
    with open(path, "w") as fh:
        for u, v in edges:
            fh.write(f"{u} {v}\n")
