"""Inserted/deleted edge classification and graph rectification."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..graph import GraphData, canonical
from ..models import ModelState, rollback

log = logging.getLogger(__name__)


class RectifyError(ValueError):
    pass


@dataclass
class EdgeVerdict:
    edge: tuple
    verdict: str                      # "inserted" | "deleted" | "clean"
    evidence: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.verdict not in ("inserted", "deleted", "clean"):
            raise ValueError(f"unknown verdict {self.verdict!r}")
        self.edge = canonical(*self.edge)


def classify_inserted(g: GraphData, node_verdicts: dict, edge_verdicts: dict) -> list[EdgeVerdict]:
    """Flag edges whose trajectory is abnormal at an abnormal endpoint.

    ``node_verdicts`` maps node -> (is_abnormal, score). ``edge_verdicts``
    maps a directed pair ``(i, k)`` (the trajectory of edge (i, k) seen from
    node ``i``) -> (is_abnormal, score). Each existing edge is flagged at
    most once, with evidence from every abnormal endpoint that implicated it.
    """
    flagged: dict = {}
    for i in sorted(n for n, (abn, _) in node_verdicts.items() if abn):
        for (a, k), (abn, score) in _incident(edge_verdicts, i):
            if not abn or not g.has_edge(a, k):
                continue
            e = canonical(a, k)
            v = flagged.get(e)
            if v is None:
                v = flagged[e] = EdgeVerdict(e, "inserted", {"abnormal_nodes": [], "edge_scores": {},
                                                              "node_scores": {}})
            v.evidence["abnormal_nodes"].append(int(i))
            v.evidence["node_scores"][int(i)] = float(node_verdicts[i][1])
            v.evidence["edge_scores"][f"{a}>{k}"] = float(score)
    return [flagged[e] for e in sorted(flagged)]


def _incident(edge_verdicts: dict, i: int):
    index = getattr(edge_verdicts, "_by_node", None)
    if index is None:
        return [(p, v) for p, v in edge_verdicts.items() if p[0] == i]
    return [(p, edge_verdicts[p]) for p in index.get(i, [])]


class EdgeVerdictTable(dict):
    """dict of directed pair -> verdict with a per-node index."""

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self._by_node: dict = {}
        for p in self:
            self._by_node.setdefault(p[0], []).append(p)

    def __setitem__(self, key, value):
        if key not in self:
            self._by_node.setdefault(key[0], []).append(key)
        super().__setitem__(key, value)


def deletion_candidates(g: GraphData, node: int, limit: int, features: np.ndarray | None = None,
                        exclude=()) -> list[tuple]:
    """Non-edges within two hops of ``node``, most feature-similar first."""
    if limit <= 0:
        return []
    nbrs = g.neighbors()
    one = set(nbrs[node])
    two = set()
    for u in one:
        two.update(nbrs[u])
    two -= one
    two.discard(node)
    excl = {canonical(*e) for e in exclude}
    cands = [o for o in sorted(two) if canonical(node, o) not in excl]
    if not cands:
        return []
    X = g.features if features is None else features
    x = X[node]
    Y = X[cands]
    denom = np.linalg.norm(Y, axis=1) * np.linalg.norm(x)
    cos = np.divide(Y @ x, denom, out=np.zeros(len(cands)), where=denom > 0)
    order = np.argsort(-cos, kind="stable")
    return [(int(node), int(cands[k])) for k in order[:limit]]


def classify_deleted(g: GraphData, node: int, candidate_edges, probe_budget: int,
                     prober: Callable) -> EdgeVerdict | None:
    """Probe candidate restorations until one makes ``node`` look normal.

    ``prober((node, o))`` tentatively adds the edge, trains a few probe
    epochs on a copy of the model and returns ``(edge_normal, node_normal,
    evidence)``. Nothing it does persists, so failed candidates leave the
    graph and weights untouched.
    """
    candidate_edges = list(candidate_edges)
    for k, (i, o) in enumerate(candidate_edges):
        if k >= probe_budget:
            break
        if g.has_edge(i, o):
            continue
        edge_ok, node_ok, evidence = prober((i, o))
        if edge_ok and node_ok:
            ev = dict(evidence)
            ev.update({"abnormal_nodes": [int(node)], "probes": k + 1})
            return EdgeVerdict((i, o), "deleted", ev)
    log.debug("node %d unresolved after %d probes", node, min(probe_budget, len(candidate_edges)))
    return None


def check_verdicts(g: GraphData, verdicts) -> tuple[set, set]:
    ins, dele = set(), set()
    for v in verdicts:
        if v.verdict == "inserted":
            if not g.has_edge(*v.edge):
                raise RectifyError(f"edge {v.edge} flagged inserted but absent from the graph")
            ins.add(v.edge)
        elif v.verdict == "deleted":
            if g.has_edge(*v.edge):
                raise RectifyError(f"edge {v.edge} flagged deleted but present in the graph")
            dele.add(v.edge)
    both = ins & dele
    clean = {v.edge for v in verdicts if v.verdict == "clean"}
    if both or (clean & (ins | dele)):
        raise RectifyError(f"contradictory verdicts on {sorted(both | (clean & (ins | dele)))[:5]}")
    return ins, dele


def hop_neighbourhood(g: GraphData, seeds, hops: int) -> set:
    nbrs = g.neighbors()
    seen = set(int(s) for s in seeds)
    frontier = set(seen)
    for _ in range(hops):
        nxt = set()
        for u in frontier:
            nxt.update(nbrs[u])
        frontier = nxt - seen
        seen |= frontier
    return seen


def rectify(g: GraphData, verdicts, state: ModelState, delta: int, monitor=None):
    """Remove inserted edges, restore deleted ones and roll the weights back ``delta`` epochs.

    With a trajectory ``monitor`` the records from the restored epoch on are
    dropped, the monitor switches to the rectified graph and nodes whose
    receptive field changed restart their history.
    """
    ins, dele = check_verdicts(g, verdicts)
    if not ins and not dele:
        return g, state
    g2 = g.with_edges((g.edges - ins) | dele)
    state = rollback(state, delta)
    if monitor is not None:
        monitor.truncate_from(state.epoch)
        touched = {u for e in ins | dele for u in e}
        hops = monitor.layer
        affected = hop_neighbourhood(g, touched, hops) | hop_neighbourhood(g2, touched, hops)
        monitor.set_graph(g2)
        monitor.reset_nodes(sorted(affected), state.epoch)
    return g2, state
