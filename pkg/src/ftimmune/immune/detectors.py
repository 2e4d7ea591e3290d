"""Negative selection over normalized trajectories and the detection rule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..trajectory import NormalizedTrajectory, exact_mse_rows, mse_matrix


class DetectorError(ValueError):
    pass


class DetectorFormatError(DetectorError):
    pass


FORMAT_VERSION = 1


def _stack(trajs) -> np.ndarray:
    if isinstance(trajs, np.ndarray):
        return np.asarray(trajs, dtype=float)
    items = list(trajs)
    if not items:
        return np.zeros((0, 0, 0))
    return np.stack([t.points if hasattr(t, "points") else np.asarray(t, dtype=float) for t in items])


@dataclass
class DetectorSet:
    detectors: np.ndarray          # (n, length, dim)
    rho: float
    layer: int
    length: int
    dim: int
    entity: str = "node"
    scale: float = 1.0             # normalization scale of the screening set
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.detectors = np.asarray(self.detectors, dtype=float).reshape(-1, self.length, self.dim)

    def __len__(self):
        return len(self.detectors)

    def trajectories(self) -> list[NormalizedTrajectory]:
        return [NormalizedTrajectory(p) for p in self.detectors]

    def check_compatible(self, layer: int, length: int, dim: int) -> None:
        if (self.layer, self.length, self.dim) != (layer, length, dim):
            raise DetectorError(
                f"detector set has layer={self.layer} length={self.length} dim={self.dim}; "
                f"expected layer={layer} length={length} dim={dim}")


def min_mse(A: np.ndarray, B: np.ndarray, chunk: int = 2048, tol: float = 1e-9) -> np.ndarray:
    """Exact minimum trajectory MSE from each row of A to the set B.

    A Gram-expansion pass finds every candidate within ``tol`` (relative) of
    each row's approximate minimum; those candidates are re-scored with
    direct differences, so ties and threshold comparisons are exact.
    """
    if len(B) == 0:
        return np.full(len(A), np.inf)
    out = np.empty(len(A))
    for s in range(0, len(A), chunk):
        a = A[s:s + chunk]
        approx = mse_matrix(a, B)
        lo = approx.min(axis=1)
        slack = tol * (1.0 + lo) + 1e-12
        rows, cols = np.nonzero(approx <= (lo + slack)[:, None])
        exact = exact_mse_rows(a, B, rows, cols)
        best = np.full(len(a), np.inf)
        np.minimum.at(best, rows, exact)
        out[s:s + chunk] = best
    return out


def screen(feasible: np.ndarray, reliable: np.ndarray, rho: float, chunk: int = 2048,
           tol: float = 1e-9) -> np.ndarray:
    """Boolean mask over ``feasible``: minimum MSE to ``reliable`` strictly above ``rho``."""
    keep = np.empty(len(feasible), dtype=bool)
    for s in range(0, len(feasible), chunk):
        f = feasible[s:s + chunk]
        approx = mse_matrix(f, reliable)
        # only pairs near the threshold need an exact recheck
        near = np.abs(approx - rho) <= tol * (1.0 + rho) + 1e-12
        below = approx <= rho
        rows, cols = np.nonzero(near)
        if len(rows):
            exact = exact_mse_rows(f, reliable, rows, cols)
            below[rows, cols] = exact <= rho
        keep[s:s + chunk] = ~below.any(axis=1)
    return keep


def produce_detectors(feasible, reliable, rho: float, layer: int = 0, entity: str = "node",
                      scale: float = 1.0, provenance: dict | None = None) -> DetectorSet:
    """Negative selection: keep feasible trajectories farther than ``rho`` from every reliable one."""
    R = _stack(reliable)
    if len(R) == 0:
        raise DetectorError("negative selection needs at least one reliable trajectory")
    F = _stack(feasible)
    length, dim = R.shape[1], R.shape[2]
    if len(F) and F.shape[1:] != R.shape[1:]:
        raise DetectorError(f"feasible shape {F.shape[1:]} != reliable shape {R.shape[1:]}")
    keep = screen(F, R, rho) if len(F) else np.zeros(0, dtype=bool)
    return DetectorSet(F[keep] if len(F) else np.zeros((0, length, dim)), float(rho), layer, length, dim,
                       entity, float(scale), dict(provenance or {}))


def detect_many(probes: np.ndarray, detectors: DetectorSet, rule: str = "min"):
    """Vectorised detection: returns (abnormal mask, scores)."""
    P = _stack(probes)
    n = len(P)
    if len(detectors) == 0:
        return np.zeros(n, dtype=bool), np.full(n, np.inf)
    if n == 0:
        return np.zeros(0, dtype=bool), np.zeros(0)
    if P.shape[1:] != detectors.detectors.shape[1:]:
        raise DetectorError(f"probe shape {P.shape[1:]} != detector shape {detectors.detectors.shape[1:]}")
    if rule == "min":
        score = min_mse(P, detectors.detectors)
    elif rule == "mean":
        score = np.concatenate([mse_matrix(P[s:s + 2048], detectors.detectors).mean(axis=1)
                                for s in range(0, n, 2048)])
    else:
        raise DetectorError(f"unknown detection rule {rule!r}")
    return score <= detectors.rho, score


def detect_abnormal(probe, detectors: DetectorSet, rule: str = "min") -> tuple[str, float]:
    pts = probe.points if hasattr(probe, "points") else np.asarray(probe, dtype=float)
    abn, score = detect_many(pts[None], detectors, rule)
    return ("abnormal" if abn[0] else "normal"), float(score[0])


def calibrate_rho(reliable: np.ndarray, percentile: float = 1.0) -> float:
    """Percentile of pairwise (distinct) reliable-reliable MSEs."""
    R = _stack(reliable)
    if len(R) < 2:
        raise DetectorError("need at least two reliable trajectories to calibrate rho")
    M = mse_matrix(R, R)
    iu = np.triu_indices(len(R), k=1)
    vals = M[iu]
    rho = float(np.percentile(vals, percentile))
    if rho <= 0:
        pos = vals[vals > 0]
        rho = float(pos.min()) if len(pos) else 1e-12
    return rho


def calibrate_rho_feasible(feasible, reliable, percentile: float = 95.0) -> float:
    """Percentile of the feasible set's minimum MSE to the reliable set.

    Screening at this threshold keeps roughly ``100 - percentile`` percent of
    the feasible trajectories, the ones farthest from normal behaviour.
    """
    F, R = _stack(feasible), _stack(reliable)
    if len(F) == 0 or len(R) == 0:
        raise DetectorError("need feasible and reliable trajectories to calibrate rho")
    d = min_mse(F, R)
    d = d[np.isfinite(d)]
    rho = float(np.percentile(d, percentile)) if len(d) else 0.0
    if rho <= 0:
        pos = d[d > 0]
        rho = float(pos.min()) if len(pos) else 1e-12
    return rho


def unique_trajectories(R: np.ndarray, decimals: int = 12) -> np.ndarray:
    """Drop exact duplicates (first occurrence kept, order preserved).

    Symmetric probes such as the GCN pair probe give identical trajectories
    for both directions of an edge.
    """
    R = np.asarray(R, dtype=float)
    if len(R) < 2:
        return R
    _, idx = np.unique(np.round(R.reshape(len(R), -1), decimals), axis=0, return_index=True)
    return R[np.sort(idx)]


# ---------------------------------------------------------------- text format

def export_detectors(ds: DetectorSet, path) -> None:
    """Versioned text: ``key=value`` header lines, then one detector per line."""
    prov = ds.provenance
    with open(path, "w") as fh:
        fh.write(f"#detectors version={FORMAT_VERSION}\n")
        fh.write(f"#arch={prov.get('arch', 'unknown')} layer={ds.layer} length={ds.length} dim={ds.dim} "
                 f"entity={ds.entity}\n")
        fh.write(f"#rho={ds.rho!r} scale={ds.scale!r} eta={prov.get('eta', float('nan'))!r} "
                 f"count={len(ds)}\n")
        fh.write(f"#tag={prov.get('tag', '')} epoch={prov.get('epoch', -1)}\n")
        for d in ds.detectors:
            fh.write(" ".join(repr(float(x)) for x in d.ravel()) + "\n")


def _header(line: str, path, lineno: int) -> dict:
    if not line.startswith("#"):
        raise DetectorFormatError(f"{path}:{lineno}: expected a header line")
    out = {}
    for tok in line[1:].split():
        if "=" not in tok:
            raise DetectorFormatError(f"{path}:{lineno}: malformed header token {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def import_detectors(path, expect: tuple | None = None) -> DetectorSet:
    """Read an exported set; ``expect=(layer, length, dim)`` rejects incompatible sets."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if len(lines) < 4:
        raise DetectorFormatError(f"{path}: truncated header")
    first = lines[0].split()
    if not first or first[0] != "#detectors":
        raise DetectorFormatError(f"{path}:1: not a detector file")
    meta = _header("#" + " ".join(first[1:]), path, 1)
    for i in range(1, 4):
        meta.update(_header(lines[i], path, i + 1))
    try:
        version = int(meta["version"])
    except (KeyError, ValueError):
        raise DetectorFormatError(f"{path}: missing format version") from None
    if version != FORMAT_VERSION:
        raise DetectorFormatError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    try:
        layer, length, dim = int(meta["layer"]), int(meta["length"]), int(meta["dim"])
        count = int(meta["count"])
        rho, scale = float(meta["rho"]), float(meta["scale"])
        eta = float(meta["eta"])
    except (KeyError, ValueError) as exc:
        raise DetectorFormatError(f"{path}: bad header field ({exc})") from None
    if expect is not None:
        e_layer, e_length, e_dim = expect
        if dim != e_dim:
            raise DetectorError(f"{path}: detector dim {dim} does not match run dim {e_dim}")
        if length != e_length:
            raise DetectorError(f"{path}: detector length {length} does not match run length {e_length}")
        if layer != e_layer:
            raise DetectorError(f"{path}: detector layer {layer} does not match run layer {e_layer}")
    rows = []
    for lineno, line in enumerate(lines[4:], start=5):
        if not line.strip():
            continue
        try:
            vals = [float(x) for x in line.split()]
        except ValueError:
            raise DetectorFormatError(f"{path}:{lineno}: non-numeric detector value") from None
        if len(vals) != length * dim:
            raise DetectorError(f"{path}:{lineno}: expected {length * dim} values (length {length} x dim {dim}), "
                                f"found {len(vals)}")
        rows.append(vals)
    if len(rows) != count:
        raise DetectorFormatError(f"{path}: header promises {count} detectors, found {len(rows)}")
    prov = {"arch": meta.get("arch"), "eta": eta, "tag": meta.get("tag", ""), "epoch": int(meta.get("epoch", -1))}
    arr = np.array(rows, dtype=float).reshape(-1, length, dim) if rows else np.zeros((0, length, dim))
    return DetectorSet(arr, rho, layer, length, dim, meta.get("entity", "node"), scale, prov)
