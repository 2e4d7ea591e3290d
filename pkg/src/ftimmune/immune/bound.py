"""Lower bound on inner products of consecutive direction vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..models import softmax


class BoundError(ValueError):
    pass


@dataclass
class GammaBound:
    lam: float
    epoch: int = 0
    layer: int = 0

    def __post_init__(self):
        if not np.isfinite(self.lam):
            raise BoundError(f"bound is not finite: {self.lam}")


def gamma_bound(Z: np.ndarray, W: np.ndarray, L, Y: np.ndarray, eta: float,
                O: np.ndarray | None = None, mask: np.ndarray | None = None,
                epoch: int = 0, layer: int = 0) -> GammaBound:
    """``eta^2 max_k ||(L Z Z^T L (O - Y))_k||^2`` with ``O = softmax(L Z W)``.

    ``Z`` is the input of the output layer and ``W`` its weight. Rows outside
    ``mask`` (unlabelled nodes) contribute no error term. Passing ``O``
    overrides the computed output; it must be row-stochastic.
    """
    Z = np.asarray(Z, dtype=float)
    Y = np.asarray(Y, dtype=float)
    LZ = L @ Z
    if O is None:
        O = softmax(np.asarray(LZ @ W))
    O = np.asarray(O, dtype=float)
    if O.shape != Y.shape:
        raise BoundError(f"output shape {O.shape} != label shape {Y.shape}")
    if np.any(O < -1e-12) or not np.allclose(O.sum(axis=1), 1.0, atol=1e-9):
        raise BoundError("output matrix must be row-stochastic")
    E = O - Y
    if mask is not None:
        E = E * np.asarray(mask, dtype=float)[:, None]
    if eta == 0 or not np.any(E):
        return GammaBound(0.0, epoch, layer)
    # evaluated right to left so every intermediate stays N x C
    M = np.asarray(L @ (Z @ (Z.T @ np.asarray(L @ E))))
    rows = np.einsum("ij,ij->i", M, M)
    return GammaBound(float(eta ** 2 * rows.max()), epoch, layer)


def consecutive_inner_products(positions: np.ndarray) -> np.ndarray:
    """(n, T) positions -> (n, T-2) inner products of consecutive directions."""
    d = np.diff(positions, axis=1)
    return np.einsum("ntd,ntd->nt", d[:, :-1], d[:, 1:])


def violation_rate(positions: np.ndarray, lam: float) -> float:
    """Fraction of consecutive-direction inner products falling below ``lam``."""
    g = consecutive_inner_products(positions)
    if g.size == 0:
        return float("nan")
    return float(np.mean(g < lam))
