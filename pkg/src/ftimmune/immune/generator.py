"""Cyclic direction generator and feasible trajectory synthesis.

The generator is a small residual MLP ``G(v) = v A + tanh(v B + b) C`` acting
on direction vectors expressed in units of the reliable pool's RMS norm. It
is fit to map each reliable direction to the next one, with a squared hinge
pulling ``G(v) . v`` above the bound on noise inputs. Feasible trajectories
are chains ``v, G(v), G(G(v)), ...`` integrated from the origin; chains whose
consecutive directions violate the bound are rejected at emission time, so
the bound holds for every emitted trajectory regardless of how well the loss
was minimised.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..trajectory import NormalizedTrajectory, normalize_array


class GeneratorError(RuntimeError):
    pass


class FeasibilityError(GeneratorError):
    """Too many chains violate the bound; the bound probably needs recalibration."""


@dataclass
class GeneratorConfig:
    hidden: int = 32
    steps: int = 300
    learning_rate: float = 0.01
    hinge_weight: float = 1.0
    noise_samples: int = 256
    mix_jitter: float = 1.0
    decay: float = 0.01           # pulls A toward I and B, C toward 0 off the data subspace


@dataclass
class Generator:
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    C: np.ndarray
    unit: float = 1.0            # RMS norm of the training pool (raw units per generator unit)
    lam: float = -np.inf         # bound in raw units
    satisfaction: float = float("nan")
    history: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def lam_units(self) -> float:
        return self.lam / self.unit ** 2

    def step_units(self, u: np.ndarray) -> np.ndarray:
        return u @ self.A + np.tanh(u @ self.B + self.b) @ self.C

    def __call__(self, v: np.ndarray) -> np.ndarray:
        """Apply G to raw-unit direction vectors."""
        v = np.asarray(v, dtype=float)
        return self.step_units(v / self.unit) * self.unit

    @classmethod
    def identity(cls, dim: int, hidden: int = 1, unit: float = 1.0, lam: float = -np.inf) -> "Generator":
        return cls(np.eye(dim), np.zeros((dim, hidden)), np.zeros(hidden), np.zeros((hidden, dim)), unit, lam)


def _satisfaction(gen: Generator, U: np.ndarray) -> float:
    if not np.isfinite(gen.lam_units):
        return 1.0
    s = np.einsum("nd,nd->n", gen.step_units(U), U)
    return float(np.mean(s >= gen.lam_units))


def noise_sample(rng, n: int, dim: int) -> np.ndarray:
    """Directions drawn uniformly from the unit sphere.

    Unit norm matters: short Gaussian draws could only meet the bound if G
    expanded them, which makes iterated chains blow up.
    """
    u = rng.standard_normal((n, dim))
    return u / np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)


def train_generator(reliable_dirs: np.ndarray, lam: float, seed: int = 0,
                    cfg: GeneratorConfig | None = None, dim: int | None = None) -> Generator:
    """Fit G on consecutive reliable directions under the bound ``lam``.

    ``reliable_dirs`` is an (n, S, d) array of direction sequences (S >= 2);
    an empty pool trains on noise alone (pure-noise mode) and only the hinge
    term is active. The returned generator reports its constraint
    satisfaction rate on a fresh noise sample of 1000 vectors.
    """
    cfg = cfg or GeneratorConfig()
    rng = np.random.default_rng(seed)
    D = np.asarray(reliable_dirs, dtype=float)
    if D.size == 0:
        if dim is None:
            raise GeneratorError("empty pool needs an explicit dim")
        d = dim
        X = Y = np.zeros((0, d))
        unit = 1.0
    else:
        if D.ndim != 3 or D.shape[1] < 2:
            raise GeneratorError("reliable_dirs must be (n, S>=2, d)")
        d = D.shape[2]
        unit = float(np.sqrt(np.mean(np.sum(D ** 2, axis=2))))
        if not np.isfinite(unit) or unit == 0:
            unit = 1.0
        X = D[:, :-1].reshape(-1, d) / unit
        Y = D[:, 1:].reshape(-1, d) / unit
    if np.isnan(lam):
        raise GeneratorError("bound is NaN")
    gen = Generator(np.eye(d), 0.1 * rng.standard_normal((d, cfg.hidden)) / np.sqrt(d),
                    np.zeros(cfg.hidden), np.zeros((cfg.hidden, d)), unit, float(lam))
    lam_u = gen.lam_units
    params = [gen.A, gen.B, gen.b, gen.C]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    for step in range(1, cfg.steps + 1):
        N = noise_sample(rng, cfg.noise_samples, d)
        grads = [np.zeros_like(p) for p in params]
        loss = 0.0
        if len(X):
            Hh = np.tanh(X @ gen.B + gen.b)
            R = X @ gen.A + Hh @ gen.C - Y
            loss += float(np.mean(np.sum(R ** 2, axis=1)))
            dOut = 2.0 * R / len(X)
            _accumulate(grads, gen, X, Hh, dOut)
        if np.isfinite(lam_u):
            Hn = np.tanh(N @ gen.B + gen.b)
            Gn = N @ gen.A + Hn @ gen.C
            gap = np.maximum(lam_u - np.einsum("nd,nd->n", Gn, N), 0.0)
            loss += cfg.hinge_weight * float(np.mean(gap ** 2))
            dOut = (-2.0 * cfg.hinge_weight / len(N)) * gap[:, None] * N
            _accumulate(grads, gen, N, Hn, dOut)
        if cfg.decay:
            grads[0] += cfg.decay * (gen.A - np.eye(d))
            grads[1] += cfg.decay * gen.B
            grads[3] += cfg.decay * gen.C
        if not np.isfinite(loss):
            raise GeneratorError(f"generator loss diverged at step {step} (seed {seed})")
        for k, (p, gr) in enumerate(zip(params, grads)):
            m[k] = b1 * m[k] + (1 - b1) * gr
            v[k] = b2 * v[k] + (1 - b2) * gr * gr
            mh = m[k] / (1 - b1 ** step)
            vh = v[k] / (1 - b2 ** step)
            p -= cfg.learning_rate * mh / (np.sqrt(vh) + eps)
        gen.history.append(loss)
    gen.satisfaction = _satisfaction(gen, noise_sample(np.random.default_rng(seed + 1), 1000, d))
    return gen


def _accumulate(grads, gen, X, Hh, dOut):
    grads[0] += X.T @ dOut
    grads[3] += Hh.T @ dOut
    dPre = (dOut @ gen.C.T) * (1 - Hh ** 2)
    grads[1] += X.T @ dPre
    grads[2] += dPre.sum(axis=0)


def sample_inits(pool: np.ndarray, count: int, rng, jitter: float = 0.05) -> np.ndarray:
    """Initial directions: random convex mixes of two pool directions plus jitter."""
    pool = np.atleast_2d(np.asarray(pool, dtype=float))
    a = pool[rng.integers(0, len(pool), size=count)]
    b = pool[rng.integers(0, len(pool), size=count)]
    w = rng.random((count, 1))
    mix = w * a + (1 - w) * b
    scale = np.linalg.norm(mix, axis=1, keepdims=True)
    return mix + jitter * scale * rng.standard_normal(mix.shape) / np.sqrt(pool.shape[1])


def generate_chains(generator: Generator, init, varrho: int, count: int, seed: int = 0,
                    max_attempts: int | None = None, jitter: float = 0.05) -> np.ndarray:
    """Raw-unit feasible trajectories as a (count, varrho, d) array.

    ``init`` is one direction vector or a pool of them; each chain starts
    from a jittered convex mix of pool entries (a single vector is jittered
    around itself). Chains with a consecutive-direction inner product below
    the bound are rejected.
    """
    if varrho < 2:
        raise GeneratorError("varrho must be >= 2")
    d = generator.dim
    if count == 0:
        return np.zeros((0, varrho, d))
    rng = np.random.default_rng(seed)
    pool = np.atleast_2d(np.asarray(init, dtype=float))
    if pool.shape[1] != d:
        raise GeneratorError(f"init dim {pool.shape[1]} != generator dim {d}")
    max_attempts = max_attempts or 100 * count
    out = []
    attempts = 0
    lam = generator.lam
    batch = max(count, 64)
    while len(out) < count and attempts < max_attempts:
        n = min(batch, max_attempts - attempts)
        v = sample_inits(pool, n, rng, jitter) if len(pool) > 1 or jitter > 0 else np.repeat(pool, n, 0)
        dirs = [v]
        for _ in range(varrho - 2):
            dirs.append(generator(dirs[-1]))
        dirs = np.stack(dirs, axis=1)
        ok = np.all(np.isfinite(dirs), axis=(1, 2))
        if varrho > 2 and np.isfinite(lam):
            ip = np.einsum("ntd,ntd->nt", dirs[:, :-1], dirs[:, 1:])
            ok &= np.all(ip >= lam, axis=1)
        attempts += n
        for k in np.flatnonzero(ok):
            out.append(dirs[k])
            if len(out) == count:
                break
    if len(out) < count:
        rate = 1 - len(out) / max(attempts, 1)
        raise FeasibilityError(
            f"rejected {rate:.1%} of {attempts} chains under bound {lam:.3g}; recalibrate the bound")
    dirs = np.stack(out)
    zero = np.zeros((count, 1, d))
    return np.concatenate([zero, np.cumsum(dirs, axis=1)], axis=1)


def generate_feasible_fts(generator: Generator, init, varrho: int, count: int, seed: int = 0,
                          scale: float | None = None, jitter: float = 0.05) -> list[NormalizedTrajectory]:
    """Feasible trajectories, normalized (with ``scale`` if given, else their own)."""
    P = generate_chains(generator, init, varrho, count, seed, jitter=jitter)
    if count == 0:
        return []
    Q, deg, s = normalize_array(P, scale)
    return [NormalizedTrajectory(Q[k], {"scale": s, "raw": P[k]}, bool(deg[k])) for k in range(count)]
