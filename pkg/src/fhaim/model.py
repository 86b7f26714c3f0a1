"""Full-joint maximum-likelihood style fitting of noisy marginals, and sampling.

The model is an explicit probability table over the whole domain, fitted by
entropic mirror descent (multiplicative updates on log P with an Armijo line
search). Marginals and gradients use chained reductions so that all 1- and
2-way marginals cost a handful of BLAS passes over the table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .encoding import Dataset, DatasetSchema

DEFAULT_CELL_CAP = 1_000_000
ZERO_SIGMA_WEIGHT = 1e6
CONVERGENCE_TOL = 1e-8


class CellCapError(ValueError):
    pass


@dataclass
class JointDistribution:
    schema: DatasetSchema
    probs: np.ndarray  # shape schema.sizes, schema attribute order

    def __post_init__(self):
        if self.probs.shape != self.schema.sizes:
            raise ValueError("probability table shape does not match the schema")

    @classmethod
    def uniform(cls, schema: DatasetSchema) -> "JointDistribution":
        return cls(schema, np.full(schema.sizes, 1.0 / schema.total_size))

    def marginal(self, attrs: Sequence[int], N: float = 1.0) -> np.ndarray:
        return marginal_of(self, attrs, N)

    def to_bytes(self) -> bytes:
        return self.probs.astype("<f8").tobytes()


def marginal_of(P: JointDistribution, attrs, N: float = 1.0) -> np.ndarray:
    """Marginal over ``attrs`` scaled to total mass N, row-major in ``attrs`` order."""
    attrs = tuple(getattr(attrs, "attrs", attrs))
    keep = set(attrs)
    drop = tuple(i for i in range(P.schema.d) if i not in keep)
    m = P.probs.sum(axis=drop)
    # remaining axes are in ascending index order
    order = sorted(attrs)
    m = np.transpose(m, [order.index(a) for a in attrs])
    return N * m.reshape(-1)


def sample(P: JointDistribution, n: int, rng) -> Dataset:
    if n < 1:
        raise ValueError("n >= 1 required")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    cdf = np.cumsum(P.probs.reshape(-1))
    cdf /= cdf[-1]
    flat = np.searchsorted(cdf, rng.random(n), side="right")
    flat = np.minimum(flat, cdf.size - 1)
    rows = np.stack(np.unravel_index(flat, P.schema.sizes), axis=1)
    return Dataset(P.schema, rows)


# -- chained marginal machinery ---------------------------------------------


def _all_marginals(S: np.ndarray, shape: tuple[int, ...]) -> dict:
    """Every 1- and 2-way marginal of a flat table with the given shape.

    Keys are sorted axis tuples; 2-way arrays are (shape[i], shape[j]).
    """
    d = len(shape)
    out = {}
    cur = S
    for i in range(d):
        U = cur
        for j in range(d - 1, i, -1):
            mid = math.prod(shape[i + 1:j])
            U3 = U.reshape(shape[i], mid, shape[j])
            out[(i, j)] = np.ones(mid) @ U3 if mid > 1 else U3[:, 0, :].copy()
            U = U.reshape(-1, shape[j]) @ np.ones(shape[j])
        out[(i,)] = U.reshape(shape[i])
        if i < d - 1:
            cur = np.ones(shape[i]) @ cur.reshape(shape[i], -1)
    return out


def _expand(shape: tuple[int, ...], grads: dict) -> np.ndarray:
    """Sum of per-clique arrays broadcast over the full table (flat)."""
    d = len(shape)
    K = None
    for i in range(d - 1, -1, -1):
        H = grads.get((i,))
        H = np.zeros(shape[i]) if H is None else H.reshape(shape[i])
        for j in range(i + 1, d):
            a = H.size // shape[i]
            g = grads.get((i, j))
            if g is None:
                H = np.broadcast_to(H.reshape(shape[i], a, 1), (shape[i], a, shape[j])).reshape(-1)
            else:
                Hn = np.empty((shape[i], a, shape[j]))
                np.add(H.reshape(shape[i], a, 1), g.reshape(shape[i], 1, shape[j]), out=Hn)
                H = Hn.reshape(-1)
        K = H if K is None else (H.reshape(shape[i], -1) + K.reshape(1, -1)).reshape(-1)
    return K


def _softmax(theta: np.ndarray) -> np.ndarray:
    p = np.exp(theta - theta.max())
    p /= p.sum()
    return p


@dataclass
class Measurement:
    attrs: tuple[int, ...]
    values: np.ndarray  # noisy counts, row-major over attrs
    sigma: float
    round: int = 0


class MirrorDescentFitter:
    """Keeps log P between rounds so each refit warm-starts.

    Internally axes are sorted by ascending domain size, which makes the
    chained reductions considerably cheaper on skewed schemas.
    """

    def __init__(self, schema: DatasetSchema, step: float = 1.0, cell_cap: int = DEFAULT_CELL_CAP, growth: float = 1.01):
        if schema.total_size > cell_cap:
            raise CellCapError(f"domain has {schema.total_size} cells, cap is {cell_cap}")
        self.schema = schema
        self.perm = sorted(range(schema.d), key=lambda a: (schema.sizes[a], a))
        self.pos = {a: k for k, a in enumerate(self.perm)}
        self.shape = tuple(schema.sizes[a] for a in self.perm)
        self.theta = np.zeros(math.prod(self.shape))
        self.step = step
        self.growth = growth
        self.history: list[float] = []
        self._marg_cache = None

    # clique in schema order <-> sorted internal axes
    def _key(self, attrs: Sequence[int]) -> tuple[tuple[int, ...], bool]:
        p = tuple(self.pos[a] for a in attrs)
        if len(p) == 2 and p[0] > p[1]:
            return (p[1], p[0]), True
        return p, False

    def _targets(self, measurements: Iterable[Measurement], N: float):
        """Per clique: inverse-variance pooled target frequency and total weight."""
        acc = {}
        for m in measurements:
            key, flip = self._key(m.attrs)
            sizes = [self.shape[k] for k in key]
            y = np.asarray(m.values, dtype=np.float64) / N
            if len(key) == 2:
                y = y.reshape(sizes[::-1]).T if flip else y.reshape(sizes)
            w = ZERO_SIGMA_WEIGHT if m.sigma <= 0 else 1.0 / (m.sigma * m.sigma)
            if key in acc:
                W, Y = acc[key]
                acc[key] = (W + w, Y + w * y)
            else:
                acc[key] = (w, w * y)
        if not acc:
            return {}
        top = max(W for W, _ in acc.values())
        return {k: (W / top, Y / W) for k, (W, Y) in acc.items()}

    def _loss_grad(self, p: np.ndarray, targets):
        margs = _all_marginals(p, self.shape)
        loss = 0.0
        grads = {}
        for k, (W, y) in targets.items():
            r = margs[k] - y
            loss += W * float(np.sum(r * r))
            grads[k] = 2 * W * r
        return loss, grads, margs

    def fit(self, measurements: Sequence[Measurement], N: float, iterations: int = 100) -> float:
        """Run up to ``iterations`` mirror-descent steps; returns the final loss."""
        targets = self._targets(measurements, N)
        p = _softmax(self.theta)
        if not targets:
            return 0.0
        loss, grads, margs = self._loss_grad(p, targets)
        self.history = [loss]
        alpha = self.step
        for _ in range(iterations):
            dL = _expand(self.shape, grads)
            prev_loss, prev_margs, prev_grads = loss, margs, grads
            accepted = False
            for _ in range(30):
                theta = self.theta - alpha * dL
                q = _softmax(theta)
                loss, grads, margs = self._loss_grad(q, targets)
                # <dL, p - q> expressed through clique marginals
                lin = sum(float(np.sum(g * (prev_margs[k] - margs[k]))) for k, g in prev_grads.items())
                if prev_loss - loss >= 0.5 * alpha * lin:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                loss, grads, margs = prev_loss, prev_grads, prev_margs
                break
            self.theta = theta
            alpha *= self.growth
            self.history.append(loss)
            if prev_loss - loss < CONVERGENCE_TOL:
                break
        self.step = alpha
        self._marg_cache = margs
        return loss

    def probs(self) -> np.ndarray:
        p = _softmax(self.theta).reshape(self.shape)
        inv = [self.perm.index(a) for a in range(self.schema.d)]
        return np.ascontiguousarray(np.transpose(p, inv))

    def distribution(self) -> JointDistribution:
        return JointDistribution(self.schema, self.probs())

    def marginals(self, cliques: Iterable[Sequence[int]], N: float) -> dict[tuple[int, ...], np.ndarray]:
        """Model marginals (mass N) in each clique's own attribute order."""
        margs = _all_marginals(_softmax(self.theta), self.shape)
        out = {}
        for attrs in cliques:
            attrs = tuple(attrs)
            key, flip = self._key(attrs)
            m = margs[key]
            if flip:
                m = m.T
            out[attrs] = N * np.ascontiguousarray(m).reshape(-1)
        return out


def fit(
    log: Sequence[Measurement],
    schema: DatasetSchema,
    N: float,
    iterations: int = 100,
    step: float = 1.0,
    warm_start: MirrorDescentFitter | None = None,
    cell_cap: int = DEFAULT_CELL_CAP,
) -> JointDistribution:
    fitter = warm_start or MirrorDescentFitter(schema, step, cell_cap)
    fitter.fit(log, N, iterations)
    return fitter.distribution()
