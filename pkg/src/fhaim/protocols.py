"""Encrypted compute / select / measure over column-packed one-hot data.

All functions take an :class:`~fhaim.he.Evaluator` (the compute side's view of
the engine) and never touch slot values directly. Decryption is delegated to a
``decryptor`` callable ``(ciphertext, purpose) -> ndarray`` so the caller
decides who holds the decrypt capability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .encoding import DatasetSchema, EncryptedColumns
from .he import Ciphertext, Evaluator, KeyContext
from .privacy import INF, EncryptedNoiseStream

Decryptor = Callable[[Ciphertext, str], np.ndarray]

# |x| ~ p(x) on [-1, 1], even powers 0..10
ABS_POLY_COEFFS = (0.0556, 3.6049, -11.9929, 24.4175, -23.6236, 8.5577)
ABS_POLY_DEPTH = 4

L2SQ = "l2sq"
L1POLY = "l1poly"


@dataclass(frozen=True)
class Clique:
    attrs: tuple[int, ...]
    sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.attrs) not in (1, 2):
            raise ValueError("only 1- and 2-way cliques are supported")
        if len(set(self.attrs)) != len(self.attrs):
            raise ValueError("clique attributes must be distinct")
        if self.cells < 2:
            raise ValueError("clique must have at least 2 cells")

    @classmethod
    def of(cls, schema: DatasetSchema, attrs: Sequence[int]) -> "Clique":
        attrs = tuple(int(a) for a in attrs)
        for a in attrs:
            if not 0 <= a < schema.d:
                raise ValueError(f"attribute index {a} out of range")
        return cls(attrs, tuple(schema.sizes[a] for a in attrs))

    @property
    def cells(self) -> int:
        return math.prod(self.sizes)

    @property
    def degree(self) -> int:
        return len(self.attrs)

    def label(self, schema: DatasetSchema | None = None) -> str:
        if schema is None:
            return "+".join(map(str, self.attrs))
        return "+".join(schema.names[a] for a in self.attrs)


@dataclass(frozen=True)
class EncryptedMarginal:
    clique: Clique
    ct: Ciphertext

    @property
    def level(self) -> int:
        return self.ct.level


def selector(L: int, start: int = 0, stop: int = 1) -> np.ndarray:
    s = np.zeros(L)
    s[start:stop] = 1.0
    return s


def combine(ev: Evaluator, scalars: Sequence[Ciphertext]) -> Ciphertext:
    """Pack the slot-0 value of each input into consecutive slots.

    One mult_plain by the unit selector per input (one level), then a right
    shift by i, accumulated with adds.
    """
    L = ev.slot_count
    k = len(scalars)
    if k == 0:
        raise ValueError("combine needs at least one input")
    if k > L:
        raise ValueError(f"cannot combine {k} values into {L} slots")
    e0 = selector(L)
    acc = None
    for i, s in enumerate(scalars):
        t = ev.rotate(ev.mult_plain(s, e0), (L - i) % L)
        acc = t if acc is None else ev.add(acc, t)
    return acc


def _chunk_total(ev: Evaluator, chunks: Sequence[Ciphertext]) -> Ciphertext:
    acc = chunks[0]
    for c in chunks[1:]:
        acc = ev.add(acc, c)
    return ev.slot_sum(acc)


def comp_1way(ev: Evaluator, cols: EncryptedColumns, attr: int) -> EncryptedMarginal:
    clique = Clique.of(cols.schema, (attr,))
    _check_fits(clique, ev.slot_count)
    totals = [_chunk_total(ev, cols.column(attr, j)) for j in range(clique.sizes[0])]
    return EncryptedMarginal(clique, combine(ev, totals))


def comp_2way(ev: Evaluator, cols: EncryptedColumns, a1: int, a2: int) -> EncryptedMarginal:
    if a1 == a2:
        raise ValueError("a 2-way marginal needs two distinct attributes")
    clique = Clique.of(cols.schema, (a1, a2))
    _check_fits(clique, ev.slot_count)
    w1, w2 = clique.sizes
    totals = []
    for j in range(w1):
        left = cols.column(a1, j)
        for k in range(w2):
            right = cols.column(a2, k)
            prods = [ev.mult(x, y) for x, y in zip(left, right)]
            totals.append(_chunk_total(ev, prods))
    return EncryptedMarginal(clique, combine(ev, totals))


def comp_marginal(ev: Evaluator, cols: EncryptedColumns, clique: Clique) -> EncryptedMarginal:
    if clique.degree == 1:
        return comp_1way(ev, cols, clique.attrs[0])
    return comp_2way(ev, cols, *clique.attrs)


def comp_workload(ev: Evaluator, cols: EncryptedColumns, cliques: Sequence[Clique]) -> dict[Clique, EncryptedMarginal]:
    return {c: comp_marginal(ev, cols, c) for c in cliques}


def _check_fits(clique: Clique, L: int) -> None:
    if clique.cells > L:
        raise ValueError(f"clique with {clique.cells} cells does not fit in {L} slots")


# -- noise extraction --------------------------------------------------------


def extract_window(ev: Evaluator, stream: EncryptedNoiseStream, start: int, n: int) -> Ciphertext:
    """Ciphertext whose slots [0, n) hold samples start..start+n-1, zero elsewhere.

    Every piece is masked, so no unconsumed sample survives into the result.
    """
    L = ev.slot_count
    if n > L:
        raise ValueError("window longer than the slot count")
    acc = None
    pos = start
    while pos < start + n:
        chunk, off = stream.chunk_of(pos)
        take = min(L - off, start + n - pos)
        target = pos - start
        piece = ev.rotate(chunk, (off - target) % L)
        piece = ev.mult_plain(piece, selector(L, target, target + take))
        acc = piece if acc is None else ev.add(acc, piece)
        pos += take
    return acc.with_sources(stream.sources(start, n))


def extract_replicated(ev: Evaluator, stream: EncryptedNoiseStream, index: int) -> Ciphertext:
    """Ciphertext with sample ``index`` copied into every slot."""
    chunk, off = stream.chunk_of(index)
    one = ev.mult_plain(ev.rotate(chunk, off), selector(ev.slot_count))
    return ev.slot_sum(one).with_sources(stream.sources(index, 1))


# -- select ------------------------------------------------------------------


def abs_poly(x, alpha: float = 1.0):
    """alpha * p(x / alpha), p the even degree-10 fit of |x| on [-1, 1]."""
    y = (np.asarray(x, dtype=np.float64) / alpha) ** 2
    out = np.zeros_like(y)
    for c in reversed(ABS_POLY_COEFFS):
        out = out * y + c
    return alpha * out


def abs_poly_slope_max() -> float:
    """max |d/dx p(x)| over [-1, 1]; the per-unit change of alpha p(x/alpha)."""
    x = np.linspace(-1, 1, 200_001)
    y = x * x
    dp = np.zeros_like(x)
    for k, c in reversed(list(enumerate(ABS_POLY_COEFFS))):
        if k:
            dp = dp * y + 2 * k * c
    # dp above is sum 2k c_k y^(k-1); times x gives p'(x)
    return float(np.max(np.abs(dp * x)))


def _poly_ct(ev: Evaluator, diff: Ciphertext, alpha: float) -> Ciphertext:
    """alpha * p(diff / alpha) at depth 4 using the power basis of y = u^2."""
    c = ABS_POLY_COEFFS
    u = ev.mult_scalar(diff, 1.0 / alpha)
    y1 = ev.square(u)
    y2 = ev.square(y1)
    y3 = ev.mult(y1, y2)
    y4 = ev.square(y2)
    y5 = ev.mult(y4, y1)
    acc = ev.mult_scalar(y1, c[1])
    for coef, y in zip(c[2:], (y2, y3, y4, y5)):
        acc = ev.add(acc, ev.mult_scalar(y, coef))
    acc = ev.add_plain(acc, np.full(ev.slot_count, c[0]))
    return ev.mult_scalar(acc, alpha)


def score_ct(
    ev: Evaluator,
    marginal: EncryptedMarginal,
    estimate: np.ndarray,
    weight: float,
    bias: float,
    norm: str = L2SQ,
    alpha: float = 10000.0,
) -> Ciphertext:
    """Encrypted alpha_w * (distance(q, q_hat) - bias), replicated in every slot."""
    w = marginal.clique.cells
    estimate = np.asarray(estimate, dtype=np.float64)
    if estimate.shape != (w,):
        raise ValueError(f"estimate has shape {estimate.shape}, expected ({w},)")
    L = ev.slot_count
    # (Enc(q_hat) would need the encrypt capability; subtracting the public
    # estimate as a plaintext gives the same difference ciphertext.)
    diff = ev.add_plain(marginal.ct, -estimate)
    mask = selector(L, 0, w)
    if norm == L2SQ:
        dist = ev.square(ev.mult_plain(diff, mask))
    elif norm == L1POLY:
        dist = ev.mult_plain(_poly_ct(ev, diff, alpha), mask)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    total = ev.slot_sum(dist)
    return ev.mult_scalar(ev.add_plain(total, np.full(L, -bias)), weight)


def select(
    ev: Evaluator,
    candidates: Sequence[Clique],
    enc_marginals: Mapping[Clique, EncryptedMarginal],
    est_marginals: Mapping[Clique, np.ndarray],
    eps: float,
    delta_s: float,
    bias: Mapping[Clique, float],
    weight: Mapping[Clique, float],
    gumbel: EncryptedNoiseStream | None,
    decryptor: Decryptor,
    norm: str = L2SQ,
    alpha: float = 10000.0,
    batch_decrypt: bool = False,
) -> tuple[Clique, np.ndarray]:
    """Noisy-max selection; returns the chosen clique and the decrypted scores."""
    if not candidates:
        raise ValueError("no candidates")
    noisy = eps != INF
    if noisy:
        if gumbel is None:
            raise ValueError("a Gumbel buffer is required when eps is finite")
        start = gumbel.take(len(candidates), "select")
        beta = 2 * delta_s / eps
    cts = []
    for i, c in enumerate(candidates):
        s = score_ct(ev, enc_marginals[c], est_marginals[c], weight[c], bias[c], norm, alpha)
        if noisy:
            g = extract_replicated(ev, gumbel, start + i)
            s = ev.add(s, ev.mult_scalar(g, beta))
        cts.append(s)
    if batch_decrypt:
        packed = combine(ev, cts)
        scores = decryptor(packed, "select")[: len(cts)]
    else:
        scores = np.array([decryptor(s, "select")[0] for s in cts])
    return candidates[int(np.argmax(scores))], scores


def measure(
    ev: Evaluator,
    marginal: EncryptedMarginal,
    sigma: float,
    gauss: EncryptedNoiseStream | None,
    decryptor: Decryptor,
) -> np.ndarray:
    """Decrypted q + sigma * z, z the next unconsumed unit Gaussians."""
    w = marginal.clique.cells
    ct = marginal.ct
    if sigma > 0:
        if gauss is None:
            raise ValueError("a Gaussian buffer is required when sigma > 0")
        start = gauss.take(w, "measure")
        z = extract_window(ev, gauss, start, w)
        ct = ev.add(ct, ev.mult_scalar(z, sigma))
    return decryptor(ct, "measure")[:w]


def direct_decryptor(keys: KeyContext) -> Decryptor:
    """Decrypt without a gate; for tests and single-party use."""
    eng = keys.engine

    def dec(ct: Ciphertext, purpose: str = "") -> np.ndarray:
        return eng.decrypt(ct, keys.decrypt)

    return dec


def required_depth(norm: str = L2SQ, batch_decrypt: bool = False) -> int:
    """Levels a full run needs: 2 for a 2-way marginal plus the scoring depth."""
    score = 2 if norm == L2SQ else ABS_POLY_DEPTH + 1
    return 2 + score + (1 if batch_decrypt else 0)
