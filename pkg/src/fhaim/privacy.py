"""zCDP accounting, score sensitivity and penalty, and the pre-sampled noise buffers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .he import Capability, Ciphertext

INF = math.inf

GAUSSIAN = "gaussian"
GUMBEL = "gumbel"

# Roughly private-pgm's AIM defaults: 10% of the budget for the one-way
# initialisation, then each round splits 90/10 between measure and select.
INIT_FRACTION = 0.1
MEASURE_FRACTION = 0.9


class BudgetError(RuntimeError):
    pass


class NoiseExhausted(RuntimeError):
    pass


def zcdp_from_eps_delta(eps: float, delta: float, tol: float = 1e-12) -> float:
    """Largest rho with rho + 2 sqrt(rho ln(1/delta)) <= eps, by bisection."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if eps == INF:
        return INF
    if not eps > 0:
        raise ValueError(f"epsilon must be positive, got {eps}")
    log_inv = math.log(1 / delta)

    def eps_of(rho):
        return rho + 2 * math.sqrt(rho * log_inv)

    lo, hi = 0.0, eps  # eps_of(eps) >= eps
    while hi - lo > tol * max(1.0, hi):
        mid = (lo + hi) / 2
        if eps_of(mid) <= eps:
            lo = mid
        else:
            hi = mid
    return lo


def eps_from_zcdp(rho: float, delta: float) -> float:
    return rho + 2 * math.sqrt(rho * math.log(1 / delta))


@dataclass
class PrivacyAccountant:
    """A fixed schedule of Gaussian and exponential-mechanism spends.

    For a non-private run (rho_total infinite) every sigma is 0 and every
    selection epsilon is infinite; nothing is spent.
    """

    rho_total: float
    d: int
    rounds: int
    rho_init: float  # per one-way measurement
    rho_measure: float  # per round
    rho_select: float  # per round
    eps_total: float = INF
    delta: float = 1e-9
    rho_spent: float = 0.0
    spends: list = field(default_factory=list)

    @property
    def private(self) -> bool:
        return self.rho_total != INF

    @property
    def sigma_init(self) -> float:
        return math.sqrt(1 / (2 * self.rho_init)) if self.private else 0.0

    @property
    def sigma_round(self) -> float:
        return math.sqrt(1 / (2 * self.rho_measure)) if self.private else 0.0

    @property
    def eps_select(self) -> float:
        return math.sqrt(8 * self.rho_select) if self.private else INF

    def schedule(self) -> list[tuple[float, float]]:
        """Per-round (sigma_t, eps_t)."""
        return [(self.sigma_round, self.eps_select)] * self.rounds

    def planned_total(self) -> float:
        if not self.private:
            return 0.0
        return self.d * self.rho_init + self.rounds * (self.rho_measure + self.rho_select)

    def _spend(self, kind: str, rho: float) -> None:
        if not self.private:
            self.spends.append((kind, 0.0))
            return
        # slack for float summation over a few hundred terms
        if self.rho_spent + rho > self.rho_total * (1 + 1e-9):
            raise BudgetError(f"{kind} would overspend: {self.rho_spent + rho} > {self.rho_total}")
        self.rho_spent += rho
        self.spends.append((kind, rho))

    def spend_init(self) -> float:
        self._spend("init", self.rho_init if self.private else 0.0)
        return self.sigma_init

    def spend_select(self) -> float:
        self._spend("select", self.rho_select if self.private else 0.0)
        return self.eps_select

    def spend_measure(self) -> float:
        self._spend("measure", self.rho_measure if self.private else 0.0)
        return self.sigma_round

    def to_dict(self) -> dict:
        def num(x):
            return None if x == INF else x

        return {
            "eps_total": num(self.eps_total),
            "delta": self.delta,
            "rho_total": num(self.rho_total),
            "rho_spent": self.rho_spent,
            "rounds": self.rounds,
            "d": self.d,
            "sigma_init": self.sigma_init,
            "sigma_round": self.sigma_round,
            "eps_select": num(self.eps_select),
            "spends": len(self.spends),
        }


def build_schedule(
    rho: float,
    d: int,
    schema=None,
    rounds: int | None = None,
    init_fraction: float = INIT_FRACTION,
    measure_fraction: float = MEASURE_FRACTION,
    eps: float = INF,
    delta: float = 1e-9,
) -> PrivacyAccountant:
    """Uniform schedule over ``rounds`` (default 16 d) selection rounds."""
    if schema is not None and schema.d != d:
        raise ValueError("d disagrees with the schema")
    max_rounds = 16 * d
    T = max_rounds if rounds is None else int(rounds)
    if not 1 <= T <= max_rounds:
        raise ValueError(f"rounds must lie in [1, {max_rounds}], got {T}")
    if rho == INF:
        return PrivacyAccountant(INF, d, T, INF, INF, INF, eps, delta)
    if not rho > 0:
        raise ValueError("rho must be positive")
    rho_init = init_fraction * rho / d
    per_round = (1 - init_fraction) * rho / T
    return PrivacyAccountant(
        rho, d, T, rho_init, measure_fraction * per_round, (1 - measure_fraction) * per_round, eps, delta
    )


def sensitivity(alphas: Iterable[float], N: int) -> float:
    """Global sensitivity max |alpha_w| (2N + 1) of the squared-L2 quality score."""
    if N < 1:
        raise ValueError("N >= 1 required")
    return max(abs(a) for a in alphas) * (2 * N + 1)


def penalty(sigma: float, cells: int) -> float:
    """Expected squared norm of the measurement noise, sigma^2 * cells."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return sigma * sigma * cells


def l1_penalty(sigma: float, cells: int) -> float:
    """Expected L1 norm of the measurement noise, sigma * cells * sqrt(2/pi)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return sigma * cells * math.sqrt(2 / math.pi)


def _cells(sizes: Sequence[int], clique: Sequence[int]) -> int:
    return math.prod(sizes[a] for a in clique)


def noise_budget(schema, workload, d: int | None = None, rounds: int | None = None) -> tuple[int, int]:
    """Gaussian and Gumbel sample counts that cover a full run.

    ``workload`` is anything iterable over attribute-index tuples, or an
    object with a ``cliques`` attribute of such tuples.
    """
    d = schema.d if d is None else d
    cliques = [tuple(getattr(c, "attrs", c)) for c in getattr(workload, "cliques", workload)]
    T = 16 * d if rounds is None else rounds
    sizes = schema.sizes
    n_gauss = sum(sizes) + T * max(_cells(sizes, c) for c in cliques)
    n_gumbel = T * len(cliques)
    return n_gauss, n_gumbel


def sample_unit_noise(n_gaussian: int, n_gumbel: int, seed) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    gauss = rng.standard_normal(n_gaussian)
    # U in the open interval (0, 1) so both logs are finite
    u = rng.random(n_gumbel)
    u = np.clip(u, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    gumbel = -np.log(-np.log(u))
    return gauss, gumbel


class _Stream:
    """Index bookkeeping shared by the encrypted and plaintext buffers."""

    def __init__(self, name: str, size: int):
        self.name = name
        self.size = size
        self.consumed = 0
        self.log: list[tuple[int, int, str]] = []  # (start, count, purpose)

    @property
    def remaining(self) -> int:
        return self.size - self.consumed

    def take(self, n: int, purpose: str = "") -> int:
        if n < 0:
            raise ValueError("negative sample count")
        if n > self.remaining:
            raise NoiseExhausted(f"{self.name} buffer exhausted: need {n}, {self.remaining} left")
        start = self.consumed
        self.consumed += n
        self.log.append((start, n, purpose))
        return start

    def consumed_indices(self) -> list[int]:
        return [i for s, n, _ in self.log for i in range(s, s + n)]


class EncryptedNoiseStream(_Stream):
    """Unit samples packed L per ciphertext."""

    def __init__(self, name: str, chunks: list[Ciphertext], size: int, slot_count: int):
        super().__init__(name, size)
        self.chunks = chunks
        self.slot_count = slot_count

    def chunk_of(self, index: int) -> tuple[Ciphertext, int]:
        return self.chunks[index // self.slot_count], index % self.slot_count

    def sources(self, start: int, n: int) -> list[tuple[str, int]]:
        return [(self.name, i) for i in range(start, start + n)]


class PlainNoiseStream(_Stream):
    def __init__(self, name: str, values: np.ndarray):
        super().__init__(name, len(values))
        self.values = np.asarray(values, dtype=np.float64)

    def read(self, n: int, purpose: str = "") -> np.ndarray:
        start = self.take(n, purpose)
        return self.values[start:start + n]


@dataclass
class NoiseBuffer:
    gaussian: _Stream
    gumbel: _Stream
    seed_id: str

    def manifest(self) -> dict:
        out = {"seed_id": self.seed_id}
        for s in (self.gaussian, self.gumbel):
            out[s.name] = {"size": s.size, "consumed": s.consumed}
            if isinstance(s, EncryptedNoiseStream):
                out[s.name]["chunks"] = len(s.chunks)
        return out

    def freshness_ok(self) -> bool:
        for s in (self.gaussian, self.gumbel):
            idx = s.consumed_indices()
            if len(idx) != len(set(idx)):
                return False
        return True


def encrypt_noise(gauss: np.ndarray, gumbel: np.ndarray, key: Capability, seed_id: str = "") -> NoiseBuffer:
    engine = key.engine
    L = engine.slot_count

    def pack(name, values):
        chunks = [engine.encrypt(values[i:i + L], key) for i in range(0, len(values), L)]
        return EncryptedNoiseStream(name, chunks, len(values), L)

    return NoiseBuffer(pack(GAUSSIAN, gauss), pack(GUMBEL, gumbel), seed_id)


def sample_and_encrypt_noise(n_gaussian: int, n_gumbel: int, rng_seed, key: Capability) -> NoiseBuffer:
    gauss, gumbel = sample_unit_noise(n_gaussian, n_gumbel, rng_seed)
    return encrypt_noise(gauss, gumbel, key, seed_id=str(rng_seed))


def plain_noise(gauss: np.ndarray, gumbel: np.ndarray, seed_id: str = "") -> NoiseBuffer:
    return NoiseBuffer(PlainNoiseStream(GAUSSIAN, gauss), PlainNoiseStream(GUMBEL, gumbel), seed_id)


def gumbel_max_oracle(scores, eps: float, delta_s: float, rng=None, gumbel=None) -> int:
    """Report-noisy-max with Gumbel noise of scale 2 delta_s / eps.

    Pass ``gumbel`` (unit samples, one per score) to reuse shared noise.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if eps == INF:
        return int(np.argmax(scores))
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    if gumbel is None:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        gumbel = rng.gumbel(size=scores.shape)
    beta = 2 * delta_s / eps
    return int(np.argmax(scores + beta * np.asarray(gumbel)))


def exponential_mechanism_probs(scores, eps: float, delta_s: float) -> np.ndarray:
    z = eps * np.asarray(scores, dtype=np.float64) / (2 * delta_s)
    z -= z.max()
    p = np.exp(z)
    return p / p.sum()
