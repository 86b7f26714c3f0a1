"""The AIM select / measure / generate loop.

One loop drives both the encrypted pipeline and a plaintext reference. The
two differ only in the ``ops`` object that computes scores and noisy
measurements; with the same unit-noise arrays they consume identical samples
in identical order.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .encoding import Dataset, DatasetSchema
from .he import Evaluator, OpCounters
from .model import MirrorDescentFitter, Measurement, sample
from .privacy import (
    INF,
    NoiseBuffer,
    PlainNoiseStream,
    PrivacyAccountant,
    l1_penalty,
    penalty,
    sensitivity,
)
from .protocols import (
    L1POLY,
    L2SQ,
    Clique,
    Decryptor,
    EncryptedMarginal,
    abs_poly,
    abs_poly_slope_max,
    measure,
    select,
)

log = logging.getLogger(__name__)

PHASES = ("compute", "select", "measure")


@dataclass
class Workload:
    schema: DatasetSchema
    cliques: list[Clique]
    weights: dict[Clique, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.cliques:
            raise ValueError("empty workload")
        for c in self.cliques:
            self.weights.setdefault(c, 1.0)

    def alpha(self, w: Clique) -> float:
        """sum over workload cliques x of c_x * |w intersect x|."""
        s = set(w.attrs)
        return sum(self.weights[x] * len(s.intersection(x.attrs)) for x in self.cliques)

    def alphas(self) -> dict[Clique, float]:
        return {c: self.alpha(c) for c in self.cliques}

    def __len__(self) -> int:
        return len(self.cliques)


def build_workload(schema: DatasetSchema, slot_count: int = 8192) -> Workload:
    """All 1-way and 2-way cliques that fit in one ciphertext."""
    cliques = []
    for k in (1, 2):
        for attrs in itertools.combinations(range(schema.d), k):
            c = Clique.of(schema, attrs)
            if c.cells > slot_count:
                log.warning("dropping clique %s: %d cells exceed %d slots", c.label(schema), c.cells, slot_count)
                continue
            cliques.append(c)
    return Workload(schema, cliques)


@dataclass
class RunConfig:
    epsilon: float = INF
    delta: float = 1e-9
    norm: str = L2SQ
    backend: str = "exact"
    rounds: int | None = None
    seed: int = 0
    alpha: float = 10000.0
    candidate_policy: str = "all"
    fit_iterations: int = 100
    batch_decrypt: bool = False
    slot_count: int = 8192
    noise_per_op: float | None = None
    target: str | None = None

    def __post_init__(self):
        if self.norm not in (L2SQ, L1POLY):
            raise ValueError(f"unknown norm {self.norm!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.candidate_policy != "all":
            raise ValueError("only the 'all' candidate policy is implemented")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["epsilon"] = None if self.epsilon == INF else self.epsilon
        out["polynomial_abs"] = self.norm == L1POLY
        return out


def derive_seeds(seed: int) -> dict[str, int]:
    """Independent sub-seeds for the noise buffer, the engine and sampling."""
    kids = np.random.SeedSequence(seed).spawn(3)
    return {name: int(k.generate_state(1)[0]) for name, k in zip(("noise", "engine", "sample"), kids)}


@dataclass
class LogEntry:
    clique: Clique
    values: np.ndarray
    sigma: float
    round: int


@dataclass
class MeasurementLog:
    entries: list[LogEntry] = field(default_factory=list)

    def append(self, clique: Clique, values, sigma: float, round_: int) -> None:
        self.entries.append(LogEntry(clique, np.asarray(values, dtype=np.float64), float(sigma), round_))

    def measurements(self) -> list[Measurement]:
        return [Measurement(e.clique.attrs, e.values, e.sigma, e.round) for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> str:
        return json.dumps([
            {"clique": list(e.clique.attrs), "sigma": e.sigma, "round": e.round, "values": e.values.tolist()}
            for e in self.entries
        ])


def quality_score_l2(q_true, q_est, alpha_w: float, sigma: float) -> float:
    q_true = np.asarray(q_true, dtype=np.float64)
    q_est = np.asarray(q_est, dtype=np.float64)
    if q_true.shape != q_est.shape:
        raise ValueError("length mismatch")
    r = q_true - q_est
    return alpha_w * (float(np.sum(r * r)) - penalty(sigma, q_true.size))


def quality_score_l1(q_true, q_est, alpha_w: float, rho: float, alpha: float = 10000.0) -> float:
    q_true = np.asarray(q_true, dtype=np.float64)
    q_est = np.asarray(q_est, dtype=np.float64)
    if q_true.shape != q_est.shape:
        raise ValueError("length mismatch")
    return alpha_w * (float(np.sum(abs_poly(q_true - q_est, alpha))) - rho)


def score_sensitivity(norm: str, alphas, N: int) -> float:
    if norm == L2SQ:
        return sensitivity(alphas, N)
    # one record moves one cell by 1, so the score moves by at most
    # alpha_w * max|p'| while differences stay inside [-alpha, alpha]
    return max(abs(a) for a in alphas) * abs_poly_slope_max()


def score_bias(norm: str, sigma: float, cells: int) -> float:
    return penalty(sigma, cells) if norm == L2SQ else l1_penalty(sigma, cells)


class PhaseMeter:
    def __init__(self, counters: OpCounters | None = None):
        self.counters = counters
        self.ops = {p: {} for p in PHASES}
        self.seconds = {p: 0.0 for p in PHASES + ("fit", "sample")}

    @contextmanager
    def phase(self, name: str):
        before = self.counters.snapshot() if self.counters is not None and name in self.ops else None
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - t0
            if before is not None:
                d = OpCounters.diff(self.counters.snapshot(), before)
                acc = self.ops[name]
                for k, v in d.items():
                    acc[k] = acc.get(k, 0) + v


class EncryptedOps:
    """Scores and measurements through the encrypted protocols."""

    def __init__(
        self,
        ev: Evaluator,
        marginals: Mapping[Clique, EncryptedMarginal],
        noise: NoiseBuffer,
        decryptor: Decryptor,
        norm: str = L2SQ,
        alpha: float = 10000.0,
        batch_decrypt: bool = False,
    ):
        self.ev = ev
        self.marginals = marginals
        self.noise = noise
        self.decryptor = decryptor
        self.norm = norm
        self.alpha = alpha
        self.batch_decrypt = batch_decrypt

    @property
    def counters(self):
        return self.ev.counters

    def measure(self, clique: Clique, sigma: float) -> np.ndarray:
        return measure(self.ev, self.marginals[clique], sigma, self.noise.gaussian, self.decryptor)

    def select(self, candidates, estimates, eps, delta_s, bias, weight):
        return select(
            self.ev, candidates, self.marginals, estimates, eps, delta_s, bias, weight,
            self.noise.gumbel, self.decryptor, self.norm, self.alpha, self.batch_decrypt,
        )


class PlaintextOps:
    """Reference AIM on the clear data, reading the same unit-noise arrays."""

    counters = None

    def __init__(self, data: Dataset, noise: NoiseBuffer, norm: str = L2SQ, alpha: float = 10000.0):
        if not isinstance(noise.gaussian, PlainNoiseStream):
            raise TypeError("plaintext AIM needs a plaintext noise buffer")
        self.data = data
        self.noise = noise
        self.norm = norm
        self.alpha = alpha
        self._cache: dict[Clique, np.ndarray] = {}

    def _q(self, clique: Clique) -> np.ndarray:
        if clique not in self._cache:
            self._cache[clique] = self.data.project(clique.attrs)
        return self._cache[clique]

    def measure(self, clique: Clique, sigma: float) -> np.ndarray:
        q = self._q(clique)
        if sigma > 0:
            return q + sigma * self.noise.gaussian.read(clique.cells, "measure")
        return q.copy()

    def select(self, candidates, estimates, eps, delta_s, bias, weight):
        scores = []
        for c in candidates:
            q, qh = self._q(c), estimates[c]
            if self.norm == L2SQ:
                r = q - qh
                s = weight[c] * (float(np.sum(r * r)) - bias[c])
            else:
                s = quality_score_l1(q, qh, weight[c], bias[c], self.alpha)
            scores.append(s)
        scores = np.array(scores)
        if eps != INF:
            g = self.noise.gumbel.read(len(candidates), "select")
            scores = scores + (2 * delta_s / eps) * g
        return candidates[int(np.argmax(scores))], scores


@dataclass
class AimResult:
    synthetic: Dataset
    log: MeasurementLog
    accountant: PrivacyAccountant
    fitter: MirrorDescentFitter
    selections: list[Clique]
    meter: PhaseMeter


def initialize(ops, workload: Workload, accountant: PrivacyAccountant, mlog: MeasurementLog, meter: PhaseMeter | None = None) -> MeasurementLog:
    """Noisy one-way marginal of every attribute."""
    meter = meter or PhaseMeter()
    schema = workload.schema
    for a in range(schema.d):
        c = Clique.of(schema, (a,))
        sigma = accountant.spend_init()
        with meter.phase("measure"):
            y = ops.measure(c, sigma)
        mlog.append(c, y, sigma, 0)
    return mlog


def aim_loop(
    ops,
    workload: Workload,
    accountant: PrivacyAccountant,
    N: int,
    config: RunConfig,
    meter: PhaseMeter | None = None,
    sample_seed: int | None = None,
) -> AimResult:
    schema = workload.schema
    meter = meter or PhaseMeter(getattr(ops, "counters", None))
    fitter = MirrorDescentFitter(schema)
    mlog = MeasurementLog()
    initialize(ops, workload, accountant, mlog, meter)
    with meter.phase("fit"):
        fitter.fit(mlog.measurements(), N, config.fit_iterations)

    alphas = workload.alphas()
    candidates = list(workload.cliques)
    delta_s = score_sensitivity(config.norm, alphas.values(), N)
    selections = []
    for t in range(1, accountant.rounds + 1):
        eps_t = accountant.spend_select()
        sigma_t = accountant.sigma_round
        est = fitter.marginals([c.attrs for c in candidates], N)
        estimates = {c: est[c.attrs] for c in candidates}
        bias = {c: score_bias(config.norm, sigma_t, c.cells) for c in candidates}
        with meter.phase("select"):
            chosen, _ = ops.select(candidates, estimates, eps_t, delta_s, bias, alphas)
        selections.append(chosen)
        sigma = accountant.spend_measure()
        with meter.phase("measure"):
            y = ops.measure(chosen, sigma)
        mlog.append(chosen, y, sigma, t)
        with meter.phase("fit"):
            fitter.fit(mlog.measurements(), N, config.fit_iterations)

    with meter.phase("sample"):
        synth = sample(fitter.distribution(), N, np.random.default_rng(sample_seed))
    return AimResult(synth, mlog, accountant, fitter, selections, meter)


def run_plaintext_aim(train: Dataset, config: RunConfig, workload: Workload | None = None) -> AimResult:
    """Plaintext AIM-L2/L1 with the same seeds and unit noise as the encrypted run."""
    from .privacy import build_schedule, noise_budget, plain_noise, sample_unit_noise, zcdp_from_eps_delta

    schema = train.schema
    workload = workload or build_workload(schema, config.slot_count)
    seeds = derive_seeds(config.seed)
    acct = build_schedule(zcdp_from_eps_delta(config.epsilon, config.delta), schema.d, schema,
                          config.rounds, eps=config.epsilon, delta=config.delta)
    n_g, n_gb = noise_budget(schema, workload, rounds=acct.rounds)
    gauss, gumbel = sample_unit_noise(n_g, n_gb, seeds["noise"])
    ops = PlaintextOps(train, plain_noise(gauss, gumbel, str(seeds["noise"])), config.norm, config.alpha)
    return aim_loop(ops, workload, acct, train.N, config, sample_seed=seeds["sample"])


def run(config: RunConfig, table_file, domain_file, out_dir=None, transport: str = "inproc"):
    """Full encrypted pipeline from files; see :func:`fhaim.workflow.run_workflow`."""
    from .workflow import run_workflow

    return run_workflow(config, table_file, domain_file, out_dir=out_dir, transport=transport)
