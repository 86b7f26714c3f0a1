"""Leveled, slot-parallel approximate homomorphic arithmetic.

Two reference backends share one interface:

* ``exact`` keeps the true slot values and tracks the noise estimate
  symbolically, without perturbing anything.
* ``noisy`` injects i.i.d. Gaussian error of standard deviation
  ``noise_per_op`` into every slot on every operation.

Both enforce the same level (multiplicative depth) rules and the same
decryption contract, so protocol code behaves identically on either. Keys are
split into three capabilities (encrypt, evaluate, decrypt) that are checked by
identity on every call.
"""

from __future__ import annotations

import base64
import json
import math
import secrets
import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1

# Upper estimate is this many standard deviations of the accumulated error.
NOISE_SIGMAS = 6.0

# calibrate_noise_per_op() puts the single-multiplication limit at 1e-10.
# Protocol circuits chain two 2^13-slot sums around a squaring (or the degree-10
# polynomial), which amplifies per-op error by roughly 10^4 to 10^5, so the
# default sits five decades lower, comparable to a 2^50 fixed-point scale.
DEFAULT_NOISE_PER_OP = 1e-15

EXACT = "exact"
NOISY = "noisy"


class HeError(Exception):
    """Base class for engine errors."""


class CapabilityError(HeError):
    pass


class LevelError(HeError):
    pass


class DecryptionError(HeError):
    pass


@dataclass(frozen=True)
class HeParams:
    slot_count: int = 8192
    depth_budget: int = 4
    scale: int = 40
    decrypt_tolerance: float = 1e-9
    backend_kind: str = EXACT
    noise_per_op: float = DEFAULT_NOISE_PER_OP
    seed: int | None = None

    def validate(self) -> None:
        L = self.slot_count
        if L < 1 or L & (L - 1):
            raise ValueError(f"slot_count must be a power of two, got {L}")
        if self.depth_budget < 2:
            raise ValueError(
                f"depth_budget must be >= 2 (select needs two levels), got {self.depth_budget}"
            )
        if not 1e-12 <= self.decrypt_tolerance <= 1e-6:
            raise ValueError(f"decrypt_tolerance {self.decrypt_tolerance} outside [1e-12, 1e-6]")
        if self.backend_kind not in (EXACT, NOISY):
            raise ValueError(f"unknown backend {self.backend_kind!r}")
        if self.noise_per_op < 0:
            raise ValueError("noise_per_op must be non-negative")

    @property
    def log_slots(self) -> int:
        return self.slot_count.bit_length() - 1

    def to_dict(self) -> dict:
        return {
            "slot_count": self.slot_count,
            "depth_budget": self.depth_budget,
            "scale": self.scale,
            "decrypt_tolerance": self.decrypt_tolerance,
            "backend_kind": self.backend_kind,
            "noise_per_op": self.noise_per_op,
            "seed": self.seed,
        }


class Capability:
    """An unforgeable role handle minted by :func:`keygen`.

    The engine compares capabilities by identity, so constructing a new
    ``Capability`` with the same role name grants nothing.
    """

    __slots__ = ("role", "engine", "_token")

    def __init__(self, role: str, engine: "HeEngine", token: bytes):
        self.role = role
        self.engine = engine
        self._token = token

    def __repr__(self) -> str:
        return f"<Capability {self.role} engine={self.engine.engine_id}>"

    def __reduce__(self):
        raise TypeError("capabilities cannot be pickled or copied")


@dataclass(frozen=True)
class KeyContext:
    encrypt: Capability
    evaluate: Capability
    decrypt: Capability

    @property
    def engine(self) -> "HeEngine":
        return self.evaluate.engine


@dataclass(frozen=True, eq=False)
class Ciphertext:
    """An encrypted vector of ``slot_count`` reals.

    ``_slots`` is private to the engine; protocol code must go through
    evaluate and decrypt operations. ``sources`` records which pre-sampled
    noise indices were mixed into this value, as ``(stream, index)`` pairs.
    """

    _slots: np.ndarray = field(repr=False)
    level: int
    noise_bound: float
    scale: int
    engine_id: str
    payload_len: int = 0
    sources: frozenset = frozenset()
    magnitude: float = 0.0  # peak |slot| over the lineage
    _bounds: np.ndarray | None = field(default=None, repr=False, compare=False)  # per-slot estimate

    def __post_init__(self):
        if self._bounds is None:
            object.__setattr__(self, "_bounds", _freeze(np.full(self._slots.shape[0], self.noise_bound)))

    @property
    def slot_count(self) -> int:
        return self._slots.shape[0]

    @property
    def noised(self) -> bool:
        return bool(self.sources)

    def with_sources(self, sources: Iterable) -> "Ciphertext":
        return Ciphertext(
            self._slots, self.level, self.noise_bound, self.scale,
            self.engine_id, self.payload_len, self.sources | frozenset(sources), self.magnitude,
            self._bounds,
        )


@dataclass
class OpCounters:
    encrypt: int = 0
    decrypt: int = 0
    add: int = 0
    add_plain: int = 0
    mult: int = 0
    mult_plain: int = 0
    mult_scalar: int = 0
    rotate: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    FIELDS = ("encrypt", "decrypt", "add", "add_plain", "mult", "mult_plain", "mult_scalar", "rotate")

    def bump(self, name: str, n: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + n)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {k: getattr(self, k) for k in self.FIELDS}

    @staticmethod
    def diff(after: dict[str, int], before: dict[str, int]) -> dict[str, int]:
        return {k: after[k] - before.get(k, 0) for k in after}


def _combine(a: Ciphertext, b: Ciphertext, ta, tb, rest) -> np.ndarray:
    # independent operands add in quadrature; the same ciphertext on both
    # sides carries one error vector, so its two terms add linearly
    if a is b:
        return np.hypot(ta + tb, rest)
    return np.sqrt(ta * ta + tb * tb + rest * rest)


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode()


def _unb64(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").astype(np.float64)


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class HeEngine:
    """Evaluator for one key set. Use :func:`keygen` to obtain one."""

    def __init__(self, params: HeParams):
        params.validate()
        self.params = params
        self.engine_id = secrets.token_hex(8)
        self.counters = OpCounters()
        self._rng = np.random.default_rng(params.seed)
        self._rng_lock = threading.Lock()
        self.keys = KeyContext(
            encrypt=Capability("encrypt", self, secrets.token_bytes(16)),
            evaluate=Capability("evaluate", self, secrets.token_bytes(16)),
            decrypt=Capability("decrypt", self, secrets.token_bytes(16)),
        )

    # -- internals ---------------------------------------------------------

    @property
    def slot_count(self) -> int:
        return self.params.slot_count

    def _check_cap(self, cap: Capability, role: str) -> None:
        expected = getattr(self.keys, role)
        if cap is not expected:
            got = getattr(cap, "role", type(cap).__name__)
            raise CapabilityError(f"{role} requires the {role} capability, got {got}")

    def _check_ct(self, ct: Ciphertext) -> None:
        if not isinstance(ct, Ciphertext):
            raise TypeError(f"expected Ciphertext, got {type(ct).__name__}")
        if ct.engine_id != self.engine_id:
            raise HeError("ciphertext was produced under a different key set")

    def _op_error(self) -> float:
        return NOISE_SIGMAS * self.params.noise_per_op

    def _perturb(self, values: np.ndarray) -> np.ndarray:
        if self.params.backend_kind == NOISY and self.params.noise_per_op > 0:
            with self._rng_lock:
                values = values + self._rng.normal(0.0, self.params.noise_per_op, values.shape)
        return values

    def _plain(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(-1)
        if p.shape[0] > self.slot_count:
            raise ValueError(f"plaintext of length {p.shape[0]} exceeds {self.slot_count} slots")
        out = np.zeros(self.slot_count)
        out[: p.shape[0]] = p
        return out

    def _make(self, slots, level, bounds, inputs: Sequence[Ciphertext], payload_len=None, monotone=True) -> Ciphertext:
        # Bounds are tracked per slot; noise_bound is their maximum and never
        # decreases along a lineage, except that multiplying by public values
        # scales the error with them (a zero mask entry leaves only fresh error).
        bounds = np.broadcast_to(np.asarray(bounds, dtype=np.float64), (self.slot_count,))
        if monotone and inputs:
            # slot-wise ops only; rotate permutes slots and passes monotone=False
            bounds = np.maximum.reduce([bounds] + [c._bounds for c in inputs])
        bound = float(bounds.max())
        sources = frozenset().union(*(c.sources for c in inputs)) if inputs else frozenset()
        if payload_len is None:
            payload_len = max((c.payload_len for c in inputs), default=0)
        slots = self._perturb(slots)
        peak = max([float(np.max(np.abs(slots)))] + [c.magnitude for c in inputs])
        return Ciphertext(
            _freeze(slots), level, float(bound),
            self.params.scale, self.engine_id, payload_len, sources, peak, _freeze(np.array(bounds)),
        )

    # -- key-holder operations ---------------------------------------------

    def encrypt(self, values, cap: Capability) -> Ciphertext:
        self._check_cap(cap, "encrypt")
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        if v.shape[0] > self.slot_count:
            raise ValueError(f"payload of length {v.shape[0]} exceeds {self.slot_count} slots")
        self.counters.bump("encrypt")
        return self._make(self._plain(v), self.params.depth_budget, self._op_error(), (), v.shape[0])

    def decrypt(self, ct: Ciphertext, cap: Capability) -> np.ndarray:
        self._check_cap(cap, "decrypt")
        self._check_ct(ct)
        if ct.level < 0:
            raise LevelError("ciphertext level below zero")
        # fixed-point precision is relative to the largest value the circuit encoded
        radius = self.params.decrypt_tolerance * max(1.0, ct.magnitude)
        if ct.noise_bound > radius:
            raise DecryptionError(
                f"decryption radius exceeded: noise bound {ct.noise_bound:.3g} > {radius:.3g}"
            )
        self.counters.bump("decrypt")
        return np.array(ct._slots)

    # -- evaluate operations -----------------------------------------------

    def _eval(self, cap: Capability, *cts: Ciphertext) -> None:
        self._check_cap(cap, "evaluate")
        for c in cts:
            self._check_ct(c)

    def add(self, a: Ciphertext, b: Ciphertext, cap: Capability) -> Ciphertext:
        self._eval(cap, a, b)
        self.counters.bump("add")
        e = self._op_error()
        bound = _combine(a, b, a._bounds, b._bounds, e)
        return self._make(a._slots + b._slots, min(a.level, b.level), bound, (a, b))

    def sub(self, a: Ciphertext, b: Ciphertext, cap: Capability) -> Ciphertext:
        self._eval(cap, a, b)
        self.counters.bump("add")
        e = self._op_error()
        bound = _combine(a, b, a._bounds, b._bounds, e)
        return self._make(a._slots - b._slots, min(a.level, b.level), bound, (a, b))

    def add_plain(self, a: Ciphertext, p, cap: Capability) -> Ciphertext:
        self._eval(cap, a)
        self.counters.bump("add_plain")
        e = self._op_error()
        return self._make(a._slots + self._plain(p), a.level, np.hypot(a._bounds, e), (a,))

    def mult_plain(self, a: Ciphertext, p, cap: Capability) -> Ciphertext:
        self._eval(cap, a)
        if a.level < 1:
            raise LevelError("level exhausted: mult_plain needs level >= 1")
        self.counters.bump("mult_plain")
        pv = self._plain(p)
        e = self._op_error()
        bound = np.hypot(np.abs(pv) * a._bounds, e)
        return self._make(a._slots * pv, a.level - 1, bound, (a,), monotone=False)

    def mult_scalar(self, a: Ciphertext, c: float, cap: Capability) -> Ciphertext:
        """Multiply every slot by a public constant; the level is kept."""
        self._eval(cap, a)
        self.counters.bump("mult_scalar")
        e = self._op_error()
        return self._make(a._slots * float(c), a.level, np.hypot(abs(c) * a._bounds, e), (a,), monotone=False)

    def mult(self, a: Ciphertext, b: Ciphertext, cap: Capability) -> Ciphertext:
        self._eval(cap, a, b)
        level = min(a.level, b.level)
        if level < 1:
            raise LevelError("level exhausted: mult needs level >= 1 on both operands")
        self.counters.bump("mult")
        e = self._op_error()
        bound = _combine(a, b, np.abs(a._slots) * b._bounds, np.abs(b._slots) * a._bounds, np.hypot(a._bounds * b._bounds, e))
        return self._make(a._slots * b._slots, level - 1, bound, (a, b))

    def rotate(self, ct: Ciphertext, k: int, cap: Capability) -> Ciphertext:
        """Cyclic left shift: result[i] = ct[(i + k) mod L]."""
        self._eval(cap, ct)
        if not 0 <= k < self.slot_count:
            raise ValueError(f"rotation {k} outside [0, {self.slot_count})")
        self.counters.bump("rotate")
        e = self._op_error()
        return self._make(np.roll(ct._slots, -k), ct.level, np.hypot(np.roll(ct._bounds, -k), e), (ct,), monotone=False)

    def slot_sum(self, ct: Ciphertext, cap: Capability) -> Ciphertext:
        """Replicate the total of all slots into every slot (log2 L rotations)."""
        self._eval(cap, ct)
        acc = ct
        for i in range(self.params.log_slots):
            acc = self.add(acc, self.rotate(acc, 1 << i, cap), cap)
        return acc

    # -- serialization -----------------------------------------------------

    def dump_ciphertext(self, ct: Ciphertext) -> dict:
        self._check_ct(ct)
        return {
            "version": FORMAT_VERSION,
            "engine_id": ct.engine_id,
            "level": ct.level,
            "noise_bound": ct.noise_bound,
            "scale": ct.scale,
            "payload_len": ct.payload_len,
            "magnitude": ct.magnitude,
            "sources": sorted([list(s) for s in ct.sources]),
            "slots": _b64(ct._slots),
            "bounds": _b64(ct._bounds),
        }

    def load_ciphertext(self, data: dict) -> Ciphertext:
        if data.get("version") != FORMAT_VERSION:
            raise HeError(f"unsupported ciphertext format version {data.get('version')!r}")
        if data["engine_id"] != self.engine_id:
            raise HeError("ciphertext was produced under a different key set")
        slots = _unb64(data["slots"])
        bounds = _unb64(data["bounds"]) if "bounds" in data else None
        if slots.shape[0] != self.slot_count or (bounds is not None and bounds.shape != slots.shape):
            raise HeError("slot count mismatch")
        return Ciphertext(
            _freeze(slots), int(data["level"]), float(data["noise_bound"]), int(data["scale"]),
            self.engine_id, int(data["payload_len"]), frozenset(tuple(s) for s in data["sources"]),
            float(data["magnitude"]), None if bounds is None else _freeze(bounds),
        )

    def dumps(self, ct: Ciphertext) -> str:
        return json.dumps(self.dump_ciphertext(ct))

    def loads(self, text: str) -> Ciphertext:
        return self.load_ciphertext(json.loads(text))


def keygen(params: HeParams) -> KeyContext:
    """Mint a fresh engine and its three capabilities."""
    return HeEngine(params).keys


class Evaluator:
    """Bind the evaluate capability so protocol code reads naturally."""

    def __init__(self, cap: Capability):
        cap.engine._check_cap(cap, "evaluate")
        self._cap = cap
        self.engine = cap.engine

    @property
    def slot_count(self) -> int:
        return self.engine.slot_count

    @property
    def counters(self) -> OpCounters:
        return self.engine.counters

    def add(self, a, b):
        return self.engine.add(a, b, self._cap)

    def sub(self, a, b):
        return self.engine.sub(a, b, self._cap)

    def add_plain(self, a, p):
        return self.engine.add_plain(a, p, self._cap)

    def mult_plain(self, a, p):
        return self.engine.mult_plain(a, p, self._cap)

    def mult_scalar(self, a, c):
        return self.engine.mult_scalar(a, c, self._cap)

    def mult(self, a, b):
        return self.engine.mult(a, b, self._cap)

    def square(self, a):
        return self.engine.mult(a, a, self._cap)

    def rotate(self, ct, k):
        return self.engine.rotate(ct, k, self._cap)

    def slot_sum(self, ct):
        return self.engine.slot_sum(ct, self._cap)


def calibrate_noise_per_op(
    tolerance: float = 1e-9,
    trials: int = 10_000,
    grid: Sequence[float] = (1e-9, 1e-10, 1e-11, 1e-12, 1e-13),
    seed: int = 0,
) -> float:
    """Largest grid value for which ``trials`` noisy multiplications of
    operands in [-1, 1] all decrypt within ``tolerance`` of the true product."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, trials)
    b = rng.uniform(-1, 1, trials)
    # one slot per trial, so a single slot-parallel mult runs every trial
    L = 1 << max(1, (trials - 1).bit_length())
    for sigma in sorted(grid, reverse=True):
        # widest radius: the empirical error decides, not the symbolic bound
        keys = keygen(HeParams(slot_count=L, backend_kind=NOISY, noise_per_op=sigma,
                               decrypt_tolerance=1e-6, seed=seed))
        eng = keys.engine
        ct = eng.mult(eng.encrypt(a, keys.encrypt), eng.encrypt(b, keys.encrypt), keys.evaluate)
        try:
            got = eng.decrypt(ct, keys.decrypt)[:trials]
        except DecryptionError:
            continue
        if np.max(np.abs(got - a * b)) <= tolerance:
            return float(sigma)
    raise ValueError("no grid value meets the tolerance")
