"""Four-party workflow: data owner, compute server, algorithm owner, key service.

Entities exchange :class:`WorkflowMessage` objects over a :class:`Network`
that records a transcript (payload digests only). Each entity holds only the
capability its role allows; the key service decrypts only noised ciphertexts
unless the run was declared non-private at setup.

Steps:
  0  GE -> CE, CSE   protocol manifest
  1  CSE -> DE, CE   encrypt / evaluate capability
  2  DE -> CE        encrypted one-hot columns and unit-noise buffers
  3-5                CE computes marginals, selects, measures (local)
  6  CE -> CSE       decryption request
  7  CSE -> CE       decrypted noisy value
  8                  CE refits the model (local)
  9  CE -> DE        synthetic data
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import queue
import secrets
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .aim import AimResult, EncryptedOps, PhaseMeter, RunConfig, Workload, aim_loop, build_workload, derive_seeds
from .encoding import Dataset, DatasetSchema, EncryptedColumns, load_dataset, one_hot, pack_and_encrypt, train_test_split, write_csv
from .he import DEFAULT_NOISE_PER_OP, Capability, Ciphertext, Evaluator, HeEngine, HeParams, keygen
from .privacy import (
    GAUSSIAN,
    GUMBEL,
    INF,
    EncryptedNoiseStream,
    NoiseBuffer,
    build_schedule,
    encrypt_noise,
    noise_budget,
    sample_unit_noise,
    zcdp_from_eps_delta,
)
from .protocols import Clique, comp_workload, required_depth

DE, CE, GE, CSE = "DE", "CE", "GE", "CSE"
ROLES = (DE, CE, GE, CSE)
ALLOWED_CAPABILITIES = {DE: {"encrypt"}, CE: {"evaluate"}, GE: set(), CSE: {"decrypt"}}


class GateViolation(PermissionError):
    pass


class WorkflowError(RuntimeError):
    pass


@dataclass
class WorkflowMessage:
    step: int
    sender: str
    receiver: str
    kind: str
    payload: Any = None
    noised: bool = False
    encrypted: bool = False
    data_derived: bool = False
    purpose: str = ""


# -- payload digests and wire codec ------------------------------------------


def _digest_update(h, obj) -> None:
    if isinstance(obj, Ciphertext):
        h.update(b"ct")
        h.update(np.ascontiguousarray(obj._slots).tobytes())
        h.update(struct.pack("<id", obj.level, obj.noise_bound))
    elif isinstance(obj, np.ndarray):
        h.update(b"nd")
        h.update(np.ascontiguousarray(obj, dtype="<f8").tobytes())
    elif isinstance(obj, dict):
        h.update(b"{")
        for k in sorted(obj, key=str):
            h.update(str(k).encode())
            _digest_update(h, obj[k])
        h.update(b"}")
    elif isinstance(obj, (list, tuple)):
        h.update(b"[")
        for x in obj:
            _digest_update(h, x)
        h.update(b"]")
    elif isinstance(obj, Capability):
        h.update(b"cap" + obj.role.encode())
    else:
        h.update(repr(obj).encode())


def payload_digest(payload) -> str:
    h = hashlib.sha256()
    _digest_update(h, payload)
    return h.hexdigest()


def _count_sources(obj) -> int:
    if isinstance(obj, Ciphertext):
        return len(obj.sources)
    if isinstance(obj, dict):
        return sum(_count_sources(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return sum(_count_sources(v) for v in obj)
    return 0


class WireCodec:
    """JSON encoding of messages for the framed TCP transport.

    Capabilities are process-local objects and travel as opaque handles
    resolved against this codec's registry.
    """

    def __init__(self, engine: HeEngine | None = None):
        self.engine = engine
        self._caps: dict[str, Capability] = {}

    def _enc(self, obj):
        if isinstance(obj, Ciphertext):
            return {"$ct": self.engine.dump_ciphertext(obj)}
        if isinstance(obj, np.ndarray):
            a = np.ascontiguousarray(obj, dtype="<f8")
            return {"$nd": base64.b64encode(a.tobytes()).decode(), "shape": list(a.shape)}
        if isinstance(obj, Capability):
            handle = secrets.token_hex(8)
            self._caps[handle] = obj
            return {"$cap": handle}
        if isinstance(obj, dict):
            return {"$map": [[self._enc(k), self._enc(v)] for k, v in obj.items()]}
        if isinstance(obj, tuple):
            return {"$tuple": [self._enc(x) for x in obj]}
        if isinstance(obj, list):
            return [self._enc(x) for x in obj]
        if isinstance(obj, (np.integer, np.floating)):
            return obj.item()
        if obj is None or isinstance(obj, (str, int, float, bool)):
            return obj
        raise TypeError(f"cannot encode {type(obj).__name__}")

    def _dec(self, obj):
        if isinstance(obj, list):
            return [self._dec(x) for x in obj]
        if isinstance(obj, dict):
            if "$ct" in obj:
                return self.engine.load_ciphertext(obj["$ct"])
            if "$nd" in obj:
                return np.frombuffer(base64.b64decode(obj["$nd"]), dtype="<f8").reshape(obj["shape"]).copy()
            if "$cap" in obj:
                return self._caps.pop(obj["$cap"])
            if "$map" in obj:
                return {self._dec(k): self._dec(v) for k, v in obj["$map"]}
            if "$tuple" in obj:
                return tuple(self._dec(x) for x in obj["$tuple"])
        return obj

    def encode(self, msg: WorkflowMessage) -> bytes:
        body = dict(msg.__dict__)
        body["payload"] = self._enc(msg.payload)
        return json.dumps(body).encode()

    def decode(self, data: bytes) -> WorkflowMessage:
        body = json.loads(data)
        body["payload"] = self._dec(body["payload"])
        return WorkflowMessage(**body)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf.extend(chunk)
    return bytes(buf)


class TcpLink:
    """Loopback TCP connection carrying length-prefixed JSON frames."""

    def __init__(self, codec: WireCodec):
        self.codec = codec
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.bind(("127.0.0.1", 0))
        server.listen(1)
        self.client = socket.create_connection(server.getsockname())
        self.peer, _ = server.accept()
        server.close()
        self.inbox: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        self.frames = 0
        self.bytes = 0

    def _read_loop(self):
        try:
            while True:
                (n,) = struct.unpack(">I", _recv_exact(self.peer, 4))
                self.inbox.put(_recv_exact(self.peer, n))
        except (ConnectionError, OSError):
            self.inbox.put(None)

    def transmit(self, msg: WorkflowMessage) -> WorkflowMessage:
        frame = self.codec.encode(msg)
        self.client.sendall(struct.pack(">I", len(frame)) + frame)
        data = self.inbox.get(timeout=300)
        if data is None:
            raise ConnectionError("transport closed")
        self.frames += 1
        self.bytes += len(frame)
        return self.codec.decode(data)

    def close(self):
        for s in (self.client, self.peer):
            try:
                s.close()
            except OSError:
                pass


class Network:
    def __init__(self, transport: str = "inproc"):
        if transport not in ("inproc", "tcp"):
            raise ValueError(f"unknown transport {transport!r}")
        self.transport = transport
        self.entities: dict[str, "Entity"] = {}
        self.transcript: list[dict] = []
        self.codec = WireCodec()
        self._link: TcpLink | None = None

    def attach_engine(self, engine: HeEngine) -> None:
        self.codec.engine = engine

    def register(self, entity: "Entity") -> None:
        self.entities[entity.role] = entity
        entity.network = self

    def record(self, msg: WorkflowMessage, **extra) -> None:
        rec = {
            "seq": len(self.transcript),
            "step": msg.step,
            "sender": msg.sender,
            "receiver": msg.receiver,
            "kind": msg.kind,
            "noised": msg.noised,
            "encrypted": msg.encrypted,
            "data_derived": msg.data_derived,
            "purpose": msg.purpose,
            "sources": _count_sources(msg.payload),
            "payload_sha256": payload_digest(msg.payload),
        }
        rec.update(extra)
        self.transcript.append(rec)

    def event(self, step: int, role: str, kind: str, **extra) -> None:
        """A local action with no payload, e.g. a phase boundary."""
        self.record(WorkflowMessage(step, role, role, kind), local=True, **extra)

    def send(self, msg: WorkflowMessage, **extra) -> Any:
        if msg.receiver not in self.entities:
            raise WorkflowError(f"no entity {msg.receiver}")
        self.record(msg, **extra)
        if self.transport == "tcp":
            if self._link is None:
                self._link = TcpLink(self.codec)
            msg = self._link.transmit(msg)
        reply = self.entities[msg.receiver].receive(msg)
        if isinstance(reply, WorkflowMessage):
            self.record(reply)
            if self.transport == "tcp":
                reply = self._link.transmit(reply)
            return reply.payload
        return reply

    def close(self):
        if self._link is not None:
            self._link.close()
            self._link = None


class Entity:
    role = ""

    def __init__(self):
        self.network: Network | None = None
        self.capabilities: dict[str, Capability] = {}

    def grant(self, cap: Capability) -> None:
        if cap.role not in ALLOWED_CAPABILITIES[self.role]:
            raise GateViolation(f"{self.role} may not hold the {cap.role} capability")
        self.capabilities[cap.role] = cap

    def receive(self, msg: WorkflowMessage):
        handler = getattr(self, "on_" + msg.kind, None)
        if handler is None:
            raise WorkflowError(f"{self.role} cannot handle {msg.kind!r}")
        return handler(msg)

    def on_capability(self, msg):
        self.grant(msg.payload)


def sign_manifest(manifest: dict, key: bytes) -> str:
    body = json.dumps(manifest, sort_keys=True).encode()
    return hmac.new(key, body, hashlib.sha256).hexdigest()


class GenerationEntity(Entity):
    role = GE

    def __init__(self, config: RunConfig, signing_key: bytes):
        super().__init__()
        self.config = config
        self.signing_key = signing_key
        self.received: list[WorkflowMessage] = []

    def manifest(self) -> dict:
        c = self.config
        return {
            "protocols": ["comp_1way", "comp_2way", "combine", "select", "measure"],
            "score": c.norm,
            "alpha": c.alpha,
            "epsilon": None if c.epsilon == INF else c.epsilon,
            "delta": c.delta,
            "rounds": c.rounds,
            "workload": "all-1way-2way",
            "noiseless_audit": c.epsilon == INF,
        }

    def publish(self):
        m = self.manifest()
        payload = {"manifest": m, "signature": sign_manifest(m, self.signing_key)}
        for to in (CE, CSE):
            self.network.send(WorkflowMessage(0, GE, to, "protocol_manifest", payload), noiseless_audit=m["noiseless_audit"])

    def receive(self, msg):
        self.received.append(msg)


class CryptoServiceEntity(Entity):
    role = CSE

    def __init__(self, params: HeParams, signing_key: bytes):
        super().__init__()
        self.keys = keygen(params)
        self.engine = self.keys.engine
        self.capabilities["decrypt"] = self.keys.decrypt
        self.signing_key = signing_key
        self.noiseless_audit = False
        self.manifest: dict | None = None
        self._seen_sources: set = set()
        self.decryptions = 0

    def on_protocol_manifest(self, msg):
        m, sig = msg.payload["manifest"], msg.payload["signature"]
        if not hmac.compare_digest(sig, sign_manifest(m, self.signing_key)):
            raise GateViolation("protocol manifest signature mismatch")
        self.manifest = m
        self.noiseless_audit = bool(m.get("noiseless_audit"))

    def distribute(self):
        self.network.send(WorkflowMessage(1, CSE, DE, "capability", self.keys.encrypt), capability="encrypt")
        self.network.send(WorkflowMessage(1, CSE, CE, "capability", self.keys.evaluate), capability="evaluate")

    def on_decrypt_request(self, msg):
        ct = msg.payload
        if not isinstance(ct, Ciphertext):
            raise GateViolation("decryption requests must carry a ciphertext")
        if not ct.noised and not self.noiseless_audit:
            raise GateViolation("refusing to decrypt a value without DP noise")
        if ct.sources & self._seen_sources:
            raise GateViolation("noise sample reused across decryptions")
        values = self.engine.decrypt(ct, self.capabilities["decrypt"])
        self._seen_sources |= ct.sources
        self.decryptions += 1
        return WorkflowMessage(
            7, CSE, CE, "decrypt_result", values, noised=ct.noised,
            data_derived=True, purpose=msg.purpose,
        )


class DataEntity(Entity):
    role = DE

    def __init__(self, data: Dataset, workload: Workload, rounds: int, noise_seed: int):
        super().__init__()
        self._data = data
        self._workload = workload
        self._rounds = rounds
        self._noise_seed = noise_seed
        self.synthetic: Dataset | None = None
        self.noise_counts: tuple[int, int] | None = None

    def upload(self):
        key = self.capabilities["encrypt"]
        cols = pack_and_encrypt(one_hot(self._data), self._data.schema, key)
        n_g, n_gb = noise_budget(self._data.schema, self._workload, rounds=self._rounds)
        self.noise_counts = (n_g, n_gb)
        gauss, gumbel = sample_unit_noise(n_g, n_gb, self._noise_seed)
        buf = encrypt_noise(gauss, gumbel, key, seed_id=str(self._noise_seed))
        payload = {
            "schema": self._data.schema.to_json(),
            "record_count": cols.record_count,
            "slot_count": cols.slot_count,
            "columns": {f"{a}:{j}": v for (a, j), v in cols.columns.items()},
            GAUSSIAN: buf.gaussian.chunks,
            GAUSSIAN + "_size": buf.gaussian.size,
            GUMBEL: buf.gumbel.chunks,
            GUMBEL + "_size": buf.gumbel.size,
            "seed_id": buf.seed_id,
        }
        self.network.send(WorkflowMessage(2, DE, CE, "encrypted_upload", payload, encrypted=True, data_derived=True))

    def on_synthetic_data(self, msg):
        p = msg.payload
        self.synthetic = Dataset(DatasetSchema.from_json(p["schema"]), np.asarray(p["rows"], dtype=np.int64))


class ComputationEntity(Entity):
    role = CE

    def __init__(self, config: RunConfig, signing_key: bytes):
        super().__init__()
        self.config = config
        self.signing_key = signing_key
        self.manifest: dict | None = None
        self.cols: EncryptedColumns | None = None
        self.noise: NoiseBuffer | None = None
        self.result: AimResult | None = None
        self.meter: PhaseMeter | None = None
        self.workload: Workload | None = None

    def on_protocol_manifest(self, msg):
        m, sig = msg.payload["manifest"], msg.payload["signature"]
        if not hmac.compare_digest(sig, sign_manifest(m, self.signing_key)):
            raise GateViolation("protocol manifest signature mismatch")
        self.manifest = m

    def on_encrypted_upload(self, msg):
        p = msg.payload
        schema = DatasetSchema.from_json(p["schema"])
        cols = {}
        for key, chunks in p["columns"].items():
            a, j = key.split(":")
            cols[(int(a), int(j))] = list(chunks)
        L = p["slot_count"]
        self.cols = EncryptedColumns(schema, cols, p["record_count"], L)
        self.noise = NoiseBuffer(
            EncryptedNoiseStream(GAUSSIAN, list(p[GAUSSIAN]), p[GAUSSIAN + "_size"], L),
            EncryptedNoiseStream(GUMBEL, list(p[GUMBEL]), p[GUMBEL + "_size"], L),
            p["seed_id"],
        )

    def _decrypt(self, ct: Ciphertext, purpose: str) -> np.ndarray:
        msg = WorkflowMessage(6, CE, CSE, "decrypt_request", ct, noised=ct.noised, encrypted=True,
                              data_derived=True, purpose=purpose)
        return self.network.send(msg, audited=not ct.noised)

    def train(self, sample_seed: int) -> AimResult:
        if self.manifest is None or self.cols is None:
            raise WorkflowError("CE needs the manifest and the encrypted upload first")
        c = self.config
        ev = Evaluator(self.capabilities["evaluate"])
        schema = self.cols.schema
        N = self.cols.record_count  # public
        self.workload = build_workload(schema, ev.slot_count)
        acct = build_schedule(zcdp_from_eps_delta(c.epsilon, c.delta), schema.d, schema, c.rounds,
                              eps=c.epsilon, delta=c.delta)
        self.meter = PhaseMeter(ev.counters)
        net = self.network
        net.event(3, CE, "phase", phase="compute")
        with self.meter.phase("compute"):
            marginals = comp_workload(ev, self.cols, self.workload.cliques)
        net.event(4, CE, "phase", phase="select_measure_fit")
        ops = EncryptedOps(ev, marginals, self.noise, self._decrypt, c.norm, c.alpha, c.batch_decrypt)
        self.result = aim_loop(ops, self.workload, acct, N, c, self.meter, sample_seed)
        net.event(8, CE, "phase", phase="done")
        return self.result

    def deliver(self):
        syn = self.result.synthetic
        payload = {"schema": syn.schema.to_json(), "rows": syn.rows.tolist()}
        self.network.send(WorkflowMessage(9, CE, DE, "synthetic_data", payload, data_derived=True))


@dataclass
class RunArtifacts:
    config: RunConfig
    train: Dataset
    test: Dataset
    synthetic: Dataset
    result: AimResult
    workload: Workload
    transcript: list[dict]
    he_params: HeParams
    op_counts: dict
    noise_manifest: dict
    noise_counts: tuple[int, int]
    seeds: dict
    seconds: float
    expected_decryptions: int

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "seeds": self.seeds,
            "he_params": self.he_params.to_dict(),
            "accountant": self.result.accountant.to_dict(),
            "noise_buffer": self.noise_manifest,
            "noise_budget": {"gaussian": self.noise_counts[0], "gumbel": self.noise_counts[1]},
            "op_counts": self.op_counts,
            "phase_ops": self.result.meter.ops,
            "phase_seconds": self.result.meter.seconds,
            "records": {"train": self.train.N, "test": self.test.N},
            "workload_size": len(self.workload),
            "rounds": self.result.accountant.rounds,
            "selections": [list(c.attrs) for c in self.result.selections],
            "decryptions": self.expected_decryptions,
            "seconds": self.seconds,
        }


def expected_decryptions(d: int, rounds: int, candidates: int, batch: bool = False) -> int:
    return d + rounds + rounds * (1 if batch else candidates)


def he_params_for(config: RunConfig, engine_seed: int | None = None) -> HeParams:
    return HeParams(
        slot_count=config.slot_count,
        depth_budget=max(4, required_depth(config.norm, config.batch_decrypt)),
        backend_kind=config.backend,
        noise_per_op=DEFAULT_NOISE_PER_OP if config.noise_per_op is None else config.noise_per_op,
        seed=engine_seed,
    )


def run_workflow(
    config: RunConfig,
    table_file=None,
    domain_file=None,
    out_dir=None,
    transport: str = "inproc",
    data: Dataset | None = None,
    split: bool = True,
) -> RunArtifacts:
    t0 = time.perf_counter()
    if data is None:
        data = load_dataset(table_file, domain_file)
    train, test = train_test_split(data) if split else (data, data)
    seeds = derive_seeds(config.seed)
    params = he_params_for(config, seeds["engine"])
    signing_key = secrets.token_bytes(32)

    net = Network(transport)
    ge = GenerationEntity(config, signing_key)
    cse = CryptoServiceEntity(params, signing_key)
    net.attach_engine(cse.engine)
    workload = build_workload(train.schema, params.slot_count)
    rounds = build_schedule(INF, train.schema.d, rounds=config.rounds).rounds
    de = DataEntity(train, workload, rounds, seeds["noise"])
    ce = ComputationEntity(config, signing_key)
    for e in (ge, cse, de, ce):
        net.register(e)
    try:
        ge.publish()
        cse.distribute()
        de.upload()
        result = ce.train(seeds["sample"])
        ce.deliver()
    finally:
        net.close()
    if de.synthetic is None:
        raise WorkflowError("synthetic data never reached the data entity")
    art = RunArtifacts(
        config=config, train=train, test=test, synthetic=de.synthetic, result=result,
        workload=workload, transcript=net.transcript, he_params=params,
        op_counts=cse.engine.counters.snapshot(), noise_manifest=ce.noise.manifest(),
        noise_counts=de.noise_counts, seeds=seeds, seconds=time.perf_counter() - t0,
        expected_decryptions=expected_decryptions(train.schema.d, rounds, len(workload), config.batch_decrypt),
    )
    if out_dir is not None:
        write_artifacts(art, out_dir)
    return art


def write_artifacts(art: RunArtifacts, out_dir, emit: str = "all") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    if emit in ("synthetic", "all"):
        paths["synthetic"] = out / "synthetic.csv"
        write_csv(art.synthetic, paths["synthetic"])
    if emit in ("transcript", "all"):
        paths["transcript"] = out / "transcript.jsonl"
        write_transcript(art.transcript, paths["transcript"])
    paths["manifest"] = out / "run_manifest.json"
    paths["manifest"].write_text(json.dumps(art.manifest(), indent=2, default=str))
    paths["measurements"] = out / "measurements.json"
    paths["measurements"].write_text(art.result.log.to_json())
    return paths


def write_transcript(transcript: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in transcript:
            fh.write(json.dumps(rec) + "\n")


def read_transcript(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- audit -------------------------------------------------------------------


@dataclass
class AuditReport:
    violations: list[dict] = field(default_factory=list)
    decryptions: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, rec: dict | None, kind: str, detail: str) -> None:
        self.violations.append({"seq": None if rec is None else rec.get("seq"), "kind": kind, "detail": detail})

    def kinds(self) -> list[str]:
        return [v["kind"] for v in self.violations]


UNNOISED = "unnoised_decryption"
CAPABILITY = "capability_misuse"
LEAK = "plaintext_leak"
SHAPE = "workflow_shape"


def audit_transcript(transcript: list[dict], expected_decryptions: int | None = None) -> AuditReport:
    rep = AuditReport()
    noiseless = any(r["kind"] == "protocol_manifest" and r.get("noiseless_audit") for r in transcript)

    uploads = [r for r in transcript if r["step"] == 2 and r["kind"] == "encrypted_upload"]
    deliveries = [r for r in transcript if r["step"] == 9 and r["kind"] == "synthetic_data"]
    if len(uploads) != 1:
        rep.add(None, SHAPE, f"{len(uploads)} step-2 uploads")
    if len(deliveries) != 1:
        rep.add(None, SHAPE, f"{len(deliveries)} step-9 deliveries")

    for r in transcript:
        if r.get("local"):
            if r["sender"] != r["receiver"] or r["kind"] != "phase":
                rep.add(r, SHAPE, "malformed local event")
            continue
        snd, rcv, kind = r["sender"], r["receiver"], r["kind"]
        # capabilities: only the key service mints and hands them out
        if kind == "capability":
            cap = r.get("capability")
            if snd != CSE:
                rep.add(r, CAPABILITY, f"{snd} handed out a capability")
            if cap not in ALLOWED_CAPABILITIES.get(rcv, set()):
                rep.add(r, CAPABILITY, f"{cap} capability granted to {rcv}")
        elif r.get("capability"):
            rep.add(r, CAPABILITY, f"{snd} used the {r['capability']} capability in a {kind} message")
        if kind in ("decrypt_request", "decrypt_result"):
            if kind == "decrypt_request":
                rep.decryptions += 1
                if rcv != CSE:
                    rep.add(r, CAPABILITY, f"decryption requested from {rcv}")
                if snd != CE:
                    rep.add(r, CAPABILITY, f"decryption requested by {snd}")
            elif snd != CSE:
                rep.add(r, CAPABILITY, f"{snd} returned a decryption")
            if not r["noised"] and not (noiseless and r.get("audited", kind == "decrypt_result")):
                rep.add(r, UNNOISED, f"{kind} without DP noise")
            if r["noised"] and r["sources"] == 0 and kind == "decrypt_request":
                rep.add(r, UNNOISED, "noised flag without noise provenance")
        # data leaving the data owner must be encrypted
        if snd == DE and not r["encrypted"]:
            rep.add(r, LEAK, f"unencrypted {kind} sent by the data entity")
        if kind in ("records", "exact_statistic"):
            rep.add(r, LEAK, f"{kind} message from {snd} to {rcv}")
        if rcv == CSE and r["data_derived"] and not r["encrypted"]:
            rep.add(r, LEAK, "plaintext data sent to the key service")
        if rcv == GE and r["data_derived"]:
            rep.add(r, LEAK, "data-derived payload sent to the algorithm owner")
        if kind == "synthetic_data" and rcv != DE:
            rep.add(r, LEAK, f"synthetic data delivered to {rcv}")

    # the data owner is idle between its upload and the delivery
    if len(uploads) == 1 and len(deliveries) == 1:
        lo, hi = uploads[0]["seq"], deliveries[0]["seq"]
        for r in transcript:
            if lo < r["seq"] < hi and DE in (r["sender"], r["receiver"]) and not r.get("local"):
                rep.add(r, SHAPE, "data entity active between upload and delivery")
    if expected_decryptions is not None and rep.decryptions != expected_decryptions:
        rep.add(None, SHAPE, f"{rep.decryptions} decryptions, expected {expected_decryptions}")
    return rep
