import copy
import json

import numpy as np
import pytest

from fhaim.aim import RunConfig
from fhaim.he import HeParams, keygen
from fhaim.workflow import (
    CAPABILITY,
    CE,
    CSE,
    DE,
    GE,
    LEAK,
    SHAPE,
    UNNOISED,
    CryptoServiceEntity,
    DataEntity,
    GateViolation,
    Network,
    WireCodec,
    WorkflowMessage,
    audit_transcript,
    expected_decryptions,
    read_transcript,
    run_workflow,
    sign_manifest,
    write_artifacts,
)

from conftest import random_dataset


@pytest.fixture(scope="module")
def small():
    return random_dataset(np.random.default_rng(21), [3, 2, 3], 80)


def _run(data, **kw):
    cfg = RunConfig(rounds=3, seed=4, fit_iterations=20, slot_count=256, **kw)
    return run_workflow(cfg, data=data, split=False)


@pytest.fixture(scope="module")
def private_run(small):
    return _run(small, epsilon=1.0)


@pytest.mark.parametrize("eps", [1.0, float("inf")])
def test_honest_runs_pass_audit(small, eps):
    art = _run(small, epsilon=eps)
    rep = audit_transcript(art.transcript, art.expected_decryptions)
    assert rep.ok, rep.violations
    assert rep.decryptions == expected_decryptions(3, 3, 6) == 3 + 3 + 18


def test_transcript_shape(private_run):
    t = private_run.transcript
    # request/result pairs (6, 7) repeat inside the loop; everything else is ordered
    steps = [min(r["step"], 6) if r["step"] in (6, 7) else r["step"] for r in t]
    assert steps == sorted(steps)
    loop = [r["step"] for r in t if r["step"] in (6, 7)]
    assert loop == [6, 7] * (len(loop) // 2)
    kinds = {r["kind"] for r in t}
    assert {"protocol_manifest", "capability", "encrypted_upload", "decrypt_request", "decrypt_result", "synthetic_data"} <= kinds
    for r in t:
        if r["kind"] == "decrypt_request":
            assert r["noised"] and r["sources"] > 0 and r["encrypted"]
    caps = {(r["receiver"], r["capability"]) for r in t if r["kind"] == "capability"}
    assert caps == {(DE, "encrypt"), (CE, "evaluate")}


def test_transcript_roundtrip(private_run, tmp_path):
    paths = write_artifacts(private_run, tmp_path)
    back = read_transcript(paths["transcript"])
    assert back == json.loads(json.dumps(private_run.transcript))
    manifest = json.loads(paths["manifest"].read_text())
    assert manifest["rounds"] == 3 and len(manifest["selections"]) == 3


def test_tcp_transport_matches_inproc(small):
    a = _run(small, epsilon=1.0)
    cfg = RunConfig(epsilon=1.0, rounds=3, seed=4, fit_iterations=20, slot_count=256)
    b = run_workflow(cfg, data=small, split=False, transport="tcp")
    assert np.array_equal(a.synthetic.rows, b.synthetic.rows)
    assert [r["payload_sha256"] for r in a.transcript if r["kind"] == "decrypt_result"] == \
        [r["payload_sha256"] for r in b.transcript if r["kind"] == "decrypt_result"]
    assert audit_transcript(b.transcript, b.expected_decryptions).ok


def _mutate(transcript, pick, **changes):
    t = copy.deepcopy(transcript)
    rec = next(r for r in t if pick(r))
    rec.update(changes)
    return t


def _inject(transcript, rec):
    t = copy.deepcopy(transcript)
    seq = max(r["seq"] for r in t)
    base = {"step": 6, "noised": False, "encrypted": False, "data_derived": False, "purpose": "",
            "sources": 0, "payload_sha256": "0" * 64}
    base.update(rec)
    deliver = next(i for i, r in enumerate(t) if r["kind"] == "synthetic_data")
    base["seq"] = t[deliver]["seq"] - 0.5
    t.insert(deliver, base)
    return t


def test_detects_each_violation_kind(private_run):
    t = private_run.transcript
    n = private_run.expected_decryptions
    is_req = lambda r: r["kind"] == "decrypt_request"
    cases = {
        UNNOISED: _mutate(t, is_req, noised=False),
        CAPABILITY: _mutate(t, lambda r: r["kind"] == "capability" and r["receiver"] == DE, capability="decrypt"),
        LEAK: _mutate(t, lambda r: r["kind"] == "encrypted_upload", encrypted=False),
    }
    for kind, bad in cases.items():
        assert kind in audit_transcript(bad, n).kinds()


def test_detects_injected_messages(private_run):
    t = private_run.transcript
    n = private_run.expected_decryptions
    checks = [
        ({"sender": CE, "receiver": CSE, "kind": "decrypt_request", "noised": True, "sources": 0, "encrypted": True}, UNNOISED),
        ({"sender": DE, "receiver": CE, "kind": "records", "data_derived": True}, LEAK),
        ({"sender": CE, "receiver": GE, "kind": "intermediate", "data_derived": True, "encrypted": True}, LEAK),
        ({"sender": CE, "receiver": CE, "kind": "decrypt_result", "noised": True}, CAPABILITY),
        ({"sender": CE, "receiver": CSE, "kind": "exact_statistic", "data_derived": True}, LEAK),
        ({"sender": DE, "receiver": CE, "kind": "delta", "capability": "decrypt", "encrypted": True}, CAPABILITY),
    ]
    for rec, kind in checks:
        assert kind in audit_transcript(_inject(t, rec), n).kinds(), rec


def test_detects_wrong_decryption_count(private_run):
    rep = audit_transcript(private_run.transcript, private_run.expected_decryptions + 1)
    assert SHAPE in rep.kinds()


def test_data_entity_cannot_hold_decrypt():
    keys = keygen(HeParams(slot_count=8))
    de = DataEntity(None, None, 1, 0)
    with pytest.raises(GateViolation):
        de.grant(keys.decrypt)
    de.grant(keys.encrypt)


def _cse(noiseless=False):
    key = b"k" * 32
    cse = CryptoServiceEntity(HeParams(slot_count=8), key)
    m = {"noiseless_audit": noiseless}
    cse.on_protocol_manifest(WorkflowMessage(0, GE, CSE, "protocol_manifest", {"manifest": m, "signature": sign_manifest(m, key)}))
    return cse


def test_key_service_refuses_unnoised_and_reused():
    cse = _cse()
    ct = cse.engine.encrypt([1.0, 2.0], cse.keys.encrypt)
    with pytest.raises(GateViolation, match="without DP noise"):
        cse.on_decrypt_request(WorkflowMessage(6, CE, CSE, "decrypt_request", ct))
    noised = ct.with_sources([("gaussian", 0), ("gaussian", 1)])
    out = cse.on_decrypt_request(WorkflowMessage(6, CE, CSE, "decrypt_request", noised))
    assert out.payload[:2].tolist() == [1.0, 2.0]
    with pytest.raises(GateViolation, match="reused"):
        cse.on_decrypt_request(WorkflowMessage(6, CE, CSE, "decrypt_request", ct.with_sources([("gaussian", 1)])))
    with pytest.raises(GateViolation):
        cse.on_decrypt_request(WorkflowMessage(6, CE, CSE, "decrypt_request", np.zeros(2)))


def test_key_service_checks_manifest_signature():
    cse = CryptoServiceEntity(HeParams(slot_count=8), b"k" * 32)
    m = {"noiseless_audit": True}
    with pytest.raises(GateViolation, match="signature"):
        cse.on_protocol_manifest(WorkflowMessage(0, GE, CSE, "protocol_manifest", {"manifest": m, "signature": "00"}))


def test_wire_codec_roundtrip():
    keys = keygen(HeParams(slot_count=8))
    codec = WireCodec(keys.engine)
    ct = keys.engine.encrypt([1.5, -2.0], keys.encrypt).with_sources([("gumbel", 3)])
    msg = WorkflowMessage(6, CE, CSE, "decrypt_request", {"a": [ct, np.arange(3.0)], "b": 2}, noised=True)
    back = codec.decode(codec.encode(msg))
    assert back.noised and back.kind == "decrypt_request"
    out = back.payload["a"][0]
    assert out.sources == ct.sources
    assert keys.engine.decrypt(out, keys.decrypt)[:2].tolist() == [1.5, -2.0]
    assert np.array_equal(back.payload["a"][1], np.arange(3.0))


def test_unknown_transport():
    with pytest.raises(ValueError):
        Network("carrier-pigeon")
