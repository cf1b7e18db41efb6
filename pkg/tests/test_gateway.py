import base64
import json
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import pytest

from modeltrace import acpt, config, gateway
from modeltrace.acpt import ControlCenter
from modeltrace.errors import InvalidInputError, RequestRejectedError, StartupError, TransportError
from modeltrace.gateway import InferRequest
from modeltrace.media import inputs_to_images

SERVICE_SEED = 5


@pytest.fixture
def center(acpt_users, base_model):
    base, bundles = acpt_users
    return ControlCenter(tuple(bundles.values()), base, base_model)


@pytest.fixture
def service(center):
    with gateway.serve("127.0.0.1:0", center, service_seed=SERVICE_SEED) as handle:
        yield handle


def exchange(address, payloads):
    """Send raw lines on one connection and read one response line per payload."""
    host, port = gateway.parse_address(address)
    with socket.create_connection((host, port), timeout=10) as sock:
        reader = sock.makefile("rb")
        out = []
        for payload in payloads:
            sock.sendall(payload)
            out.append(json.loads(reader.readline()))
        return out


def query_image(test_data, i):
    return inputs_to_images(test_data.inputs[i:i + 1])[0]


def test_parse_address():
    assert gateway.parse_address("127.0.0.1:7878") == ("127.0.0.1", 7878)
    assert gateway.parse_address(":9000") == ("127.0.0.1", 9000)
    with pytest.raises(InvalidInputError):
        gateway.parse_address("localhost")


def test_wire_request_round_trip(acpt_users, test_data):
    _, bundles = acpt_users
    alice = bundles["Alice"]
    req = InferRequest.from_images("r1", alice.credential.encrypted_username, alice.key_images[0],
                                   query_image(test_data, 0))
    wire = req.to_wire()
    assert set(wire) == {"request_id", "credential", "key_image", "query_image"}
    assert InferRequest.from_wire(wire) == req
    with pytest.raises(InvalidInputError):
        InferRequest.from_wire({**wire, "key_image": "not base64!"})


def test_gateway_matches_in_process_authorization(service, center, acpt_users, test_data, key_pools):
    _, bundles = acpt_users
    alice, bob = bundles["Alice"], bundles["Bob"]
    cases = []
    for i in range(100):
        cred, key = [
            (alice.credential.encrypted_username, alice.key_images[0]),
            (bob.credential.encrypted_username, bob.key_images[0]),
            (alice.credential.encrypted_username, key_pools["other"][i % 40]),
            (bob.credential.encrypted_username, alice.key_images[0]),
        ][i % 4]
        cases.append((f"req-{i}", cred, key, query_image(test_data, i)))
    wire = [json.dumps(InferRequest.from_images(*c).to_wire()).encode() + b"\n" for c in cases]
    replies = exchange(service.address, wire)
    for (rid, cred, key, img), reply in zip(cases, replies):
        assert set(reply) == {"request_id", "class"}
        assert reply["request_id"] == rid
        assert reply["class"] == center.authorize(cred, key, img, acpt.derive_seed(SERVICE_SEED, rid))


def test_concurrent_clients(service, center, acpt_users, test_data):
    _, bundles = acpt_users
    alice = bundles["Alice"]
    cred, key = alice.credential.encrypted_username, alice.key_images[0]

    def one(i):
        img = query_image(test_data, i)
        return i, gateway.client_infer(service.address, InferRequest.from_images(f"c-{i}", cred, key, img)).cls

    assert center.is_authorized(cred, key)
    with ThreadPoolExecutor(max_workers=8) as pool:
        results = dict(pool.map(one, range(64)))
    for i, cls in results.items():
        assert cls == center.authorize(cred, key, query_image(test_data, i), rng_seed=0)


def test_repeated_request_id_repeats_the_fallback(service, acpt_users, test_data, key_pools):
    _, bundles = acpt_users
    req = InferRequest.from_images("same", bundles["Bob"].credential.encrypted_username,
                                   key_pools["other"][3], query_image(test_data, 1))
    answers = {gateway.client_infer(service.address, req).cls for _ in range(5)}
    assert len(answers) == 1


def test_bad_requests_keep_the_connection_open(service, acpt_users, test_data):
    _, bundles = acpt_users
    alice = bundles["Alice"]
    good = InferRequest.from_images("ok", alice.credential.encrypted_username, alice.key_images[0],
                                    query_image(test_data, 2)).to_wire()
    small = InferRequest.from_images("small", alice.credential.encrypted_username, alice.key_images[0],
                                     alice.key_images[0]).to_wire()
    replies = exchange(service.address, [
        b"{not json\n",
        json.dumps({**good, "request_id": "b64", "key_image": "@@@@"}).encode() + b"\n",
        json.dumps({**good, "request_id": "short", "credential": "abc"}).encode() + b"\n",
        json.dumps(small).encode() + b"\n",
        json.dumps(good).encode() + b"\n",
    ])
    assert replies[0] == {"error_code": "bad_request"}
    assert replies[1] == {"request_id": "b64", "error_code": "bad_request"}
    assert replies[2] == {"request_id": "short", "error_code": "bad_request"}
    assert replies[3] == {"request_id": "small", "error_code": "bad_request"}
    assert replies[4]["request_id"] == "ok" and "class" in replies[4]


def test_oversized_line_is_skipped(service, monkeypatch, acpt_users, test_data):
    monkeypatch.setattr(config, "MAX_LINE_BYTES", 64 * 1024)
    _, bundles = acpt_users
    alice = bundles["Alice"]
    good = InferRequest.from_images("after", alice.credential.encrypted_username, alice.key_images[0],
                                    query_image(test_data, 3)).to_wire()
    replies = exchange(service.address, [b"x" * 100_000 + b"\n", json.dumps(good).encode() + b"\n"])
    assert replies[0] == {"error_code": "protocol_error"}
    assert replies[1]["request_id"] == "after"


def test_client_surfaces_rejections(service, acpt_users):
    _, bundles = acpt_users
    req = InferRequest("junk", bundles["Alice"].credential.encrypted_username, b"P6 nope", b"")
    with pytest.raises(RequestRejectedError) as err:
        gateway.client_infer(service.address, req)
    assert err.value.error_code == "bad_request" and err.value.request_id == "junk"


def test_unreachable_and_busy_addresses(center):
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    req = InferRequest("r", "aaaaaaaa", b"", b"")
    with pytest.raises(TransportError):
        gateway.client_infer(f"127.0.0.1:{port}", req, timeout=2)

    with socket.socket() as busy:
        busy.bind(("127.0.0.1", 0))
        busy.listen()
        with pytest.raises(StartupError):
            gateway.serve(f"127.0.0.1:{busy.getsockname()[1]}", center)


def test_remote_tracing_names_the_leaker(acpt_users, base_model, test_data):
    base, bundles = acpt_users
    leaked = ControlCenter((bundles["Bob"],), base, base_model)
    probes = {u: (b.credential.encrypted_username, b.key_images[0]) for u, b in bundles.items()}
    with gateway.serve("127.0.0.1:0", leaked, service_seed=None) as handle:
        report = acpt.trace_acpt(gateway.remote_oracle(handle.address), probes, test_data.subset(range(100)))
    assert report.verdict == "Bob"


def test_request_schema_encoding():
    wire = InferRequest("id", "aaaaaaaa", b"\x00\x01", b"\xff").to_wire()
    assert base64.b64decode(wire["key_image"]) == b"\x00\x01"


def test_client_timeout_covers_a_trickling_peer():
    listener = socket.socket()
    listener.bind(("127.0.0.1", 0))
    listener.listen()
    port = listener.getsockname()[1]

    def trickle():
        conn, _ = listener.accept()
        with conn:
            for _ in range(30):
                try:
                    conn.sendall(b" ")
                except OSError:
                    return
                time.sleep(0.1)

    worker = threading.Thread(target=trickle, daemon=True)
    worker.start()
    started = time.monotonic()
    with pytest.raises(TransportError):
        gateway.client_infer(f"127.0.0.1:{port}", InferRequest("slow", "aaaaaaaa", b"", b""), timeout=0.5)
    assert time.monotonic() - started < 2.0
    worker.join(timeout=5)
    listener.close()
