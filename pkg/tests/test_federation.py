"""Backend journal, catalog sync, payload pulls, push conflicts, announcements."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from twinforge.backend import Backend, BackendServer
from twinforge.blobstore import BlobStore, content_hash
from twinforge.errors import (
    BrokerUnreachable,
    Conflict,
    DuplicateLink,
    NotFound,
    PeerUnknown,
    ProtocolMismatch,
    Unauthorized,
    Unreachable,
)
from twinforge.federation import ANNOUNCE_TOPIC, Federation
from twinforge.messaging import Broker, BrokerClient
from twinforge.recordlog import RecordLog
from twinforge.registry import AssetKind, Registry, Visibility

from conftest import wait_until


def manifest(name, kind="data"):
    return {"name": name, "kind": kind, "description": "d"}


@pytest.fixture
def backend(tmp_path):
    return Backend(tmp_path / "hub", backend_id="hub")


@pytest.fixture
def server(backend):
    srv = BackendServer(backend).start()
    yield srv
    srv.stop()


def make_federation(tmp_path, name, log=False):
    base = tmp_path / name
    blobs = BlobStore(base / "blobs")
    registry = Registry(blobs, RecordLog(base / "catalog.log"))
    fed_log = RecordLog(base / "federation.log") if log else None
    return Federation(registry, blobs, instance_id=name, log=fed_log)


# -- backend journal -----------------------------------------------------------------


def test_append_is_compare_and_append(backend):
    assert backend.cursor == "0"
    assert backend.append("ast-1", 0, manifest("m"), b"v1") == 1
    assert backend.append("ast-1", 1, manifest("m"), b"v2") == 2
    with pytest.raises(Conflict):
        backend.append("ast-1", 0, manifest("m"), b"rebase-needed")
    with pytest.raises(Conflict):
        backend.append("ast-1", 5, manifest("m"), b"from-the-future")
    record = backend.registry.lookup("ast-1")
    assert [v.version for v in record.versions] == [1, 2]
    assert backend.cursor == "2"


def test_delta_walks_the_journal_and_dedupes(backend):
    backend.append("ast-a", 0, manifest("a"), b"a1")
    backend.append("ast-b", 0, manifest("b"), b"b1")
    backend.append("ast-a", 1, manifest("a"), b"a2")

    full = backend.delta("0")
    assert [e["id"] for e in full["entries"]] == ["ast-a", "ast-b"]  # touched once each
    assert full["cursor"] == "3"
    a_entry = full["entries"][0]
    assert [v["version"] for v in a_entry["versions"]] == [1, 2]

    later = backend.delta(full["cursor"])
    assert later == {"entries": [], "cursor": "3"}

    partial = backend.delta("1")  # only what happened after seq 1
    assert [e["id"] for e in partial["entries"]] == ["ast-b", "ast-a"]


def test_delta_excludes_private_records(backend):
    backend.publish(manifest("open"), b"o", visibility=Visibility.COMMON)
    backend.publish(manifest("secret"), b"s", visibility=Visibility.PRIVATE)
    delta = backend.delta("0")
    assert [e["name"] for e in delta["entries"]] == ["open"]
    # the private record still advances the journal cursor
    assert delta["cursor"] == "2"


def test_blob_lookup(backend):
    backend.append("ast-1", 0, manifest("m"), b"payload-bytes")
    digest = content_hash(b"payload-bytes")
    assert backend.blob(digest) == b"payload-bytes"
    with pytest.raises(NotFound):
        backend.blob("0" * 64)


def test_backend_journal_survives_restart(tmp_path):
    first = Backend(tmp_path / "hub", backend_id="hub")
    first.append("ast-1", 0, manifest("m"), b"v1")
    first.publish(manifest("p"), b"s", visibility=Visibility.PRIVATE)
    first.close()

    reborn = Backend(tmp_path / "hub", backend_id="hub")
    assert reborn.cursor == first.cursor
    assert {r.id for r in reborn.registry.all_records()} == {
        r.id for r in first.registry.all_records()
    }
    assert reborn.delta("0")["entries"] == first.delta("0")["entries"]
    reborn.close()


def test_info_banner(backend):
    info = backend.info()
    assert info["service"] == "twinforge-backend"
    assert info["protocol"] == 1
    assert info["backend_id"] == "hub"


# -- linking ----------------------------------------------------------------------------


def test_link_backend_records_banner_identity(tmp_path, server):
    fed = make_federation(tmp_path, "inst-a")
    link = fed.link_backend(server.url, sync_interval_s=0)
    assert link.backend_id == "hub"
    assert link.cursor == "0"
    with pytest.raises(DuplicateLink):
        fed.link_backend(server.url)
    fed.close()


def test_link_backend_unreachable(tmp_path):
    fed = make_federation(tmp_path, "inst-a")
    with pytest.raises(Unreachable):
        fed.link_backend("http://127.0.0.1:1")
    fed.close()


@pytest.fixture
def fake_http():
    """Tiny HTTP server returning a configurable /info document."""
    state = {"body": b"{}", "content_type": "application/json"}

    class FakeHandler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            pass

        def do_GET(self):
            self.send_response(200)
            self.send_header("Content-Type", state["content_type"])
            self.send_header("Content-Length", str(len(state["body"])))
            self.end_headers()
            self.wfile.write(state["body"])

    httpd = ThreadingHTTPServer(("127.0.0.1", 0), FakeHandler)
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    yield state, f"http://127.0.0.1:{httpd.server_address[1]}"
    httpd.shutdown()
    httpd.server_close()


@pytest.mark.parametrize("body,content_type", [
    (b"<html>not a banner</html>", "text/html"),
    (json.dumps({"service": "something-else", "protocol": 1}).encode(), "application/json"),
    (json.dumps({"service": "twinforge-backend", "protocol": 99}).encode(), "application/json"),
])
def test_link_rejects_wrong_protocol_speakers(tmp_path, fake_http, body, content_type):
    state, url = fake_http
    state["body"], state["content_type"] = body, content_type
    fed = make_federation(tmp_path, "inst-a")
    with pytest.raises(ProtocolMismatch):
        fed.link_backend(url)
    fed.close()


def test_token_protected_backend_rejects_anonymous_sync(tmp_path):
    srv = BackendServer(Backend(tmp_path / "hub", backend_id="hub", token="sek")).start()
    try:
        anon = make_federation(tmp_path, "anon")
        anon.link_backend(srv.url, sync_interval_s=0)  # /info stays open
        with pytest.raises(Unauthorized):
            anon.sync_catalog("hub")
        anon.close()

        trusted = make_federation(tmp_path, "trusted")
        trusted.link_backend(srv.url, token="sek", sync_interval_s=0)
        assert trusted.sync_catalog("hub")["absorbed"] == 0
        trusted.close()
    finally:
        srv.stop()


# -- sync --------------------------------------------------------------------------------


def test_sync_absorbs_common_records_only(tmp_path, backend, server):
    for i in range(3):
        backend.publish(manifest(f"open-{i}"), b"x%d" % i)
    backend.publish(manifest("secret"), b"s", visibility=Visibility.PRIVATE)

    fed = make_federation(tmp_path, "inst-a")
    fed.link_backend(server.url, sync_interval_s=0)
    result = fed.sync_catalog("hub")
    assert result["absorbed"] == 3

    shadows = fed.remote_records()
    assert {r.name for _, r in shadows} == {"open-0", "open-1", "open-2"}
    # shadow content matches the backend's catalog exactly
    theirs = {
        r.id: (len(r.versions), r.latest.content_hash)
        for r in backend.registry.all_records()
        if r.visibility is Visibility.COMMON
    }
    ours = {r.id: (len(r.versions), r.latest.content_hash) for _, r in shadows}
    assert ours == theirs
    fed.close()


def test_resync_is_a_fixpoint(tmp_path, backend, server):
    backend.publish(manifest("a"), b"1")
    fed = make_federation(tmp_path, "inst-a")
    fed.link_backend(server.url, sync_interval_s=0)
    assert fed.sync_catalog("hub")["absorbed"] == 1
    before = {r.id: r.to_dict() for _, r in fed.remote_records()}
    assert fed.sync_catalog("hub")["absorbed"] == 0
    assert {r.id: r.to_dict() for _, r in fed.remote_records()} == before

    backend.append(backend.registry.all_records()[0].id, 1, manifest("a"), b"2")
    assert fed.sync_catalog("hub")["absorbed"] == 1  # only the delta travels
    fed.close()


# -- pulls --------------------------------------------------------------------------------


def test_pull_verifies_and_caches_payloads(tmp_path, backend, server):
    record = backend.publish(manifest("weights"), b"model-weights")
    fed = make_federation(tmp_path, "inst-a")
    fed.link_backend(server.url, sync_interval_s=0)
    fed.sync_catalog("hub")

    assert fed.pull_payload("hub", record.id) == b"model-weights"
    # once cached, the payload outlives the backend
    server.stop()
    assert fed.pull_payload("hub", record.id) == b"model-weights"
    fed.close()


def test_pull_rejects_hash_mismatch(tmp_path, backend, server):
    record = backend.publish(manifest("weights"), b"genuine")
    digest = record.latest.content_hash
    fed = make_federation(tmp_path, "inst-a")
    fed.link_backend(server.url, sync_interval_s=0)
    fed.sync_catalog("hub")

    blob_path = backend.blobs._path(digest)
    blob_path.write_bytes(b"swapped!")
    with pytest.raises(ProtocolMismatch):
        fed.pull_payload("hub", record.id)
    # nothing corrupt entered the local store
    assert digest not in fed.blobs
    fed.close()


def test_pull_unknown_asset(tmp_path, server):
    fed = make_federation(tmp_path, "inst-a")
    fed.link_backend(server.url, sync_interval_s=0)
    with pytest.raises(NotFound):
        fed.pull_payload("hub", "ast-ghost")
    fed.close()


# -- push ----------------------------------------------------------------------------------


def test_push_sends_common_assets_and_is_idempotent(tmp_path, backend, server):
    fed = make_federation(tmp_path, "inst-a")
    fed.registry.publish_asset("alice", "pub", AssetKind.DATA, Visibility.COMMON,
                               b"pub-bytes", manifest("pub"))
    fed.registry.publish_asset("alice", "priv", AssetKind.DATA, Visibility.PRIVATE,
                               b"priv-bytes", manifest("priv"))
    fed.link_backend(server.url, sync_interval_s=0)

    result = fed.push_changes("hub")
    assert (result["pushed_assets"], result["pushed_versions"]) == (1, 1)
    assert {r.name for r in backend.registry.all_records()} == {"pub"}

    # pushed state becomes shadow state: re-push is a no-op
    again = fed.push_changes("hub")
    assert (again["pushed_assets"], again["pushed_versions"]) == (0, 0)

    # a new local version travels as exactly one append
    local = next(r for r in fed.registry.all_records() if r.name == "pub")
    fed.registry.update_asset("alice", local.id, b"pub-v2", manifest("pub"))
    third = fed.push_changes("hub")
    assert (third["pushed_assets"], third["pushed_versions"]) == (1, 1)
    assert len(backend.registry.lookup(local.id).versions) == 2
    fed.close()


def test_push_same_base_conflicts_for_the_second_writer(tmp_path, backend, server):
    fed_a = make_federation(tmp_path, "inst-a")
    fed_b = make_federation(tmp_path, "inst-b")
    for fed, payload in ((fed_a, b"from-a"), (fed_b, b"from-b")):
        fed.registry.publish_asset("alice", "contested", AssetKind.DATA,
                                   Visibility.COMMON, payload, manifest("contested"),
                                   asset_id="ast-contested")
        fed.link_backend(server.url, sync_interval_s=0)

    assert fed_a.push_changes("hub")["pushed_versions"] == 1
    with pytest.raises(Conflict):
        fed_b.push_changes("hub")
    # the backend kept the winner's bytes, gap-free
    record = backend.registry.lookup("ast-contested")
    assert [v.version for v in record.versions] == [1]
    assert backend.blob(record.latest.content_hash) == b"from-a"

    # after syncing the loser sees the winning version and stops conflicting
    fed_b.sync_catalog("hub")
    assert fed_b.push_changes("hub")["pushed_versions"] == 0
    fed_a.close()
    fed_b.close()


def test_push_owner_filter(tmp_path, backend, server):
    fed = make_federation(tmp_path, "inst-a")
    fed.registry.publish_asset("alice", "hers", AssetKind.DATA, Visibility.COMMON,
                               b"a", manifest("hers"))
    fed.registry.publish_asset("bob", "his", AssetKind.DATA, Visibility.COMMON,
                               b"b", manifest("his"))
    fed.link_backend(server.url, sync_interval_s=0)
    result = fed.push_changes("hub", owner="alice")
    assert result["pushed_assets"] == 1
    assert {r.name for r in backend.registry.all_records()} == {"hers"}
    fed.close()


# -- twin announcements -------------------------------------------------------------------


class FakeDefinition:
    def __init__(self, dt_id, name="twin", owner="alice"):
        self.dt_id = dt_id
        self.name = name
        self.owner = owner


@pytest.fixture
def shared_broker():
    broker = Broker()
    listener = broker.serve("127.0.0.1", 0)
    yield f"127.0.0.1:{listener.port}"
    broker.close()


def test_announce_reaches_other_instances(tmp_path, shared_broker):
    fed_a = make_federation(tmp_path, "inst-a")
    fed_b = make_federation(tmp_path, "inst-b")
    client_a = BrokerClient(shared_broker, client_id="inst-a")
    client_b = BrokerClient(shared_broker, client_id="inst-b")
    try:
        fed_a.attach_broker(client_a)
        fed_b.attach_broker(client_b)

        shadow = fed_a.announce_twin(FakeDefinition("dt-42"), peers=("dt-1",))
        assert shadow.instance == "inst-a"
        wait_until(lambda: "dt-42" in fed_b.twins, message="announcement absorbed")
        assert fed_b.managing_instance("dt-42") == "inst-a"
        assert fed_b.twins["dt-42"].peers == ("dt-1",)
        # the announcing side keeps its own record too
        assert fed_a.managing_instance("dt-42") == "inst-a"

        fed_b.check_peers(("dt-42",), set())
        with pytest.raises(PeerUnknown):
            fed_b.check_peers(("dt-unknown",), set())
        fed_b.check_peers(("dt-local",), {"dt-local"})  # local twins count
    finally:
        fed_a.close()
        fed_b.close()
        client_a.close()
        client_b.close()


def test_announce_without_broker_fails_but_keeps_shadow(tmp_path):
    fed = make_federation(tmp_path, "inst-a")
    with pytest.raises(BrokerUnreachable):
        fed.announce_twin(FakeDefinition("dt-9"))
    assert fed.managing_instance("dt-9") == "inst-a"
    fed.close()


# -- durability ------------------------------------------------------------------------------


def test_federation_log_replay_restores_links_shadows_twins(tmp_path, backend, server):
    backend.publish(manifest("a"), b"1")
    fed = make_federation(tmp_path, "inst-a", log=True)
    fed.link_backend(server.url, sync_interval_s=0)
    fed.sync_catalog("hub")
    fed.registry.publish_asset("alice", "mine", AssetKind.DATA, Visibility.COMMON,
                               b"m", manifest("mine"))
    fed.push_changes("hub")
    try:
        fed.announce_twin(FakeDefinition("dt-1"))
    except BrokerUnreachable:
        pass  # no broker; the shadow is still recorded
    fed.log.close()

    base = tmp_path / "inst-a"
    blobs = BlobStore(base / "blobs")
    reborn = Federation(Registry(blobs, None), blobs, instance_id="inst-a",
                        log=RecordLog(base / "federation.log"))
    assert set(reborn.links) == {"hub"}
    assert reborn.links["hub"].cursor == fed.links["hub"].cursor
    assert {r.id: r.to_dict() for _, r in reborn.remote_records()} == \
        {r.id: r.to_dict() for _, r in fed.remote_records()}
    assert reborn.managing_instance("dt-1") == "inst-a"
    reborn.close()
    fed.close()
