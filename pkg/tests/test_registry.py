"""Registry: append-only versioning, visibility soundness, hash integrity."""

import pytest
from hypothesis import given, settings, strategies as st

from twinforge.blobstore import BlobStore, content_hash
from twinforge.errors import (
    CorruptPayload,
    DuplicateName,
    Forbidden,
    InvalidManifest,
    NotFound,
)
from twinforge.recordlog import RecordLog
from twinforge.registry import (
    AssetKind,
    AssetQuery,
    AssetRecord,
    AssetVersion,
    Registry,
    Visibility,
    validate_manifest,
    visible,
)


def manifest(name, kind="data", **extra):
    doc = {"name": name, "kind": kind, "description": f"{name} asset"}
    doc.update(extra)
    return doc


@pytest.fixture
def registry(tmp_path):
    return Registry(BlobStore(tmp_path / "blobs"), RecordLog(tmp_path / "catalog.log"))


def publish(reg, owner="alice", name="meter", kind=AssetKind.DATA,
            visibility=Visibility.COMMON, payload=b"v1", **kw):
    return reg.publish_asset(owner, name, kind, visibility, payload,
                             manifest(name, kind.value), **kw)


# -- versioning ---------------------------------------------------------------


def test_publish_creates_version_one(registry):
    record = publish(registry)
    assert [v.version for v in record.versions] == [1]
    got, entry, payload = registry.get_asset(record.id, None, "alice")
    assert payload == b"v1"
    assert entry.content_hash == content_hash(b"v1")


def test_versions_are_gap_free_from_one(registry):
    record = publish(registry)
    for i in range(2, 8):
        registry.update_asset("alice", record.id, f"v{i}".encode(),
                              manifest("meter", "data"))
    updated = registry.lookup(record.id)
    assert [v.version for v in updated.versions] == list(range(1, 8))


def test_history_stays_byte_identical_after_updates(registry):
    record = publish(registry, payload=b"original-bytes")
    first = record.latest
    registry.update_asset("alice", record.id, b"changed", manifest("meter", "data"))

    _, entry, payload = registry.get_asset(record.id, 1, "alice")
    assert payload == b"original-bytes"
    assert entry == first  # the version-1 entry itself is untouched
    _, latest, new_payload = registry.get_asset(record.id, None, "alice")
    assert (latest.version, new_payload) == (2, b"changed")


def test_missing_version_raises_not_found(registry):
    record = publish(registry)
    with pytest.raises(NotFound):
        registry.get_asset(record.id, 99, "alice")


def test_duplicate_name_is_per_owner_kind_name(registry):
    publish(registry, owner="alice", name="meter", kind=AssetKind.DATA)
    with pytest.raises(DuplicateName):
        publish(registry, owner="alice", name="meter", kind=AssetKind.DATA)
    # same name under a different kind or owner is fine
    publish(registry, owner="alice", name="meter", kind=AssetKind.MODEL)
    publish(registry, owner="bob", name="meter", kind=AssetKind.DATA)


def test_update_is_owner_gated(registry):
    record = publish(registry)
    with pytest.raises(Forbidden):
        registry.update_asset("mallory", record.id, b"x", manifest("meter", "data"))
    with pytest.raises(NotFound):
        registry.update_asset("alice", "ast-missing", b"x", manifest("meter", "data"))


# -- visibility ----------------------------------------------------------------


def test_private_assets_answer_not_found_to_others(registry):
    record = publish(registry, visibility=Visibility.PRIVATE)
    registry.get_asset(record.id, None, "alice")  # owner sees it
    with pytest.raises(NotFound):
        registry.get_asset(record.id, None, "bob")
    names = {r.id for r in registry.list_assets(AssetQuery(), "bob")}
    assert record.id not in names


class MemBlobs:
    """Dict-backed stand-in with the BlobStore surface, for fast property runs."""

    def __init__(self):
        self.data = {}

    def put(self, payload):
        digest = content_hash(payload)
        self.data[digest] = payload
        return digest

    def get(self, digest):
        return self.data[digest]

    def storage_key(self, digest):
        return f"store/{digest[:2]}/{digest}"

    def __contains__(self, digest):
        return digest in self.data


@settings(max_examples=60, deadline=None)
@given(data=st.data())
def test_visibility_soundness_property(data):
    """No sequence of publishes lets a user list or fetch another's private asset."""
    reg = Registry(MemBlobs(), None)
    users = ["u0", "u1", "u2"]
    n = data.draw(st.integers(min_value=1, max_value=8))
    for i in range(n):
        owner = data.draw(st.sampled_from(users))
        vis = data.draw(st.sampled_from(list(Visibility)))
        reg.publish_asset(owner, f"a{i}", AssetKind.DATA, vis, f"p{i}".encode(),
                          manifest(f"a{i}"))

    for user in users:
        for record in reg.list_assets(AssetQuery(), user):
            assert visible(record, user)
        for record in reg.all_records():
            if visible(record, user):
                reg.get_asset(record.id, None, user)
            else:
                assert record.visibility == Visibility.PRIVATE
                with pytest.raises(NotFound):
                    reg.get_asset(record.id, None, user)


# -- integrity ------------------------------------------------------------------


def test_tampered_blob_is_rejected(registry, tmp_path):
    record = publish(registry, payload=b"trusted-bytes")
    digest = record.latest.content_hash
    blob_path = tmp_path / "blobs" / digest[:2] / digest
    blob_path.write_bytes(b"tampered!!")
    with pytest.raises(CorruptPayload):
        registry.get_asset(record.id, None, "alice")


def test_missing_blob_is_rejected(registry, tmp_path):
    record = publish(registry, payload=b"trusted-bytes")
    digest = record.latest.content_hash
    (tmp_path / "blobs" / digest[:2] / digest).unlink()
    with pytest.raises(CorruptPayload):
        registry.get_asset(record.id, None, "alice")


# -- queries ---------------------------------------------------------------------


def test_list_is_deterministic_and_sorted(registry):
    for i, name in enumerate(["zeta", "alpha", "mid"]):
        publish(registry, name=name)
    query = AssetQuery(kind_filter=AssetKind.DATA)
    first = registry.list_assets(query, "alice")
    second = registry.list_assets(query, "alice")
    assert first == second
    assert [r.name for r in first] == ["alpha", "mid", "zeta"]


def test_query_filters(registry):
    publish(registry, name="pump-model", kind=AssetKind.MODEL)
    publish(registry, name="pump-data", kind=AssetKind.DATA)
    publish(registry, owner="bob", name="valve-data", kind=AssetKind.DATA)

    models = registry.list_assets(AssetQuery(kind_filter=AssetKind.MODEL), "alice")
    assert [r.name for r in models] == ["pump-model"]
    pumps = registry.list_assets(AssetQuery(name_pattern="pump-*"), "alice")
    assert {r.name for r in pumps} == {"pump-model", "pump-data"}
    bobs = registry.list_assets(AssetQuery(owner_filter="bob"), "alice")
    assert [r.name for r in bobs] == ["valve-data"]


def test_include_remote_merges_without_shadowing_local(registry):
    local = publish(registry, name="shared")
    remote_only = AssetRecord(
        id="ast-remote", name="faraway", kind=AssetKind.DATA, owner="remote",
        visibility=Visibility.COMMON,
        versions=(AssetVersion(1, content_hash(b"r"), manifest("faraway"), "store/xx/yy"),),
        created_at=0.0,
    )
    remote_dup = AssetRecord(
        id=local.id, name="shared", kind=AssetKind.DATA, owner="remote",
        visibility=Visibility.COMMON, versions=remote_only.versions, created_at=0.0,
    )
    registry.remote_provider = lambda: [remote_only, remote_dup]

    merged = registry.list_assets(AssetQuery(include_remote=True), "alice")
    by_id = {r.id: r for r in merged}
    assert by_id["ast-remote"].name == "faraway"
    assert by_id[local.id].owner == "alice"  # the local record wins

    plain = registry.list_assets(AssetQuery(), "alice")
    assert {r.id for r in plain} == {local.id}


# -- manifests --------------------------------------------------------------------


@pytest.mark.parametrize("bad", [
    "not-a-dict",
    {},
    {"name": "x", "kind": "data"},                      # missing description
    {"name": "", "kind": "data", "description": ""},     # empty name
    {"name": "x", "kind": "nope", "description": ""},    # unknown kind
    {"name": "x", "kind": "data", "description": "", "interface": []},
    {"name": "x", "kind": "data", "description": "", "interface": {"inputs": "nope"}},
    {"name": "x", "kind": "data", "description": "", "deprecated": "yes"},
])
def test_invalid_manifests_rejected(bad):
    with pytest.raises(InvalidManifest):
        validate_manifest(bad)


def test_manifest_kind_must_match_asset_kind(registry):
    with pytest.raises(InvalidManifest):
        registry.publish_asset("alice", "x", AssetKind.MODEL, Visibility.COMMON,
                               b"p", manifest("x", "data"))


# -- durability --------------------------------------------------------------------


def test_replay_reconstructs_catalog(tmp_path):
    blobs = BlobStore(tmp_path / "blobs")
    log = RecordLog(tmp_path / "catalog.log")
    reg = Registry(blobs, log)
    a = publish(reg, name="one", payload=b"1")
    publish(reg, name="two", visibility=Visibility.PRIVATE, payload=b"2")
    reg.update_asset("alice", a.id, b"1b", manifest("one", "data"))
    log.close()

    reg2 = Registry(BlobStore(tmp_path / "blobs"), RecordLog(tmp_path / "catalog.log"))
    originals = {r.id: r.to_dict() for r in reg.all_records()}
    restored = {r.id: r.to_dict() for r in reg2.all_records()}
    assert restored == originals
