"""Broker: topic rules, ordering, exactly-once, retention, TCP transport."""

import re
import threading

import pytest
from hypothesis import given, settings, strategies as st

from twinforge.errors import InvalidConfig, InvalidPattern, InvalidTopic, Unreachable
from twinforge.messaging import (
    RETAINED_PER_TOPIC,
    Broker,
    BrokerClient,
    bind_channels,
    topic_matches,
    validate_pattern,
    validate_topic,
)

from conftest import wait_until


# -- topic and pattern grammar ---------------------------------------------------


@pytest.mark.parametrize("topic", ["a", "pt.dt-1.state", "a.b_c.d-e", "x" * 255])
def test_valid_topics(topic):
    assert validate_topic(topic) == topic


@pytest.mark.parametrize("topic", [
    "", None, "UPPER.case", "sp ace", "a..b", ".lead", "trail.", "a.b!", "x" * 256,
])
def test_invalid_topics(topic):
    with pytest.raises(InvalidTopic):
        validate_topic(topic)


@pytest.mark.parametrize("pattern", ["*", "a.*", "*.b.*", "pt.*.state"])
def test_valid_patterns(pattern):
    assert validate_pattern(pattern) == pattern


@pytest.mark.parametrize("pattern", ["", None, "a.**", "a.*x", "A.*"])
def test_invalid_patterns(pattern):
    with pytest.raises(InvalidPattern):
        validate_pattern(pattern)


SEGMENTS = st.sampled_from(["a", "b", "cc", "x1", "y_2", "z-3"])


def regex_oracle(pattern: str, topic: str) -> bool:
    rx = "^" + r"\.".join(
        "[a-z0-9_-]+" if seg == "*" else re.escape(seg)
        for seg in pattern.split(".")
    ) + "$"
    return re.match(rx, topic) is not None


@settings(max_examples=300, deadline=None)
@given(
    topic_segs=st.lists(SEGMENTS, min_size=1, max_size=4),
    pattern_segs=st.lists(st.one_of(SEGMENTS, st.just("*")), min_size=1, max_size=4),
)
def test_matcher_agrees_with_regex_oracle(topic_segs, pattern_segs):
    topic = ".".join(topic_segs)
    pattern = ".".join(pattern_segs)
    assert topic_matches(pattern, topic) == regex_oracle(pattern, topic)


@settings(max_examples=100, deadline=None)
@given(pairs=st.lists(st.tuples(SEGMENTS, st.booleans()), min_size=1, max_size=4))
def test_star_substitution_always_matches(pairs):
    pattern = ".".join("*" if star else seg for seg, star in pairs)
    topic = ".".join(seg for seg, _ in pairs)
    assert topic_matches(pattern, topic)


# -- in-process delivery ------------------------------------------------------------


def test_per_topic_fifo_under_concurrent_publishers():
    broker = Broker()
    sub = broker.subscribe("obs", "load.test")
    publishers, per = 4, 100

    def run(tag):
        for i in range(per):
            broker.publish(f"pub-{tag}", "load.test", f"{tag}:{i}".encode())

    threads = [threading.Thread(target=run, args=(t,)) for t in range(publishers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    messages = sub.drain()
    seqs = [m.seq for m in messages]
    assert seqs == list(range(1, publishers * per + 1))  # gap-free, strictly increasing
    # each publisher's own stream arrives in its publish order
    for tag in range(publishers):
        counters = [int(m.payload.split(b":")[1]) for m in messages
                    if m.sender == f"pub-{tag}"]
        assert counters == list(range(per))


def test_exactly_once_per_matching_subscription():
    broker = Broker()
    exact = broker.subscribe("s1", "a.b")
    wild = broker.subscribe("s2", "a.*")
    other = broker.subscribe("s3", "c.d")

    for i in range(20):
        broker.publish("p", "a.b", b"%d" % i)
    broker.publish("p", "a.x", b"stray")

    exact_msgs = exact.drain()
    assert [m.seq for m in exact_msgs] == list(range(1, 21))
    assert len({m.seq for m in exact_msgs}) == 20

    wild_msgs = wild.drain()
    assert [(m.topic, m.seq) for m in wild_msgs if m.topic == "a.b"] == [
        ("a.b", i) for i in range(1, 21)
    ]
    assert [m.topic for m in wild_msgs].count("a.x") == 1
    assert other.drain() == []


def test_no_replay_for_late_subscribers():
    broker = Broker()
    broker.publish("p", "t.x", b"before")
    sub = broker.subscribe("s", "t.x")
    assert sub.drain() == []
    broker.publish("p", "t.x", b"after")
    msgs = sub.drain()
    assert [m.payload for m in msgs] == [b"after"]
    assert msgs[0].seq == 2  # seq keeps counting from the pre-subscribe publish


def test_unsubscribe_stops_delivery():
    broker = Broker()
    sub = broker.subscribe("s", "t.y")
    broker.publish("p", "t.y", b"1")
    broker.unsubscribe(sub)
    broker.publish("p", "t.y", b"2")
    assert [m.payload for m in sub.drain()] == [b"1"]


def test_retained_ring_is_bounded():
    broker = Broker()
    total = RETAINED_PER_TOPIC + 100
    for i in range(total):
        broker.publish("p", "big.topic", b"x")
    assert broker.topic_depth("big.topic") == RETAINED_PER_TOPIC
    assert broker.topic_depth("never.seen") == 0


def test_publish_validates_topic():
    broker = Broker()
    with pytest.raises(InvalidTopic):
        broker.publish("p", "Bad Topic", b"x")


# -- TCP transport --------------------------------------------------------------------


@pytest.fixture
def served_broker():
    broker = Broker()
    listener = broker.serve("127.0.0.1", 0)
    yield broker, f"127.0.0.1:{listener.port}"
    broker.close()


def test_client_round_trip_preserves_bytes(served_broker):
    _, address = served_broker
    a = BrokerClient(address, client_id="alpha")
    b = BrokerClient(address, client_id="beta")
    try:
        sub = b.subscribe("bin.data")
        payload = bytes(range(256)) + b"\x00\xff" * 10
        seq = a.publish("bin.data", payload)
        assert seq == 1
        msg = wait_until(lambda: sub.get(timeout=0.5), message="message delivery")
        assert msg.payload == payload
        assert msg.topic == "bin.data"
        assert msg.seq == 1
    finally:
        a.close()
        b.close()


def test_client_subscribe_unsubscribe(served_broker):
    _, address = served_broker
    client = BrokerClient(address)
    try:
        sub = client.subscribe("t.z")
        client.publish("t.z", b"one")
        assert wait_until(lambda: sub.get(timeout=0.5)).payload == b"one"
        client.unsubscribe(sub)
        client.publish("t.z", b"two")
        assert sub.get(timeout=0.3) is None
    finally:
        client.close()


def test_server_errors_rehydrate_as_typed_errors(served_broker):
    _, address = served_broker
    client = BrokerClient(address)
    try:
        with pytest.raises(InvalidTopic):
            client.publish("NOT VALID", b"x")
    finally:
        client.close()


def test_client_connect_failure_is_unreachable():
    with pytest.raises(Unreachable):
        BrokerClient("127.0.0.1:1", timeout=0.5)


def test_mixed_local_and_tcp_subscribers(served_broker):
    broker, address = served_broker
    local = broker.subscribe("local", "mix.topic")
    client = BrokerClient(address)
    try:
        remote = client.subscribe("mix.topic")
        broker.publish("inproc", "mix.topic", b"from-broker")
        client.publish("mix.topic", b"from-client")

        def both(sub):
            got = []
            while True:
                m = sub.get(timeout=0.3)
                if m is None:
                    return got
                got.append(m)

        local_msgs = both(local)
        remote_msgs = both(remote)
        assert [m.payload for m in local_msgs] == [b"from-broker", b"from-client"]
        assert [m.payload for m in remote_msgs] == [b"from-broker", b"from-client"]
    finally:
        client.close()


# -- channel binding --------------------------------------------------------------------


def test_bind_channels_requires_a_channel():
    with pytest.raises(InvalidConfig):
        bind_channels("dt-1", [], Broker())


@pytest.mark.parametrize("bad", [
    [{"role": "smtp", "topic": "a", "direction": "in"}],
    [{"role": "pt", "topic": "a", "direction": "sideways"}],
    [{"role": "pt", "direction": "in"}],
    [{"role": "pt", "topic": "NOT OK", "direction": "in"}],
    ["not-an-object"],
])
def test_bind_channels_validates_entries(bad):
    with pytest.raises((InvalidConfig, InvalidTopic)):
        bind_channels("dt-1", bad, Broker())


def test_bind_channels_directions():
    broker = Broker()
    bound = bind_channels("dt-1", [
        {"role": "pt", "topic": "pt.dt-1.cmd", "direction": "in"},
        {"role": "pt", "topic": "pt.dt-1.state", "direction": "out"},
        {"role": "dt-peer", "topic": "peer.pair", "direction": "bidirectional"},
    ], broker)

    inbound, outbound, peer = bound.channels
    assert inbound.publish is None and inbound.subscription is not None
    assert outbound.publish is not None and outbound.subscription is None
    assert peer.publish is not None and peer.subscription is not None
    assert [c.topic for c in bound.pt_publishers()] == ["pt.dt-1.state"]

    # publishing through the bound channel reaches broker subscribers
    watcher = broker.subscribe("w", "pt.dt-1.state")
    outbound.publish(b"hello")
    assert [m.payload for m in watcher.drain()] == [b"hello"]
    # the DT's own inbound subscription delivers
    broker.publish("pt-side", "pt.dt-1.cmd", b"cmd")
    assert [m.payload for m in inbound.subscription.drain()] == [b"cmd"]

    bound.close(broker)
    broker.publish("pt-side", "pt.dt-1.cmd", b"late")
    assert inbound.subscription.drain() == []


def test_bind_channels_over_tcp(served_broker):
    broker, address = served_broker
    client = BrokerClient(address, client_id="dt-conn")
    try:
        bound = bind_channels("dt-9", [
            {"role": "pt", "topic": "pt.dt-9.state", "direction": "bidirectional"},
        ], client, client_id="dt-9-binding")
        watcher = broker.subscribe("w", "pt.dt-9.state")
        bound.channels[0].publish(b"over-tcp")
        assert wait_until(lambda: watcher.get(timeout=0.5)).payload == b"over-tcp"
        bound.close(client)
    finally:
        client.close()
