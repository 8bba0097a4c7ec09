"""Digital-twin entry point used by process-target tests.

Connects to the broker named in TWIN_BROKER, subscribes its inbound channels,
announces readiness with a hello message, then echoes:

* every ``{"kind": "cmd"}`` received on a pt channel is answered with a
  ``{"kind": "state"}`` message on the pt out-channels;
* peer behaviour comes from ``parameters.peer_role`` in the DT config —
  a ``pinger`` publishes peer-pings until it hears a peer-pong, an ``echo``
  answers every peer-ping with a peer-pong.

Progress is also printed to stdout so job logs can be asserted on.
"""

from __future__ import annotations

import json
import os
import sys
import time

from twinforge.messaging import BrokerClient


def log(text):
    print(text, flush=True)


def main():
    dt_id = os.environ["DT_ID"]
    with open(os.environ["DT_CONFIG_PATH"], encoding="utf-8") as fh:
        config = json.load(fh)

    channels = config.get("channels", [])
    pt_in = [c["topic"] for c in channels
             if c["role"] == "pt" and c["direction"] in ("in", "bidirectional")]
    pt_out = [c["topic"] for c in channels
              if c["role"] == "pt" and c["direction"] in ("out", "bidirectional")]
    peer_topics = [c["topic"] for c in channels if c["role"] == "dt-peer"]
    peer_role = config.get("parameters", {}).get("peer_role")

    client = BrokerClient(os.environ["TWIN_BROKER"],
                          client_id=f"dt-{dt_id}-{os.environ['JOB_ID']}")
    subs = [(topic, client.subscribe(topic)) for topic in pt_in + peer_topics]

    for topic in pt_out:
        client.publish(topic, json.dumps({"kind": "hello", "dt_id": dt_id}).encode())
    log("hello published")

    ponged = peer_role != "pinger"
    next_ping = time.monotonic()
    while True:
        if peer_role == "pinger" and not ponged and time.monotonic() >= next_ping:
            for topic in peer_topics:
                client.publish(topic, json.dumps(
                    {"kind": "peer-ping", "from": dt_id}).encode())
            next_ping = time.monotonic() + 0.25

        for topic, sub in subs:
            msg = sub.get(timeout=0.02)
            if msg is None:
                continue
            try:
                doc = json.loads(msg.payload)
            except ValueError:
                continue
            if doc.get("from") == dt_id:
                continue  # own message on a bidirectional topic

            kind = doc.get("kind")
            if kind == "cmd":
                reply = {"kind": "state", "dt_id": dt_id, "echo": doc.get("n")}
                for out in pt_out:
                    client.publish(out, json.dumps(reply).encode())
                log(f"cmd answered n={doc.get('n')}")
            elif kind == "peer-ping" and peer_role == "echo":
                for out in peer_topics:
                    client.publish(out, json.dumps(
                        {"kind": "peer-pong", "from": dt_id}).encode())
                log("peer ping answered")
            elif kind == "peer-pong" and peer_role == "pinger":
                if not ponged:
                    ponged = True
                    log("peer round-trip complete")


if __name__ == "__main__":
    try:
        main()
    except KeyboardInterrupt:
        sys.exit(0)
