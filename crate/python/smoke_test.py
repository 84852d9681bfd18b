"""Smoke test for the ipgate Python extension.

Build and install it first:

    pip install maturin
    (cd crates/python && maturin build --release -o dist && pip install dist/ipgate-*.whl)

then run ``python python/smoke_test.py``.
"""

import os
import tempfile

import ipgate

T0 = 1_700_000_000


def check_store(store):
    end = store.insert_session("10.0.0.5", "alice", ["internet"], 300, T0)
    assert end == T0 + 300, end
    assert store.lookup("10.0.0.5", "internet", T0) == "alice"
    assert store.lookup("10.0.0.5", "admins", T0) is None
    assert store.lookup("10.0.0.5", "internet", T0 + 300) == "alice"
    assert store.lookup("10.0.0.5", "internet", T0 + 301) is None
    assert store.session("10.0.0.5", T0 + 301) is None

    store.insert_session("10.0.0.6", "bob", ["internet"], 60, T0)
    out = store.run_helper("10.0.0.6\n10.0.0.7\nnot-an-ip\n", "internet", T0)
    assert out == "OK user=bob\nERR\nERR\n", repr(out)
    assert store.logout("10.0.0.6")
    assert not store.logout("10.0.0.6")


def main():
    check_store(ipgate.SessionStore())
    with tempfile.TemporaryDirectory() as d:
        check_store(ipgate.SessionStore("sqlite:" + os.path.join(d, "sessions.db")))

    try:
        ipgate.SessionStore().lookup("::1", "internet", T0)
    except ValueError:
        pass
    else:
        raise AssertionError("IPv6 client accepted")

    store = ipgate.SessionStore()
    engine = ipgate.AclEngine(store, "whitelist", [".example.org"], ttl=300)
    assert engine.evaluate("10.0.0.9", "http://www.example.org/", T0) == ("allow", None)
    assert engine.evaluate("10.0.0.9", "http://elsewhere.net/", T0) == ("deny-needs-login", None)
    store.insert_session("10.0.0.9", "carol", ["internet"], 3600, T0)
    # the negative answer is still cached
    assert engine.evaluate("10.0.0.9", "http://elsewhere.net/", T0 + 1)[0] == "deny-needs-login"
    engine.clear_cache()
    assert engine.evaluate("10.0.0.9", "http://elsewhere.net/", T0 + 2) == ("allow", "carol")

    assert ipgate.match_domain("www.facebook.com", [".facebook.com"])
    assert not ipgate.match_domain("notfacebook.com", [".facebook.com"])
    assert ipgate.decide("blacklist", True, None) == ("deny-blacklisted", None)
    assert ipgate.decide("blacklist", True, "dave") == ("allow", "dave")
    assert ipgate.parse_helper_request_ip("10.1.2.3 extra\n") == "10.1.2.3"
    assert ipgate.format_helper_reply("erin") == "OK user=erin"
    assert ipgate.format_helper_reply(None) == "ERR"
    assert (
        ipgate.reconstruct_uri("GET /a?b=1 HTTP/1.1", [("Host", "example.com:8080")])
        == "http://example.com:8080/a?b=1"
    )

    creds = "frank:" + ipgate.hash_password("s3cret") + ":internet,staff\n"
    assert ipgate.verify_credentials(creds, "frank", "s3cret") == ["internet", "staff"]
    assert ipgate.verify_credentials(creds, "frank", "wrong") is None

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
