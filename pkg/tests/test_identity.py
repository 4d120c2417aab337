import random

import pytest
from fastapi.testclient import TestClient
from hypothesis import given
from hypothesis import strategies as st

from fedfaas.identity import (
    Expired,
    InvalidSignature,
    IssuerKey,
    MalformedToken,
    TokenError,
    ValidationError,
    create_app,
    decode_bearer,
    encode_bearer,
    issue_token,
    serialize_token,
    verify_token,
)

KEY = IssuerKey("test", b"k" * 32)
NOW = 1_700_000_000


def test_issue_and_verify():
    token = issue_token("alice", ["gaussconv-users"], 3600, KEY, now=NOW)
    assert token.groups == ("gaussconv-users",)
    assert token.expires_at == NOW + 3600
    back = verify_token(serialize_token(token), KEY, NOW + 1)
    assert back == token


@pytest.mark.parametrize("subject,groups,ttl", [("", [], 3600), ("bob", [], 0), ("bob", [], -5), ("bob", [1], 10)])
def test_issue_rejects_bad_input(subject, groups, ttl):
    with pytest.raises(ValidationError):
        issue_token(subject, groups, ttl, KEY, now=NOW)


def test_short_secret_rejected():
    with pytest.raises(ValidationError):
        IssuerKey("short", b"x" * 31)


def test_expiry_boundary_is_exclusive():
    raw = serialize_token(issue_token("bob", [], 1, KEY, now=NOW))
    verify_token(raw, KEY, NOW)
    with pytest.raises(Expired):
        verify_token(raw, KEY, NOW + 1)
    with pytest.raises(Expired):
        verify_token(raw, KEY, NOW + 2)


def test_flipped_payload_byte():
    raw = bytearray(serialize_token(issue_token("alice", ["g"], 60, KEY, now=NOW)))
    i = raw.index(b"alice")
    raw[i] ^= 0x01
    with pytest.raises(InvalidSignature):
        verify_token(bytes(raw), KEY, NOW)


def test_other_key_rejected():
    raw = serialize_token(issue_token("alice", ["g"], 60, KEY, now=NOW))
    with pytest.raises(InvalidSignature):
        verify_token(raw, IssuerKey("other", b"o" * 32), NOW)


def test_non_canonical_claims_rejected():
    raw = serialize_token(issue_token("alice", ["g"], 60, KEY, now=NOW))
    payload, _, sig = raw.rpartition(b".")
    spaced = payload.replace(b",", b", ")
    with pytest.raises(MalformedToken):
        verify_token(spaced + b"." + sig, KEY, NOW)


@pytest.mark.parametrize("raw", [b"", b"nodot", b".abc", b"{}.abc", b"[1].x", b'{"sub":1}.x'])
def test_malformed(raw):
    with pytest.raises(MalformedToken):
        verify_token(raw, KEY, NOW)


def test_single_byte_mutation_fuzz():
    raw = serialize_token(issue_token("alice", ["gaussconv-users", "astro"], 3600, KEY, now=NOW))
    rng = random.Random(1234)
    for _ in range(1500):
        mutated = bytearray(raw)
        i = rng.randrange(len(raw))
        mutated[i] = (mutated[i] + rng.randrange(1, 256)) % 256
        with pytest.raises(TokenError):
            verify_token(bytes(mutated), KEY, NOW)


claims = st.tuples(
    st.text(min_size=1, max_size=20),
    st.lists(st.text(max_size=12), max_size=4),
    st.integers(1, 10**6),
    st.integers(0, 2**40),
)


@given(claims)
def test_round_trip_property(c):
    subject, groups, ttl, now = c
    token = issue_token(subject, groups, ttl, KEY, now=now)
    raw = serialize_token(token)
    assert verify_token(raw, KEY, now) == token
    assert decode_bearer(encode_bearer(raw)) == raw


@given(claims, st.integers(0, 10**6))
def test_verification_deterministic(c, offset):
    subject, groups, ttl, now = c
    raw = serialize_token(issue_token(subject, groups, ttl, KEY, now=now))
    outcomes = []
    for _ in range(2):
        try:
            outcomes.append(verify_token(raw, KEY, now + offset))
        except TokenError as exc:
            outcomes.append(type(exc))
    assert outcomes[0] == outcomes[1]


def test_bearer_rejects_noncanonical_base64():
    text = encode_bearer(b"ab")  # "YWI"
    assert decode_bearer(text) == b"ab"
    with pytest.raises(MalformedToken):
        decode_bearer("YWJ")
    with pytest.raises(MalformedToken):
        decode_bearer("!!!")


def test_token_endpoint():
    client = TestClient(create_app(KEY, clock=lambda: NOW))
    resp = client.post("/token", json={"subject": "alice", "groups": ["gaussconv-users"], "ttl_seconds": 60})
    assert resp.status_code == 200
    doc = resp.json()
    assert doc["expires_at"] == NOW + 60
    token = verify_token(decode_bearer(doc["token"]), KEY, NOW)
    assert token.subject == "alice"
    assert client.post("/token", json={"subject": "", "groups": []}).status_code == 422
    assert client.get("/health").json()["status"] == "ok"
