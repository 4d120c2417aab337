"""Mock identity provider: signed bearer tokens with subject, groups and expiry.

A serialized token is the canonical JSON encoding of its claims, a ``.``, and
the lowercase hex HMAC-SHA256 of those claim bytes. On the wire it travels as
unpadded urlsafe base64 inside ``Authorization: Bearer``.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
import time
from dataclasses import dataclass, field

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

MIN_SECRET_BYTES = 32


class TokenError(Exception):
    """Base class for token verification failures."""

    error_code = "invalid_token"


class MalformedToken(TokenError):
    error_code = "malformed_token"


class InvalidSignature(TokenError):
    error_code = "invalid_signature"


class Expired(TokenError):
    error_code = "token_expired"


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class IssuerKey:
    key_id: str
    secret: bytes = field(repr=False)

    def __post_init__(self):
        if len(self.secret) < MIN_SECRET_BYTES:
            raise ValidationError(f"issuer secret must be at least {MIN_SECRET_BYTES} bytes")

    @classmethod
    def from_hex(cls, key_id: str, secret_hex: str) -> IssuerKey:
        return cls(key_id, bytes.fromhex(secret_hex))


@dataclass(frozen=True)
class AccessToken:
    subject: str
    groups: tuple[str, ...]
    issued_at: int
    expires_at: int
    signature: bytes = b""

    def claims(self) -> dict:
        return {
            "exp": self.expires_at,
            "groups": list(self.groups),
            "iat": self.issued_at,
            "sub": self.subject,
        }


def _claim_bytes(claims: dict) -> bytes:
    return json.dumps(claims, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def _mac(key: IssuerKey, payload: bytes) -> bytes:
    return hmac.new(key.secret, payload, hashlib.sha256).hexdigest().encode()


def issue_token(subject: str, groups, ttl_seconds: int, key: IssuerKey, now: int | None = None) -> AccessToken:
    if not isinstance(subject, str) or not subject:
        raise ValidationError("subject must be a non-empty string")
    if not isinstance(ttl_seconds, int) or isinstance(ttl_seconds, bool) or ttl_seconds < 1:
        raise ValidationError("ttl_seconds must be a positive integer")
    groups = tuple(groups)
    if not all(isinstance(g, str) for g in groups):
        raise ValidationError("groups must be strings")
    issued_at = int(time.time()) if now is None else int(now)
    unsigned = AccessToken(subject, groups, issued_at, issued_at + ttl_seconds)
    return AccessToken(
        subject, groups, issued_at, unsigned.expires_at,
        _mac(key, _claim_bytes(unsigned.claims())),
    )


def serialize_token(token: AccessToken) -> bytes:
    return _claim_bytes(token.claims()) + b"." + token.signature


def verify_token(raw: bytes, key: IssuerKey, now: int) -> AccessToken:
    """Decode ``raw`` and return its claims if the MAC checks out and ``now < exp``.

    The claim bytes must be exactly the canonical encoding of what they decode
    to, so no two distinct byte strings verify to the same token.
    """
    payload, sep, signature = bytes(raw).rpartition(b".")
    if not sep or not payload:
        raise MalformedToken("token has no signature separator")
    try:
        claims = json.loads(payload.decode("ascii"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedToken(f"claims are not valid JSON: {exc}") from None
    if not isinstance(claims, dict) or set(claims) != {"exp", "groups", "iat", "sub"}:
        raise MalformedToken("unexpected claim set")
    sub, groups, iat, exp = claims["sub"], claims["groups"], claims["iat"], claims["exp"]
    if (
        not isinstance(sub, str) or not sub
        or not isinstance(groups, list) or not all(isinstance(g, str) for g in groups)
        or type(iat) is not int or type(exp) is not int or exp <= iat
    ):
        raise MalformedToken("claim types are invalid")
    if _claim_bytes(claims) != payload:
        raise MalformedToken("claims are not canonically encoded")

    if not hmac.compare_digest(_mac(key, payload), signature):
        raise InvalidSignature("signature does not match claims")
    if now >= exp:
        raise Expired(f"token expired at {exp}")
    return AccessToken(sub, tuple(groups), iat, exp, signature)


def encode_bearer(raw: bytes) -> str:
    return base64.urlsafe_b64encode(raw).decode("ascii").rstrip("=")


def decode_bearer(text: str) -> bytes:
    try:
        raw = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except (binascii.Error, ValueError):
        raise MalformedToken("bearer value is not base64") from None
    # reject encodings that differ only in padding bits
    if encode_bearer(raw) != text:
        raise MalformedToken("bearer value is not canonical base64")
    return raw


class TokenRequest(BaseModel):
    subject: str
    groups: list[str] = Field(default_factory=list)
    ttl_seconds: int = 3600


def create_app(key: IssuerKey, clock=time.time) -> FastAPI:
    """The mock IAM service: ``POST /token``."""
    app = FastAPI(title="Mock IAM")

    @app.post("/token")
    def token(req: TokenRequest):
        try:
            tok = issue_token(req.subject, req.groups, req.ttl_seconds, key, now=int(clock()))
        except ValidationError as exc:
            return JSONResponse({"error_code": "validation_error", "message": str(exc)}, status_code=422)
        return {"token": encode_bearer(serialize_token(tok)), "expires_at": tok.expires_at}

    @app.get("/health")
    def health():
        return {"status": "ok", "service": "iam"}

    return app
