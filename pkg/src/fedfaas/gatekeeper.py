"""Site gatekeeper: authenticate, authorize, then proxy to the internal function service.

Every request runs the same pipeline, and the body only goes upstream once all
checks have passed:

1. longest-prefix route match (404)
2. bearer token verification (401)
3. namespace extraction through the permissions plugin (400)
4. group/namespace/function authorization (403)
5. path rewrite from the external route to the runtime's internal path
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Mapping

import httpx
import yaml
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from starlette.concurrency import run_in_threadpool

from .datasets import IvoId
from .identity import IssuerKey, MalformedToken, TokenError, decode_bearer, verify_token
from .permissions import ExtractionFailed, NoPluginForRoute

log = logging.getLogger("fedfaas.gatekeeper")

CORRELATION_HEADER = "X-Correlation-ID"
DEFAULT_UPSTREAM_TIMEOUT = 300.0
# some clients send the British spelling
AUTH_HEADERS = ("authorization", "authorisation")
_REQUIRED = ("route", "namespace", "service_name", "port", "uuid")


class ConfigError(ValueError):
    def __init__(self, index: int | None, field_name: str, message: str):
        where = f"service[{index}].{field_name}" if index is not None else field_name
        super().__init__(f"{where}: {message}")
        self.index = index
        self.field = field_name


@dataclass(frozen=True)
class RouteEntry:
    route: str
    namespace: str
    service_name: str
    port: int
    uuid: str
    ingress_host: str = ""

    @property
    def service_key(self) -> str:
        return f"{self.service_name}.{self.namespace}:{self.port}"


@dataclass(frozen=True)
class GatekeeperConfig:
    services: tuple[RouteEntry, ...]
    issuer_key_ref: str = ""
    permissions_endpoint: str = ""
    internal_resolver: Mapping[str, str] = field(default_factory=dict)

    def match(self, path: str) -> RouteEntry | None:
        best = None
        for entry in self.services:
            route = entry.route.rstrip("/")
            if path == route or path.startswith(route + "/"):
                if best is None or len(route) > len(best.route.rstrip("/")):
                    best = entry
        return best

    def resolve(self, entry: RouteEntry) -> str:
        """Network address for an entry; defaults to cluster-style DNS."""
        return self.internal_resolver.get(entry.service_key, entry.service_key)


def load_config(document: bytes | str) -> GatekeeperConfig:
    try:
        doc = yaml.safe_load(document)
    except yaml.YAMLError as exc:
        raise ConfigError(None, "document", f"not valid YAML: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("service"), list):
        raise ConfigError(None, "service", "document needs a 'service' list")

    entries, seen = [], {}
    for i, raw in enumerate(doc["service"]):
        if not isinstance(raw, dict):
            raise ConfigError(i, "entry", "must be a mapping")
        for name in _REQUIRED:
            if raw.get(name) in (None, ""):
                raise ConfigError(i, name, "missing")
        route, port = raw["route"], raw["port"]
        if not isinstance(route, str) or not route.startswith("/"):
            raise ConfigError(i, "route", f"must start with '/', got {route!r}")
        if type(port) is not int or not 1 <= port <= 65535:
            raise ConfigError(i, "port", f"must be an integer in 1..65535, got {port!r}")
        for name in ("namespace", "service_name", "uuid"):
            if not isinstance(raw[name], str):
                raise ConfigError(i, name, "must be a string")
        ingress_host = raw.get("ingress_host") or ""
        if not isinstance(ingress_host, str):
            raise ConfigError(i, "ingress_host", "must be a string")
        key = route.rstrip("/") or "/"
        if key in seen:
            raise ConfigError(i, "route", f"duplicate route {route!r} (first at service[{seen[key]}])")
        seen[key] = i
        entries.append(RouteEntry(route, raw["namespace"], raw["service_name"], port, raw["uuid"], ingress_host))

    resolver = doc.get("internal_resolver") or {}
    if not isinstance(resolver, dict):
        raise ConfigError(None, "internal_resolver", "must be a mapping")
    return GatekeeperConfig(
        services=tuple(entries),
        issuer_key_ref=str(doc.get("issuer_key_ref") or ""),
        permissions_endpoint=str(doc.get("permissions_endpoint") or ""),
        internal_resolver={str(k): str(v) for k, v in resolver.items()},
    )


def dump_config(config: GatekeeperConfig) -> str:
    doc = {"service": [
        {"route": e.route, "namespace": e.namespace, "service_name": e.service_name,
         "ingress_host": e.ingress_host, "port": e.port, "uuid": e.uuid}
        for e in config.services
    ]}
    if config.issuer_key_ref:
        doc["issuer_key_ref"] = config.issuer_key_ref
    if config.permissions_endpoint:
        doc["permissions_endpoint"] = config.permissions_endpoint
    if config.internal_resolver:
        doc["internal_resolver"] = dict(config.internal_resolver)
    return yaml.safe_dump(doc, sort_keys=False)


@dataclass(frozen=True)
class ForwardDecision:
    entry: RouteEntry
    rewritten_path: str
    subject: str
    groups: tuple[str, ...]
    ivoid: IvoId


@dataclass(frozen=True)
class Rejection:
    status: int
    error_code: str
    message: str
    subject: str | None = None


def rewrite_path(path: str, entry: RouteEntry, internal_path: str) -> str:
    rest = path[len(entry.route.rstrip("/")):]
    if rest in ("", "/"):
        return internal_path
    return internal_path.rstrip("/") + rest


def bearer_token(headers: Mapping[str, str]) -> str | None:
    lowered = {k.lower(): v for k, v in headers.items()}
    for name in AUTH_HEADERS:
        value = lowered.get(name)
        if value is not None:
            scheme, _, token = value.strip().partition(" ")
            if scheme.lower() != "bearer" or not token.strip():
                raise MalformedToken("authorization header is not a bearer token")
            return token.strip()
    return None


def route_request(config: GatekeeperConfig, method: str, path: str, headers: Mapping[str, str], body: bytes,
                  *, key: IssuerKey, authorizer, now: int, internal_path_for=None):
    """Run the admission pipeline; return a ForwardDecision or a Rejection.

    ``authorizer`` provides ``extract(route, body)`` and
    ``check(groups, namespace, uuid)``; ``internal_path_for(entry)`` gives the
    runtime path to rewrite to (the route itself when omitted).
    """
    entry = config.match(path)
    if entry is None:
        return Rejection(404, "no_route", f"no service is routed at {path}")
    if method.upper() != "POST":
        return Rejection(405, "method_not_allowed", f"{method} is not accepted on {entry.route}")

    try:
        raw = bearer_token(headers)
        if raw is None:
            return Rejection(401, "missing_token", "Authorization: Bearer token required")
        token = verify_token(decode_bearer(raw), key, now)
    except TokenError as exc:
        return Rejection(401, exc.error_code, str(exc))

    try:
        namespace, ivoid = authorizer.extract(entry.route, body)
    except NoPluginForRoute:
        return Rejection(400, "no_plugin_for_route", f"no permissions plugin for {entry.route}", token.subject)
    except ExtractionFailed as exc:
        return Rejection(400, "extraction_failed", str(exc), token.subject)

    decision = authorizer.check(token.groups, namespace, entry.uuid)
    if not decision.allowed:
        return Rejection(403, "forbidden",
                         f"{token.subject} may not run {entry.route} on namespace {namespace}", token.subject)

    internal = internal_path_for(entry) if internal_path_for else entry.route.rstrip("/") + "/"
    return ForwardDecision(entry, rewrite_path(path, entry, internal), token.subject, token.groups, ivoid)


@dataclass
class TransferMeter:
    bytes_served_locally: int = 0
    requests_forwarded_cross_site: int = 0
    requests_forwarded: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record(self, local: bool, nbytes: int):
        with self._lock:
            self.requests_forwarded += 1
            if local:
                self.bytes_served_locally += nbytes
            else:
                self.requests_forwarded_cross_site += 1

    def to_dict(self) -> dict:
        return {
            "bytes_served_locally": self.bytes_served_locally,
            "requests_forwarded_cross_site": self.requests_forwarded_cross_site,
            "requests_forwarded": self.requests_forwarded,
        }


class InternalPaths:
    """Look up each route's internal path in site-capabilities, caching hits."""

    def __init__(self, registry, site_id: str):
        self.registry = registry
        self.site_id = site_id
        self._cache: dict[str, str] = {}

    def __call__(self, entry: RouteEntry) -> str:
        if entry.uuid not in self._cache:
            try:
                functions = self.registry.list_site_services(self.site_id).functions
            except Exception:
                log.warning("site-capabilities lookup failed for %s", self.site_id, exc_info=True)
                functions = ()
            for fn in functions:
                if fn.uuid == entry.uuid:
                    self._cache[entry.uuid] = fn.internal_path
                    break
            else:
                return entry.route.rstrip("/") + "/"
        return self._cache[entry.uuid]


class Gatekeeper:
    """Request handling state for one site: config snapshot, key, collaborators."""

    def __init__(self, config: GatekeeperConfig, key: IssuerKey, authorizer, *, site_id: str = "local",
                 internal_path_for=None, catalogue=None, timeout: float = DEFAULT_UPSTREAM_TIMEOUT,
                 clock=time.time, transport: httpx.BaseTransport | None = None):
        self.config = config
        self.key = key
        self.authorizer = authorizer
        self.site_id = site_id
        self.internal_path_for = internal_path_for
        self.catalogue = catalogue
        self.clock = clock
        self.meter = TransferMeter()
        self._http = httpx.Client(timeout=timeout, transport=transport)

    def reload(self, document: bytes | str) -> GatekeeperConfig:
        # in-flight requests keep the snapshot they started with
        config = load_config(document)
        self.config = config
        return config

    def _holds_replica(self, ivoid: IvoId) -> bool | None:
        if self.catalogue is None:
            return None
        try:
            return any(r.site_id == self.site_id for r in self.catalogue.resolve_replicas(ivoid))
        except Exception:
            log.warning("replica lookup failed for %s", ivoid, exc_info=True)
            return None

    def forward(self, config: GatekeeperConfig, decision: ForwardDecision, body: bytes,
                correlation_id: str, content_type: str = "application/json") -> Response:
        url = f"http://{config.resolve(decision.entry)}{decision.rewritten_path}"
        try:
            upstream = self._http.post(url, content=body, headers={
                "content-type": content_type, CORRELATION_HEADER: correlation_id})
        except httpx.TimeoutException:
            return _reject_response(Rejection(504, "upstream_timeout", f"{url} timed out"), correlation_id)
        except httpx.TransportError as exc:
            return _reject_response(Rejection(502, "upstream_unreachable", f"{url}: {exc}"), correlation_id)

        local = self._holds_replica(decision.ivoid)
        if local is None:
            local = not (upstream.status_code == 404 and _error_code(upstream) == "dataset_not_found")
        self.meter.record(local, len(upstream.content) if upstream.is_success else 0)

        headers = {CORRELATION_HEADER: correlation_id}
        ctype = upstream.headers.get("content-type")
        return Response(upstream.content, status_code=upstream.status_code, headers=headers, media_type=ctype)

    def handle(self, method: str, path: str, headers: Mapping[str, str], body: bytes) -> Response:
        config = self.config
        correlation_id = headers.get(CORRELATION_HEADER.lower()) or uuid.uuid4().hex
        try:
            outcome = route_request(config, method, path, headers, body, key=self.key,
                                    authorizer=self.authorizer, now=int(self.clock()),
                                    internal_path_for=self.internal_path_for)
        except Exception as exc:
            log.exception("permissions service failed")
            outcome = Rejection(503, "permissions_unavailable", str(exc))
        if isinstance(outcome, Rejection):
            log.info(json.dumps({
                "event": "rejected", "correlation_id": correlation_id,
                "subject": outcome.subject or "anon", "route": path, "error_code": outcome.error_code,
            }))
            return _reject_response(outcome, correlation_id)
        log.info(json.dumps({
            "event": "forward", "correlation_id": correlation_id, "subject": outcome.subject,
            "route": outcome.entry.route, "upstream_path": outcome.rewritten_path,
        }))
        return self.forward(config, outcome, body, correlation_id,
                            headers.get("content-type", "application/json"))

    def close(self):
        self._http.close()


def _error_code(response: httpx.Response) -> str | None:
    try:
        return response.json().get("error_code")
    except (ValueError, AttributeError):
        return None


def _reject_response(rejection: Rejection, correlation_id: str) -> JSONResponse:
    return JSONResponse(
        {"error_code": rejection.error_code, "message": rejection.message},
        status_code=rejection.status,
        headers={CORRELATION_HEADER: correlation_id},
    )


def create_app(gatekeeper: Gatekeeper) -> FastAPI:
    app = FastAPI(title="GateKeeper", docs_url=None, redoc_url=None, openapi_url=None)
    app.state.gatekeeper = gatekeeper

    @app.get("/_gatekeeper/health")
    def health():
        return {"status": "ok", "site_id": gatekeeper.site_id,
                "routes": [e.route for e in gatekeeper.config.services]}

    @app.get("/_gatekeeper/meter")
    def meter():
        return {"site_id": gatekeeper.site_id, **gatekeeper.meter.to_dict()}

    @app.api_route("/{path:path}", methods=["GET", "POST", "PUT", "PATCH", "DELETE"])
    async def proxy(path: str, request: Request):
        body = await request.body()
        return await run_in_threadpool(gatekeeper.handle, request.method, "/" + path,
                                       dict(request.headers), body)

    return app
