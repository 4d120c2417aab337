"""Site-capabilities registry: which site offers which function descriptors."""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from packaging.specifiers import InvalidSpecifier, SpecifierSet
from packaging.version import InvalidVersion, Version
from pydantic import BaseModel


class UnknownSite(LookupError):
    pass


class Conflict(Exception):
    pass


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    type: str
    min: float | None = None
    max: float | None = None
    default: float | int | str | None = None


@dataclass(frozen=True)
class FunctionDescriptor:
    uuid: str
    name: str
    version: str
    route: str
    internal_path: str
    parameters: tuple[ParameterSpec, ...] = ()
    hardware_tags: tuple[str, ...] = ()
    storage_id: str = ""

    def __post_init__(self):
        try:
            Version(self.version)
        except InvalidVersion:
            raise ValueError(f"version {self.version!r} is not a semantic version") from None
        object.__setattr__(self, "parameters", tuple(
            p if isinstance(p, ParameterSpec) else ParameterSpec(**p) for p in self.parameters))
        object.__setattr__(self, "hardware_tags", tuple(self.hardware_tags))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["parameters"] = [asdict(p) for p in self.parameters]
        doc["hardware_tags"] = list(self.hardware_tags)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> FunctionDescriptor:
        return cls(**doc)


@dataclass(frozen=True)
class SiteRecord:
    site_id: str
    gatekeeper_url: str
    functions: tuple[FunctionDescriptor, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "site_id": self.site_id,
            "gatekeeper_url": self.gatekeeper_url,
            "functions": [f.to_dict() for f in self.functions],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> SiteRecord:
        return cls(doc["site_id"], doc["gatekeeper_url"],
                   tuple(FunctionDescriptor.from_dict(f) for f in doc.get("functions", ())))


class SiteRegistry:
    """Sites and their descriptors, optionally persisted as an append-only JSON-lines log."""

    def __init__(self, log_path=None):
        self._lock = threading.Lock()
        self._sites: dict[str, SiteRecord] = {}
        self.log_path = Path(log_path) if log_path else None
        if self.log_path and self.log_path.exists():
            for line in self.log_path.read_text().splitlines():
                if line.strip():
                    self._apply(json.loads(line))

    def _apply(self, event: dict) -> bool:
        """Apply one event; return False when it was a no-op."""
        if event["op"] == "site":
            site_id, url = event["site_id"], event["gatekeeper_url"]
            current = self._sites.get(site_id)
            if current is not None:
                if current.gatekeeper_url != url:
                    raise Conflict(f"site {site_id} already registered with {current.gatekeeper_url}")
                return False
            self._sites = {**self._sites, site_id: SiteRecord(site_id, url)}
            return True
        if event["op"] == "service":
            site_id = event["site_id"]
            descriptor = FunctionDescriptor.from_dict(event["descriptor"])
            site = self._sites.get(site_id)
            if site is None:
                raise UnknownSite(site_id)
            for existing in site.functions:
                if existing.uuid == descriptor.uuid:
                    if existing == descriptor:
                        return False
                    raise Conflict(f"uuid {descriptor.uuid} already registered with different content")
                if (existing.name, existing.version) == (descriptor.name, descriptor.version):
                    raise Conflict(f"{descriptor.name} {descriptor.version} already registered at {site_id}")
            # sorted so the state depends on the set of registrations, not their order
            functions = sorted(site.functions + (descriptor,), key=lambda f: (f.name, Version(f.version), f.uuid))
            updated = SiteRecord(site_id, site.gatekeeper_url, tuple(functions))
            self._sites = {**self._sites, site_id: updated}
            return True
        raise ValueError(f"unknown event {event['op']!r}")

    def _commit(self, event: dict):
        with self._lock:
            if self._apply(event) and self.log_path:
                with self.log_path.open("a") as fh:
                    fh.write(json.dumps(event, sort_keys=True) + "\n")

    def register_site(self, site_id: str, gatekeeper_url: str) -> None:
        self._commit({"op": "site", "site_id": site_id, "gatekeeper_url": gatekeeper_url})

    def register_service(self, site_id: str, descriptor: FunctionDescriptor) -> None:
        self._commit({"op": "service", "site_id": site_id, "descriptor": descriptor.to_dict()})

    def list_site_services(self, site_id: str) -> SiteRecord:
        try:
            return self._sites[site_id]
        except KeyError:
            raise UnknownSite(site_id) from None

    def sites(self) -> list[SiteRecord]:
        sites = self._sites
        return [sites[k] for k in sorted(sites)]

    def find_function(self, name: str, version_req: str | None = None, hardware_tags=None):
        """Matching ``(site_id, descriptor)`` pairs by site ascending, then version descending.

        ``version_req`` is a PEP 440 specifier such as ``">=1.0,<2"``; every
        tag in ``hardware_tags`` must be present on the descriptor.
        """
        spec = SpecifierSet(version_req, prereleases=True) if version_req else None
        wanted = set(hardware_tags or ())
        hits = []
        for site in self.sites():
            for fn in site.functions:
                if fn.name != name or not wanted <= set(fn.hardware_tags):
                    continue
                if spec is not None and Version(fn.version) not in spec:
                    continue
                hits.append((site.site_id, fn))
        hits.sort(key=lambda h: h[1].uuid)
        hits.sort(key=lambda h: Version(h[1].version), reverse=True)
        hits.sort(key=lambda h: h[0])
        return hits


def register_service(registry: SiteRegistry, site_id: str, descriptor: FunctionDescriptor) -> None:
    registry.register_service(site_id, descriptor)


def find_function(registry: SiteRegistry, name: str, version_req=None, hardware_tags=None):
    return registry.find_function(name, version_req, hardware_tags)


def list_site_services(registry: SiteRegistry, site_id: str) -> SiteRecord:
    return registry.list_site_services(site_id)


class SiteIn(BaseModel):
    site_id: str
    gatekeeper_url: str


class ParameterIn(BaseModel):
    name: str
    type: str
    min: float | None = None
    max: float | None = None
    default: float | int | str | None = None


class DescriptorIn(BaseModel):
    uuid: str
    name: str
    version: str
    route: str
    internal_path: str
    parameters: list[ParameterIn] = []
    hardware_tags: list[str] = []
    storage_id: str = ""


def _error(status, code, message):
    return JSONResponse({"error_code": code, "message": message}, status_code=status)


def create_app(registry: SiteRegistry) -> FastAPI:
    app = FastAPI(title="Site capabilities")

    @app.post("/sites", status_code=201)
    def post_site(body: SiteIn):
        try:
            registry.register_site(body.site_id, body.gatekeeper_url)
        except Conflict as exc:
            return _error(409, "conflict", str(exc))
        return registry.list_site_services(body.site_id).to_dict()

    @app.get("/sites")
    def get_sites():
        return {"sites": [s.to_dict() for s in registry.sites()]}

    @app.post("/sites/{site_id}/services", status_code=201)
    def post_service(site_id: str, body: DescriptorIn):
        try:
            descriptor = FunctionDescriptor.from_dict(body.model_dump())
            registry.register_service(site_id, descriptor)
        except ValueError as exc:
            return _error(400, "invalid_descriptor", str(exc))
        except UnknownSite:
            return _error(404, "unknown_site", f"unknown site {site_id}")
        except Conflict as exc:
            return _error(409, "conflict", str(exc))
        return descriptor.to_dict()

    @app.get("/sites/{site_id}/services")
    def get_site_services(site_id: str):
        try:
            return registry.list_site_services(site_id).to_dict()
        except UnknownSite:
            return _error(404, "unknown_site", f"unknown site {site_id}")

    @app.get("/services")
    def get_services(name: str, tag: list[str] | None = None, version: str | None = None):
        try:
            hits = registry.find_function(name, version, tag)
        except InvalidSpecifier as exc:
            return _error(400, "invalid_version_req", str(exc))
        return {"services": [{"site_id": s, **fn.to_dict()} for s, fn in hits]}

    @app.get("/health")
    def health():
        return {"status": "ok", "service": "site-capabilities"}

    return app
