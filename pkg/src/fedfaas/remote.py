"""HTTP clients that stand in for the in-process stores of the global services."""

from __future__ import annotations

import json

import httpx

from .datasets import AlreadyExists, IvoId, ReplicaRecord, parse_ivoid
from .permissions import Decision, Effect, ExtractionFailed, NoPluginForRoute, PolicyRule
from .sitecaps import Conflict, FunctionDescriptor, SiteRecord, UnknownSite


class ServiceError(RuntimeError):
    def __init__(self, response: httpx.Response):
        try:
            body = response.json()
        except ValueError:
            body = {}
        self.status_code = response.status_code
        self.error_code = body.get("error_code", "http_error")
        super().__init__(f"{response.request.method} {response.request.url} -> "
                         f"{response.status_code} {body.get('message', response.text)}")


class _Remote:
    def __init__(self, base_url: str, timeout: float = 10.0, client: httpx.Client | None = None):
        self.base_url = base_url.rstrip("/")
        self._client = client or httpx.Client(timeout=timeout)

    def _call(self, method: str, path: str, **kwargs) -> dict:
        response = self._client.request(method, self.base_url + path, **kwargs)
        if response.status_code >= 400:
            raise ServiceError(response)
        return response.json()

    def close(self):
        self._client.close()


class RemoteCatalogue(_Remote):
    def register_replica(self, record: ReplicaRecord) -> None:
        try:
            self._call("POST", "/replicas", json=record.to_dict())
        except ServiceError as exc:
            if exc.status_code == 409:
                raise AlreadyExists(str(exc)) from None
            raise

    def resolve_replicas(self, ivoid: IvoId) -> list[ReplicaRecord]:
        doc = self._call("GET", "/replicas", params={"ivo": str(ivoid)})
        return [ReplicaRecord.from_dict(r) for r in doc["replicas"]]

    def search(self, namespace: str, name: str) -> list[ReplicaRecord]:
        doc = self._call("GET", "/replicas", params={"namespace": namespace, "name": name})
        return [ReplicaRecord.from_dict(r) for r in doc["replicas"]]


class RemoteRegistry(_Remote):
    def _register(self, path: str, doc: dict):
        try:
            self._call("POST", path, json=doc)
        except ServiceError as exc:
            if exc.status_code == 409:
                raise Conflict(str(exc)) from None
            if exc.error_code == "unknown_site":
                raise UnknownSite(path.split("/")[2]) from None
            raise

    def register_site(self, site_id: str, gatekeeper_url: str) -> None:
        self._register("/sites", {"site_id": site_id, "gatekeeper_url": gatekeeper_url})

    def register_service(self, site_id: str, descriptor: FunctionDescriptor) -> None:
        self._register(f"/sites/{site_id}/services", descriptor.to_dict())

    def list_site_services(self, site_id: str) -> SiteRecord:
        try:
            return SiteRecord.from_dict(self._call("GET", f"/sites/{site_id}/services"))
        except ServiceError as exc:
            if exc.status_code == 404:
                raise UnknownSite(site_id) from None
            raise

    def sites(self) -> list[SiteRecord]:
        return [SiteRecord.from_dict(s) for s in self._call("GET", "/sites")["sites"]]


class RemotePermissions(_Remote):
    """Client for the Permissions API with the interface the gatekeeper expects."""

    def extract(self, route: str, body: bytes) -> tuple[str, IvoId]:
        try:
            doc = self._call("POST", "/authz/extract", json={"route": route, "body": body.decode("utf-8")})
        except UnicodeDecodeError:
            raise ExtractionFailed("body is not UTF-8") from None
        except ServiceError as exc:
            if exc.error_code == "no_plugin_for_route":
                raise NoPluginForRoute(route) from None
            if exc.error_code == "extraction_failed":
                raise ExtractionFailed(str(exc)) from None
            raise
        return doc["namespace"], parse_ivoid(doc["ivoid"])

    def check(self, groups, namespace: str, function_uuid: str) -> Decision:
        doc = self._call("POST", "/authz/check", json={
            "groups": list(groups), "namespace": namespace, "function_uuid": function_uuid})
        rule = PolicyRule(**doc["matched_rule"]) if doc["matched_rule"] else None
        return Decision(Effect(doc["decision"]), rule)

    def add_rule(self, rule: PolicyRule) -> None:
        self._call("POST", "/authz/rules", json=rule.to_dict())

    def remove_rule(self, rule: PolicyRule) -> None:
        self._call("DELETE", "/authz/rules", content=json.dumps(rule.to_dict()),
                   headers={"content-type": "application/json"})
