"""Authorization: group/namespace/function policy rules plus per-route plugins.

Rules combine as default-deny with Deny overriding Allow. A plugin knows how
to pull the dataset identifier, and with it the namespace, out of a
function's request body.
"""

from __future__ import annotations

import enum
import json
import threading
from dataclasses import dataclass
from typing import Callable

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .datasets import IvoId, ParseError, parse_ivoid

WILDCARD = "*"


class Effect(str, enum.Enum):
    ALLOW = "Allow"
    DENY = "Deny"


class AlreadyExists(Exception):
    pass


class NoPluginForRoute(LookupError):
    pass


class ExtractionFailed(ValueError):
    pass


@dataclass(frozen=True, order=True)
class PolicyRule:
    group: str
    namespace: str
    function_uuid: str
    effect: Effect

    def __post_init__(self):
        object.__setattr__(self, "effect", Effect(self.effect))

    def matches(self, groups, namespace: str, function_uuid: str) -> bool:
        return (
            (self.group == WILDCARD or self.group in groups)
            and self.namespace in (WILDCARD, namespace)
            and self.function_uuid in (WILDCARD, function_uuid)
        )

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "namespace": self.namespace,
            "function_uuid": self.function_uuid,
            "effect": self.effect.value,
        }


@dataclass(frozen=True)
class Decision:
    effect: Effect
    matched_rule: PolicyRule | None

    @property
    def allowed(self) -> bool:
        return self.effect is Effect.ALLOW


class PolicyStore:
    def __init__(self, rules=()):
        self._lock = threading.Lock()
        self._rules: frozenset[PolicyRule] = frozenset(rules)

    @property
    def rules(self) -> frozenset[PolicyRule]:
        return self._rules

    def add(self, rule: PolicyRule) -> None:
        with self._lock:
            self._rules = self._rules | {rule}

    def remove(self, rule: PolicyRule) -> bool:
        with self._lock:
            present = rule in self._rules
            self._rules = self._rules - {rule}
            return present

    def check(self, groups, namespace: str, function_uuid: str) -> Decision:
        return check_authorization(self, groups, namespace, function_uuid)


def check_authorization(store: PolicyStore, groups, namespace: str, function_uuid: str) -> Decision:
    # sorted() makes matched_rule independent of insertion order
    matching = sorted(r for r in store.rules if r.matches(groups, namespace, function_uuid))
    for effect in (Effect.DENY, Effect.ALLOW):
        for rule in matching:
            if rule.effect is effect:
                return Decision(effect, rule)
    return Decision(Effect.DENY, None)


def parse_rules(text: str) -> list[PolicyRule]:
    """One rule per line: group, namespace, function_uuid, effect (tab-separated)."""
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ValueError(f"rules line {lineno}: expected 4 tab-separated fields, got {len(fields)}")
        try:
            rules.append(PolicyRule(*(f.strip() for f in fields)))
        except ValueError:
            raise ValueError(f"rules line {lineno}: effect must be Allow or Deny") from None
    return rules


def dump_rules(rules) -> str:
    return "".join(f"{r.group}\t{r.namespace}\t{r.function_uuid}\t{r.effect.value}\n" for r in sorted(rules))


@dataclass(frozen=True)
class ExtractionPlugin:
    function_route: str
    extractor: Callable[[bytes], IvoId]


def extract_ivo_field(body: bytes) -> IvoId:
    """Extractor for functions whose JSON body carries an ``ivo`` identifier."""
    try:
        doc = json.loads(body)
    except (UnicodeDecodeError, ValueError) as exc:
        raise ExtractionFailed(f"body is not JSON: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("ivo"), str):
        raise ExtractionFailed("body has no string 'ivo' field")
    try:
        return parse_ivoid(doc["ivo"])
    except ParseError as exc:
        raise ExtractionFailed(f"invalid ivo: {exc}") from None


GAUSSCONV_PLUGIN = ExtractionPlugin("/gaussconv", extract_ivo_field)


class PluginRegistry:
    def __init__(self, plugins=()):
        self._plugins: dict[str, ExtractionPlugin] = {}
        for plugin in plugins:
            self.register(plugin)

    def register(self, plugin: ExtractionPlugin) -> None:
        if plugin.function_route in self._plugins:
            raise AlreadyExists(f"plugin already registered for {plugin.function_route}")
        self._plugins[plugin.function_route] = plugin

    def extract(self, route: str, body: bytes) -> tuple[str, IvoId]:
        plugin = self._plugins.get(route)
        if plugin is None:
            raise NoPluginForRoute(route)
        ivoid = plugin.extractor(body)
        return ivoid.namespace, ivoid


def register_plugin(registry: PluginRegistry, plugin: ExtractionPlugin) -> None:
    registry.register(plugin)


def extract_namespace(registry: PluginRegistry, route: str, body: bytes) -> tuple[str, IvoId]:
    return registry.extract(route, body)


def default_plugins() -> PluginRegistry:
    return PluginRegistry([GAUSSCONV_PLUGIN, ExtractionPlugin("/gaussconv-gpu", extract_ivo_field)])


class PermissionsService:
    """In-process counterpart of the Permissions API (what the gatekeeper calls)."""

    def __init__(self, store: PolicyStore, plugins: PluginRegistry):
        self.store = store
        self.plugins = plugins

    def extract(self, route: str, body: bytes) -> tuple[str, IvoId]:
        return self.plugins.extract(route, body)

    def check(self, groups, namespace: str, function_uuid: str) -> Decision:
        return self.store.check(groups, namespace, function_uuid)


class CheckIn(BaseModel):
    groups: list[str]
    namespace: str
    function_uuid: str


class ExtractIn(BaseModel):
    route: str
    body: str


class RuleIn(BaseModel):
    group: str
    namespace: str
    function_uuid: str
    effect: Effect


def _error(status, code, message):
    return JSONResponse({"error_code": code, "message": message}, status_code=status)


def create_app(store: PolicyStore, plugins: PluginRegistry) -> FastAPI:
    """The Permissions API: ``/authz/check``, ``/authz/extract`` and rule management."""
    app = FastAPI(title="Permissions API")

    @app.post("/authz/check")
    def check(req: CheckIn):
        decision = store.check(req.groups, req.namespace, req.function_uuid)
        rule = decision.matched_rule.to_dict() if decision.matched_rule else None
        return {"decision": decision.effect.value, "matched_rule": rule}

    @app.post("/authz/extract")
    def extract(req: ExtractIn):
        try:
            namespace, ivoid = plugins.extract(req.route, req.body.encode())
        except NoPluginForRoute as exc:
            return _error(404, "no_plugin_for_route", f"no plugin for route {exc}")
        except ExtractionFailed as exc:
            return _error(400, "extraction_failed", str(exc))
        return {"namespace": namespace, "ivoid": str(ivoid)}

    @app.get("/authz/rules")
    def list_rules():
        return {"rules": [r.to_dict() for r in sorted(store.rules)]}

    @app.post("/authz/rules", status_code=201)
    def add_rule(req: RuleIn):
        rule = PolicyRule(req.group, req.namespace, req.function_uuid, req.effect)
        store.add(rule)
        return rule.to_dict()

    @app.delete("/authz/rules")
    def remove_rule(req: RuleIn):
        rule = PolicyRule(req.group, req.namespace, req.function_uuid, req.effect)
        if not store.remove(rule):
            return _error(404, "no_such_rule", "rule not present")
        return rule.to_dict()

    @app.get("/health")
    def health():
        return {"status": "ok", "service": "permissions"}

    return app
