"""DataLink discovery: join replicas with registered functions and render a VOTable.

A function is only offered at a site that both holds a replica of the dataset
and registers the function. Among such sites the lexicographically smallest
``site_id`` wins.
"""

from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape, quoteattr

from fastapi import FastAPI, Query
from fastapi.responses import JSONResponse, Response
from packaging.version import Version

from .datasets import IvoId, ParseError, parse_ivoid

VOTABLE_MEDIA_TYPE = "application/x-votable+xml"

_XSD_TYPES = {"double": "double", "float": "double", "int": "int", "integer": "int", "str": "char", "string": "char"}


class NoEligibleSite(LookupError):
    pass


@dataclass(frozen=True)
class InputParam:
    name: str
    datatype: str
    value: str
    ucd: str = ""


@dataclass(frozen=True)
class ServiceLink:
    function_name: str
    site_id: str
    resource_identifier: str
    access_url: str
    input_params: tuple[InputParam, ...]
    constraints: tuple[dict, ...] = ()

    def to_dict(self) -> dict:
        return {
            "function_name": self.function_name,
            "site_id": self.site_id,
            "resource_identifier": self.resource_identifier,
            "access_url": self.access_url,
            "input_params": [vars(p) for p in self.input_params],
            "constraints": list(self.constraints),
        }


def select_site(candidate_sites) -> str:
    candidates = list(candidate_sites)
    if not candidates:
        raise NoEligibleSite("no site holds the data and offers the function")
    return min(candidates)


def access_url(gatekeeper_url: str, route: str) -> str:
    return gatekeeper_url.rstrip("/") + "/" + route.strip("/") + "/"


def _format_default(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def links_for(ivoid: IvoId, catalogue, registry) -> list[ServiceLink]:
    """Service links for ``ivoid``, one per function name, ordered by name.

    ``catalogue`` needs ``resolve_replicas(ivoid)`` and ``registry`` needs
    ``sites()``; in-process stores and HTTP clients both qualify.
    """
    holders = {r.site_id for r in catalogue.resolve_replicas(ivoid)}
    offers: dict[str, dict[str, tuple]] = {}
    for site in registry.sites():
        for fn in site.functions:
            offers.setdefault(fn.name, {})
            if site.site_id in holders:
                best = offers[fn.name].get(site.site_id)
                if best is None or _newer(fn, best[1]):
                    offers[fn.name][site.site_id] = (site, fn)

    links = []
    for name in sorted(offers):
        eligible = offers[name]
        if not eligible:
            continue
        site, fn = eligible[select_site(eligible)]
        params = [InputParam("ID", "char", ivoid.dataset_id, "meta.id;meta.dataset")]
        constraints = []
        for p in fn.parameters:
            if p.default is not None:
                params.append(InputParam(p.name.upper(), _XSD_TYPES.get(p.type, p.type), _format_default(p.default)))
            constraints.append({"name": p.name, "type": p.type, "min": p.min, "max": p.max, "default": p.default})
        links.append(ServiceLink(
            function_name=name,
            site_id=site.site_id,
            resource_identifier=fn.uuid,
            access_url=access_url(site.gatekeeper_url, fn.route),
            input_params=tuple(params),
            constraints=tuple(constraints),
        ))
    return links


def _newer(a, b) -> bool:
    return Version(a.version) > Version(b.version)


def _param(p: InputParam, indent: str) -> str:
    if p.datatype == "char":
        attrs = f'name={quoteattr(p.name)} datatype="char" arraysize="{len(p.value)}"'
    else:
        attrs = f"name={quoteattr(p.name)} datatype={quoteattr(p.datatype)}"
    if p.ucd:
        attrs += f" ucd={quoteattr(p.ucd)}"
    return f"{indent}<PARAM {attrs} value={quoteattr(p.value)} />\n"


def render_service_resource(link: ServiceLink) -> str:
    """The ``RESOURCE type="meta"`` service descriptor block for one link."""
    out = [f'<RESOURCE type="meta" ID={quoteattr(link.function_name)} utype="adhoc:service">\n']
    out.append(_param(InputParam("resourceIdentifier", "char", link.resource_identifier), "  "))
    out.append(_param(InputParam("accessURL", "char", link.access_url), "  "))
    out.append('  <GROUP name="inputParams">\n')
    out.extend(_param(p, "    ") for p in link.input_params)
    out.append("  </GROUP>\n")
    out.append("</RESOURCE>\n")
    return "".join(out)


def render_votable(ivoid: IvoId, links) -> bytes:
    rows = "".join(
        f"<TR><TD>{escape(ivoid.dataset_id)}</TD><TD></TD><TD>{escape(link.function_name)}</TD>"
        f"<TD>{escape(link.function_name + ' at ' + link.site_id)}</TD></TR>\n"
        for link in links
    )
    doc = (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        '<VOTABLE version="1.4" xmlns="http://www.ivoa.net/xml/VOTable/v1.3">\n'
        '<RESOURCE type="results">\n'
        "<TABLE>\n"
        '<FIELD name="ID" datatype="char" arraysize="*" ucd="meta.id;meta.main" />\n'
        '<FIELD name="access_url" datatype="char" arraysize="*" ucd="meta.ref.url" />\n'
        '<FIELD name="service_def" datatype="char" arraysize="*" ucd="meta.ref" />\n'
        '<FIELD name="description" datatype="char" arraysize="*" ucd="meta.note" />\n'
        "<DATA><TABLEDATA>\n"
        f"{rows}"
        "</TABLEDATA></DATA>\n"
        "</TABLE>\n"
        f"<INFO name=\"dataset\" value={quoteattr(str(ivoid))} />\n"
        "</RESOURCE>\n"
        + "".join(render_service_resource(link) for link in links)
        + "</VOTABLE>\n"
    )
    return doc.encode("utf-8")


def create_app(catalogue, registry) -> FastAPI:
    app = FastAPI(title="DataLink")

    @app.get("/links")
    def get_links(ID: str = Query(...), format: str = "votable"):
        try:
            ivoid = parse_ivoid(ID)
        except ParseError as exc:
            return JSONResponse({"error_code": "invalid_ivoid", "message": str(exc)}, status_code=400)
        links = links_for(ivoid, catalogue, registry)
        if format == "json":
            return {"ivoid": str(ivoid), "links": [link.to_dict() for link in links]}
        return Response(render_votable(ivoid, links), media_type=VOTABLE_MEDIA_TYPE)

    @app.get("/health")
    def health():
        return {"status": "ok", "service": "datalink"}

    return app
