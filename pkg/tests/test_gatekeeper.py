import hashlib
import logging
from pathlib import Path

import httpx
import pytest
from gk_support import ALLOW, BODY, FITS_BYTES, KEY, NOW, PTF, CountingUpstream, config, make, token

from fedfaas.datasets import ReplicaCatalogue, ReplicaRecord, parse_ivoid
from fedfaas.gatekeeper import (
    CORRELATION_HEADER,
    ConfigError,
    ForwardDecision,
    InternalPaths,
    Rejection,
    RouteEntry,
    dump_config,
    load_config,
    rewrite_path,
    route_request,
)
from fedfaas.identity import IssuerKey
from fedfaas.permissions import PermissionsService, PolicyStore, default_plugins
from fedfaas.runtime import gaussconv_descriptor
from fedfaas.sitecaps import SiteRegistry

EXAMPLE = (Path(__file__).parent / "data" / "gatekeeper_example.yaml").read_text()


def test_example_config():
    cfg = load_config(EXAMPLE)
    (entry,) = cfg.services
    assert (entry.route, entry.namespace, entry.service_name, entry.port) == (
        "/gaussconv", "gaussconv", "gaussconv-srv", 8000)
    assert entry.ingress_host == "" and entry.uuid == "<redacted>"
    assert cfg.resolve(entry) == "gaussconv-srv.gaussconv:8000"
    assert load_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize("doc,where", [
    (EXAMPLE + EXAMPLE.split("\n", 1)[1], "service[1].route"),
    (EXAMPLE.replace("port: 8000", "port: 0"), "service[0].port"),
    (EXAMPLE.replace("port: 8000", "port: 65536"), "service[0].port"),
    (EXAMPLE.replace("port: 8000", 'port: "8000"'), "service[0].port"),
    (EXAMPLE.replace('route: "/gaussconv"', 'route: "gaussconv"'), "service[0].route"),
    (EXAMPLE.replace('    uuid: "<redacted>"\n', ""), "service[0].uuid"),
    ("service: 3", "service"),
    ("[unclosed", "document"),
])
def test_config_errors(doc, where):
    with pytest.raises(ConfigError) as err:
        load_config(doc)
    assert str(err.value).startswith(where + ":")


def test_longest_prefix_and_rewrite():
    cfg = load_config("""
service:
  - {route: "/gaussconv", namespace: a, service_name: s, port: 1, uuid: u1}
  - {route: "/gaussconv/beta", namespace: b, service_name: s, port: 2, uuid: u2}
""")
    assert cfg.match("/gaussconv/").uuid == "u1"
    assert cfg.match("/gaussconv/beta/x").uuid == "u2"
    assert cfg.match("/gaussconvx") is None
    entry = cfg.match("/gaussconv/")
    assert rewrite_path("/gaussconv/", entry, "/gaussconv_fitsimg/") == "/gaussconv_fitsimg/"
    assert rewrite_path("/gaussconv", entry, "/gaussconv_fitsimg/") == "/gaussconv_fitsimg/"
    assert rewrite_path("/gaussconv/x", entry, "/gaussconv_fitsimg/") == "/gaussconv_fitsimg/x"


def _route(headers, body=BODY, rules=(ALLOW,), path="/gaussconv/", method="POST"):
    return route_request(config(), method, path, headers, body, key=KEY,
                         authorizer=PermissionsService(PolicyStore(rules), default_plugins()), now=NOW,
                         internal_path_for=lambda e: "/gaussconv_fitsimg/")


def test_route_request_forward():
    out = _route({"Authorization": f"Bearer {token()}"})
    assert isinstance(out, ForwardDecision)
    assert out.rewritten_path == "/gaussconv_fitsimg/"
    assert out.subject == "alice" and out.ivoid == parse_ivoid(PTF)


def test_missing_token_checked_before_body():
    out = _route({}, body=b"not even json")
    assert isinstance(out, Rejection) and out.status == 401


@pytest.mark.parametrize("headers,status,code", [
    ({}, 401, "missing_token"),
    ({"Authorization": "Basic abc"}, 401, "malformed_token"),
    ({"Authorization": "Bearer !!"}, 401, "malformed_token"),
    ({"Authorization": f"Bearer {token(now=NOW - 7200)}"}, 401, "token_expired"),
    ({"Authorization": f"Bearer {token(key=IssuerKey('x', b'x' * 32))}"}, 401, "invalid_signature"),
    ({"Authorization": f"Bearer {token(groups=('other',))}"}, 403, "forbidden"),
])
def test_rejections(headers, status, code):
    out = _route(headers)
    assert (out.status, out.error_code) == (status, code)


def test_route_and_method_checks():
    assert _route({}, path="/elsewhere/").status == 404
    assert _route({}, method="GET").status == 405
    out = _route({"Authorization": f"Bearer {token()}"}, body=b'{"sigma": 1}')
    assert (out.status, out.error_code) == (400, "extraction_failed")


def test_pipeline_over_http_counts_upstream():
    gk, upstream, client = make()
    cases = [
        ({}, BODY, 401),
        ({"Authorization": f"Bearer {token()[:-2]}xx"}, BODY, 401),
        ({"Authorization": f"Bearer {token(groups=())}"}, BODY, 403),
        ({"Authorization": f"Bearer {token()}"}, b"{}", 400),
    ]
    for headers, body, status in cases:
        resp = client.post("/gaussconv/", content=body, headers=headers)
        assert resp.status_code == status
        assert resp.json()["error_code"]
        assert resp.headers[CORRELATION_HEADER]
    assert client.get("/gaussconv/").status_code == 405
    assert client.post("/nothing/").status_code == 404
    assert upstream.requests == []

    resp = client.post("/gaussconv/", content=BODY, headers={"Authorisation": f"Bearer {token()}"})
    assert resp.status_code == 200
    assert resp.headers["content-type"] == "image/fits"
    assert hashlib.sha256(resp.content).digest() == hashlib.sha256(FITS_BYTES).digest()
    (sent,) = upstream.requests
    assert str(sent.url) == "http://runtime.local:9000/gaussconv_fitsimg/"
    assert sent.content == BODY
    assert sent.headers[CORRELATION_HEADER] == resp.headers[CORRELATION_HEADER]


def test_correlation_id_propagates():
    _, upstream, client = make()
    resp = client.post("/gaussconv/", content=BODY,
                       headers={"Authorization": f"Bearer {token()}", CORRELATION_HEADER: "abc123"})
    assert resp.headers[CORRELATION_HEADER] == "abc123"
    assert upstream.requests[0].headers[CORRELATION_HEADER] == "abc123"


def test_upstream_error_relayed_unmodified():
    err = b'{"error_code":"sigma_out_of_range","message":"Sigma must be between 1 and 10"}'
    _, _, client = make(upstream=CountingUpstream(422, err, "application/json"))
    resp = client.post("/gaussconv/", content=BODY, headers={"Authorization": f"Bearer {token()}"})
    assert resp.status_code == 422 and resp.content == err


@pytest.mark.parametrize("error,status", [
    (httpx.ConnectError("refused"), 502),
    (httpx.ReadTimeout("slow"), 504),
])
def test_upstream_failures(error, status):
    _, _, client = make(upstream=CountingUpstream(error=error))
    resp = client.post("/gaussconv/", content=BODY, headers={"Authorization": f"Bearer {token()}"})
    assert resp.status_code == status


def test_permissions_outage_fails_closed():
    class Broken:
        def extract(self, route, body):
            raise RuntimeError("permissions down")

    gk, upstream, client = make()
    gk.authorizer = Broken()
    resp = client.post("/gaussconv/", content=BODY, headers={"Authorization": f"Bearer {token()}"})
    assert resp.status_code == 503 and upstream.requests == []


def test_rejections_logged(caplog):
    _, _, client = make()
    with caplog.at_level(logging.INFO, logger="fedfaas.gatekeeper"):
        client.post("/gaussconv/", content=BODY, headers={"Authorization": f"Bearer {token(groups=())}"})
    (record,) = [r for r in caplog.records if '"rejected"' in r.getMessage()]
    for field in ('"correlation_id"', '"subject": "alice"', '"route": "/gaussconv/"', '"error_code": "forbidden"'):
        assert field in record.getMessage()


def test_meter_local_and_cross_site():
    cat = ReplicaCatalogue()
    cat.register_replica(ReplicaRecord(parse_ivoid(PTF), "espsrc"))
    gk, _, client = make(catalogue=cat)
    headers = {"Authorization": f"Bearer {token()}"}
    client.post("/gaussconv/", content=BODY, headers=headers)
    assert client.get("/_gatekeeper/meter").json() == {
        "site_id": "espsrc", "bytes_served_locally": len(FITS_BYTES),
        "requests_forwarded_cross_site": 0, "requests_forwarded": 1}
    gk.site_id = "uksrc"
    client.post("/gaussconv/", content=BODY, headers=headers)
    assert gk.meter.requests_forwarded_cross_site == 1


def test_reload_swaps_routes():
    gk, upstream, client = make()
    assert client.get("/_gatekeeper/health").json()["routes"] == ["/gaussconv"]
    gk.reload(EXAMPLE.replace('"/gaussconv"', '"/blur"'))
    assert client.post("/gaussconv/", content=BODY, headers={"Authorization": f"Bearer {token()}"}).status_code == 404
    with pytest.raises(ConfigError):
        gk.reload("service: [1]")
    assert gk.config.services[0].route == "/blur"


def test_internal_paths_from_registry():
    reg = SiteRegistry()
    reg.register_site("espsrc", "http://gk")
    reg.register_service("espsrc", gaussconv_descriptor())
    paths = InternalPaths(reg, "espsrc")
    entry = RouteEntry("/gaussconv", "gaussconv", "gaussconv-srv", 8000, gaussconv_descriptor().uuid)
    assert paths(entry) == "/gaussconv_fitsimg/"
    unknown = RouteEntry("/other", "x", "y", 1, "nope")
    assert paths(unknown) == "/other/"
