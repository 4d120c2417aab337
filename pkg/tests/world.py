"""An in-process federation: every service is an ASGI app reached through one httpx transport."""

import httpx
import numpy as np
from fastapi.testclient import TestClient

from fedfaas import datalink, datasets, gatekeeper, identity, permissions, runtime, sitecaps
from fedfaas.client import ClientSession
from fedfaas.datasets import ReplicaRecord, parse_ivoid
from fedfaas.fits import FitsImage, write_fits
from fedfaas.gatekeeper import GatekeeperConfig, RouteEntry
from fedfaas.permissions import Effect, PermissionsService, PolicyRule, PolicyStore

KEY = identity.IssuerKey("world", b"w" * 32)
PTF = "ivo://espsrc.iaa.csic.es/datasets/fits?testing/5b/f5/PTF10tce.fits"


class Router:
    """Dispatch requests to in-process apps by host name and count them per host."""

    def __init__(self):
        self.apps: dict[str, TestClient] = {}
        self.hits: dict[str, int] = {}

    def mount(self, host, app):
        self.apps[host] = TestClient(app, base_url=f"http://{host}")

    def __call__(self, request: httpx.Request) -> httpx.Response:
        host = request.url.host
        if host not in self.apps:
            raise httpx.ConnectError(f"no route to {host}", request=request)
        self.hits[host] = self.hits.get(host, 0) + 1
        headers = {k: v for k, v in request.headers.items() if k.lower() not in ("host", "content-length")}
        resp = self.apps[host].request(request.method, request.url.raw_path.decode(), content=request.content,
                                       headers=headers)
        return httpx.Response(resp.status_code, content=resp.content,
                              headers={"content-type": resp.headers.get("content-type", "")})

    def client(self):
        return httpx.Client(transport=httpx.MockTransport(self))


class World:
    def __init__(self, storage, sites=("espsrc",)):
        self.router = Router()
        self.catalogue = datasets.ReplicaCatalogue()
        self.registry = sitecaps.SiteRegistry()
        self.store = PolicyStore([PolicyRule("gaussconv-users", "testing", runtime.gaussconv_descriptor().uuid,
                                             Effect.ALLOW)])
        r = self.router
        r.mount("iam", identity.create_app(KEY))
        r.mount("catalogue", datasets.create_app(self.catalogue))
        r.mount("sitecaps", sitecaps.create_app(self.registry))
        r.mount("datalink", datalink.create_app(self.catalogue, self.registry))
        authorizer = PermissionsService(self.store, permissions.default_plugins())
        self.storage = {}
        for site in sites:
            root = storage / site
            root.mkdir()
            self.storage[site] = root
            desc = runtime.gaussconv_descriptor()
            self.registry.register_site(site, f"http://gk.{site}")
            self.registry.register_service(site, desc)
            r.mount(f"runtime.{site}", runtime.create_app(runtime.RuntimeConfig(root, site_id=site)))
            cfg = GatekeeperConfig((RouteEntry("/gaussconv", "gaussconv", "gaussconv-srv", 8000, desc.uuid),),
                                   internal_resolver={"gaussconv-srv.gaussconv:8000": f"runtime.{site}"})
            gk = gatekeeper.Gatekeeper(cfg, KEY, authorizer, site_id=site,
                                       internal_path_for=gatekeeper.InternalPaths(self.registry, site),
                                       catalogue=self.catalogue, transport=httpx.MockTransport(r))
            r.mount(f"gk.{site}", gatekeeper.create_app(gk))

    def seed(self, ivo, site, pixels=None):
        ivoid = parse_ivoid(ivo)
        pixels = np.random.default_rng(1).normal(size=(12, 12)) if pixels is None else pixels
        path = self.storage[site] / ivoid.storage_path
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(write_fits(FitsImage.from_pixels(pixels)))
        self.catalogue.register_replica(ReplicaRecord(ivoid, site))
        return pixels

    def session(self, token=""):
        return ClientSession(token=token, subject="alice", iam_url="http://iam", datalink_url="http://datalink",
                             sitecaps_url="http://sitecaps", catalogue_url="http://catalogue")
