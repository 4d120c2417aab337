"""Launch a desk-scale federation as local processes on loopback ports."""

from __future__ import annotations

import json
import os
import secrets
import shutil
import socket
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

import fedfaas
from fedfaas import fits
from fedfaas.datasets import IvoId, ReplicaRecord
from fedfaas.gatekeeper import GatekeeperConfig, RouteEntry, dump_config
from fedfaas.identity import IssuerKey, encode_bearer, issue_token, serialize_token
from fedfaas.permissions import PolicyRule, dump_rules
from fedfaas.remote import RemoteCatalogue, RemotePermissions, RemoteRegistry
from fedfaas.runtime import (
    FUNCTION_VERSION,
    function_uuid,
    gaussconv_descriptor,
    gaussconv_gpu_descriptor,
)

KEY_ID = "fedfaas-harness"
HOST = "127.0.0.1"
STARTUP_TIMEOUT = 30.0
EXECUTABLE_FUNCTIONS = {"gaussconv"}
DESCRIPTORS = {"gaussconv": gaussconv_descriptor, "gaussconv-gpu": gaussconv_gpu_descriptor}


class ScenarioAborted(RuntimeError):
    def __init__(self, component: str, message: str):
        super().__init__(f"{component}: {message}")
        self.component = component


@dataclass
class SiteSpec:
    site_id: str
    functions: tuple[str, ...] = ("gaussconv",)


@dataclass
class SiteHandle:
    spec: SiteSpec
    storage: Path
    gatekeeper_port: int
    runtime_port: int | None

    @property
    def gatekeeper_url(self) -> str:
        return f"http://{HOST}:{self.gatekeeper_port}"

    @property
    def runtime_url(self) -> str | None:
        return f"http://{HOST}:{self.runtime_port}" if self.runtime_port else None


@dataclass
class _Proc:
    component: str
    popen: subprocess.Popen
    health_url: str
    log_path: Path


def free_port() -> int:
    with socket.socket() as s:
        s.bind((HOST, 0))
        return s.getsockname()[1]


def resolve_function(name: str) -> str:
    """Policy shorthand: a function name becomes its uuid, ``*`` stays a wildcard."""
    return name if name == "*" else function_uuid(name, FUNCTION_VERSION)


def seed_storage(site_dir, site_id: str, dataset: IvoId, image: fits.FitsImage, catalogue) -> Path:
    """Write ``image`` under ``site_dir`` at the dataset's storage path and register the replica."""
    site_dir = Path(site_dir)
    if not site_dir.is_dir():
        raise FileNotFoundError(f"site storage {site_dir} does not exist")
    path = site_dir / dataset.storage_path
    path.parent.mkdir(parents=True, exist_ok=True)
    catalogue.register_replica(ReplicaRecord(dataset, site_id))
    path.write_bytes(fits.write_fits(image))
    return path


def synthetic_image(seed: int, width: int = 64, height: int = 64, name: str = "synthetic") -> fits.FitsImage:
    """Seeded stand-in for a survey cutout: noisy background plus a few point sources."""
    rng = np.random.default_rng(seed)
    pixels = rng.normal(100.0, 5.0, size=(height, width))
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(3):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        amp, s = rng.uniform(50, 500), rng.uniform(0.8, 2.5)
        pixels += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return fits.FitsImage.from_pixels(pixels, [
        fits.HeaderCard("OBJECT", name),
        fits.HeaderCard("SEED", int(seed), "synthetic generator seed"),
    ])


@dataclass
class Federation:
    """Global services plus one gatekeeper (and runtime) per site.

    Use as a context manager; teardown kills every process and removes the
    working directory.
    """

    sites: list[SiteSpec]
    policies: list[PolicyRule] = field(default_factory=list)
    keep_workdir: bool = False
    log_level: str = "warning"

    def __post_init__(self):
        self.workdir = Path(tempfile.mkdtemp(prefix="fedfaas-"))
        self.key = IssuerKey(KEY_ID, secrets.token_bytes(32))
        self.handles: dict[str, SiteHandle] = {}
        self._procs: list[_Proc] = []
        self._ports = {name: free_port() for name in ("iam", "catalogue", "permissions", "sitecaps", "datalink")}
        self.http = httpx.Client(timeout=httpx.Timeout(10.0, read=300.0))

    def url(self, service: str) -> str:
        return f"http://{HOST}:{self._ports[service]}"

    @property
    def catalogue(self) -> RemoteCatalogue:
        return RemoteCatalogue(self.url("catalogue"), client=self.http)

    @property
    def registry(self) -> RemoteRegistry:
        return RemoteRegistry(self.url("sitecaps"), client=self.http)

    @property
    def permissions(self) -> RemotePermissions:
        return RemotePermissions(self.url("permissions"), client=self.http)

    def _env(self) -> dict:
        env = dict(os.environ)
        env["FEDFAAS_ISSUER_KEYS"] = json.dumps({KEY_ID: self.key.secret.hex()})
        src = str(Path(fedfaas.__file__).resolve().parent.parent)
        env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
        return env

    def _spawn(self, component: str, args: list[str], health_url: str):
        log_path = self.workdir / "logs" / f"{component}.log"
        log_path.parent.mkdir(exist_ok=True)
        with log_path.open("wb") as log:
            popen = subprocess.Popen(
                [sys.executable, "-m", "fedfaas.serve", "--log-level", self.log_level, *args],
                stdout=log, stderr=subprocess.STDOUT, env=self._env(), start_new_session=True,
            )
        self._procs.append(_Proc(component, popen, health_url, log_path))

    def _wait_healthy(self, procs):
        deadline = time.monotonic() + STARTUP_TIMEOUT
        pending = list(procs)
        while pending:
            proc = pending[0]
            if proc.popen.poll() is not None:
                tail = proc.log_path.read_text(errors="replace")[-2000:]
                raise ScenarioAborted(proc.component, f"exited with {proc.popen.returncode}\n{tail}")
            try:
                if self.http.get(proc.health_url, timeout=1.0).status_code == 200:
                    pending.pop(0)
                    continue
            except httpx.TransportError:
                pass
            if time.monotonic() > deadline:
                raise ScenarioAborted(proc.component, "did not become healthy in time")
            time.sleep(0.05)

    def start(self) -> Federation:
        rules = self.workdir / "rules.tsv"
        rules.write_text(dump_rules(self.policies))
        p = self._ports
        self._spawn("global", [
            "global", "--iam-key-id", KEY_ID,
            "--iam-port", str(p["iam"]), "--catalogue-port", str(p["catalogue"]),
            "--permissions-port", str(p["permissions"]), "--sitecaps-port", str(p["sitecaps"]),
            "--datalink-port", str(p["datalink"]), "--rules", str(rules),
            "--snapshot", str(self.workdir / "replicas.tsv"),
            "--sitecaps-log", str(self.workdir / "sitecaps.jsonl"),
        ], self.url("iam") + "/health")
        self._wait_healthy(self._procs[-1:])
        # the other global apps share the process but bind separately
        for name in ("catalogue", "permissions", "sitecaps", "datalink"):
            self._wait_healthy([_Proc("global", self._procs[0].popen, self.url(name) + "/health",
                                      self._procs[0].log_path)])

        first_site = len(self._procs)
        for spec in self.sites:
            self._start_site(spec)
        self._wait_healthy(self._procs[first_site:])
        return self

    def _start_site(self, spec: SiteSpec):
        storage = self.workdir / "sites" / spec.site_id / "storage"
        storage.mkdir(parents=True)
        deploy = [f for f in spec.functions if f in EXECUTABLE_FUNCTIONS]
        handle = SiteHandle(spec, storage, free_port(), free_port() if deploy else None)
        self.handles[spec.site_id] = handle

        registry = self.registry
        registry.register_site(spec.site_id, handle.gatekeeper_url)
        entries, resolver = [], {}
        for name in spec.functions:
            descriptor = DESCRIPTORS[name](storage_id=f"{spec.site_id}-rse")
            registry.register_service(spec.site_id, descriptor)
            if name in EXECUTABLE_FUNCTIONS:
                entry = RouteEntry(descriptor.route, name, f"{name}-srv", 8000, descriptor.uuid)
                entries.append(entry)
                resolver[entry.service_key] = f"{HOST}:{handle.runtime_port}"

        config_path = self.workdir / "sites" / spec.site_id / "gatekeeper.yaml"
        config_path.write_text(dump_config(GatekeeperConfig(
            tuple(entries), KEY_ID, self.url("permissions"), resolver)))
        if handle.runtime_port:
            self._spawn(f"{spec.site_id}/runtime", [
                "runtime", "--port", str(handle.runtime_port),
                "--abs-path", str(storage), "--site-id", spec.site_id,
            ], handle.runtime_url + "/health")
        self._spawn(f"{spec.site_id}/gatekeeper", [
            "gatekeeper", "--config", str(config_path), "--port", str(handle.gatekeeper_port),
            "--site-id", spec.site_id, "--sitecaps-url", self.url("sitecaps"),
            "--catalogue-url", self.url("catalogue"),
        ], handle.gatekeeper_url + "/_gatekeeper/health")

    def stop(self):
        for proc in self._procs:
            if proc.popen.poll() is None:
                proc.popen.terminate()
        deadline = time.monotonic() + 5
        for proc in self._procs:
            try:
                proc.popen.wait(timeout=max(0.1, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                proc.popen.kill()
                proc.popen.wait()
        self.http.close()
        if not self.keep_workdir:
            shutil.rmtree(self.workdir, ignore_errors=True)

    def __enter__(self) -> Federation:
        try:
            return self.start()
        except BaseException:
            self.stop()
            raise

    def __exit__(self, *exc):
        self.stop()

    @property
    def pids(self) -> list[int]:
        return [p.popen.pid for p in self._procs]

    # --- scenario helpers -------------------------------------------------

    def token(self, subject: str, groups, ttl_seconds: int = 3600) -> str:
        resp = self.http.post(self.url("iam") + "/token",
                              json={"subject": subject, "groups": list(groups), "ttl_seconds": ttl_seconds})
        resp.raise_for_status()
        return resp.json()["token"]

    def forged_token(self, subject: str, groups) -> str:
        """A structurally valid token signed with a key the federation does not trust."""
        other = IssuerKey("forger", secrets.token_bytes(32))
        return encode_bearer(serialize_token(issue_token(subject, groups, 3600, other)))

    def seed(self, site_id: str, dataset: IvoId, image: fits.FitsImage) -> Path:
        return seed_storage(self.handles[site_id].storage, site_id, dataset, image, self.catalogue)

    def meters(self) -> dict[str, dict]:
        out = {}
        for site_id, handle in sorted(self.handles.items()):
            doc = self.http.get(handle.gatekeeper_url + "/_gatekeeper/meter").json()
            doc.pop("site_id", None)
            if handle.runtime_url:
                doc["runtime_requests"] = self.http.get(handle.runtime_url + "/metrics").json()["requests"]
            else:
                doc["runtime_requests"] = 0
            out[site_id] = doc
        return out

    def health(self, site_id: str) -> dict:
        return self.http.get(self.handles[site_id].runtime_url + "/health").json()

