"""End-user client: log in, discover service links, run gaussconv, save the FITS result.

Exit codes: 0 ok, 2 connectivity or parse error, 3 not logged in, 4 no eligible
site, 5 rejected by the server, 6 ambiguous dataset name.
"""

from __future__ import annotations

import json
import os
import stat
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass
from pathlib import Path

import click
import httpx

from .datasets import ParseError, parse_ivoid

EXIT_OK, EXIT_CONNECT, EXIT_NO_SESSION, EXIT_NO_SITE, EXIT_REJECTED, EXIT_AMBIGUOUS = 0, 2, 3, 4, 5, 6
VOTABLE_NS = "{http://www.ivoa.net/xml/VOTable/v1.3}"
DEFAULT_SESSION = Path("~/.fedfaas/session")


class ClientError(Exception):
    def __init__(self, exit_code: int, message: str):
        super().__init__(message)
        self.exit_code = exit_code


@dataclass
class ClientSession:
    token: str = ""
    subject: str = ""
    expires_at: int = 0
    iam_url: str = ""
    datalink_url: str = ""
    sitecaps_url: str = ""
    catalogue_url: str = ""

    @staticmethod
    def path(override=None) -> Path:
        return Path(override or os.getenv("FEDFAAS_SESSION") or DEFAULT_SESSION).expanduser()

    @classmethod
    def load(cls, path: Path) -> ClientSession | None:
        try:
            return cls(**json.loads(path.read_text()))
        except (OSError, ValueError, TypeError):
            return None

    def save(self, path: Path):
        path.parent.mkdir(mode=0o700, parents=True, exist_ok=True)
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, stat.S_IRUSR | stat.S_IWUSR)
        with os.fdopen(fd, "w") as fh:
            json.dump(asdict(self), fh)
        os.chmod(path, stat.S_IRUSR | stat.S_IWUSR)


@dataclass
class Link:
    function_name: str
    site_id: str
    access_url: str
    resource_identifier: str
    defaults: dict
    constraints: str = ""


def _need(url: str, what: str) -> str:
    if not url:
        raise ClientError(EXIT_CONNECT, f"no {what} URL configured")
    return url.rstrip("/")


class Client:
    def __init__(self, session: ClientSession, http: httpx.Client | None = None):
        self.session = session
        self.http = http or httpx.Client(timeout=httpx.Timeout(10.0, read=600.0))

    def _request(self, method: str, url: str, **kwargs) -> httpx.Response:
        try:
            return self.http.request(method, url, **kwargs)
        except httpx.TransportError as exc:
            raise ClientError(EXIT_CONNECT, f"cannot reach {url}: {exc}") from None

    @classmethod
    def login(cls, iam_url: str, subject: str, groups, ttl_seconds: int = 3600, **urls) -> ClientSession:
        client = cls(ClientSession(iam_url=iam_url, **urls))
        resp = client._request("POST", _need(iam_url, "IAM") + "/token",
                               json={"subject": subject, "groups": list(groups), "ttl_seconds": ttl_seconds})
        if resp.status_code != 200:
            raise ClientError(EXIT_CONNECT, f"login failed: {resp.status_code} {resp.text}")
        doc = resp.json()
        client.session.token = doc["token"]
        client.session.expires_at = doc["expires_at"]
        client.session.subject = subject
        return client.session

    def links(self, ivoid: str) -> list[Link]:
        try:
            parse_ivoid(ivoid)
        except ParseError as exc:
            raise ClientError(EXIT_CONNECT, f"invalid identifier: {exc}") from None
        resp = self._request("GET", _need(self.session.datalink_url, "DataLink") + "/links", params={"ID": ivoid})
        if resp.status_code != 200:
            raise ClientError(EXIT_CONNECT, f"DataLink query failed: {resp.status_code} {resp.text}")
        links = parse_service_links(resp.content)
        if self.session.sitecaps_url:
            self._annotate(links)
        return links

    def _annotate(self, links: list[Link]):
        resp = self._request("GET", self.session.sitecaps_url.rstrip("/") + "/sites")
        if resp.status_code != 200:
            return
        for link in links:
            for site in resp.json()["sites"]:
                # access URLs are built from the gatekeeper URL of the chosen site
                if not link.access_url.startswith(site["gatekeeper_url"].rstrip("/") + "/"):
                    continue
                for fn in site["functions"]:
                    if fn["uuid"] == link.resource_identifier:
                        link.site_id = site["site_id"]
                        link.constraints = "; ".join(_describe(p) for p in fn["parameters"])

    def resolve_dataset(self, namespace: str, name: str) -> str:
        resp = self._request("GET", _need(self.session.catalogue_url, "replica catalogue") + "/replicas",
                             params={"namespace": namespace, "name": name})
        if resp.status_code != 200:
            raise ClientError(EXIT_CONNECT, f"catalogue query failed: {resp.status_code} {resp.text}")
        ivoids = sorted({r["ivoid"] for r in resp.json()["replicas"]})
        if not ivoids:
            raise ClientError(EXIT_NO_SITE, f"no eligible site: no replica of {namespace}/{name} anywhere")
        if len(ivoids) > 1:
            raise ClientError(EXIT_AMBIGUOUS, f"{namespace}/{name} is ambiguous; candidates:\n  " + "\n  ".join(ivoids))
        return ivoids[0]

    def gaussconv(self, namespace: str, name: str, sigma: float, output_file) -> Path:
        if not self.session.token:
            raise ClientError(EXIT_NO_SESSION, "not logged in; run `fedfaas login` first")
        ivoid = self.resolve_dataset(namespace, name)
        link = next((lk for lk in self.links(ivoid) if lk.function_name == "gaussconv"), None)
        if link is None:
            raise ClientError(EXIT_NO_SITE, f"no eligible site holds {ivoid} and offers gaussconv")
        resp = self._request("POST", link.access_url, json={"ivo": ivoid, "sigma": sigma},
                             headers={"Authorization": f"Bearer {self.session.token}"})
        if resp.status_code != 200:
            try:
                err = resp.json()
            except ValueError:
                err = {"error_code": "http_error", "message": resp.text}
            message = f"{resp.status_code} {err.get('error_code')}: {err.get('message')}"
            if resp.status_code == 401:
                message += " (session expired or invalid; run `fedfaas login` again)"
            raise ClientError(EXIT_REJECTED, message)
        out = Path(output_file)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_bytes(resp.content)
        return out


def _describe(param: dict) -> str:
    text = f"{param['name']}: {param['type']}"
    if param.get("min") is not None or param.get("max") is not None:
        text += f" [{param.get('min')}, {param.get('max')}]"
    if param.get("default") is not None:
        text += f" default {param['default']}"
    return text


def parse_service_links(votable: bytes) -> list[Link]:
    """Service descriptors (``RESOURCE type="meta" utype="adhoc:service"``) of a DataLink response."""
    try:
        root = ET.fromstring(votable)
    except ET.ParseError as exc:
        raise ClientError(EXIT_CONNECT, f"DataLink response is not XML: {exc}") from None
    links = []
    for res in root.iter(f"{VOTABLE_NS}RESOURCE"):
        if res.get("type") != "meta" or res.get("utype") != "adhoc:service":
            continue
        params = {p.get("name"): p.get("value") for p in res.findall(f"{VOTABLE_NS}PARAM")}
        group = res.find(f"{VOTABLE_NS}GROUP[@name='inputParams']")
        defaults = {p.get("name"): p.get("value") for p in group.findall(f"{VOTABLE_NS}PARAM")} if group is not None else {}
        links.append(Link(res.get("ID"), "", params.get("accessURL", ""), params.get("resourceIdentifier", ""), defaults))
    return links


def _settings(ctx) -> ClientSession:
    path = ClientSession.path(ctx.obj["session_path"])
    session = ClientSession.load(path) or ClientSession()
    for attr, env in (("datalink_url", "FEDFAAS_DATALINK_URL"), ("sitecaps_url", "FEDFAAS_SITECAPS_URL"),
                      ("catalogue_url", "FEDFAAS_CATALOGUE_URL"), ("iam_url", "FEDFAAS_IAM_URL")):
        if not getattr(session, attr) and os.getenv(env):
            setattr(session, attr, os.getenv(env))
    return session


def _fail(exc: ClientError):
    click.echo(f"error: {exc}", err=True)
    raise SystemExit(exc.exit_code)


@click.group()
@click.option("--session", "session_path", type=click.Path(dir_okay=False), help="session file (default ~/.fedfaas/session)")
@click.pass_context
def main(ctx, session_path):
    """Client for federated function invocation."""
    ctx.obj = {"session_path": session_path}


@main.command()
@click.option("--iam-url", envvar="FEDFAAS_IAM_URL", required=True)
@click.option("--subject", required=True)
@click.option("--groups", default="", help="comma-separated group names")
@click.option("--ttl", type=int, default=3600, show_default=True)
@click.option("--datalink-url", envvar="FEDFAAS_DATALINK_URL", default="")
@click.option("--sitecaps-url", envvar="FEDFAAS_SITECAPS_URL", default="")
@click.option("--catalogue-url", envvar="FEDFAAS_CATALOGUE_URL", default="")
@click.pass_context
def login(ctx, iam_url, subject, groups, ttl, datalink_url, sitecaps_url, catalogue_url):
    """Obtain a token and store it in the session file."""
    try:
        session = Client.login(iam_url, subject, [g for g in groups.split(",") if g], ttl,
                               datalink_url=datalink_url, sitecaps_url=sitecaps_url, catalogue_url=catalogue_url)
    except ClientError as exc:
        _fail(exc)
    path = ClientSession.path(ctx.obj["session_path"])
    session.save(path)
    click.echo(f"logged in as {subject}; session stored in {path}")


@main.command()
@click.argument("ivoid")
@click.pass_context
def links(ctx, ivoid):
    """List the functions that can run next to IVOID's data."""
    client = Client(_settings(ctx))
    try:
        found = client.links(ivoid)
    except ClientError as exc:
        _fail(exc)
    rows = [("FUNCTION", "SITE", "ACCESS_URL", "PARAMETERS")]
    rows += [(lk.function_name, lk.site_id or "-", lk.access_url, lk.constraints or "-") for lk in found]
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    for r in rows:
        click.echo("  ".join(c.ljust(w) for c, w in zip(r[:3], widths)) + "  " + r[3])


@main.command()
@click.option("--namespace", required=True)
@click.option("--name", required=True)
@click.option("--sigma", type=float, required=True)
@click.option("--output", "output_file", type=click.Path(dir_okay=False), required=True)
@click.pass_context
def gaussconv(ctx, namespace, name, sigma, output_file):
    """Invoke Gaussian convolution on a FITS dataset and save the result."""
    client = Client(_settings(ctx))
    try:
        out = client.gaussconv(namespace, name, sigma, output_file)
    except ClientError as exc:
        _fail(exc)
    click.echo(f"wrote {out} ({out.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
