"""Process entry points for every service (``fedfaas-serve <component>``)."""

from __future__ import annotations

import asyncio
import json
import logging
import os
import sys
from pathlib import Path

import click
import uvicorn

from . import datalink, datasets, gatekeeper, identity, permissions, runtime, sitecaps
from .remote import RemoteCatalogue, RemotePermissions, RemoteRegistry

KEYS_ENV = "FEDFAAS_ISSUER_KEYS"
HOST = "127.0.0.1"


def load_issuer_key(key_id: str) -> identity.IssuerKey:
    """Read ``key_id``'s secret from ``$FEDFAAS_ISSUER_KEYS`` (JSON: key id -> hex secret)."""
    try:
        keys = json.loads(os.environ[KEYS_ENV])
        return identity.IssuerKey.from_hex(key_id, keys[key_id])
    except KeyError as exc:
        raise click.UsageError(f"no secret for key {key_id!r} in ${KEYS_ENV} ({exc})") from None
    except ValueError as exc:
        raise click.UsageError(f"${KEYS_ENV} is invalid: {exc}") from None


def run_apps(apps: list[tuple[object, int]], log_level: str = "warning"):
    servers = [
        uvicorn.Server(uvicorn.Config(app, host=HOST, port=port, log_level=log_level, access_log=False))
        for app, port in apps
    ]

    async def main():
        await asyncio.gather(*(server.serve() for server in servers))

    asyncio.run(main())


def _load_store(rules_file) -> permissions.PolicyStore:
    if rules_file:
        return permissions.PolicyStore(permissions.parse_rules(Path(rules_file).read_text()))
    return permissions.PolicyStore()


@click.group()
@click.option("--log-level", default="warning", show_default=True)
@click.pass_context
def main(ctx, log_level):
    logging.basicConfig(level=log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    ctx.obj = {"log_level": log_level}


@main.command("global")
@click.option("--iam-port", type=int, required=True)
@click.option("--catalogue-port", type=int, required=True)
@click.option("--permissions-port", type=int, required=True)
@click.option("--sitecaps-port", type=int, required=True)
@click.option("--datalink-port", type=int, required=True)
@click.option("--iam-key-id", default="fedfaas", show_default=True)
@click.option("--rules", "rules_file", type=click.Path(dir_okay=False))
@click.option("--snapshot", type=click.Path(dir_okay=False), help="replica catalogue snapshot file")
@click.option("--sitecaps-log", type=click.Path(dir_okay=False), help="site-capabilities event log")
@click.pass_context
def global_services(ctx, iam_port, catalogue_port, permissions_port, sitecaps_port, datalink_port,
                    iam_key_id, rules_file, snapshot, sitecaps_log):
    """All global services in one process, each on its own port."""
    key = load_issuer_key(iam_key_id)
    catalogue = datasets.ReplicaCatalogue(snapshot)
    registry = sitecaps.SiteRegistry(sitecaps_log)
    run_apps([
        (identity.create_app(key), iam_port),
        (datasets.create_app(catalogue), catalogue_port),
        (permissions.create_app(_load_store(rules_file), permissions.default_plugins()), permissions_port),
        (sitecaps.create_app(registry), sitecaps_port),
        (datalink.create_app(catalogue, registry), datalink_port),
    ], ctx.obj["log_level"])


@main.command()
@click.option("--port", type=int, required=True)
@click.option("--iam-key-id", default="fedfaas", show_default=True)
@click.pass_context
def iam(ctx, port, iam_key_id):
    run_apps([(identity.create_app(load_issuer_key(iam_key_id)), port)], ctx.obj["log_level"])


@main.command()
@click.option("--port", type=int, required=True)
@click.option("--snapshot", type=click.Path(dir_okay=False))
@click.pass_context
def catalogue(ctx, port, snapshot):
    run_apps([(datasets.create_app(datasets.ReplicaCatalogue(snapshot)), port)], ctx.obj["log_level"])


@main.command("permissions")
@click.option("--port", type=int, required=True)
@click.option("--rules", "rules_file", type=click.Path(dir_okay=False))
@click.pass_context
def permissions_service(ctx, port, rules_file):
    app = permissions.create_app(_load_store(rules_file), permissions.default_plugins())
    run_apps([(app, port)], ctx.obj["log_level"])


@main.command("sitecaps")
@click.option("--port", type=int, required=True)
@click.option("--log", "log_file", type=click.Path(dir_okay=False))
@click.pass_context
def sitecaps_service(ctx, port, log_file):
    run_apps([(sitecaps.create_app(sitecaps.SiteRegistry(log_file)), port)], ctx.obj["log_level"])


@main.command("datalink")
@click.option("--port", type=int, required=True)
@click.option("--catalogue-url", required=True)
@click.option("--sitecaps-url", required=True)
@click.pass_context
def datalink_service(ctx, port, catalogue_url, sitecaps_url):
    app = datalink.create_app(RemoteCatalogue(catalogue_url), RemoteRegistry(sitecaps_url))
    run_apps([(app, port)], ctx.obj["log_level"])


@main.command("runtime")
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--abs-path", type=click.Path(file_okay=False), help="storage mount (default: $ABS_PATH or /data)")
@click.option("--site-id", default="local", show_default=True)
@click.pass_context
def runtime_service(ctx, port, abs_path, site_id):
    config = runtime.RuntimeConfig.from_env(abs_path, port, site_id)
    try:
        config.check()
    except FileNotFoundError as exc:
        raise click.UsageError(str(exc)) from None
    run_apps([(runtime.create_app(config), port)], ctx.obj["log_level"])


@main.command("gatekeeper")
@click.option("--config", "config_file", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--port", type=int, required=True)
@click.option("--permissions-url", help="overrides permissions_endpoint from the config")
@click.option("--iam-key-id", help="overrides issuer_key_ref from the config")
@click.option("--site-id", default="local", show_default=True)
@click.option("--sitecaps-url", help="site-capabilities, for internal path lookup")
@click.option("--catalogue-url", help="replica catalogue, for the transfer meter")
@click.option("--timeout", type=float, default=gatekeeper.DEFAULT_UPSTREAM_TIMEOUT, show_default=True)
@click.pass_context
def gatekeeper_service(ctx, config_file, port, permissions_url, iam_key_id, site_id, sitecaps_url,
                       catalogue_url, timeout):
    config = gatekeeper.load_config(Path(config_file).read_bytes())
    permissions_url = permissions_url or config.permissions_endpoint
    if not permissions_url:
        raise click.UsageError("no permissions endpoint configured")
    key = load_issuer_key(iam_key_id or config.issuer_key_ref or "fedfaas")
    paths = gatekeeper.InternalPaths(RemoteRegistry(sitecaps_url), site_id) if sitecaps_url else None
    gk = gatekeeper.Gatekeeper(
        config, key, RemotePermissions(permissions_url), site_id=site_id, internal_path_for=paths,
        catalogue=RemoteCatalogue(catalogue_url) if catalogue_url else None, timeout=timeout,
    )
    run_apps([(gatekeeper.create_app(gk), port)], ctx.obj["log_level"])


if __name__ == "__main__":
    main()
