"""Scenario files: a federation layout, seeded data and policies, then steps with expectations.

A scenario document is YAML::

    name: smoothing
    seed: 7
    sites:
      - {site_id: espsrc, functions: [gaussconv]}
    datasets:
      ptf: {ivo: "ivo://espsrc.iaa.csic.es/datasets/fits?testing/5b/f5/PTF10tce.fits",
            sites: [espsrc], shape: [64, 64]}
    users:
      alice: [gaussconv-users]
    policies:
      - {group: gaussconv-users, namespace: testing, function: gaussconv, effect: Allow}
    steps:
      - invoke: {user: alice, dataset: ptf, sigma: 2.5, via: "site:espsrc"}
        expect: {status: 200, content_type: image/fits, oracle: true}
    expectations:
      - {cross_site_forwards: 0}

Step kinds: ``invoke``, ``client``, ``links``, ``add_policy``, ``revoke_policy``
and ``random_placements``. Every step and expectation turns into one or more
named assertions in the report. Reports carry no ports or paths, so two runs
with the same seed compare equal once ``timings`` is dropped.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from fedfaas import fits
from fedfaas.client import Client, ClientError, ClientSession
from fedfaas.datasets import parse_ivoid
from fedfaas.identity import IssuerKey, encode_bearer, issue_token, serialize_token
from fedfaas.permissions import Effect, PolicyRule

from .federation import Federation, SiteSpec, resolve_function, synthetic_image
from .oracle import direct_convolve

ORACLE_TOLERANCE = 1e-10
STEP_KINDS = ("invoke", "client", "links", "add_policy", "revoke_policy", "random_placements")


class ScenarioError(ValueError):
    """The scenario document itself is malformed."""


@dataclass
class DatasetSpec:
    alias: str
    ivo: str
    sites: tuple[str, ...]
    shape: tuple[int, int] = (64, 64)
    seed: int | None = None


@dataclass
class ScenarioSpec:
    name: str
    seed: int
    sites: list[SiteSpec]
    datasets: dict[str, DatasetSpec]
    users: dict[str, tuple[str, ...]]
    policies: list[PolicyRule]
    steps: list[dict]
    expectations: list[dict] = field(default_factory=list)

    @classmethod
    def from_dict(cls, doc: dict) -> ScenarioSpec:
        if not isinstance(doc, dict):
            raise ScenarioError("scenario must be a mapping")
        try:
            sites = [SiteSpec(s["site_id"], tuple(s.get("functions", ["gaussconv"]))) for s in doc["sites"]]
            datasets = {
                alias: DatasetSpec(alias, d["ivo"], tuple(d.get("sites", ())), tuple(d.get("shape", (64, 64))),
                                   d.get("seed"))
                for alias, d in (doc.get("datasets") or {}).items()
            }
            users = {u: tuple(g) for u, g in (doc.get("users") or {}).items()}
            policies = [_rule(p) for p in doc.get("policies") or []]
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"bad scenario field: {exc}") from None
        site_ids = {s.site_id for s in sites}
        for ds in datasets.values():
            parse_ivoid(ds.ivo)
            if not set(ds.sites) <= site_ids:
                raise ScenarioError(f"dataset {ds.alias} placed at unknown site(s) {sorted(set(ds.sites) - site_ids)}")
        steps = list(doc.get("steps") or [])
        for i, step in enumerate(steps):
            kinds = [k for k in STEP_KINDS if k in step]
            if len(kinds) != 1:
                raise ScenarioError(f"steps[{i}] must have exactly one of {', '.join(STEP_KINDS)}")
        return cls(doc.get("name", "scenario"), int(doc.get("seed", 0)), sites, datasets, users, policies,
                   steps, list(doc.get("expectations") or []))

    @classmethod
    def load(cls, path) -> ScenarioSpec:
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


def _rule(doc: dict) -> PolicyRule:
    return PolicyRule(doc["group"], doc["namespace"], resolve_function(doc.get("function", "*")),
                      Effect(doc.get("effect", "Allow")))


@dataclass
class Assertion:
    id: str
    passed: bool
    detail: str

    def to_dict(self) -> dict:
        return {"id": self.id, "passed": self.passed, "detail": self.detail}


@dataclass
class ScenarioReport:
    name: str
    seed: int
    assertions: list[Assertion] = field(default_factory=list)
    meter: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions)

    def failures(self) -> list[Assertion]:
        return [a for a in self.assertions if not a.passed]

    def to_dict(self, timings: bool = True) -> dict:
        doc = {
            "name": self.name,
            "seed": self.seed,
            "passed": self.passed,
            "assertions": [a.to_dict() for a in self.assertions],
            "meter": self.meter,
        }
        if timings:
            doc["timings"] = self.timings
        return doc


class _Runner:
    def __init__(self, spec: ScenarioSpec, fed: Federation, report: ScenarioReport):
        self.spec = spec
        self.fed = fed
        self.report = report
        self.rng = random.Random(spec.seed)
        self.tokens: dict[str, str] = {}
        self.images: dict[str, fits.FitsImage] = {}
        self.results: dict[str, str] = {}
        self.scratch = fed.workdir / "client"
        self.scratch.mkdir()

    def check(self, id: str, passed: bool, detail: str = ""):
        self.report.assertions.append(Assertion(id, bool(passed), detail))

    # --- setup ---------------------------------------------------------

    def seed_datasets(self):
        for i, ds in enumerate(self.spec.datasets.values()):
            seed = ds.seed if ds.seed is not None else self.spec.seed * 1000 + i
            h, w = ds.shape
            ivoid = parse_ivoid(ds.ivo)
            image = synthetic_image(seed, w, h, name=ivoid.name)
            self.images[ds.alias] = image
            for site in ds.sites:
                self.fed.seed(site, ivoid, image)

    def token_for(self, user: str, kind: str = "valid") -> str | None:
        if kind == "none":
            return None
        groups = self.spec.users.get(user, ())
        if kind == "forged":
            return self.fed.forged_token(user, groups)
        if kind == "expired":
            stale = issue_token(user, groups, 60, self.fed.key, now=int(time.time()) - 3600)
            return encode_bearer(serialize_token(stale))
        if kind == "tampered":
            token = self.token_for(user)
            # flip one character inside the signature part of the encoded token
            i = len(token) // 2
            return token[:i] + ("A" if token[i] != "A" else "B") + token[i + 1:]
        if user not in self.tokens:
            self.tokens[user] = self.fed.token(user, groups)
        return self.tokens[user]

    # --- steps ---------------------------------------------------------

    def run(self):
        self.seed_datasets()
        for i, step in enumerate(self.spec.steps):
            kind = next(k for k in STEP_KINDS if k in step)
            started = time.perf_counter()
            getattr(self, "step_" + kind)(f"step{i}.{kind}", step[kind] or {}, step.get("expect") or {})
            self.report.timings[f"step{i}.{kind}"] = round(time.perf_counter() - started, 4)

    def _dataset(self, args: dict) -> tuple[str, fits.FitsImage | None]:
        if "dataset" in args:
            return self.spec.datasets[args["dataset"]].ivo, self.images[args["dataset"]]
        return args["ivo"], None

    def _gaussconv_url(self, via: str, ivo: str) -> tuple[str | None, str]:
        if via.startswith("site:"):
            site = via.split(":", 1)[1]
            return self.fed.handles[site].gatekeeper_url + "/gaussconv/", site
        resp = self.fed.http.get(self.fed.url("datalink") + "/links", params={"ID": ivo, "format": "json"})
        for link in resp.json().get("links", []):
            if link["function_name"] == "gaussconv":
                return link["access_url"], link["site_id"]
        return None, ""

    def step_invoke(self, sid: str, args: dict, expect: dict):
        ivo, image = self._dataset(args)
        url, site = self._gaussconv_url(args.get("via", "datalink"), ivo)
        if url is None:
            self.check(sid + ".link", expect.get("status") is None, "no gaussconv link for dataset")
            return
        body = args["body"] if "body" in args else json.dumps({"ivo": ivo, "sigma": args.get("sigma", 1.0)})
        headers = {"Content-Type": "application/json"}
        token = self.token_for(args.get("user", ""), args.get("token", "valid"))
        if token is not None:
            headers[args.get("header", "Authorization")] = f"Bearer {token}"
        resp = self.fed.http.post(url, content=body, headers=headers)

        if "status" in expect:
            self.check(sid + ".status", resp.status_code == expect["status"],
                       f"site {site}: expected {expect['status']}, got {resp.status_code}")
        if "error_code" in expect:
            code = _json(resp).get("error_code")
            self.check(sid + ".error_code", code == expect["error_code"], f"got {code}")
        if "message_contains" in expect:
            self.check(sid + ".message", expect["message_contains"] in resp.text, resp.text[:200])
        if "content_type" in expect:
            ctype = resp.headers.get("content-type", "")
            self.check(sid + ".content_type", ctype.startswith(expect["content_type"]), ctype)
        if "site" in expect:
            self.check(sid + ".site", site == expect["site"], f"served by {site}")
        if resp.status_code == 200:
            digest = hashlib.sha256(resp.content).hexdigest()
            if expect.get("save_as"):
                self.results[expect["save_as"]] = digest
            if expect.get("oracle"):
                self._check_oracle(sid, resp.content, image, args.get("sigma", 1.0))

    def _check_oracle(self, sid: str, payload: bytes, image, sigma: float):
        if image is None:
            self.check(sid + ".oracle", False, "oracle needs a scenario dataset")
            return
        try:
            got = fits.read_fits(payload).pixels
        except fits.FormatError as exc:
            self.check(sid + ".oracle", False, f"response is not FITS: {exc}")
            return
        err = float(np.max(np.abs(got - direct_convolve(image.pixels, sigma))))
        self.check(sid + ".oracle", err <= ORACLE_TOLERANCE, f"max abs error {err:.3e}")

    def _client(self, user: str) -> Client:
        session = ClientSession(
            token=self.token_for(user) if user else "", subject=user,
            datalink_url=self.fed.url("datalink"), sitecaps_url=self.fed.url("sitecaps"),
            catalogue_url=self.fed.url("catalogue"), iam_url=self.fed.url("iam"),
        )
        return Client(session, http=self.fed.http)

    def _client_gaussconv(self, user, namespace, name, sigma) -> tuple[int, str, bytes]:
        out = self.scratch / f"out-{len(self.report.assertions)}.fits"
        try:
            self._client(user).gaussconv(namespace, name, sigma, out)
        except ClientError as exc:
            return exc.exit_code, str(exc), b""
        return 0, "", out.read_bytes()

    def step_client(self, sid: str, args: dict, expect: dict):
        code, message, payload = self._client_gaussconv(
            args.get("user", ""), args["namespace"], args["name"], args.get("sigma", 1.0))
        self.check(sid + ".exit_code", code == expect.get("exit_code", 0), f"exit {code} {message}".strip())
        if "message_contains" in expect:
            self.check(sid + ".message", expect["message_contains"] in message, message)
        if "same_as" in expect:
            want = self.results.get(expect["same_as"])
            got = hashlib.sha256(payload).hexdigest() if payload else None
            self.check(sid + ".same_as", want is not None and got == want,
                       f"matches {expect['same_as']}" if got == want else "output differs")

    def step_links(self, sid: str, args: dict, expect: dict):
        ivo, _ = self._dataset(args)
        links = self._client(args.get("user", "")).links(ivo)
        if "count" in expect:
            self.check(sid + ".count", len(links) == expect["count"], f"{len(links)} links")
        if "sites" in expect:
            sites = sorted({lk.site_id for lk in links})
            self.check(sid + ".sites", sites == sorted(expect["sites"]), f"sites {sites}")
        if "functions" in expect:
            names = sorted(lk.function_name for lk in links)
            self.check(sid + ".functions", names == sorted(expect["functions"]), f"functions {names}")

    def step_add_policy(self, sid: str, args: dict, expect: dict):
        self.fed.permissions.add_rule(_rule(args))
        self.check(sid, True, f"{args.get('effect', 'Allow')} {args['group']} on {args['namespace']}")

    def step_revoke_policy(self, sid: str, args: dict, expect: dict):
        self.fed.permissions.remove_rule(_rule(args))
        self.check(sid, True, f"removed {args.get('effect', 'Allow')} {args['group']} on {args['namespace']}")

    def step_random_placements(self, sid: str, args: dict, expect: dict):
        """Place fresh datasets on random non-empty site subsets and invoke each through the client.

        Where some replica site runs gaussconv the DataLink link must point at
        a replica site and the call must succeed; otherwise the client must
        report that no site is eligible.
        """
        site_ids = [s.site_id for s in self.spec.sites]
        runners = {s.site_id for s in self.spec.sites if "gaussconv" in s.functions}
        subsets = [c for r in range(1, len(site_ids) + 1) for c in itertools.combinations(site_ids, r)]
        h, w = args.get("shape", (8, 8))
        namespace = args.get("namespace", "placements")
        authority = args.get("authority", "ivo://example.org/datasets")
        outcomes = {"served": 0, "no_site": 0, "bad": 0}
        for n in range(int(args.get("count", 50))):
            placement = self.rng.choice(subsets)
            name = f"p{n:03d}.fits"
            ivoid = parse_ivoid(f"{authority}?{namespace}/{name}")
            image = synthetic_image(self.rng.randrange(2**31), w, h, name=name)
            for site in placement:
                self.fed.seed(site, ivoid, image)
            links = [lk for lk in self._client(args.get("user", "")).links(str(ivoid)) if lk.function_name == "gaussconv"]
            code, message, _ = self._client_gaussconv(args.get("user", ""), namespace, name, args.get("sigma", 1.5))
            eligible = runners & set(placement)
            if eligible:
                ok = code == 0 and len(links) == 1 and links[0].site_id in placement
            else:
                ok = code == 4 and "no eligible site" in message and not links
            outcomes["served" if ok and eligible else "no_site" if ok else "bad"] += 1
            if not ok:
                self.check(f"{sid}.placement{n}", False,
                           f"replicas at {list(placement)}: exit {code} links {[lk.site_id for lk in links]} {message}")
        self.check(sid, outcomes["bad"] == 0, json.dumps(outcomes, sort_keys=True))

    # --- final expectations -------------------------------------------

    def finish(self):
        meter = self.fed.meters()
        self.report.meter = meter
        for site_id, counters in meter.items():
            # every runtime request must have arrived through the site's gatekeeper
            self.check(f"perimeter.{site_id}", counters["runtime_requests"] == counters["requests_forwarded"],
                       f"runtime saw {counters['runtime_requests']}, gatekeeper forwarded {counters['requests_forwarded']}")
        for i, exp in enumerate(self.spec.expectations):
            if "cross_site_forwards" in exp:
                total = sum(c["requests_forwarded_cross_site"] for c in meter.values())
                self.check(f"expect{i}.cross_site_forwards", total == exp["cross_site_forwards"], f"total {total}")
            if "forwards" in exp:
                for site, want in exp["forwards"].items():
                    got = meter.get(site, {}).get("requests_forwarded")
                    self.check(f"expect{i}.forwards.{site}", got == want, f"got {got}")
            if "runtime_version" in exp:
                for site, handle in sorted(self.fed.handles.items()):
                    if handle.runtime_url:
                        got = self.fed.health(site).get("version")
                        self.check(f"expect{i}.runtime_version.{site}", got == exp["runtime_version"], f"got {got}")


def _json(resp) -> dict:
    try:
        doc = resp.json()
    except ValueError:
        return {}
    return doc if isinstance(doc, dict) else {}


def run_scenario(spec: ScenarioSpec, seed: int | None = None, keep_workdir: bool = False) -> ScenarioReport:
    """Launch the federation, replay ``spec`` and tear everything down.

    ``seed`` overrides the scenario's own seed. Raises ``ScenarioAborted`` if a
    component fails to start.
    """
    if seed is not None:
        spec = ScenarioSpec(**{**spec.__dict__, "seed": seed})
    report = ScenarioReport(spec.name, spec.seed)
    started = time.perf_counter()
    with Federation(spec.sites, spec.policies, keep_workdir=keep_workdir) as fed:
        report.timings["startup"] = round(time.perf_counter() - started, 4)
        runner = _Runner(spec, fed, report)
        runner.run()
        runner.finish()
    report.timings["total"] = round(time.perf_counter() - started, 4)
    return report
