"""Tests against a real federation: OS processes on loopback ports."""

import hashlib
import json
import os
from pathlib import Path

import httpx
import pytest
from click.testing import CliRunner

from fedfaas import fits
from fedfaas.client import main as client_main
from fedfaas.datasets import AlreadyExists, parse_ivoid
from fedfaas.harness import Federation, ScenarioAborted, ScenarioSpec, SiteSpec, run_scenario, synthetic_image
from fedfaas.harness.cli import main as harness_main
from fedfaas.harness.federation import resolve_function, seed_storage
from fedfaas.harness.scenario import ScenarioError
from fedfaas.permissions import Effect, PolicyRule

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
PTF = parse_ivoid("ivo://espsrc.iaa.csic.es/datasets/fits?testing/5b/f5/PTF10tce.fits")
ALLOW = PolicyRule("gaussconv-users", "testing", resolve_function("gaussconv"), Effect.ALLOW)


@pytest.fixture(scope="module")
def fed():
    with Federation([SiteSpec("espsrc"), SiteSpec("uksrc", ("gaussconv", "gaussconv-gpu"))], [ALLOW]) as f:
        f.seed("espsrc", PTF, synthetic_image(1, 32, 32, "PTF10tce.fits"))
        yield f


def _alive(pid):
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    # a zombie still answers kill(0); check its state
    stat = Path(f"/proc/{pid}/stat")
    return stat.exists() and stat.read_text().split()[2] != "Z"


def test_synthetic_image_is_seeded():
    a, b = synthetic_image(5, 16, 8), synthetic_image(5, 16, 8)
    assert a == b and a.pixels.shape == (8, 16)
    assert synthetic_image(6, 16, 8) != a


def test_seed_storage_round_trip(fed):
    image = synthetic_image(2, 8, 8)
    ivoid = parse_ivoid("ivo://x?testing/seeded.fits")
    path = fed.seed("espsrc", ivoid, image)
    assert fits.read_fits(path.read_bytes()) == image
    with pytest.raises(AlreadyExists):
        fed.seed("espsrc", ivoid, image)
    fed.seed("uksrc", ivoid, image)
    assert [r.site_id for r in fed.catalogue.resolve_replicas(ivoid)] == ["espsrc", "uksrc"]
    with pytest.raises(FileNotFoundError):
        seed_storage(fed.workdir / "missing", "espsrc", ivoid, image, fed.catalogue)


def test_runtime_reached_only_through_gatekeeper(fed):
    before = fed.meters()
    token = fed.token("alice", ["gaussconv-users"])
    resp = fed.http.post(fed.handles["espsrc"].gatekeeper_url + "/gaussconv/",
                         json={"ivo": str(PTF), "sigma": 2.5}, headers={"Authorization": f"Bearer {token}"})
    assert resp.status_code == 200
    after = fed.meters()
    assert after["espsrc"]["runtime_requests"] - before["espsrc"]["runtime_requests"] == 1
    assert after["espsrc"]["requests_forwarded"] - before["espsrc"]["requests_forwarded"] == 1
    assert after["espsrc"]["requests_forwarded_cross_site"] == 0
    # a bypass would show up as runtime requests the gatekeeper never forwarded
    fed.http.post(fed.handles["uksrc"].runtime_url + "/gaussconv_fitsimg/", json={"ivo": str(PTF), "sigma": 2.5})
    meter = fed.meters()["uksrc"]
    assert meter["runtime_requests"] == meter["requests_forwarded"] + 1


def test_cli_end_to_end(fed, tmp_path):
    runner = CliRunner()
    env = {
        "FEDFAAS_SESSION": str(tmp_path / "session"),
        "FEDFAAS_IAM_URL": fed.url("iam"),
        "FEDFAAS_DATALINK_URL": fed.url("datalink"),
        "FEDFAAS_SITECAPS_URL": fed.url("sitecaps"),
        "FEDFAAS_CATALOGUE_URL": fed.url("catalogue"),
    }
    out = tmp_path / "smoothed.fits"
    res = runner.invoke(client_main, ["gaussconv", "--namespace", "testing", "--name", "PTF10tce.fits",
                                      "--sigma", "2.5", "--output", str(out)], env=env)
    assert res.exit_code == 3

    res = runner.invoke(client_main, ["login", "--subject", "alice", "--groups", "gaussconv-users"], env=env)
    assert res.exit_code == 0, res.output
    session = json.loads((tmp_path / "session").read_text())

    res = runner.invoke(client_main, ["links", str(PTF)], env=env)
    assert res.exit_code == 0
    rows = res.output.splitlines()
    assert rows[0].split()[:3] == ["FUNCTION", "SITE", "ACCESS_URL"]
    assert rows[1].split()[:3] == ["gaussconv", "espsrc", fed.handles["espsrc"].gatekeeper_url + "/gaussconv/"]
    assert "sigma: double [1.0, 10.0]" in rows[1]

    res = runner.invoke(client_main, ["links", "ivo://x?empty/none.fits"], env=env)
    assert res.exit_code == 0 and len(res.output.splitlines()) == 1
    assert runner.invoke(client_main, ["links", "garbage"], env=env).exit_code == 2

    res = runner.invoke(client_main, ["gaussconv", "--namespace", "testing", "--name", "PTF10tce.fits",
                                      "--sigma", "2.5", "--output", str(out)], env=env)
    assert res.exit_code == 0, res.output
    direct = httpx.post(fed.handles["espsrc"].gatekeeper_url + "/gaussconv/",
                        json={"ivo": str(PTF), "sigma": 2.5},
                        headers={"Authorization": f"Bearer {session['token']}"})
    assert hashlib.sha256(out.read_bytes()).hexdigest() == hashlib.sha256(direct.content).hexdigest()

    res = runner.invoke(client_main, ["gaussconv", "--namespace", "testing", "--name", "PTF10tce.fits",
                                      "--sigma", "0.5", "--output", str(out)], env=env)
    assert res.exit_code == 5 and "Sigma must be between 1 and 10" in res.output
    res = runner.invoke(client_main, ["gaussconv", "--namespace", "testing", "--name", "nowhere.fits",
                                      "--sigma", "2.5", "--output", str(out)], env=env)
    assert res.exit_code == 4


def test_teardown_leaves_nothing():
    fed = Federation([SiteSpec("solo")])
    with fed:
        pids, workdir = fed.pids, fed.workdir
        assert len(pids) == 3 and workdir.is_dir()
    assert not workdir.exists()
    assert not any(_alive(pid) for pid in pids)


def test_startup_failure_names_component():
    fed = Federation([SiteSpec("solo")], log_level="bogus")
    with pytest.raises(ScenarioAborted) as err:
        with fed:
            pass
    assert err.value.component == "global"
    assert not fed.workdir.exists()


def test_scenario_validation():
    with pytest.raises(ScenarioError):
        ScenarioSpec.from_dict({"sites": [{"site_id": "a"}],
                                "datasets": {"d": {"ivo": "ivo://x?n/f.fits", "sites": ["b"]}}})
    with pytest.raises(ScenarioError):
        ScenarioSpec.from_dict({"sites": [{"site_id": "a"}], "steps": [{"invoke": {}, "links": {}}]})
    with pytest.raises(ScenarioError):
        ScenarioSpec.from_dict({"name": "no sites"})


def test_revoke_scenario_is_deterministic():
    spec = ScenarioSpec.load(SCENARIOS / "revoke.yaml")
    first, second = run_scenario(spec), run_scenario(spec)
    assert first.passed, [a.to_dict() for a in first.failures()]
    assert first.to_dict(timings=False) == second.to_dict(timings=False)
    ids = [a.id for a in first.assertions]
    assert "step6.invoke.status" in ids and "perimeter.espsrc" in ids


def test_seed_override_changes_data():
    spec = ScenarioSpec.load(SCENARIOS / "smoothing.yaml")
    report = run_scenario(spec, seed=99)
    assert report.seed == 99 and report.passed, [a.to_dict() for a in report.failures()]


def test_two_sites_ten_calls_stay_local():
    spec = ScenarioSpec.from_dict({
        "name": "two-sites", "seed": 3,
        "sites": [{"site_id": "A"}, {"site_id": "B"}],
        "datasets": {"d": {"ivo": "ivo://x?survey/a.fits", "sites": ["A"], "shape": [8, 8]}},
        "users": {"u": ["g"]},
        "policies": [{"group": "g", "namespace": "survey", "function": "*", "effect": "Allow"}],
        "steps": [{"invoke": {"user": "u", "dataset": "d", "sigma": 1.0}, "expect": {"status": 200, "site": "A"}}] * 10,
        "expectations": [{"cross_site_forwards": 0}, {"forwards": {"A": 10, "B": 0}}],
    })
    report = run_scenario(spec)
    assert report.passed, [a.to_dict() for a in report.failures()]
    assert report.meter["A"]["requests_forwarded"] == 10
    assert report.meter["A"]["requests_forwarded_cross_site"] == 0


def test_harness_cli(tmp_path):
    out = tmp_path / "report.json"
    res = CliRunner().invoke(harness_main, ["run", str(SCENARIOS / "smoothing.yaml"), "--report", str(out)])
    assert res.exit_code == 0, res.output
    assert "smoothing: passed" in res.output
    doc = json.loads(out.read_text())
    assert doc["passed"] and doc["meter"]["espsrc"]["requests_forwarded_cross_site"] == 0
    bad = tmp_path / "bad.yaml"
    bad.write_text("sites: 3\n")
    assert CliRunner().invoke(harness_main, ["run", str(bad)]).exit_code == 2
