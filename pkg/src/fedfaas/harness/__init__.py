"""Local multi-site federation: process launcher, scenario runner, reference oracle."""

from .federation import Federation, ScenarioAborted, SiteSpec, seed_storage, synthetic_image
from .oracle import direct_convolve
from .scenario import ScenarioReport, ScenarioSpec, run_scenario

__all__ = [
    "Federation",
    "ScenarioAborted",
    "ScenarioReport",
    "ScenarioSpec",
    "SiteSpec",
    "direct_convolve",
    "run_scenario",
    "seed_storage",
    "synthetic_image",
]
