"""Session-scoped fixtures shared across test modules.

The trained moons pair takes about a minute to fit, so it is built once
per session and reused by both the unit tests and the acceptance suite.
"""

import time

import pytest

import flowrl.config as cfgmod
import flowrl.flow as fl
import flowrl.moons as moons


@pytest.fixture(scope="session")
def trained_moons():
    """Moons point cloud plus one trained flow per base kind.

    Built from the shipped defaults so tests exercise exactly the
    configuration the CLI runs with.  Returns a dict with the point
    cloud, its config, the two flows, and per-fit wall-clock seconds.
    """
    section = cfgmod.default_config()["moons"]
    data_cfg, _, _, _ = cfgmod.moons_config(section)
    main_cfg, tune_cfg = cfgmod.moons_fit_configs(section)
    pts = moons.make_moons(data_cfg)
    flows = {}
    fit_seconds = {}
    for kind in ("uniform", "normal"):
        start = time.perf_counter()
        flow = moons.fit_toy_flow(pts, kind, main_cfg)
        if tune_cfg is not None:
            flow, _ = fl.pretrain(None, pts, flow, tune_cfg)
        fit_seconds[kind] = time.perf_counter() - start
        flows[kind] = flow
    return {
        "points": pts,
        "config": data_cfg,
        "uniform": flows["uniform"],
        "normal": flows["normal"],
        "fit_seconds": fit_seconds,
    }
