"""Experiment configuration: one JSON document with a section per module.

Defaults are desk-scale; where a full-scale reference value was shrunk
to run on a laptop, FULL_SCALE records the original so manifests can
show both.
"""

from __future__ import annotations

import copy
import json

from . import flow as fl
from . import moons as mo
from . import rl


# reference values the desk-scale defaults deviate from
FULL_SCALE = {
    "flow.steps": 200_000,
    "rl.steps": 1_000_000,
}


def default_config() -> dict:
    return {
        "env": {
            "name": "point-nav",
        },
        "dataset": {
            "tier": "medium",
            "n": 10_000,
            "seed": 0,
        },
        "flow": {
            "kind": "cnf",
            "steps": 12_000,
            "n_layers": 4,
            "hidden": 64,
            "depth": 2,
            "lr": 1e-3,
            "weight_decay": 0.0,
            "batch_size": 1024,
            "lr_range": [1e-5, 3e-3],
            "weight_decay_range": [0.0, 1e-2],
            "batch_choices": [512, 1024, 2048],
            "val_fraction": 0.10,
            "eval_interval": 500,
            "s_max": 5.0,
            "seed": 0,
        },
        "rl": {
            "lambda_temp": 1.0 / 3.0,
            "gamma": 0.99,
            "lr": 3e-4,
            "hidden": 256,
            "depth": 3,
            "batch_size": 256,
            "steps": 50_000,
            "eval_interval": 1000,
            "eval_episodes": 10,
            "target_mode": "live",
            "tau": 0.005,
            "squash": "tanh",
            "amplitude": 1.0,
            "adv_clamp": 20.0,
            "seed": 0,
        },
        "moons": {
            "n": 10_000,
            "noise": 0.05,
            "seed": 0,
            "margin": 0.1,
            "amplitudes": [1.0, 2.0, 4.0, 10.0, 30.0],
            "n_samples": 2000,
            "k": 3.0,
            "resolution": 120,
            "sweep_seeds": [0, 1, 2],
            # the toy flows are larger than the RL encoder but capped at a
            # smaller coupling scale; see moons.fit_toy_flow
            "fit": {
                "steps": 4500,
                "n_layers": 6,
                "hidden": 64,
                "depth": 2,
                "lr": 1e-3,
                "weight_decay": 0.0,
                "batch_size": 512,
                "eval_interval": 500,
                "s_max": 3.0,
                "seed": 5,
                "fine_tune_steps": 0,
                "fine_tune_lr": 2e-4,
            },
        },
        "output": {
            "root": "runs",
        },
    }


def _overlay(defaults: dict, doc: dict, path: str):
    for key, value in doc.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ValueError(
                f"unknown config key {here!r}; valid keys: {sorted(defaults)}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"config key {here!r} must be an object")
            _overlay(defaults[key], value, here)
        else:
            defaults[key] = copy.deepcopy(value)


def resolve_config(doc: dict) -> dict:
    """Overlay a partial document onto the defaults.

    Unknown sections or fields are an error; the result always contains
    every field, so dumping it back is the resolved-config echo.
    """
    if not isinstance(doc, dict):
        raise ValueError(f"config must be a JSON object, got {type(doc).__name__}")
    resolved = default_config()
    _overlay(resolved, doc, "")
    return resolved


def load_config(path: str | None) -> dict:
    if path is None:
        return default_config()
    with open(path) as fh:
        return resolve_config(json.load(fh))


def flow_train_config(section: dict) -> fl.FlowTrainConfig:
    return fl.FlowTrainConfig(
        steps=int(section["steps"]),
        n_layers=int(section["n_layers"]),
        hidden=int(section["hidden"]),
        depth=int(section["depth"]),
        lr=float(section["lr"]),
        weight_decay=float(section["weight_decay"]),
        batch_size=int(section["batch_size"]),
        lr_range=tuple(section["lr_range"]),
        weight_decay_range=tuple(section["weight_decay_range"]),
        batch_choices=tuple(int(b) for b in section["batch_choices"]),
        val_fraction=float(section["val_fraction"]),
        eval_interval=int(section["eval_interval"]),
        s_max=float(section["s_max"]),
        seed=int(section["seed"]),
    )


def awac_config(section: dict) -> rl.AWACConfig:
    return rl.AWACConfig(
        lambda_temp=float(section["lambda_temp"]),
        gamma=float(section["gamma"]),
        lr=float(section["lr"]),
        hidden=int(section["hidden"]),
        depth=int(section["depth"]),
        batch_size=int(section["batch_size"]),
        steps=int(section["steps"]),
        eval_interval=int(section["eval_interval"]),
        eval_episodes=int(section["eval_episodes"]),
        target_mode=str(section["target_mode"]),
        tau=float(section["tau"]),
        squash=str(section["squash"]),
        amplitude=float(section["amplitude"]),
        adv_clamp=float(section["adv_clamp"]),
        seed=int(section["seed"]),
    )


def moons_config(section: dict):
    """(MoonsConfig, AmplitudeSweep, grid resolution, sweep seeds)."""
    data = mo.MoonsConfig(
        n=int(section["n"]),
        noise=float(section["noise"]),
        seed=int(section["seed"]),
        margin=float(section["margin"]),
    )
    sweep = mo.AmplitudeSweep(
        amplitudes=tuple(section["amplitudes"]),
        n_samples=int(section["n_samples"]),
        k=float(section["k"]),
    )
    return data, sweep, int(section["resolution"]), [
        int(s) for s in section["sweep_seeds"]]


def moons_fit_configs(section: dict):
    """(main FlowTrainConfig, fine-tune FlowTrainConfig or None) for the
    toy flows; the fine-tune pass reruns pretrain at a lower rate."""
    fit = section["fit"]
    main = fl.FlowTrainConfig(
        steps=int(fit["steps"]),
        n_layers=int(fit["n_layers"]),
        hidden=int(fit["hidden"]),
        depth=int(fit["depth"]),
        lr=float(fit["lr"]),
        weight_decay=float(fit["weight_decay"]),
        batch_size=int(fit["batch_size"]),
        eval_interval=int(fit["eval_interval"]),
        s_max=float(fit["s_max"]),
        seed=int(fit["seed"]),
    )
    if int(fit["fine_tune_steps"]) < 1:
        return main, None
    tune = fl.FlowTrainConfig(
        steps=int(fit["fine_tune_steps"]),
        n_layers=main.n_layers,
        hidden=main.hidden,
        depth=main.depth,
        lr=float(fit["fine_tune_lr"]),
        weight_decay=main.weight_decay,
        batch_size=main.batch_size,
        eval_interval=main.eval_interval,
        s_max=main.s_max,
        seed=main.seed + 50,
    )
    return main, tune
