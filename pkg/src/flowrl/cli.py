"""Command-line operator surface.

Every command resolves its config, writes a run manifest before doing any
work, produces write-once artifacts, and finalizes the manifest with
output hashes and wall-clock. Exit codes: 0 success, 2 usage error,
1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import re
import subprocess
import sys
import time

import numpy as np

from . import __version__
from . import config as cfgmod
from . import envs
from . import flow as fl
from . import ioutil
from . import moons as mo
from . import rl
from . import svg

OUTPUT_ROOT_ENV = "FLOWRL_OUTPUT_ROOT"

ENV_NAMES = ("point-nav", "point-nav-umaze", "bandit")
TIERS = tuple(sorted(envs.TIER_SIGMA))
VARIANTS = ("cnf", "nf-normal", "nf-clipped:<a>", "vae", "latent-direct")
SUITES = {
    "latent-kind": ("cnf", "nf-normal"),
    "clipping": ("nf-clipped:1", "nf-clipped:2", "nf-clipped:3", "cnf"),
    "encoder": ("cnf", "vae"),
    "latent-direct": ("cnf", "latent-direct"),
}


class UsageError(Exception):
    pass


def _version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"flowrl-{__version__}+{out.stdout.strip()}"
    except OSError:
        pass
    return f"flowrl-{__version__}"


def _out_dir(arg: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(arg):
        path = os.path.join(root, arg)
    else:
        path = arg
    os.makedirs(path, exist_ok=True)
    return path


def _fresh(path: str) -> str:
    """Outputs are write-once; refuse to clobber."""
    if os.path.exists(path):
        raise RuntimeError(f"refusing to overwrite existing output {path}")
    return path


class Manifest:
    """Written with status running before work starts, finalized after."""

    def __init__(self, command: str, out_dir: str, resolved_config: dict,
                 seed, inputs: list[str]):
        # one run per directory: a second run must not clobber the record
        self.path = _fresh(os.path.join(out_dir, "manifest.json"))
        self.t0 = time.monotonic()
        self.doc = {
            "command": command,
            "version": _version_string(),
            "config": resolved_config,
            "seed": seed,
            "full_scale": cfgmod.FULL_SCALE,
            "status": "running",
            "inputs": {p: ioutil.sha256_file(p) for p in inputs},
            "outputs": {},
            "wall_clock_seconds": None,
        }
        self._write()

    def _write(self):
        ioutil.atomic_write_text(
            self.path, json.dumps(self.doc, indent=2, sort_keys=True) + "\n")

    def record(self, key: str, value):
        self.doc[key] = value

    def finalize(self, outputs: list[str], status: str = "complete"):
        self.doc["outputs"] = {p: ioutil.sha256_file(p) for p in outputs
                               if os.path.exists(p)}
        self.doc["status"] = status
        self.doc["wall_clock_seconds"] = round(time.monotonic() - self.t0, 3)
        self._write()


def _load_dataset(path: str) -> envs.OfflineDataset:
    if not os.path.exists(path):
        raise RuntimeError(f"dataset not found: {path}")
    return envs.load_dataset(path)


def _support_spec_for(env_name: str):
    if env_name == "bandit":
        return envs.SupportSpec.ring(envs.RING_LO, envs.RING_HI)
    return None


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(args) -> int:
    out = _out_dir(args.out)
    cfg = cfgmod.load_config(args.config)
    cfg["env"]["name"] = args.env
    cfg["dataset"].update({"tier": args.tier, "n": args.n, "seed": args.seed})
    manifest = Manifest("gen-data", out, cfg, args.seed, [])
    env = envs.make_env(args.env)
    behavior = envs.make_behavior(args.env, args.tier, env)
    ds = envs.generate_dataset(env, behavior, args.n, seed=args.seed)
    path = _fresh(os.path.join(out, "dataset.cnfd"))
    envs.save_dataset(ds, path)
    manifest.record("dataset", {
        "n": ds.n, "state_dim": ds.ds, "action_dim": ds.da,
        "mean_return": envs.behavior_mean_return(env, behavior, 20, args.seed),
        "file_bytes": os.path.getsize(path),
    })
    manifest.finalize([path])
    return 0


# ------------------------------------------------------------ pretrain-flow

def _search_vae(states, actions, ftc: fl.FlowTrainConfig, n_trials: int,
                rng: np.random.Generator):
    """Random search over the same ranges as the flow search, for the
    conditional-VAE encoder ablation."""
    trials = []
    best = None
    for i in range(n_trials):
        lr = float(rng.uniform(*ftc.lr_range))
        wd = float(rng.uniform(*ftc.weight_decay_range))
        batch = int(rng.choice(np.asarray(ftc.batch_choices)))
        trial_cfg = fl.FlowTrainConfig(
            steps=ftc.steps, n_layers=ftc.n_layers, hidden=ftc.hidden,
            depth=ftc.depth, lr=lr, weight_decay=wd, batch_size=batch,
            val_fraction=ftc.val_fraction, eval_interval=ftc.eval_interval,
            seed=ftc.seed + i,
        )
        vae = fl.ConditionalVAE(actions.shape[1], states.shape[1],
                                hidden=ftc.hidden, depth=ftc.depth,
                                seed=trial_cfg.seed)
        row = {"trial": i, "lr": lr, "weight_decay": wd, "batch_size": batch,
               "seed": trial_cfg.seed}
        try:
            vae, info = fl.vae_pretrain(states, actions, vae, trial_cfg)
            row["best_val_nll"] = info["best_val_nll"]
            row["status"] = "ok"
            if best is None or info["best_val_nll"] < best[1]:
                best = (vae, info["best_val_nll"], i, info["log"])
        except RuntimeError as exc:
            row["best_val_nll"] = None
            row["status"] = f"diverged: {exc}"
        trials.append(row)
    if best is None:
        raise RuntimeError("all VAE trials diverged")
    order = sorted((r for r in trials if r["status"] == "ok"),
                   key=lambda r: r["best_val_nll"])
    ranks = {r["trial"]: k for k, r in enumerate(order)}
    for r in trials:
        r["rank"] = ranks.get(r["trial"])
    return best[0], {"trials": trials, "best_trial": best[2], "log": best[3]}


def cmd_pretrain_flow(args) -> int:
    out = _out_dir(args.out)
    cfg = cfgmod.load_config(args.config)
    kind = cfg["flow"]["kind"]
    if kind not in ("cnf", "nf-normal", "vae"):
        raise UsageError(
            f"flow.kind must be cnf, nf-normal, or vae, got {kind!r}")
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    ds = _load_dataset(args.data)
    ftc = cfgmod.flow_train_config(cfg["flow"])
    manifest = Manifest("pretrain-flow", out, cfg, ftc.seed,
                        [args.data])
    rng = np.random.default_rng(ftc.seed)
    if kind == "vae":
        model, info = _search_vae(ds.states, ds.actions, ftc, args.trials, rng)
    else:
        model, info = fl.hyperparameter_search(
            ds.states, ds.actions, kind, ftc, args.trials, rng)
    ckpt = _fresh(os.path.join(out, "encoder.cnfm"))
    fl.save_encoder(model, ckpt)
    curves = _fresh(os.path.join(out, "curves.csv"))
    lines = ["step,train_nll,val_nll"]
    lines += [f'{r["step"]},{r["train_nll"]!r},{r["val_nll"]!r}'
              for r in info["log"]]
    ioutil.atomic_write_text(curves, "\n".join(lines) + "\n")
    manifest.record("search", {"trials": info["trials"],
                               "best_trial": info["best_trial"],
                               "encoder_kind": kind,
                               "fingerprint": fl.flow_fingerprint(model)})
    manifest.finalize([ckpt, curves])
    return 0


# ---------------------------------------------------------------- train-rl

def _parse_variant(text: str):
    """(variant name, squash mode, amplitude, needed encoder kind)."""
    m = re.fullmatch(r"nf-clipped:(\d+(?:\.\d+)?)", text)
    if m:
        return text, "amp-tanh", float(m.group(1)), "nf-normal"
    table = {
        "cnf": ("tanh", 1.0, "cnf"),
        "latent-direct": ("tanh", 1.0, "cnf"),
        "nf-normal": ("none", 1.0, "nf-normal"),
        # PLAS-style bounded latent box at two prior standard deviations
        "vae": ("amp-tanh", 2.0, "vae"),
    }
    if text not in table:
        raise UsageError(
            f"unknown variant {text!r}; expected one of {', '.join(VARIANTS)}")
    squash, amplitude, need = table[text]
    return text, squash, amplitude, need


def _encoder_kind(model) -> str:
    if isinstance(model, fl.ConditionalVAE):
        return "vae"
    if model.base.kind == "uniform" and model.tanh_output:
        return "cnf"
    if model.base.kind == "normal" and not model.tanh_output:
        return "nf-normal"
    return f"{model.base.kind}-base flow"


def _train_one(ds, encoder, rl_cfg, variant, env, support_spec):
    latent_direct = variant == "latent-direct"
    return rl.train(ds, encoder, rl_cfg, env=env, support_spec=support_spec,
                    latent_direct=latent_direct)


def _write_metrics(path: str, metrics: list[dict]):
    lines = [json.dumps(row, sort_keys=True) for row in metrics]
    ioutil.atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def _learning_curve_svg(metrics: list[dict], title: str) -> str:
    evals = [r for r in metrics if r["event"] == "eval"]
    if evals:
        xs = np.array([r["step"] for r in evals], dtype=np.float64)
        ys = np.array([r["mean_return"] for r in evals], dtype=np.float64)
        return svg.curves([("mean return", xs, ys)], title=title,
                          xlabel="step", ylabel="return")
    trains = [r for r in metrics if r["event"] == "train"]
    if not trains:
        return svg.curves([("no data", np.array([0.0]), np.array([0.0]))],
                          title=title)
    xs = np.array([r["step"] for r in trains], dtype=np.float64)
    series = [(name, xs, np.array([r["losses"][name] for r in trains]))
              for name in ("critic", "policy")]
    return svg.curves(series, title=title, xlabel="step", ylabel="loss")


def _rl_config_for_variant(cfg: dict, variant_squash: str, amplitude: float,
                           seed: int | None = None) -> rl.AWACConfig:
    section = dict(cfg["rl"])
    section["squash"] = variant_squash
    section["amplitude"] = amplitude
    if seed is not None:
        section["seed"] = seed
    return cfgmod.awac_config(section)


def cmd_train_rl(args) -> int:
    out = _out_dir(args.out)
    cfg = cfgmod.load_config(args.config)
    variant, squash, amplitude, need = _parse_variant(args.variant)
    if not os.path.exists(args.flow):
        raise RuntimeError(f"encoder checkpoint not found: {args.flow}")
    encoder = fl.load_encoder(args.flow)
    got = _encoder_kind(encoder)
    if got != need:
        raise UsageError(
            f"variant {variant!r} needs a {need} encoder, but {args.flow} "
            f"holds a {got} encoder")
    ds = _load_dataset(args.data)
    rl_cfg = _rl_config_for_variant(cfg, squash, amplitude)
    manifest = Manifest("train-rl", out, cfg, rl_cfg.seed,
                        [args.data, args.flow])
    manifest.record("variant", {"name": variant, "squash": squash,
                                "amplitude": amplitude})
    env_name = cfg["env"]["name"]
    env = envs.make_env(env_name)
    agent, metrics = _train_one(ds, encoder, rl_cfg, variant, env,
                                _support_spec_for(env_name))
    ckpt = _fresh(os.path.join(out, "agent.cnfa"))
    rl.save_agent(agent, ckpt, flow_path=os.path.abspath(args.flow),
                  env_name=env_name)
    metrics_path = _fresh(os.path.join(out, "metrics.jsonl"))
    _write_metrics(metrics_path, metrics)
    curve_path = _fresh(os.path.join(out, "curve.svg"))
    ioutil.atomic_write_text(
        curve_path, _learning_curve_svg(metrics, f"{variant} on {env_name}"))
    status = "failed" if agent.aborted else "complete"
    manifest.finalize([ckpt, metrics_path, curve_path], status=status)
    if agent.aborted:
        print("training aborted on non-finite loss; last good checkpoint "
              "written", file=sys.stderr)
        return 1
    return 0


# -------------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    if not os.path.exists(args.agent):
        raise RuntimeError(f"agent checkpoint not found: {args.agent}")
    header = rl.agent_header(args.agent)
    flow_path = header.get("flow_path")
    if not flow_path:
        raise RuntimeError("agent checkpoint does not reference its encoder")
    if not os.path.exists(flow_path):
        candidate = os.path.join(os.path.dirname(os.path.abspath(args.agent)),
                                 os.path.basename(flow_path))
        if os.path.exists(candidate):
            flow_path = candidate
        else:
            raise RuntimeError(f"encoder checkpoint not found: {flow_path}")
    encoder = fl.load_encoder(flow_path)
    agent = rl.load_agent(args.agent, encoder)
    env_name = header.get("env_name")
    if not env_name:
        raise RuntimeError("agent checkpoint does not record its environment")
    env = envs.make_env(env_name)
    mean_ret, returns, rate = rl.evaluate(
        agent, env, args.episodes, np.random.default_rng(args.seed),
        support_spec=_support_spec_for(env_name))
    print(json.dumps({
        "mean_return": mean_ret,
        "std_return": float(np.std(np.asarray(returns))),
        "support_violation_rate": rate,
        "episodes": args.episodes,
        "seed": args.seed,
    }, sort_keys=True))
    return 0


# --------------------------------------------------------------- toy-moons

def cmd_toy_moons(args) -> int:
    out = _out_dir(args.out)
    cfg = cfgmod.load_config(args.config)
    data_cfg, sweep, resolution, sweep_seeds = cfgmod.moons_config(cfg["moons"])
    ftc, tune = cfgmod.moons_fit_configs(cfg["moons"])
    manifest = Manifest("toy-moons", out, cfg, data_cfg.seed, [])
    points = mo.make_moons(data_cfg)
    cnf = mo.fit_toy_flow(points, "uniform", ftc)
    nfn = mo.fit_toy_flow(points, "normal", ftc)
    if tune is not None:
        cnf, _ = fl.pretrain(None, points, cnf, tune)
        nfn, _ = fl.pretrain(None, points, nfn, tune)
    outputs = []
    for name, model in (("cnf.cnfm", cnf), ("nf_normal.cnfm", nfn)):
        path = _fresh(os.path.join(out, name))
        fl.save_encoder(model, path)
        outputs.append(path)
    figures = mo.emit_figures(cnf, nfn, points, sweep,
                              os.path.join(out, "figures"),
                              resolution=resolution,
                              n_samples=sweep.n_samples, seed=data_cfg.seed)
    rows = mo.run_sweep(nfn, points, data_cfg.noise, sweep, seeds=sweep_seeds)
    csv_path = _fresh(os.path.join(out, "sweep.csv"))
    mo.write_sweep_csv(rows, csv_path)
    outputs += figures + [csv_path]
    manifest.record("sweep", rows)
    manifest.finalize(outputs)
    return 0


# ------------------------------------------------------------------ ablate

def _fit_encoder(kind: str, ds, ftc: fl.FlowTrainConfig):
    if kind == "vae":
        vae = fl.ConditionalVAE(ds.da, ds.ds, hidden=ftc.hidden,
                                depth=ftc.depth, seed=ftc.seed)
        model, _ = fl.vae_pretrain(ds.states, ds.actions, vae, ftc)
        return model
    flow = fl._build_flow_for(ds.da, ds.ds, kind, ftc)
    model, _ = fl.pretrain(ds.states, ds.actions, flow, ftc)
    return model


def cmd_ablate(args) -> int:
    out = _out_dir(args.out)
    cfg = cfgmod.load_config(args.config)
    variants = SUITES[args.suite]
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    ds = _load_dataset(args.data)
    ftc = cfgmod.flow_train_config(cfg["flow"])
    manifest = Manifest("ablate", out, cfg, list(range(args.seeds)),
                        [args.data])
    env_name = cfg["env"]["name"]
    env = envs.make_env(env_name)
    spec = _support_spec_for(env_name)

    encoders = {}
    for variant in variants:
        _, _, _, need = _parse_variant(variant)
        if need not in encoders:
            encoders[need] = _fit_encoder(need, ds, ftc)

    rows = []
    for variant in variants:
        _, squash, amplitude, need = _parse_variant(variant)
        for seed in range(args.seeds):
            rl_cfg = _rl_config_for_variant(cfg, squash, amplitude, seed=seed)
            cell = {"variant": variant, "seed": seed}
            try:
                agent, metrics = _train_one(ds, encoders[need], rl_cfg,
                                            variant, env, spec)
                evals = [r["mean_return"] for r in metrics
                         if r["event"] == "eval"]
                cell["final_return"] = evals[-1] if evals else None
                cell["avg_return"] = (float(np.mean(evals)) if evals else None)
                cell["status"] = "aborted" if agent.aborted else "ok"
            except Exception as exc:  # partial failures recorded, run continues
                cell.update({"final_return": None, "avg_return": None,
                             "status": f"failed: {exc}"})
            rows.append(cell)

    csv_path = _fresh(os.path.join(out, "comparison.csv"))
    lines = ["variant,seed,final_return,avg_return,status"]
    for r in rows:
        fr = "" if r["final_return"] is None else repr(r["final_return"])
        ar = "" if r["avg_return"] is None else repr(r["avg_return"])
        status = r["status"].replace(",", ";").replace("\n", " ")
        lines.append(f'{r["variant"]},{r["seed"]},{fr},{ar},{status}')
    ioutil.atomic_write_text(csv_path, "\n".join(lines) + "\n")

    bars = np.array([[r["final_return"] if r["final_return"] is not None
                      else 0.0 for r in rows if r["variant"] == v]
                     for v in variants])
    bars_path = _fresh(os.path.join(out, "comparison.svg"))
    ioutil.atomic_write_text(
        bars_path,
        svg.grouped_bars(list(variants),
                         [f"seed {s}" for s in range(args.seeds)], bars,
                         title=f"{args.suite} final returns"))
    manifest.record("cells", rows)
    manifest.finalize([csv_path, bars_path])
    return 0


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowrl",
        description="Offline RL in the latent space of a conditional "
                    "normalizing flow: datasets, flow pre-training, policy "
                    "optimization, evaluation, and the toy density study.")
    parser.add_argument("--version", action="version", version=_version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="roll out a behavior policy into a "
                                        "binary offline dataset")
    p.add_argument("--env", required=True, choices=ENV_NAMES)
    p.add_argument("--tier", required=True, choices=TIERS)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-flow", help="hyperparameter search for the "
                                             "action encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_flow)

    p = sub.add_parser("train-rl", help="advantage-weighted training on a "
                                        "frozen encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--variant", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("eval", help="roll out a trained agent and print "
                                    "return statistics as JSON")
    p.add_argument("--agent", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("toy-moons", help="run the 2-D density study and emit "
                                         "figures plus the amplitude sweep")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toy_moons)

    p = sub.add_parser("ablate", help="run an ablation suite over seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--suite", required=True, choices=sorted(SUITES))
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
