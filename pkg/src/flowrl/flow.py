"""Conditional normalizing-flow action encoders.

Two legal configurations:
  - bounded-latent flow: tanh output layer + uniform base on (-1,1)^n,
    so every latent coordinate stays strictly inside (-1,1);
  - unbounded variant: no tanh, standard-normal base.
Mixing the two (tanh with normal base, or bare output with uniform base)
is rejected at construction.

Couplings are affine: a conditioner MLP reads (passive half ++ state) and
emits a bounded log-scale and a shift for the active half, giving an exact
inverse and a triangular Jacobian. A fixed coordinate reversal follows
every coupling, and the passive/active split flips layer to layer.

Toy density models add an arc-tanh input layer on the data side, so
sampling (the inverse direction) applies tanh last and lands in (-1,1)^2.

Also here: maximum-likelihood pretraining with a validation split and
best-snapshot selection, random hyperparameter search, and a conditional
VAE used as an alternative action encoder in ablations.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import ioutil
from .nets import MLP

logger = logging.getLogger(__name__)

S_MAX_DEFAULT = 5.0
# inversion guard: latents are pulled into [-(1-eps), 1-eps] before arc-tanh
TANH_EPS = 1e-6
# pre-activation guard keeping tanh strictly below 1 in float64
_TANH_PRE_CLAMP = 18.0
_LOG_2PI = math.log(2.0 * math.pi)

FLOW_MAGIC = b"CNFM"
FLOW_VERSION = 1


def _softplus_t(x: ad.Tensor) -> ad.Tensor:
    # max(x,0) + log(1+exp(-|x|)): overflow-free for any x
    return ad.add(ad.relu(x), ad.log(ad.add(ad.exp(ad.neg(ad.absolute(x))), 1.0)))


def _log1m_tanh_sq_t(h: ad.Tensor) -> ad.Tensor:
    # log(1 - tanh(h)^2) = 2*(log 2 - h - softplus(-2h)), stable for large |h|
    inner = ad.sub(ad.sub(ad.Tensor(math.log(2.0)), h), _softplus_t(ad.mul(h, -2.0)))
    return ad.mul(inner, 2.0)


class UniformBase:
    """Uniform on (-1,1)^n: constant log-density -n*log 2 on support."""

    kind = "uniform"

    def __init__(self, n: int):
        self.n = n

    def log_prob_t(self, z: ad.Tensor) -> ad.Tensor:
        m = z.data.shape[0]
        return ad.Tensor(np.full(m, -self.n * math.log(2.0)))

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, (m, self.n))


class NormalBase:
    """Standard normal in n dims."""

    kind = "normal"

    def __init__(self, n: int):
        self.n = n

    def log_prob_t(self, z: ad.Tensor) -> ad.Tensor:
        quad = ad.mul(ad.sum_cols(ad.mul(z, z)), -0.5)
        return ad.add(quad, -0.5 * self.n * _LOG_2PI)

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        return rng.standard_normal((m, self.n))


_BASES = {"uniform": UniformBase, "normal": NormalBase}


class CouplingLayer:
    """Affine coupling: active half scaled and shifted by functions of the
    passive half and the state. Log-scale is bounded to |s| <= s_max via
    s_max*tanh(raw/...), and the conditioner output layer starts at zero so
    the layer starts as the identity."""

    def __init__(self, n: int, state_dim: int, hidden: int, depth: int,
                 parity: int, rng: np.random.Generator, name: str,
                 s_max: float = S_MAX_DEFAULT):
        if n < 2:
            raise ValueError(f"coupling layers need at least 2 dims, got {n}")
        split = (n + 1) // 2
        idx = np.arange(n)
        if parity % 2 == 0:
            self.passive = idx[:split]
            self.active = idx[split:]
        else:
            self.passive = idx[split:]
            self.active = idx[:split]
        self.n = n
        self.state_dim = state_dim
        self.s_max = s_max
        self.net = MLP(len(self.passive) + state_dim, 2 * len(self.active),
                       hidden, depth, rng, name, zero_init_output=True)

    def _cond(self, xp: ad.Tensor, s: ad.Tensor | None, trainable: bool):
        inp = ad.concat_cols([xp, s]) if self.state_dim else xp
        h = self.net(inp, trainable)
        na = len(self.active)
        raw = ad.take_cols(h, np.arange(na))
        shift = ad.take_cols(h, np.arange(na, 2 * na))
        log_scale = ad.mul(ad.tanh(ad.mul(raw, 1.0 / self.s_max)), self.s_max)
        return log_scale, shift

    def forward_t(self, x: ad.Tensor, s: ad.Tensor | None, trainable: bool):
        xp = ad.take_cols(x, self.passive)
        xa = ad.take_cols(x, self.active)
        log_scale, shift = self._cond(xp, s, trainable)
        ya = ad.add(ad.mul(xa, ad.exp(log_scale)), shift)
        out = ad.add(ad.put_cols(xp, self.passive, self.n),
                     ad.put_cols(ya, self.active, self.n))
        return out, ad.sum_cols(log_scale)

    def inverse_t(self, y: ad.Tensor, s: ad.Tensor | None, trainable: bool):
        yp = ad.take_cols(y, self.passive)
        ya = ad.take_cols(y, self.active)
        log_scale, shift = self._cond(yp, s, trainable)
        xa = ad.mul(ad.sub(ya, shift), ad.exp(ad.neg(log_scale)))
        return ad.add(ad.put_cols(yp, self.passive, self.n),
                      ad.put_cols(xa, self.active, self.n))

    def parameters(self):
        return self.net.parameters()


class ConditionalFlow:
    """Stack of (coupling, coordinate reversal) pairs with an optional tanh
    output layer and a base distribution; exposes the forward map, its exact
    inverse, change-of-variables log-density, and base sampling.

    state_dim may be 0 for unconditional density models. atanh_input adds the
    data-side arc-tanh layer used by the toy models.

    action_dim 1 is supported only with aux_pad=True, which carries one
    auxiliary base-distribution dim through the couplings; its log_prob is
    then a single-sample estimate and needs an rng. Discouraged: prefer
    action_dim >= 2.
    """

    def __init__(self, action_dim: int, state_dim: int, n_layers: int,
                 hidden: int, base: str = "uniform", tanh_output: bool = True,
                 atanh_input: bool = False, depth: int = 2,
                 s_max: float = S_MAX_DEFAULT, seed: int = 0,
                 aux_pad: bool = False):
        if base not in _BASES:
            raise ValueError(f"unknown base kind {base!r}")
        if (base == "uniform") != tanh_output:
            raise ValueError(
                "illegal configuration: tanh output requires the uniform base "
                "and the normal base requires no tanh "
                f"(got base={base!r}, tanh_output={tanh_output})"
            )
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if action_dim < 2 and not aux_pad:
            raise ValueError(
                "couplings need action_dim >= 2; pass aux_pad=True to carry "
                "an auxiliary base dim (discouraged)"
            )
        self.action_dim = action_dim
        self.state_dim = state_dim
        self.n_layers = n_layers
        self.hidden = hidden
        self.depth = depth
        self.s_max = s_max
        self.seed = seed
        self.tanh_output = tanh_output
        self.atanh_input = atanh_input
        self.aux_pad = bool(aux_pad and action_dim == 1)
        self.flow_dim = action_dim + (1 if self.aux_pad else 0)
        self.base = _BASES[base](self.flow_dim)
        self._rev = np.arange(self.flow_dim)[::-1].copy()
        rng = np.random.default_rng(seed)
        self.layers = [
            CouplingLayer(self.flow_dim, state_dim, hidden, depth, k, rng,
                          f"flow.l{k}", s_max)
            for k in range(n_layers)
        ]

    # latent dimensionality the policy must emit
    @property
    def latent_dim(self) -> int:
        return self.flow_dim

    def parameters(self) -> list[ad.Parameter]:
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def _check_finite(self, arr: np.ndarray, what: str):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite {what} passed to flow")

    def _as_batch(self, x, dim: int, what: str):
        arr = np.asarray(x, dtype=np.float64)
        squeeze = arr.ndim == 1
        if squeeze:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != dim:
            raise ad.ShapeError(
                f"{what}: expected shape (m, {dim}), got {np.asarray(x).shape}"
            )
        self._check_finite(arr, what)
        return arr, squeeze

    # graph-building core: inputs and outputs are Tensors
    def forward_t(self, x: ad.Tensor, s: ad.Tensor | None, trainable: bool = True):
        m = x.data.shape[0]
        ld = ad.Tensor(np.zeros(m))
        h = x
        if self.atanh_input:
            hc = ad.clamp(h, -(1.0 - TANH_EPS), 1.0 - TANH_EPS)
            ld = ad.sub(ld, ad.sum_cols(ad.log(ad.sub(ad.Tensor(1.0), ad.mul(hc, hc)))))
            h = ad.atanh(hc)
        for layer in self.layers:
            h, ld_k = layer.forward_t(h, s, trainable)
            ld = ad.add(ld, ld_k)
            h = ad.take_cols(h, self._rev)
        if self.tanh_output:
            ld = ad.add(ld, ad.sum_cols(_log1m_tanh_sq_t(h)))
            h = ad.tanh(ad.clamp(h, -_TANH_PRE_CLAMP, _TANH_PRE_CLAMP))
        return h, ld

    def inverse_t(self, z: ad.Tensor, s: ad.Tensor | None, trainable: bool = True):
        h = z
        if self.tanh_output:
            h = ad.atanh(ad.clamp(h, -(1.0 - TANH_EPS), 1.0 - TANH_EPS))
        for layer in reversed(self.layers):
            h = ad.take_cols(h, self._rev)
            h = layer.inverse_t(h, s, trainable)
        if self.atanh_input:
            h = ad.tanh(ad.clamp(h, -_TANH_PRE_CLAMP, _TANH_PRE_CLAMP))
        return h

    # policy-side alias: decode a latent into an action
    def decode_t(self, z: ad.Tensor, s: ad.Tensor | None, trainable: bool = False):
        a = self.inverse_t(z, s, trainable)
        if self.aux_pad:
            a = ad.take_cols(a, np.arange(self.action_dim))
        return a

    def log_prob_t(self, x: ad.Tensor, s: ad.Tensor | None, trainable: bool = True):
        z, ld = self.forward_t(x, s, trainable)
        return ad.add(self.base.log_prob_t(z), ld)

    def _pad(self, a: np.ndarray, rng: np.random.Generator | None):
        if not self.aux_pad:
            return a, None
        if rng is None:
            raise ValueError("aux_pad flows need an rng for the auxiliary dim")
        u = self.base.sample(rng, a.shape[0])[:, -1:]
        return np.concatenate([a, u], axis=1), u

    # numpy-facing wrappers; accept a single vector or a batch
    def forward(self, a, s=None, rng: np.random.Generator | None = None):
        arr, squeeze = self._as_batch(a, self.action_dim, "action")
        arr, _ = self._pad(arr, rng)
        st = self._state_tensor(s, arr.shape[0])
        z, ld = self.forward_t(ad.Tensor(arr), st, trainable=False)
        if squeeze:
            return z.data[0], float(ld.data[0])
        return z.data, ld.data

    def inverse(self, z, s=None):
        arr, squeeze = self._as_batch(z, self.flow_dim, "latent")
        st = self._state_tensor(s, arr.shape[0])
        a = self.inverse_t(ad.Tensor(arr), st, trainable=False)
        out = a.data[:, : self.action_dim] if self.aux_pad else a.data
        return out[0] if squeeze else out

    def log_prob(self, a, s=None, rng: np.random.Generator | None = None):
        arr, squeeze = self._as_batch(a, self.action_dim, "action")
        arr, u = self._pad(arr, rng)
        st = self._state_tensor(s, arr.shape[0])
        lp = self.log_prob_t(ad.Tensor(arr), st, trainable=False).data
        if self.aux_pad:
            # joint density over (a, u) divided by the proposal density of u
            if self.base.kind == "uniform":
                lp = lp + math.log(2.0)
            else:
                lp = lp + 0.5 * (u[:, 0] ** 2 + _LOG_2PI)
        return float(lp[0]) if squeeze else lp

    def sample(self, s, m: int | None = None, rng: np.random.Generator | None = None):
        if rng is None:
            raise ValueError("sample needs a seeded rng")
        if s is None:
            if m is None:
                raise ValueError("unconditional sample needs an explicit count m")
            count, st = m, None
        else:
            arr, _ = self._as_batch(s, self.state_dim, "state")
            count = arr.shape[0]
            st = ad.Tensor(arr)
        z = self.base.sample(rng, count)
        a = self.inverse_t(ad.Tensor(z), st, trainable=False)
        out = a.data[:, : self.action_dim] if self.aux_pad else a.data
        return out

    def _state_tensor(self, s, m: int):
        if self.state_dim == 0:
            return None
        if s is None:
            raise ValueError("this flow is state-conditional, pass s")
        arr, _ = self._as_batch(s, self.state_dim, "state")
        if arr.shape[0] == 1 and m > 1:
            arr = np.repeat(arr, m, axis=0)
        if arr.shape[0] != m:
            raise ad.ShapeError(
                f"state batch {arr.shape} does not match action batch ({m}, ...)"
            )
        return ad.Tensor(arr)

    def nll_t(self, a: ad.Tensor, s: ad.Tensor | None, trainable: bool = True) -> ad.Tensor:
        return ad.neg(ad.mean_all(self.log_prob_t(a, s, trainable)))

    def nll(self, a, s=None) -> float:
        arr, _ = self._as_batch(a, self.action_dim, "action")
        st = self._state_tensor(s, arr.shape[0])
        return float(self.nll_t(ad.Tensor(arr), st, trainable=False).data)

    # architecture description used by checkpointing and validation
    def arch(self) -> dict:
        return {
            "kind": "flow",
            "action_dim": self.action_dim,
            "state_dim": self.state_dim,
            "n_layers": self.n_layers,
            "hidden": self.hidden,
            "depth": self.depth,
            "base": self.base.kind,
            "tanh_output": self.tanh_output,
            "atanh_input": self.atanh_input,
            "s_max": self.s_max,
            "seed": self.seed,
            "aux_pad": self.aux_pad,
        }


def nll_loss(flow: ConditionalFlow, states: np.ndarray | None,
             actions: np.ndarray, trainable: bool = True) -> ad.Tensor:
    """Mean negative log-likelihood of a batch; graph-building."""
    if actions.shape[0] == 0:
        raise ValueError("nll_loss needs a non-empty batch")
    st = None
    if flow.state_dim:
        st = ad.Tensor(np.asarray(states, dtype=np.float64))
    return flow.nll_t(ad.Tensor(np.asarray(actions, dtype=np.float64)), st, trainable)


@dataclass
class FlowTrainConfig:
    """Pretraining hyperparameters. steps/layers/hidden/batch defaults follow
    the reference configuration for small tasks; the ranges drive random
    search."""

    steps: int = 100_000
    n_layers: int = 4
    hidden: int = 64
    depth: int = 2
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 1024
    lr_range: tuple[float, float] = (1e-5, 3e-3)
    weight_decay_range: tuple[float, float] = (0.0, 1e-2)
    batch_choices: tuple[int, ...] = (512, 1024, 2048)
    val_fraction: float = 0.10
    eval_interval: int = 500
    seed: int = 0
    s_max: float = S_MAX_DEFAULT

    def __post_init__(self):
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError("val_fraction must lie in (0,1)")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")


def _param_values(params) -> list[np.ndarray]:
    return [p.value.copy() for p in params]


def _restore(params, values):
    for p, v in zip(params, values):
        p.value[:] = v


def _nll_on(flow, states, actions, idx, cap=4096):
    sel = idx if idx.size <= cap else idx[:cap]
    a = actions[sel]
    s = states[sel] if flow.state_dim else None
    return flow.nll(a, s)


def pretrain(states: np.ndarray | None, actions: np.ndarray,
             flow: ConditionalFlow, config: FlowTrainConfig):
    """Maximum-likelihood training with a held-out validation split.

    Runs config.steps Adam steps on minibatch NLL, evaluates train and
    validation NLL every eval_interval steps (and at step 0), and returns
    (flow, log) with the parameters rolled back to the best-validation
    snapshot. Aborts if validation NLL is non-finite for 10 straight
    evaluations.
    """
    n = actions.shape[0]
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * config.val_fraction))) if n > 1 else 0
    val_idx = perm[:n_val]
    train_idx = perm[n_val:] if n_val < n else perm
    if train_idx.size == 0:
        train_idx = perm

    params = flow.parameters()
    opt = ad.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    log = []
    best_val = math.inf
    best_snapshot = _param_values(params)
    bad_evals = 0

    def evaluate(step):
        nonlocal best_val, best_snapshot, bad_evals
        train_nll = _nll_on(flow, states, actions, train_idx)
        val_nll = (_nll_on(flow, states, actions, val_idx)
                   if val_idx.size else train_nll)
        log.append({"step": step, "train_nll": train_nll, "val_nll": val_nll})
        if math.isfinite(val_nll):
            bad_evals = 0
            if val_nll < best_val:
                best_val = val_nll
                best_snapshot = _param_values(params)
        else:
            bad_evals += 1
            if bad_evals >= 10:
                raise RuntimeError(
                    f"validation NLL non-finite for {bad_evals} consecutive "
                    f"evaluations (step {step}); training diverged"
                )

    evaluate(0)
    for step in range(1, config.steps + 1):
        batch = rng.choice(train_idx, size=min(config.batch_size, train_idx.size),
                           replace=True)
        a = actions[batch]
        s = states[batch] if flow.state_dim else None
        with ad.Tape() as tape:
            loss = nll_loss(flow, s, a)
            tape.backward(loss)
        opt.step()
        if step % config.eval_interval == 0 or step == config.steps:
            evaluate(step)
    _restore(params, best_snapshot)
    return flow, {"log": log, "best_val_nll": best_val}


def _build_flow_for(actions_dim: int, state_dim: int, kind: str,
                    config: FlowTrainConfig, atanh_input: bool = False,
                    seed: int | None = None) -> ConditionalFlow:
    if kind == "cnf":
        base, tanh_out = "uniform", True
    elif kind == "nf-normal":
        base, tanh_out = "normal", False
    else:
        raise ValueError(f"unknown flow kind {kind!r}, expected cnf or nf-normal")
    return ConditionalFlow(
        actions_dim, state_dim, config.n_layers, config.hidden, base=base,
        tanh_output=tanh_out, atanh_input=atanh_input, depth=config.depth,
        s_max=config.s_max, seed=config.seed if seed is None else seed,
    )


def hyperparameter_search(states: np.ndarray | None, actions: np.ndarray,
                          kind: str, config: FlowTrainConfig, n_trials: int,
                          rng: np.random.Generator,
                          atanh_input: bool = False,
                          trial_overrides: list[dict] | None = None):
    """Random search: learning rate and weight decay drawn uniformly from
    their continuous ranges, batch size from the discrete choices. Returns
    (best flow, manifest) where the manifest ranks every trial by best
    validation NLL. trial_overrides lets callers pin specific trials'
    hyperparameters (used by tests and sweep tooling).
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    state_dim = states.shape[1] if states is not None and states.ndim == 2 else 0
    rows = []
    best = None
    for t in range(n_trials):
        lr = float(rng.uniform(*config.lr_range))
        wd = float(rng.uniform(*config.weight_decay_range))
        batch = int(rng.choice(np.asarray(config.batch_choices)))
        seed = int(rng.integers(0, 2**31 - 1))
        over = {}
        if trial_overrides and t < len(trial_overrides):
            over = dict(trial_overrides[t])
        trial_cfg = replace(config, lr=over.get("lr", lr),
                            weight_decay=over.get("weight_decay", wd),
                            batch_size=over.get("batch_size", batch),
                            seed=over.get("seed", seed))
        f = _build_flow_for(actions.shape[1], state_dim, kind, trial_cfg,
                            atanh_input=atanh_input, seed=trial_cfg.seed)
        row = {"trial": t, "lr": trial_cfg.lr, "weight_decay": trial_cfg.weight_decay,
               "batch_size": trial_cfg.batch_size, "seed": trial_cfg.seed}
        try:
            f, result = pretrain(states, actions, f, trial_cfg)
            row["best_val_nll"] = result["best_val_nll"]
            row["status"] = "ok"
            if math.isfinite(result["best_val_nll"]) and (
                best is None or result["best_val_nll"] < best[0]
            ):
                best = (result["best_val_nll"], f, result, t)
        except RuntimeError as e:
            row["best_val_nll"] = math.inf
            row["status"] = f"diverged: {e}"
        rows.append(row)
    if best is None:
        detail = "; ".join(f"trial {r['trial']}: {r['status']}" for r in rows)
        raise RuntimeError(f"all {n_trials} trials diverged ({detail})")
    order = sorted(range(len(rows)), key=lambda i: rows[i]["best_val_nll"])
    for rank, i in enumerate(order):
        rows[i]["rank"] = rank
    manifest = {"trials": rows, "best_trial": best[3], "log": best[2]["log"]}
    return best[1], manifest


class ConditionalVAE:
    """Conditional VAE action encoder for the encoder ablation: Gaussian
    encoder q(z|a,s), tanh-squashed decoder, standard-normal prior."""

    def __init__(self, action_dim: int, state_dim: int, hidden: int = 64,
                 depth: int = 2, latent_dim: int | None = None,
                 beta: float = 0.5, seed: int = 0):
        if beta < 0:
            raise ValueError("beta must be >= 0")
        self.action_dim = action_dim
        self.state_dim = state_dim
        self.hidden = hidden
        self.depth = depth
        self.latent_dim = latent_dim if latent_dim is not None else 2 * action_dim
        self.beta = beta
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoder = MLP(action_dim + state_dim, 2 * self.latent_dim, hidden,
                           depth, rng, "vae.enc")
        self.decoder = MLP(self.latent_dim + state_dim, action_dim, hidden,
                           depth, rng, "vae.dec")

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def encode_t(self, a: ad.Tensor, s: ad.Tensor | None, trainable: bool = True):
        inp = ad.concat_cols([a, s]) if self.state_dim else a
        h = self.encoder(inp, trainable)
        d = self.latent_dim
        mu = ad.take_cols(h, np.arange(d))
        logvar = ad.clamp(ad.take_cols(h, np.arange(d, 2 * d)), -10.0, 2.0)
        return mu, logvar

    def decode_t(self, z: ad.Tensor, s: ad.Tensor | None, trainable: bool = False):
        inp = ad.concat_cols([z, s]) if self.state_dim else z
        return ad.tanh(self.decoder(inp, trainable))

    def decode(self, z, s=None):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        st = ad.Tensor(np.atleast_2d(np.asarray(s, dtype=np.float64))) if self.state_dim else None
        return self.decode_t(ad.Tensor(z), st, trainable=False).data

    def elbo_loss_t(self, a: ad.Tensor, s: ad.Tensor | None, eps: np.ndarray,
                    beta: float | None = None, trainable: bool = True) -> ad.Tensor:
        beta = self.beta if beta is None else beta
        mu, logvar = self.encode_t(a, s, trainable)
        std = ad.exp(ad.mul(logvar, 0.5))
        z = ad.add(mu, ad.mul(std, ad.Tensor(eps)))
        recon = self.decode_t(z, s, trainable)
        diff = ad.sub(recon, a)
        mse = ad.mean_all(ad.mul(diff, diff))
        # KL(q || N(0,I)) summed over latent dims, averaged over the batch
        kl_terms = ad.sub(ad.add(ad.Tensor(1.0), logvar),
                          ad.add(ad.mul(mu, mu), ad.exp(logvar)))
        kl = ad.mul(ad.mean_all(ad.sum_cols(kl_terms)), -0.5)
        return ad.add(mse, ad.mul(kl, beta))

    def elbo_loss(self, a, s, rng: np.random.Generator, beta: float | None = None) -> float:
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        st = ad.Tensor(np.atleast_2d(np.asarray(s, dtype=np.float64))) if self.state_dim else None
        eps = rng.standard_normal((a.shape[0], self.latent_dim))
        return float(self.elbo_loss_t(ad.Tensor(a), st, eps, beta, trainable=False).data)

    def arch(self) -> dict:
        return {
            "kind": "vae",
            "action_dim": self.action_dim,
            "state_dim": self.state_dim,
            "hidden": self.hidden,
            "depth": self.depth,
            "latent_dim": self.latent_dim,
            "beta": self.beta,
            "seed": self.seed,
        }


def vae_pretrain(states: np.ndarray | None, actions: np.ndarray,
                 vae: ConditionalVAE, config: FlowTrainConfig):
    """ELBO training with the same split/snapshot protocol as pretrain."""
    n = actions.shape[0]
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * config.val_fraction))) if n > 1 else 0
    val_idx = perm[:n_val]
    train_idx = perm[n_val:] if n_val < n else perm
    if train_idx.size == 0:
        train_idx = perm

    params = vae.parameters()
    opt = ad.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    eval_rng = np.random.default_rng(config.seed + 1)
    log = []
    best_val = math.inf
    best_snapshot = _param_values(params)
    bad = 0

    def batch_loss(idx, rng_):
        a = actions[idx]
        s = states[idx] if vae.state_dim else None
        st = ad.Tensor(s) if s is not None else None
        eps = rng_.standard_normal((a.shape[0], vae.latent_dim))
        return vae.elbo_loss_t(ad.Tensor(a), st, eps)

    def evaluate(step):
        nonlocal best_val, best_snapshot, bad
        tr = float(batch_loss(train_idx[:2048], np.random.default_rng(0)).data)
        vl = (float(batch_loss(val_idx[:2048], np.random.default_rng(0)).data)
              if val_idx.size else tr)
        log.append({"step": step, "train_nll": tr, "val_nll": vl})
        if math.isfinite(vl):
            bad = 0
            if vl < best_val:
                best_val = vl
                best_snapshot = _param_values(params)
        else:
            bad += 1
            if bad >= 10:
                raise RuntimeError("validation loss non-finite for 10 evaluations")

    evaluate(0)
    for step in range(1, config.steps + 1):
        batch = rng.choice(train_idx, size=min(config.batch_size, train_idx.size),
                           replace=True)
        with ad.Tape() as tape:
            loss = batch_loss(batch, eval_rng)
            tape.backward(loss)
        opt.step()
        if step % config.eval_interval == 0 or step == config.steps:
            evaluate(step)
    _restore(params, best_snapshot)
    return vae, {"log": log, "best_val_nll": best_val}


def _encode_params(model) -> bytes:
    return b"".join(np.ascontiguousarray(p.value, dtype="<f8").tobytes()
                    for p in model.parameters())


def save_encoder(model, path: str):
    """Serialize a flow or VAE: magic, version, JSON architecture header,
    then all parameters as little-endian float64 in declaration order."""
    payload = _encode_params(model)
    header = model.arch()
    header["payload_bytes"] = len(payload)
    ioutil.atomic_write_bytes(
        path, ioutil.pack_container(FLOW_MAGIC, FLOW_VERSION, header, payload)
    )


def load_encoder(path: str):
    with open(path, "rb") as f:
        data = f.read()
    header, payload = ioutil.unpack_container(data, FLOW_MAGIC, FLOW_VERSION)
    kind = header.get("kind")
    if kind == "flow":
        model = ConditionalFlow(
            header["action_dim"], header["state_dim"], header["n_layers"],
            header["hidden"], base=header["base"],
            tanh_output=header["tanh_output"], atanh_input=header["atanh_input"],
            depth=header["depth"], s_max=header["s_max"], seed=header["seed"],
            aux_pad=header["aux_pad"],
        )
    elif kind == "vae":
        model = ConditionalVAE(
            header["action_dim"], header["state_dim"], hidden=header["hidden"],
            depth=header["depth"], latent_dim=header["latent_dim"],
            beta=header["beta"], seed=header["seed"],
        )
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    expected = sum(p.value.size for p in model.parameters()) * 8
    if header.get("payload_bytes") != len(payload) or len(payload) != expected:
        raise ValueError(
            f"checkpoint length mismatch: expected {expected} payload bytes, "
            f"header says {header.get('payload_bytes')}, file has {len(payload)}"
        )
    ofs = 0
    for p in model.parameters():
        k = p.value.size * 8
        p.value[:] = np.frombuffer(payload[ofs : ofs + k], dtype="<f8").reshape(
            p.value.shape
        )
        ofs += k
    return model


def flow_fingerprint(model) -> str:
    """Content hash over architecture + parameters; used to pin the frozen
    encoder inside agent checkpoints."""
    return ioutil.sha256_bytes(
        ioutil.canonical_json(model.arch()).encode() + _encode_params(model)
    )
