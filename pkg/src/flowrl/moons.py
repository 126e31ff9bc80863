"""Toy 2-D density study on two interleaving half circles.

Generates the point set, fits unconditional flows with either base
distribution, rasterizes model densities, draws amplitude-amplified
latent samples, and quantifies how far those samples stray from the
data manifold.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import flow as fl
from . import ioutil
from . import svg

# noise-free bounding box of the raw half circles, fixed by the parametrization
BOX_X = (-1.0, 2.0)
BOX_Y = (-0.5, 1.0)

OOD_MULTIPLIER = 3.0


@dataclass(frozen=True)
class MoonsConfig:
    n: int = 10_000
    noise: float = 0.05
    seed: int = 0
    margin: float = 0.1

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"need at least 2 points, got {self.n}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if not 0.0 < self.margin < 0.5:
            raise ValueError(f"margin must be in (0, 0.5), got {self.margin}")


def squeeze(points: np.ndarray, margin: float) -> np.ndarray:
    """Affine map taking the raw bounding box onto [-1+m, 1-m]^2."""
    pts = np.asarray(points, dtype=np.float64)
    span = 2.0 - 2.0 * margin
    out = np.empty_like(pts)
    out[:, 0] = -1.0 + margin + (pts[:, 0] - BOX_X[0]) * span / (BOX_X[1] - BOX_X[0])
    out[:, 1] = -1.0 + margin + (pts[:, 1] - BOX_Y[0]) * span / (BOX_Y[1] - BOX_Y[0])
    return out


def unsqueeze(points: np.ndarray, margin: float) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    span = 2.0 - 2.0 * margin
    out = np.empty_like(pts)
    out[:, 0] = BOX_X[0] + (pts[:, 0] + 1.0 - margin) * (BOX_X[1] - BOX_X[0]) / span
    out[:, 1] = BOX_Y[0] + (pts[:, 1] + 1.0 - margin) * (BOX_Y[1] - BOX_Y[0]) / span
    return out


def moon_point(moon, t) -> np.ndarray:
    """Raw parametric point(s) for t in [0, pi]: moon 0 is the upper half
    circle (cos t, sin t), moon 1 the interleaved lower one
    (1 - cos t, 0.5 - sin t)."""
    t = np.asarray(t, dtype=np.float64)
    x = np.where(np.asarray(moon) == 0, np.cos(t), 1.0 - np.cos(t))
    y = np.where(np.asarray(moon) == 0, np.sin(t), 0.5 - np.sin(t))
    return np.stack([x, y], axis=-1)


def make_moons(config: MoonsConfig) -> np.ndarray:
    """n x 2 point set: two half circles, Gaussian noise, squeezed interior.

    Noisy points are clipped to the noise-free bounding box before the
    squeeze so every output lies inside [-1+m, 1-m]^2 regardless of
    noise draws.
    """
    rng = np.random.default_rng(config.seed)
    moon = rng.integers(0, 2, config.n)
    t = rng.uniform(0.0, np.pi, config.n)
    pts = moon_point(moon, t)
    if config.noise > 0:
        pts += rng.normal(0.0, config.noise, pts.shape)
        pts[:, 0] = np.clip(pts[:, 0], BOX_X[0], BOX_X[1])
        pts[:, 1] = np.clip(pts[:, 1], BOX_Y[0], BOX_Y[1])
    return squeeze(pts, config.margin)


def fit_toy_flow(points: np.ndarray, base_kind: str,
                 config: fl.FlowTrainConfig) -> fl.ConditionalFlow:
    """Unconditional 2-D flow over the squeezed data.

    Both variants put an arc-tanh layer on the data side, so a drawn
    latent passes through tanh last and lands inside the open unit box.
    """
    kinds = {"uniform": "cnf", "cnf": "cnf",
             "normal": "nf-normal", "nf-normal": "nf-normal"}
    if base_kind not in kinds:
        raise ValueError(
            f"unknown base kind {base_kind!r}, expected one of {sorted(kinds)}")
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError(f"points must be (n, 2), got {points.shape}")
    if not np.all(np.abs(points) < 1.0):
        raise ValueError("points must lie strictly inside (-1, 1)^2")
    flow = fl._build_flow_for(2, 0, kinds[base_kind], config, atanh_input=True)
    flow, _ = fl.pretrain(None, points, flow, config)
    return flow


@dataclass(frozen=True)
class DensityGrid:
    """Model density at cell centers of a uniform grid on (-1, 1)^2;
    values[iy, ix], row iy = 0 at the bottom."""

    resolution: int
    values: np.ndarray

    @property
    def cell_area(self) -> float:
        return (2.0 / self.resolution) ** 2

    def mass(self) -> float:
        return float(self.values.sum() * self.cell_area)


def density_grid(flow: fl.ConditionalFlow, resolution: int) -> DensityGrid:
    if resolution < 50:
        raise ValueError(f"resolution must be >= 50, got {resolution}")
    centers = -1.0 + (np.arange(resolution) + 0.5) * (2.0 / resolution)
    xx, yy = np.meshgrid(centers, centers)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    out = np.empty(pts.shape[0])
    chunk = 20_000
    for lo in range(0, pts.shape[0], chunk):
        out[lo:lo + chunk] = flow.log_prob(pts[lo:lo + chunk])
    return DensityGrid(resolution, np.exp(out).reshape(resolution, resolution))


def amplitude_sample(flow: fl.ConditionalFlow, amplitude: float, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Decode z ~ amplitude * N(0, I) through the flow inverse."""
    if flow.base.kind != "normal":
        raise ValueError(
            "amplitude_sample needs a normal-base flow: a uniform base "
            "already covers its whole support, so scaling its draws past "
            "the box has no meaning")
    if amplitude <= 0:
        raise ValueError(f"amplitude must be > 0, got {amplitude}")
    z = amplitude * rng.standard_normal((n, flow.flow_dim))
    return flow.inverse(z)


def ood_fraction(samples: np.ndarray, reference_points: np.ndarray,
                 threshold: float) -> float:
    """Fraction of samples farther than threshold from every reference
    point (nearest-neighbor distance)."""
    reference_points = np.asarray(reference_points, dtype=np.float64)
    if reference_points.size == 0:
        raise ValueError("reference point set is empty")
    if threshold <= 0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    dist, _ = cKDTree(reference_points).query(np.asarray(samples, dtype=np.float64))
    return float(np.mean(dist > threshold))


@dataclass(frozen=True)
class AmplitudeSweep:
    amplitudes: tuple = (1.0, 2.0, 4.0, 10.0, 30.0)
    n_samples: int = 2000
    k: float = OOD_MULTIPLIER

    def __post_init__(self):
        amps = tuple(float(a) for a in self.amplitudes)
        if not amps or amps[0] <= 0:
            raise ValueError(f"amplitudes must be positive, got {amps}")
        if any(b <= a for a, b in zip(amps, amps[1:])):
            raise ValueError(f"amplitudes must be ascending, got {amps}")
        object.__setattr__(self, "amplitudes", amps)
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.k <= 0:
            raise ValueError("threshold multiplier k must be > 0")


def run_sweep(flow: fl.ConditionalFlow, reference_points: np.ndarray,
              noise: float, sweep: AmplitudeSweep,
              seeds=(0, 1, 2)) -> list[dict]:
    """(amplitude, seed, ood_fraction) rows at threshold k * noise."""
    threshold = sweep.k * noise
    rows = []
    for seed in seeds:
        for i, amp in enumerate(sweep.amplitudes):
            rng = np.random.default_rng((int(seed), i))
            samples = amplitude_sample(flow, amp, sweep.n_samples, rng)
            rows.append({
                "amplitude": float(amp),
                "seed": int(seed),
                "ood_fraction": ood_fraction(samples, reference_points, threshold),
            })
    return rows


def write_sweep_csv(rows: list[dict], path: str):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["amplitude", "seed", "ood_fraction"])
    writer.writeheader()
    writer.writerows(rows)
    ioutil.atomic_write_text(path, buf.getvalue())


def emit_figures(cnf_flow: fl.ConditionalFlow, normal_flow: fl.ConditionalFlow,
                 points: np.ndarray, sweep: AmplitudeSweep, out_dir: str,
                 resolution: int = 120, n_samples: int = 2000,
                 seed: int = 0) -> list[str]:
    """One SVG per panel: a density and a sample panel for each flow,
    plus one amplified-sample panel per sweep amplitude. Byte content
    depends only on the arguments."""
    os.makedirs(out_dir, exist_ok=True)
    panels = []
    for name, flw in (("cnf", cnf_flow), ("nf_normal", normal_flow)):
        grid = density_grid(flw, resolution)
        panels.append((f"density_{name}.svg",
                       svg.heatmap(grid.values, title=f"density {name}")))
        drawn = flw.sample(None, n_samples, np.random.default_rng(seed))
        panels.append((f"samples_{name}.svg",
                       svg.scatter(drawn, title=f"samples {name}",
                                   backdrop=points)))
    for i, amp in enumerate(sweep.amplitudes):
        rng = np.random.default_rng((seed, i))
        drawn = amplitude_sample(normal_flow, amp, n_samples, rng)
        panels.append((f"amplitude_{amp:g}.svg",
                       svg.scatter(drawn, title=f"amplitude {amp:g}",
                                   color=svg.PALETTE[1], backdrop=points)))
    paths = []
    for fname, text in panels:
        path = os.path.join(out_dir, fname)
        ioutil.atomic_write_text(path, text)
        paths.append(path)
    return paths
