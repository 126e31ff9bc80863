"""Feed-forward building blocks on top of the autodiff engine."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class MLP:
    """Fully connected network, relu hidden activations, linear output.

    zero_init_output starts the net as the constant-zero map; coupling
    conditioners rely on this so a freshly built flow is an identity.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int, depth: int,
                 rng: np.random.Generator, name: str,
                 zero_init_output: bool = False):
        if in_dim < 1 or out_dim < 1 or hidden < 1 or depth < 1:
            raise ValueError("MLP dimensions and depth must be positive")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = hidden
        self.depth = depth
        self._layers = []
        sizes = [in_dim] + [hidden] * depth + [out_dim]
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            last = i == len(sizes) - 2
            if last and zero_init_output:
                w = np.zeros((fan_in, fan_out))
            else:
                gain = 1.0 if last else 2.0
                w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)
            self._layers.append((
                ad.Parameter(w, f"{name}.w{i}"),
                ad.Parameter(np.zeros(fan_out), f"{name}.b{i}"),
            ))

    def __call__(self, x: ad.Tensor, trainable: bool = True) -> ad.Tensor:
        h = x
        for i, (w, b) in enumerate(self._layers):
            h = ad.add(ad.matmul(h, w.tensor(trainable)), b.tensor(trainable))
            if i < len(self._layers) - 1:
                h = ad.relu(h)
        return h

    def parameters(self) -> list[ad.Parameter]:
        out = []
        for w, b in self._layers:
            out.append(w)
            out.append(b)
        return out
