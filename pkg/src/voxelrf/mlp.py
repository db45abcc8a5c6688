"""Shallow MLP for view-dependent color, with a hand-written backward pass.

Input is the interpolated feature vector, the raw 3D position, and a
frequency-encoded viewing direction; output is raw RGB (sigmoid applied by
the caller).  Two hidden ReLU layers of 64 units by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError


def positional_encoding(x: np.ndarray, n_freqs: int) -> np.ndarray:
    """[x, sin(2^l x), cos(2^l x) for l < n_freqs], concatenated per component."""
    parts = [x]
    for l in range(n_freqs):
        s = (2.0 ** l) * x
        parts.append(np.sin(s))
        parts.append(np.cos(s))
    return np.concatenate(parts, axis=-1)


@dataclass
class ColorMLP:
    feature_dim: int = 12
    hidden_dim: int = 64
    view_freqs: int = 4
    params: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        # feature + raw position + encoded direction
        return self.feature_dim + 3 + 3 * (1 + 2 * self.view_freqs)

    def init_params(self, rng: np.random.Generator, dtype=np.float64) -> None:
        """Glorot-uniform weights, zero biases."""
        def glorot(fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)

        d_in, h = self.input_dim, self.hidden_dim
        self.params = {
            "w1": glorot(d_in, h), "b1": np.zeros(h, dtype=dtype),
            "w2": glorot(h, h), "b2": np.zeros(h, dtype=dtype),
            "w3": glorot(h, 3), "b3": np.zeros(3, dtype=dtype),
        }

    def _assemble(self, features, positions, view_dirs):
        enc = positional_encoding(view_dirs, self.view_freqs)
        x = np.concatenate([features, positions, enc], axis=1)
        if x.shape[1] != self.input_dim:
            raise InvalidParameterError(
                f"network input has {x.shape[1]} dims, expected {self.input_dim}")
        return x

    def forward(self, features, positions, view_dirs):
        """Raw RGB output (P, 3) plus a cache for backward."""
        if not self.params:
            raise InvalidParameterError("network parameters are uninitialized")
        p = self.params
        x = self._assemble(features, positions, view_dirs)
        h1 = np.maximum(x @ p["w1"] + p["b1"], 0.0)
        h2 = np.maximum(h1 @ p["w2"] + p["b2"], 0.0)
        out = h2 @ p["w3"] + p["b3"]
        return out, (x, h1, h2)

    def backward(self, cache, d_out):
        """Gradients (d_features, d_params) for upstream d_out (P, 3)."""
        p = self.params
        x, h1, h2 = cache
        grads = {"w3": h2.T @ d_out, "b3": d_out.sum(axis=0)}
        dh2 = (d_out @ p["w3"].T) * (h2 > 0)
        grads["w2"] = h1.T @ dh2
        grads["b2"] = dh2.sum(axis=0)
        dh1 = (dh2 @ p["w2"].T) * (h1 > 0)
        grads["w1"] = x.T @ dh1
        grads["b1"] = dh1.sum(axis=0)
        d_features = (dh1 @ p["w1"].T)[:, :self.feature_dim]
        return d_features, grads

    def param_vector(self) -> np.ndarray:
        """Flattened parameters in a fixed key order (for tests/checkpoints)."""
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])
