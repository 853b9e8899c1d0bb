"""Class-frequency prior and the frequency-aware feature correction.

The gate input is log(1/(f + eps)), strictly decreasing in class frequency,
so with nonnegative weights rare classes push the gate toward 1 (normalize
harder) and frequent ones toward 0 (leave features alone). The smoothing term
sits inside the reciprocal so zero-count classes stay finite.
"""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .errors import ContractError

DEFAULT_EPS = 1e-6


class FrequencyPrior:
    """Normalized class frequencies f_k = n_k / sum(n) with smoothing eps."""

    def __init__(self, counts, eps: float = DEFAULT_EPS):
        counts = np.asarray(counts, dtype=np.float64)
        if counts.ndim != 1 or counts.size == 0:
            raise ContractError("counts must be a non-empty 1-d array")
        if np.any(counts < 0):
            raise ContractError("counts must be nonnegative")
        total = counts.sum()
        if total <= 0:
            raise ContractError("at least one class count must be positive")
        self.counts = counts
        self.f = counts / total
        self.eps = float(eps)

    @property
    def n_classes(self) -> int:
        return self.f.size

    def log_inverse(self) -> np.ndarray:
        """log(1/(f_k + eps)): the gate's pre-activation input, finite for f_k = 0."""
        return np.log(1.0 / (self.f + self.eps))

    def to_json(self) -> dict:
        return {"counts": self.counts.tolist(), "f": self.f.tolist(), "eps": self.eps}

    @classmethod
    def from_json(cls, doc: dict) -> "FrequencyPrior":
        prior = cls(doc["counts"], eps=doc["eps"])
        stored = np.asarray(doc["f"], dtype=np.float64)
        if not np.allclose(prior.f, stored, atol=1e-12):
            raise ContractError("stored frequencies disagree with stored counts")
        return prior


def compute_frequencies(counts, eps: float = DEFAULT_EPS) -> FrequencyPrior:
    return FrequencyPrior(counts, eps=eps)


def uniform_prior(n_classes: int, eps: float = DEFAULT_EPS) -> FrequencyPrior:
    """Flat prior used when the frequency pathway is ablated."""
    return FrequencyPrior(np.ones(n_classes), eps=eps)


class FrequencyGate(nc.Module):
    """Learned map from the inverse-frequency signal to a per-feature gate.

    W starts as small uniform noise and b at zero, so the initial gate sits
    near 0.5 and applies no correction bias.
    """

    def __init__(self, n_classes: int, d: int, rng: nc.Rng, init_scale: float = 1e-2):
        self.w = nc.Tensor(rng.uniform_range(-init_scale, init_scale, (n_classes, d)),
                           requires_grad=True)
        self.b = nc.Tensor(np.zeros(d), requires_grad=True)

    @property
    def n_classes(self) -> int:
        return self.w.shape[0]

    @property
    def d(self) -> int:
        return self.w.shape[1]


def gate_values(prior: FrequencyPrior, gate: FrequencyGate) -> nc.Tensor:
    """sigmoid(W . log(1/(f + eps)) + b); every element strictly inside (0, 1)."""
    if prior.n_classes != gate.n_classes:
        raise ContractError(
            f"prior has {prior.n_classes} classes but gate expects {gate.n_classes}")
    signal = nc.Tensor(prior.log_inverse())
    return nc.sigmoid(nc.matmul(signal, gate.w) + gate.b)


def frequency_correct(x, g) -> nc.Tensor:
    """Blend raw and normalized features: x' = g * layer_norm(x) + (1 - g) * x."""
    x = x if isinstance(x, nc.Tensor) else nc.Tensor(x)
    g = g if isinstance(g, nc.Tensor) else nc.Tensor(g)
    if x.shape[-1] != g.shape[-1]:
        raise ContractError(
            f"feature dim {x.shape[-1]} does not match gate dim {g.shape[-1]}")
    if np.any(g.data < 0.0) or np.any(g.data > 1.0):
        raise ContractError("gate values must lie in [0, 1]")
    return g * nc.layer_norm(x) + (1.0 - g) * x
