"""Gaussian perturbation schemes and the Monte-Carlo smoothed loss.

Two injection modes over the parameter blocks, with two normalization
conventions that differ only by a global rescaling of sigma:

===========  ==================  ====================
mode         theory              experiment
===========  ==================  ====================
full         sigma per weight    sigma/sqrt(M) per weight
layerwise    sigma*sqrt(M) on    sigma on the chosen
             the chosen layer    layer
===========  ==================  ====================

Layerwise mode draws one layer index uniformly (consuming a single uniform
variate from the stream before the Gaussian block), so a whole run is
reproducible from one stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .losses import LossSpec, loss
from .models import ModelSpec, ParamVector, forward
from .numerics import RngStream

__all__ = [
    "NoiseScheme",
    "PerturbationRecord",
    "perturb",
    "expected_smoothed_loss_mc",
    "merge_moments",
]


@dataclass(frozen=True)
class NoiseScheme:
    mode: str
    sigma: float
    layer_count: int
    normalization: str = "theory"

    def __post_init__(self):
        if self.mode not in ("full", "layerwise"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.normalization not in ("theory", "experiment"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.layer_count < 1:
            raise ValueError("layer_count must be positive")

    @property
    def perturb_std(self) -> float:
        """Per-entry standard deviation actually applied by this scheme."""
        root_m = math.sqrt(self.layer_count)
        if self.mode == "full":
            return self.sigma if self.normalization == "theory" else self.sigma / root_m
        return self.sigma * root_m if self.normalization == "theory" else self.sigma

    @property
    def theory_sigma(self) -> float:
        """The sigma this scheme corresponds to under theory normalization."""
        if self.normalization == "theory":
            return self.sigma
        return self.sigma / math.sqrt(self.layer_count)


@dataclass(frozen=True)
class PerturbationRecord:
    """What a single perturbation did: which layer ("all" or 1-based index),
    the std applied, and the stream counter after the draw."""

    layer: str
    std: float
    counter: tuple


def _draw(scheme: NoiseScheme, w: ParamVector, rng: RngStream):
    """Perturbed blocks plus the label of the perturbed layer."""
    std = scheme.perturb_std
    if scheme.mode == "full":
        return [b + std * rng.standard_normal(b.shape) for b in w.layers], "all"
    j = min(int(rng.uniform() * scheme.layer_count), scheme.layer_count - 1)
    blocks = list(w.layers)
    blocks[j] = blocks[j] + std * rng.standard_normal(blocks[j].shape)
    return blocks, str(j + 1)


def perturb(scheme: NoiseScheme, w: ParamVector, rng: RngStream):
    """Perturbed copy of w plus a :class:`PerturbationRecord`; w is untouched."""
    if scheme.layer_count != len(w.layers):
        raise ValueError(
            f"scheme.layer_count={scheme.layer_count} but params have {len(w.layers)} blocks"
        )
    blocks, label = _draw(scheme, w, rng)
    new = ParamVector([b.copy() for b in blocks])
    return new, PerturbationRecord(label, scheme.perturb_std, rng.counter)


def expected_smoothed_loss_mc(
    model: ModelSpec,
    loss_spec: LossSpec,
    scheme: NoiseScheme,
    w: ParamVector,
    samples: int,
    rng: RngStream,
    chunk: int = 4096,
):
    """Monte-Carlo estimate of the smoothed loss, with its standard error.

    Returns (mean, std_error). Deterministic given rng; per-chunk moments are
    merged pairwise for numerical stability.
    """
    if samples < 2:
        raise ValueError("need at least 2 samples for a standard error")
    if scheme.layer_count != len(w.layers):
        raise ValueError("scheme.layer_count does not match the parameter blocks")
    total = None
    done = 0
    while done < samples:
        size = min(chunk, samples - done)
        vals = np.empty(size)
        for i in range(size):
            blocks, _ = _draw(scheme, w, rng)
            vals[i] = loss(loss_spec, forward(model, ParamVector(blocks)))
        mean = float(vals.mean())
        m2 = float(np.sum((vals - mean) ** 2))
        part = (size, mean, m2)
        total = part if total is None else merge_moments(total, part)
        done += size
    count, mean, m2 = total
    se = math.sqrt(m2 / (count - 1) / count) if m2 > 0 else 0.0
    return mean, se


def merge_moments(a, b):
    """Combine (count, mean, M2) accumulators of two sample batches.

    Numerically stable pairwise combination; M2 is the sum of squared
    deviations from the batch mean.
    """
    na, mean_a, m2a = a
    nb, mean_b, m2b = b
    n = na + nb
    delta = mean_b - mean_a
    mean = mean_a + delta * nb / n
    m2 = m2a + m2b + delta * delta * na * nb / n
    return n, mean, m2
