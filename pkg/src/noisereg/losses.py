"""Loss functionals with first derivatives and diagonal second derivatives.

Both supported losses have diagonal Hessians in the prediction, so the
second-order information is carried as a vector aligned with the C-order
flattening of the (d_out x n) prediction — the same ordering as Jacobian
rows in :mod:`noisereg.models`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import frobenius_sq

__all__ = ["LossSpec", "loss", "loss_grad", "loss_hess_diag"]


@dataclass(frozen=True)
class LossSpec:
    """kind: "square" or "logistic"; y: targets, one row per sample.

    Square: y is (n x d_out). Logistic: y is (n x 1) with entries in {-1, +1}
    and requires a single-output model.
    """

    kind: str
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y", np.atleast_2d(np.asarray(self.y, dtype=float)))
        if self.kind not in ("square", "logistic"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "logistic":
            if self.y.shape[1] != 1:
                raise ValueError("logistic targets must be a single column")
            if not np.all(np.abs(self.y) == 1.0):
                raise ValueError("logistic labels must be in {-1, +1}")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def with_rows(self, idx) -> "LossSpec":
        return LossSpec(self.kind, self.y[idx])


def _check_phi(spec: LossSpec, phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (spec.y.shape[1], spec.n):
        raise ValueError(f"prediction shape {phi.shape} does not match targets {spec.y.shape}")
    return phi


def _softplus(t: np.ndarray) -> np.ndarray:
    # log(1 + exp(t)) without overflow at large |t|
    return np.log1p(np.exp(-np.abs(t))) + np.maximum(t, 0.0)


def loss(spec: LossSpec, phi: np.ndarray) -> float:
    phi = _check_phi(spec, phi)
    n = spec.n
    if spec.kind == "square":
        return frobenius_sq(spec.y.T - phi) / (2.0 * n)
    margins = spec.y[:, 0] * phi[0]
    return float(np.sum(_softplus(-margins))) / n


def loss_grad(spec: LossSpec, phi: np.ndarray) -> np.ndarray:
    """Derivative in the prediction, shaped like phi (d_out x n)."""
    phi = _check_phi(spec, phi)
    n = spec.n
    if spec.kind == "square":
        return (phi - spec.y.T) / n
    y = spec.y[:, 0]
    return (-y * _sigmoid(-y * phi[0]) / n)[None, :]


def loss_hess_diag(spec: LossSpec, phi: np.ndarray) -> np.ndarray:
    """Diagonal of the prediction Hessian, flattened in phi's C-order."""
    phi = _check_phi(spec, phi)
    n = spec.n
    if spec.kind == "square":
        return np.full(phi.size, 1.0 / n)
    m = spec.y[:, 0] * phi[0]
    return _sigmoid(m) * _sigmoid(-m) / n


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t, dtype=float)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out
