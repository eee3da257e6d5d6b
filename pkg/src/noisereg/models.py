"""Predictor zoo: structured parameters, forward maps, analytic Jacobians.

Every model maps a :class:`ParamVector` to a (d_out x n) prediction matrix
over a fixed input matrix X (n x d0). Supported kinds:

- ``diagonal``:          phi = X (w1 o w1 - w2 o w2),         blocks (w1, w2)
- ``two_layer_linear``:  phi = W2 W1 X^T
- ``deep_linear``:       phi = W_M ... W1 X^T                 (M >= 2)
- ``one_hidden_relu``:   phi = W2 relu(W1 X^T)
- ``deep_relu``:         phi = W_M relu(... relu(W1 X^T))     (M >= 2)
- ``group_factored``:    phi^T = v1 X1 w1 + ... + vd Xd wd,   blocks (v1, w1, ..., vd, wd)

Models are bias-free. Jacobian rows follow the C-order flattening of the
(d_out x n) prediction; columns follow the C-order flattening of the
parameter blocks in declaration order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream, sample_gaussian_matrix

__all__ = [
    "KINDS",
    "ActivationKinkWarning",
    "ParamVector",
    "ModelSpec",
    "forward",
    "jacobian",
    "hessian_diag_trace",
    "scaled_init",
    "relu_margin",
]

KINDS = (
    "diagonal",
    "two_layer_linear",
    "deep_linear",
    "one_hidden_relu",
    "deep_relu",
    "group_factored",
)

_RELU_KINDS = ("one_hidden_relu", "deep_relu")
_CHAIN_KINDS = ("two_layer_linear", "deep_linear", "one_hidden_relu", "deep_relu")


class ActivationKinkWarning(UserWarning):
    """A ReLU pre-activation is exactly zero; the 0-subgradient was used."""


@dataclass
class ParamVector:
    """Ordered list of per-layer parameter blocks."""

    layers: list

    def __post_init__(self):
        self.layers = [np.asarray(b, dtype=float) for b in self.layers]

    @property
    def total_dim(self) -> int:
        return sum(b.size for b in self.layers)

    def flatten(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0)
        return np.concatenate([b.ravel() for b in self.layers])

    @classmethod
    def from_flat(cls, flat: np.ndarray, shapes) -> "ParamVector":
        flat = np.asarray(flat, dtype=float)
        blocks, pos = [], 0
        for r, c in shapes:
            blocks.append(flat[pos : pos + r * c].reshape(r, c).copy())
            pos += r * c
        if pos != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, shapes need {pos}")
        return cls(blocks)

    def copy(self) -> "ParamVector":
        return ParamVector([b.copy() for b in self.layers])

    def allclose(self, other: "ParamVector", rtol=0.0, atol=0.0) -> bool:
        return len(self.layers) == len(other.layers) and all(
            a.shape == b.shape and np.allclose(a, b, rtol=rtol, atol=atol)
            for a, b in zip(self.layers, other.layers)
        )


@dataclass(frozen=True)
class ModelSpec:
    """Immutable model description: kind, input data, and layer shapes."""

    kind: str
    x: np.ndarray
    layer_shapes: tuple
    group_sizes: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "layer_shapes", tuple(tuple(s) for s in self.layer_shapes))
        if self.kind in ("deep_linear", "deep_relu") and len(self.layer_shapes) < 2:
            raise ValueError("deep kinds need at least 2 layers")

    # -- structural properties -------------------------------------------
    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d0(self) -> int:
        return self.x.shape[1]

    @property
    def layer_count(self) -> int:
        return len(self.layer_shapes)

    @property
    def d_out(self) -> int:
        if self.kind in _CHAIN_KINDS:
            return self.layer_shapes[-1][0]
        return 1

    @property
    def total_dim(self) -> int:
        return sum(r * c for r, c in self.layer_shapes)

    def group_blocks(self):
        """Column blocks X_1, ..., X_d of the group_factored input."""
        if self.kind != "group_factored":
            raise ValueError("group_blocks only applies to group_factored models")
        out, pos = [], 0
        for k in self.group_sizes:
            out.append(self.x[:, pos : pos + k])
            pos += k
        return out

    def with_rows(self, idx) -> "ModelSpec":
        """Same model restricted to a row subset of X (for minibatching)."""
        return ModelSpec(self.kind, self.x[idx], self.layer_shapes, self.group_sizes)

    # -- constructors ----------------------------------------------------
    @staticmethod
    def diagonal(x) -> "ModelSpec":
        x = np.asarray(x, dtype=float)
        d = x.shape[1]
        return ModelSpec("diagonal", x, ((d, 1), (d, 1)))

    @staticmethod
    def two_layer_linear(x, d1: int, d2: int) -> "ModelSpec":
        x = np.asarray(x, dtype=float)
        return ModelSpec("two_layer_linear", x, ((d1, x.shape[1]), (d2, d1)))

    @staticmethod
    def deep_linear(x, dims) -> "ModelSpec":
        return ModelSpec("deep_linear", x, _chain_shapes(x, dims))

    @staticmethod
    def one_hidden_relu(x, d1: int, d2: int) -> "ModelSpec":
        x = np.asarray(x, dtype=float)
        return ModelSpec("one_hidden_relu", x, ((d1, x.shape[1]), (d2, d1)))

    @staticmethod
    def deep_relu(x, dims) -> "ModelSpec":
        return ModelSpec("deep_relu", x, _chain_shapes(x, dims))

    @staticmethod
    def group_factored(blocks) -> "ModelSpec":
        blocks = [np.asarray(b, dtype=float) for b in blocks]
        if not blocks:
            raise ValueError("group_factored needs at least one group")
        n = blocks[0].shape[0]
        if any(b.shape[0] != n for b in blocks):
            raise ValueError("all group blocks must share the sample count")
        shapes = []
        for b in blocks:
            shapes.extend([(1, 1), (b.shape[1], 1)])
        return ModelSpec(
            "group_factored",
            np.hstack(blocks),
            tuple(shapes),
            tuple(b.shape[1] for b in blocks),
        )


def _chain_shapes(x, dims):
    dims = [int(d) for d in dims]
    x = np.asarray(x, dtype=float)
    if dims[0] != x.shape[1]:
        raise ValueError(f"dims[0]={dims[0]} must equal the input dimension {x.shape[1]}")
    return tuple((dims[k + 1], dims[k]) for k in range(len(dims) - 1))


def _check_shapes(model: ModelSpec, w: ParamVector):
    got = tuple(b.shape for b in w.layers)
    if got != model.layer_shapes:
        raise ValueError(f"parameter shapes {got} do not match model {model.layer_shapes}")


def _chain_states(model: ModelSpec, w: ParamVector):
    """Layer inputs h_0..h_{M-1}, output phi, and ReLU masks per hidden layer."""
    relu = model.kind in _RELU_KINDS
    m = model.layer_count
    h = model.x.T
    inputs, masks = [], []
    kink = False
    for k, wk in enumerate(w.layers):
        inputs.append(h)
        z = wk @ h
        if relu and k < m - 1:
            kink = kink or bool(np.any(z == 0.0))
            mask = (z > 0).astype(float)
            masks.append(mask)
            h = z * mask
        else:
            masks.append(None)
            h = z
    return inputs, h, masks, kink


def forward(model: ModelSpec, w: ParamVector) -> np.ndarray:
    """Prediction matrix phi of shape (d_out, n)."""
    _check_shapes(model, w)
    if model.kind == "diagonal":
        w1, w2 = w.layers
        beta = w1 * w1 - w2 * w2
        return (model.x @ beta).T
    if model.kind == "group_factored":
        phi = np.zeros(model.n)
        for (v, wg), xg in zip(_pairs(w.layers), model.group_blocks()):
            phi += float(v[0, 0]) * (xg @ wg[:, 0])
        return phi[None, :]
    _, phi, _, _ = _chain_states(model, w)
    return phi


def _pairs(blocks):
    it = iter(blocks)
    return list(zip(it, it))


def jacobian(model: ModelSpec, w: ParamVector) -> np.ndarray:
    """Dense Jacobian of the flattened prediction, shape (d_out*n, total_dim).

    At an exact ReLU kink the 0-subgradient convention is used and an
    :class:`ActivationKinkWarning` is emitted.
    """
    _check_shapes(model, w)
    n = model.n
    if model.kind == "diagonal":
        w1, w2 = w.layers
        return np.hstack([2.0 * model.x * w1[:, 0], -2.0 * model.x * w2[:, 0]])
    if model.kind == "group_factored":
        cols = []
        for (v, wg), xg in zip(_pairs(w.layers), model.group_blocks()):
            cols.append((xg @ wg[:, 0])[:, None])
            cols.append(float(v[0, 0]) * xg)
        return np.hstack(cols)

    inputs, _, masks, kink = _chain_states(model, w)
    if kink:
        warnings.warn(
            "ReLU pre-activation exactly zero; using the 0 subgradient",
            ActivationKinkWarning,
            stacklevel=2,
        )
    m = model.layer_count
    d_out = model.d_out
    # back-propagated sensitivities s[k][i] = d phi_{.,i} / d z_{k,i}
    s = np.broadcast_to(np.eye(d_out), (n, d_out, d_out)).copy()
    sens = [None] * m
    sens[m - 1] = s
    for k in range(m - 2, -1, -1):
        s = np.einsum("iod,da->ioa", s, w.layers[k + 1])
        if masks[k] is not None:
            s = s * masks[k].T[:, None, :]
        sens[k] = s
    blocks = []
    for k in range(m):
        blk = np.einsum("ioa,bi->oiab", sens[k], inputs[k])
        blocks.append(blk.reshape(d_out * n, -1))
    return np.hstack(blocks)


def hessian_diag_trace(model: ModelSpec, w: ParamVector) -> np.ndarray:
    """Per-output-coordinate trace of the parameter Hessian, D^2 phi_a [I].

    Chain and group kinds are multilinear in their blocks, so every pure
    second partial vanishes; the diagonal kind accumulates the +2/-2
    contributions of its two squared blocks (summing to zero).
    """
    _check_shapes(model, w)
    if model.kind == "diagonal":
        from_w1 = 2.0 * model.x.sum(axis=1)
        from_w2 = -2.0 * model.x.sum(axis=1)
        return from_w1 + from_w2
    return np.zeros(model.d_out * model.n)


def scaled_init(model: ModelSpec, rng: RngStream) -> ParamVector:
    """Blockwise N(0, 1/(rows*cols)) init, so E||block||_F^2 = 1 per block."""
    blocks = []
    for r, c in model.layer_shapes:
        blocks.append(sample_gaussian_matrix(rng, r, c, 1.0 / np.sqrt(r * c)))
    return ParamVector(blocks)


def relu_margin(model: ModelSpec, w: ParamVector) -> float:
    """Smallest |pre-activation| over ReLU layers (inf for non-ReLU kinds).

    Used to filter test points away from kinks before finite-difference
    comparisons.
    """
    _check_shapes(model, w)
    if model.kind not in _RELU_KINDS:
        return float("inf")
    margin = float("inf")
    h = model.x.T
    for k, wk in enumerate(w.layers):
        z = wk @ h
        if k < model.layer_count - 1:
            margin = min(margin, float(np.min(np.abs(z))))
            h = z * (z > 0)
        else:
            h = z
    return margin
