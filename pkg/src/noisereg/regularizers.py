"""Effective regularizers: the generic Jacobian-trace form, per-model closed
forms that reproduce it, and exact smoothed-loss formulas for the two model
families where Gaussian moments close.

All closed forms assume the square loss (their derivation uses its constant
diagonal Hessian 1/n); the generic form works for any supported loss. Values
are full effective losses: base loss plus penalty.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .losses import LossSpec, loss, loss_hess_diag
from .models import ActivationKinkWarning, ModelSpec, ParamVector, forward, jacobian
from .numerics import frobenius_sq

__all__ = [
    "RegValue",
    "FORMULA_IDS",
    "evaluate_formula",
    "effective_penalty_generic",
    "effective_loss_generic",
    "reg_lasso",
    "reg_nuclear_factored",
    "reg_group_lasso",
    "reg_relu_onehidden",
    "reg_deep_linear",
    "exact_smoothed_two_layer_full",
    "exact_smoothed_diagonal_full",
    "margin_objective",
]


@dataclass(frozen=True)
class RegValue:
    """A regularizer evaluation with its provenance."""

    value: float
    formula_id: str
    sigma: float


def _require_kind(model: ModelSpec, *kinds):
    if model.kind not in kinds:
        raise ValueError(f"model kind {model.kind!r} not supported here (need {kinds})")


def _require_square(loss_spec: LossSpec):
    if loss_spec.kind != "square":
        raise ValueError("closed-form regularizers are derived for the square loss")


def effective_penalty_generic(
    model: ModelSpec, loss_spec: LossSpec, w: ParamVector, sigma: float
) -> float:
    """(sigma^2/2) * sum_a hess_a * ||row_a(Dphi)||^2 over output coordinates."""
    if sigma == 0.0:
        return 0.0
    jac = jacobian(model, w)
    h = loss_hess_diag(loss_spec, forward(model, w))
    row_sq = np.einsum("ab,ab->a", jac, jac)
    return 0.5 * sigma * sigma * float(h @ row_sq)


def effective_loss_generic(
    model: ModelSpec, loss_spec: LossSpec, w: ParamVector, sigma: float
) -> float:
    """Base loss plus the generic second-order penalty."""
    return loss(loss_spec, forward(model, w)) + effective_penalty_generic(
        model, loss_spec, w, sigma
    )


def reg_lasso(model: ModelSpec, loss_spec: LossSpec, w: ParamVector, sigma: float) -> float:
    """Diagonal model: R + 2 sigma^2 diag(X^T X / n)^T (w1 o w1 + w2 o w2)."""
    _require_kind(model, "diagonal")
    _require_square(loss_spec)
    w1, w2 = (b[:, 0] for b in w.layers)
    col_sq = np.einsum("ij,ij->j", model.x, model.x) / model.n
    penalty = 2.0 * sigma * sigma * float(col_sq @ (w1 * w1 + w2 * w2))
    return loss(loss_spec, forward(model, w)) + penalty


def reg_nuclear_factored(
    model: ModelSpec, loss_spec: LossSpec, w: ParamVector, sigma: float
) -> float:
    """Two-layer linear: R + (sigma^2/2n) [d2 ||W1 X^T||_F^2 + ||W2||_F^2 ||X||_F^2]."""
    _require_kind(model, "two_layer_linear")
    _require_square(loss_spec)
    w1, w2 = w.layers
    d2 = w2.shape[0]
    penalty = (
        0.5 * sigma * sigma / model.n
        * (d2 * frobenius_sq(w1 @ model.x.T) + frobenius_sq(w2) * frobenius_sq(model.x))
    )
    return loss(loss_spec, forward(model, w)) + penalty


def reg_group_lasso(model: ModelSpec, loss_spec: LossSpec, w: ParamVector, sigma: float) -> float:
    """Group-factored model: R + (sigma^2/2n) sum_g [||X_g w_g||^2 + v_g^2 ||X_g||_F^2]."""
    _require_kind(model, "group_factored")
    _require_square(loss_spec)
    it = iter(w.layers)
    acc = 0.0
    for (v, wg), xg in zip(zip(it, it), model.group_blocks()):
        acc += frobenius_sq(xg @ wg) + float(v[0, 0]) ** 2 * frobenius_sq(xg)
    penalty = 0.5 * sigma * sigma / model.n * acc
    return loss(loss_spec, forward(model, w)) + penalty


def reg_relu_onehidden(
    model: ModelSpec, loss_spec: LossSpec, w: ParamVector, sigma: float
) -> float:
    """One-hidden-layer ReLU with the activation pattern frozen at w:

        R + (sigma^2/2n) [ d2 ||(W1 X^T)_+||_F^2
                           + sum_{j,i} ||W2[:,j]||^2 pat_{ji} ||X[i,:]||^2 ]
    """
    _require_kind(model, "one_hidden_relu")
    _require_square(loss_spec)
    w1, w2 = w.layers
    d2 = w2.shape[0]
    z = w1 @ model.x.T
    if np.any(z == 0.0):
        warnings.warn(
            "ReLU pre-activation exactly zero; pattern uses the 0 convention",
            ActivationKinkWarning,
            stacklevel=2,
        )
    pattern = (z > 0).astype(float)
    hidden_sq = frobenius_sq(z * pattern)
    w2_col_sq = np.einsum("oj,oj->j", w2, w2)
    x_row_sq = np.einsum("ik,ik->i", model.x, model.x)
    pattern_term = float(w2_col_sq @ pattern @ x_row_sq)
    penalty = 0.5 * sigma * sigma / model.n * (d2 * hidden_sq + pattern_term)
    return loss(loss_spec, forward(model, w)) + penalty


def reg_deep_linear(model: ModelSpec, loss_spec: LossSpec, w: ParamVector, sigma: float) -> float:
    """Deep linear chain: R + (sigma^2/2n) sum_j ||W_M...W_{j+1}||_F^2 ||W_{j-1}...W_1 X^T||_F^2.

    Empty trailing product (j = 1) contributes ||X^T||_F^2 directly; empty
    leading product (j = M) contributes d_M = ||I||_F^2.
    """
    _require_kind(model, "deep_linear", "two_layer_linear")
    _require_square(loss_spec)
    m = model.layer_count
    d_out = model.d_out
    prefixes = [model.x.T]
    for wk in w.layers[:-1]:
        prefixes.append(wk @ prefixes[-1])
    suffixes = [None] * (m + 1)
    suffixes[m] = np.eye(d_out)
    for j in range(m - 1, 0, -1):
        suffixes[j] = suffixes[j + 1] @ w.layers[j]
    acc = 0.0
    for j in range(1, m + 1):
        acc += frobenius_sq(suffixes[j]) * frobenius_sq(prefixes[j - 1])
    penalty = 0.5 * sigma * sigma / model.n * acc
    return loss(loss_spec, forward(model, w)) + penalty


def exact_smoothed_two_layer_full(
    model: ModelSpec, loss_spec: LossSpec, w: ParamVector, sigma: float
) -> float:
    """Exact smoothed loss of a two-layer linear model under full injection
    (theory normalization): the second-order expansion closes with one extra
    width-dependent term,

        R + (sigma^2/2n) [d2 ||W1 X^T||_F^2 + ||W2||_F^2 ||X||_F^2]
          + (sigma^4/2n) d1 d2 ||X||_F^2.
    """
    _require_kind(model, "two_layer_linear")
    _require_square(loss_spec)
    d1 = w.layers[0].shape[0]
    d2 = w.layers[1].shape[0]
    tail = 0.5 * sigma**4 / model.n * d1 * d2 * frobenius_sq(model.x)
    return reg_nuclear_factored(model, loss_spec, w, sigma) + tail


def exact_smoothed_diagonal_full(
    model: ModelSpec, loss_spec: LossSpec, w: ParamVector, sigma: float
) -> float:
    """Exact smoothed loss of the diagonal model under full injection
    (theory normalization). Per coordinate Var((w + sigma e)^2) = 4 w^2 sigma^2
    + 2 sigma^4, giving

        R + 2 sigma^2 diag(X^T X / n)^T (w1 o w1 + w2 o w2) + (2 sigma^4 / n) ||X||_F^2.
    """
    _require_kind(model, "diagonal")
    _require_square(loss_spec)
    tail = 2.0 * sigma**4 / model.n * frobenius_sq(model.x)
    return reg_lasso(model, loss_spec, w, sigma) + tail


def margin_objective(model: ModelSpec, loss_spec: LossSpec, w: ParamVector, sigma: float) -> float:
    """Regularized minimum margin min_i { y_i phi_i - (sigma^2/2) ||Dphi_i||^2 }.

    Exploratory evaluator for the logistic setting; carries no optimality
    claim.
    """
    if loss_spec.kind != "logistic":
        raise ValueError("margin_objective is defined for the logistic loss")
    if model.d_out != 1:
        raise ValueError("margin_objective needs a single-output model")
    phi = forward(model, w)[0]
    jac = jacobian(model, w)
    row_sq = np.einsum("ab,ab->a", jac, jac)
    margins = loss_spec.y[:, 0] * phi - 0.5 * sigma * sigma * row_sq
    return float(np.min(margins))


_FORMULAS = {
    "generic": effective_loss_generic,
    "lasso": reg_lasso,
    "nuclear": reg_nuclear_factored,
    "group": reg_group_lasso,
    "relu1h": reg_relu_onehidden,
    "deep_linear": reg_deep_linear,
    "exact2l": exact_smoothed_two_layer_full,
    "exactdiag": exact_smoothed_diagonal_full,
    "margin": margin_objective,
}

FORMULA_IDS = tuple(_FORMULAS)


def evaluate_formula(
    formula_id: str, model: ModelSpec, loss_spec: LossSpec, w: ParamVector, sigma: float
) -> RegValue:
    if formula_id not in _FORMULAS:
        raise ValueError(f"unknown formula_id {formula_id!r}")
    return RegValue(_FORMULAS[formula_id](model, loss_spec, w, sigma), formula_id, sigma)
