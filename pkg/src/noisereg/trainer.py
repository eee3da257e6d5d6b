"""Gradient descent with noise injected before the gradient evaluation.

Each step draws one perturbation, evaluates the gradient of the loss at the
perturbed point, and applies the update to the *unperturbed* iterate (the
smoothed-loss estimator, not post-update Langevin noise). Logged losses are
always evaluated at the unperturbed iterate on the full dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .losses import LossSpec, loss, loss_grad
from .models import ModelSpec, ParamVector, forward, jacobian
from .noise import NoiseScheme, PerturbationRecord, perturb
from .numerics import RngStream
from .regularizers import effective_penalty_generic

__all__ = [
    "TrainConfig",
    "RunRecord",
    "TrainResult",
    "RECORD_CSV_HEADER",
    "train",
    "loss_gradient",
    "make_planted_sparse_dataset",
]

RECORD_CSV_HEADER = "step,train_loss,reg_value,effective_loss,lr,perturbed_layer"


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    lr: float
    scheme: NoiseScheme
    schedule: str = "constant"
    batch: int | None = None  # None = full batch
    seed: int = 0
    log_every: int = 1
    record_perturbations: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.log_every < 1:
            raise ValueError("log_every must be positive")

    def lr_at(self, t: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return self.lr * (1.0 + math.cos(math.pi * t / self.steps)) / 2.0


@dataclass(frozen=True)
class RunRecord:
    step: int
    train_loss: float
    reg_value: float
    effective_loss: float
    lr: float
    perturbed_layer: str

    def csv_row(self) -> str:
        return (
            f"{self.step},{self.train_loss!r},{self.reg_value!r},"
            f"{self.effective_loss!r},{self.lr!r},{self.perturbed_layer}"
        )


@dataclass
class TrainResult:
    final_w: ParamVector
    records: list
    diverged: bool = False
    perturbations: list = field(default_factory=list)


def loss_gradient(model: ModelSpec, loss_spec: LossSpec, w: ParamVector) -> np.ndarray:
    """Flat gradient of loss(forward(w)): the chain-rule product DL * Dphi,
    contracted layer by layer instead of materializing the dense Jacobian."""
    kind = model.kind
    if kind == "diagonal":
        w1, w2 = w.layers
        dl = loss_grad(loss_spec, forward(model, w))[0]
        gb = model.x.T @ dl
        return np.concatenate([2.0 * w1[:, 0] * gb, -2.0 * w2[:, 0] * gb])
    if kind == "group_factored":
        dl = loss_grad(loss_spec, forward(model, w))[0]
        parts = []
        it = iter(w.layers)
        for (v, wg), xg in zip(zip(it, it), model.group_blocks()):
            xtd = xg.T @ dl
            parts.append(np.array([float(wg[:, 0] @ xtd)]))
            parts.append(float(v[0, 0]) * xtd)
        return np.concatenate(parts)
    # chain kinds: standard backward pass
    relu = kind in ("one_hidden_relu", "deep_relu")
    m = len(w.layers)
    h = model.x.T
    inputs, masks = [], []
    for k, wk in enumerate(w.layers):
        inputs.append(h)
        z = wk @ h
        if relu and k < m - 1:
            mask = (z > 0).astype(float)
            masks.append(mask)
            h = z * mask
        else:
            masks.append(None)
            h = z
    delta = loss_grad(loss_spec, h)
    grads = [None] * m
    for k in range(m - 1, -1, -1):
        grads[k] = delta @ inputs[k].T
        if k > 0:
            delta = w.layers[k].T @ delta
            if masks[k - 1] is not None:
                delta = delta * masks[k - 1]
    return np.concatenate([g.ravel() for g in grads])


def train(model: ModelSpec, loss_spec: LossSpec, w0: ParamVector, cfg: TrainConfig) -> TrainResult:
    """Run noisy GD; fully deterministic given (w0, cfg.seed).

    A non-finite loss or gradient marks the run diverged and returns the last
    healthy iterate with the records gathered so far.
    """
    noise_rng = RngStream(cfg.seed, 0)
    batch_rng = RngStream(cfg.seed, 1)
    shapes = model.layer_shapes
    w = w0.copy()
    records: list = []
    perturbations: list = []
    sigma_eff = cfg.scheme.theory_sigma

    def log_state(step: int, lr_t: float, layer: str) -> bool:
        train_loss = loss(loss_spec, forward(model, w))
        if not np.isfinite(train_loss):
            return False
        reg_value = effective_penalty_generic(model, loss_spec, w, sigma_eff)
        records.append(
            RunRecord(step, train_loss, reg_value, train_loss + reg_value, lr_t, layer)
        )
        return True

    for t in range(cfg.steps):
        lr_t = cfg.lr_at(t)
        w_pert, rec = perturb(cfg.scheme, w, noise_rng)
        if cfg.record_perturbations:
            perturbations.append((t + 1, rec))
        if cfg.batch is None:
            step_model, step_loss = model, loss_spec
        else:
            idx = np.sort(batch_rng.permutation(model.n)[: cfg.batch])
            step_model, step_loss = model.with_rows(idx), loss_spec.with_rows(idx)
        g = loss_gradient(step_model, step_loss, w_pert)
        if not np.all(np.isfinite(g)):
            return TrainResult(w, records, diverged=True, perturbations=perturbations)
        w = ParamVector.from_flat(w.flatten() - lr_t * g, shapes)
        if (t + 1) % cfg.log_every == 0 or t + 1 == cfg.steps:
            if not log_state(t + 1, lr_t, rec.layer):
                return TrainResult(w, records, diverged=True, perturbations=perturbations)
    return TrainResult(w, records, diverged=False, perturbations=perturbations)


def make_planted_sparse_dataset(rng: RngStream, n: int = 40, d: int = 10, coefs=(1.0, -1.0)):
    """Gaussian inputs with a noiseless sparse linear target.

    X is n x d with i.i.d. standard normal entries; y depends only on the
    first len(coefs) coordinates, y_i = sum_k coefs[k] * X[i, k].
    """
    if d < len(coefs):
        raise ValueError("need at least as many dimensions as planted coefficients")
    x = rng.standard_normal((n, d))
    y = x[:, : len(coefs)] @ np.asarray(coefs, dtype=float)
    return x, y[:, None]
