"""Differentiable-computation contract and the finite-difference gradient oracle.

Every network and loss in this package is built from handwritten forward and
backward passes over plain numpy arrays.  This module pins down the shared
pieces: named parameters with gradient buffers, the error types raised when a
pass goes wrong, the ``forward_backward`` driver, and the central-difference
oracle used to certify every analytic gradient in the repository.

Verification always runs in float64; reductions use numpy's fixed row-major
evaluation order, so repeated passes over identical inputs are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DiffError(Exception):
    """Base class for forward/backward contract violations."""


class ShapeError(DiffError):
    """Dimensionally inconsistent input, tagged with the offending layer."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


class NonFiniteError(DiffError):
    """NaN or Inf encountered, tagged with the first bad value found."""

    def __init__(self, where: str, message: str = ""):
        detail = f": {message}" if message else ""
        super().__init__(f"non-finite value at {where}{detail}")
        self.where = where


class Parameter:
    """A named trainable array paired with a same-shape gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass(frozen=True)
class GradReport:
    """Outcome of checking one parameter against the finite-difference oracle.

    ``max_rel_err`` is the largest entrywise deviation between the analytic
    and numeric gradients, scaled by the larger of the two gradients' max
    magnitudes (floored at 1e-12 so all-zero gradients compare cleanly).
    """

    name: str
    max_rel_err: float
    analytic_norm: float
    numeric_norm: float


def finite_diff_grad(loss_fn, x, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, entry by entry.

    ``loss_fn`` must be deterministic and must not keep references to the
    array it is handed (the same buffer is perturbed in place between calls).
    Returns (f(x+h) - f(x-h)) / (2h) per entry, evaluated in float64.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(loss_fn(x))
        flat[i] = orig - step
        f_minus = float(loss_fn(x))
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteError(f"finite_diff_grad entry {i}")
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def grad_report(name: str, analytic, numeric) -> GradReport:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ShapeError("grad_report", f"{analytic.shape} vs {numeric.shape}")
    scale = max(
        float(np.max(np.abs(analytic), initial=0.0)),
        float(np.max(np.abs(numeric), initial=0.0)),
        1e-12,
    )
    rel = float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale
    return GradReport(
        name=name,
        max_rel_err=rel,
        analytic_norm=float(np.linalg.norm(analytic)),
        numeric_norm=float(np.linalg.norm(numeric)),
    )


def check_grad(name: str, loss_fn, x, analytic, step: float = 1e-4) -> GradReport:
    """Run the oracle on ``loss_fn`` at ``x`` and compare with ``analytic``."""
    numeric = finite_diff_grad(loss_fn, x, step)
    return grad_report(name, analytic, numeric)


def forward_backward(network, batch_inputs, loss_selector="total"):
    """One deterministic forward and backward pass over a fixed network.

    The network object must expose ``parameters()``, ``loss_forward(inputs,
    selector) -> float`` (leaving whatever caches its backward needs) and
    ``loss_backward()``.  Optionally ``intermediates()`` yields (name, array)
    pairs in forward order, used to attribute a non-finite loss to the first
    bad activation.

    Returns ``(loss, grads)`` where ``grads`` maps parameter names to their
    gradient arrays (the live buffers, not copies).
    """
    for p in network.parameters():
        p.zero_grad()
    loss = float(network.loss_forward(batch_inputs, loss_selector))
    if not math.isfinite(loss):
        where = "loss"
        probe = getattr(network, "intermediates", None)
        if probe is not None:
            for name, arr in probe():
                if not np.all(np.isfinite(arr)):
                    where = name
                    break
        raise NonFiniteError(where, f"loss={loss!r} under selector {loss_selector!r}")
    network.loss_backward()
    return loss, {p.name: p.grad for p in network.parameters()}
